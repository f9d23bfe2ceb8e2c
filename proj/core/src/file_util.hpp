#pragma once

#include <filesystem>
#include <fstream>

#include "klctrl/error.hpp"

namespace klctrl::detail {

/// Creates missing parent directories; IoError when the file cannot be opened.
inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  return out;
}

}  // namespace klctrl::detail
