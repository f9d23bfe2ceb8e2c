#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "klctrl/densities.hpp"
#include "klctrl/synthesis.hpp"

namespace klctrl {

enum class ControlMode { Mean, Sample };

struct RolloutConfig {
  std::size_t horizon = 1;
  std::size_t rollouts = 1;
  ControlMode mode = ControlMode::Mean;
  std::uint64_t seed = 0;
  Density x0;
};

/// Paths are indexed [rollout][k - 1] for k = 1..horizon; `x0` holds the
/// drawn initial states. Every recorded value is a grid cell center.
struct RolloutResult {
  std::vector<double> x0;
  std::vector<std::vector<double>> x;
  std::vector<std::vector<double>> u;
  /// Mean-mode controls that fell outside the control grid before snapping.
  std::size_t clipped = 0;
};

/// Seed of rollout `index` derived from the master seed; independent of the
/// rollout count.
std::uint64_t rollout_seed(std::uint64_t master, std::size_t index);

/// x_0 ~ x0; then per stage u_k from the policy row (its mean snapped to the
/// nearest control cell, or a draw) and x_k from the transition row.
RolloutResult rollout(const Policy& policy, const std::vector<ConditionalPtr>& system,
                      const RolloutConfig& config);

struct BandRow {
  std::size_t stage = 0;
  double mean_x = 0.0;
  double std_x = 0.0;
  double mean_u = 0.0;
  double std_u = 0.0;
};

/// Per-stage sample mean and unbiased standard deviation; needs two rollouts.
std::vector<BandRow> band_statistics(const RolloutResult& result);

void write_band_csv(const std::vector<BandRow>& bands, const std::filesystem::path& path);
/// One line per (rollout, stage): rollout,k,x,u; stage 0 carries x_0 and an
/// empty control.
void write_paths_csv(const RolloutResult& result, const std::filesystem::path& path);

nlohmann::json encode(const RolloutResult& r);
RolloutResult decode_rollout(const nlohmann::json& j);
void save(const std::filesystem::path& path, const RolloutResult& r);
RolloutResult load_rollout(const std::filesystem::path& path);

}  // namespace klctrl
