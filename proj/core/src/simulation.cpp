#include "klctrl/simulation.hpp"

#include "file_util.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "klctrl/data_io.hpp"

namespace klctrl {

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string format(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::uint64_t rollout_seed(std::uint64_t master, std::size_t index) {
  return splitmix64(splitmix64(master) ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
}

RolloutResult rollout(const Policy& policy, const std::vector<ConditionalPtr>& system,
                      const RolloutConfig& config) {
  if (config.horizon == 0) throw Error(ErrorCode::BadConfig, "rollout horizon must be at least 1");
  if (config.rollouts == 0) throw Error(ErrorCode::BadConfig, "rollout count must be at least 1");
  if (policy.stages.size() < config.horizon || system.size() < config.horizon) {
    throw Error(ErrorCode::BadConfig, "policy or transition model is shorter than the rollout horizon");
  }
  const Grid& state = config.x0.grid();
  for (std::size_t k = 0; k < config.horizon; ++k) {
    const auto& pi = policy.stages[k];
    if (system[k] == nullptr) throw Error(ErrorCode::BadConfig, "missing transition model", k + 1);
    const auto& c = system[k]->conditioning();
    if (pi.conditioning().size() != 1 || !(pi.conditioning()[0] == state) || c.size() != 2 ||
        !(c[0] == state) || !(c[1] == pi.target()) || !(system[k]->target() == state)) {
      throw Error(ErrorCode::GridMismatch, "policy and transition grids are inconsistent", k + 1);
    }
  }

  RolloutResult out;
  out.x0.resize(config.rollouts);
  out.x.assign(config.rollouts, std::vector<double>(config.horizon));
  out.u.assign(config.rollouts, std::vector<double>(config.horizon));
  for (std::size_t r = 0; r < config.rollouts; ++r) {
    Rng rng(rollout_seed(config.seed, r));
    std::size_t x = sample_index(config.x0, rng);
    out.x0[r] = state.center(x);
    for (std::size_t k = 0; k < config.horizon; ++k) {
      const auto& pi = policy.stages[k];
      const Grid& control = pi.target();
      std::size_t u;
      if (config.mode == ControlMode::Sample) {
        u = sample_index(pi.row(x), rng);
      } else {
        const double mean = mean_mode(pi.row_density(x));
        if (mean < control.lower() || mean > control.upper()) ++out.clipped;
        u = control.nearest(mean);
      }
      x = sample_index(system[k]->row(x * control.size() + u), rng);
      out.u[r][k] = control.center(u);
      out.x[r][k] = state.center(x);
    }
  }
  return out;
}

std::vector<BandRow> band_statistics(const RolloutResult& result) {
  const std::size_t n = result.x.size();
  if (n < 2) throw Error(ErrorCode::BadConfig, "band statistics need at least two rollouts");
  const std::size_t horizon = result.x.front().size();
  auto moments = [n](auto&& value) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += value(r);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (value(r) - mean) * (value(r) - mean);
    return std::pair{mean, std::sqrt(ss / static_cast<double>(n - 1))};
  };
  std::vector<BandRow> rows;
  for (std::size_t k = 0; k < horizon; ++k) {
    BandRow row;
    row.stage = k + 1;
    std::tie(row.mean_x, row.std_x) = moments([&](std::size_t r) { return result.x[r][k]; });
    std::tie(row.mean_u, row.std_u) = moments([&](std::size_t r) { return result.u[r][k]; });
    rows.push_back(row);
  }
  return rows;
}

void write_band_csv(const std::vector<BandRow>& bands, const std::filesystem::path& path) {
  std::ofstream out = detail::open_for_write(path);
  out << "stage,mean_x,std_x,mean_u,std_u\n";
  for (const auto& b : bands) {
    out << b.stage << ',' << format(b.mean_x) << ',' << format(b.std_x) << ',' << format(b.mean_u) << ','
        << format(b.std_u) << '\n';
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

void write_paths_csv(const RolloutResult& result, const std::filesystem::path& path) {
  std::ofstream out = detail::open_for_write(path);
  out << "rollout,k,x,u\n";
  for (std::size_t r = 0; r < result.x.size(); ++r) {
    out << r << ",0," << format(result.x0[r]) << ",\n";
    for (std::size_t k = 0; k < result.x[r].size(); ++k) {
      out << r << ',' << k + 1 << ',' << format(result.x[r][k]) << ',' << format(result.u[r][k]) << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

nlohmann::json encode(const RolloutResult& r) {
  return {{"x0", r.x0}, {"x", r.x}, {"u", r.u}, {"clipped", r.clipped}};
}

RolloutResult decode_rollout(const nlohmann::json& j) {
  RolloutResult r;
  try {
    r.x0 = j.at("x0").get<std::vector<double>>();
    r.x = j.at("x").get<std::vector<std::vector<double>>>();
    r.u = j.at("u").get<std::vector<std::vector<double>>>();
    r.clipped = j.at("clipped").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("rollout artifact: ") + e.what());
  }
  return r;
}

void save(const std::filesystem::path& path, const RolloutResult& r) { save_artifact(path, "rollout", encode(r)); }

RolloutResult load_rollout(const std::filesystem::path& path) {
  return decode_rollout(load_artifact(path, "rollout"));
}

}  // namespace klctrl
