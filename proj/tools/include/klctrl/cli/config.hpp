#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "klctrl/cli/expression.hpp"
#include "klctrl/constraints.hpp"
#include "klctrl/data_io.hpp"
#include "klctrl/simulation.hpp"
#include "klctrl/synthesis.hpp"

namespace klctrl::cli {

struct ConstraintSpec {
  enum class Kind { MomentEquality, MomentInequality, MomentRange, Probability };
  Kind kind = Kind::MomentEquality;
  int order = 1;
  Expression target = Expression::constant(0.0);  // equality target or inequality bound
  Sense sense = Sense::AtMost;
  Expression lower = Expression::constant(0.0);  // range bounds
  Expression upper = Expression::constant(0.0);
  // Probability: control cells whose centers lie in [from, to] carry at
  // least 1 - epsilon of the mass.
  double from = 0.0;
  double to = 0.0;
  double epsilon = 0.0;
};

struct InitialState {
  enum class Kind { Point, Uniform, Gaussian };
  Kind kind = Kind::Uniform;
  double value = 0.0;  // point
  double mean = 0.0;   // gaussian
  double stddev = 1.0;

  Density density(const Grid& state) const;
};

struct EstimationOptions {
  bool pooled = true;
  double support_floor = 0.0;
  /// Replace g_U rows by discretized normals with the row moments.
  std::optional<double> smoothing_min_std;
  /// Fixed models used instead of least-squares fits.
  std::optional<GaussianTransition> system;
  std::optional<GaussianTransition> reference;
};

struct SimulationOptions {
  std::size_t rollouts = 100;
  ControlMode mode = ControlMode::Mean;
  std::uint64_t seed = 0;
  bool write_paths = true;
};

/// Synthetic dataset generator: u_k = profile(x_{k-1}) + noise, then
/// x_k ~ Normal(a x_{k-1} + b u_k, sigma2), starting from x_0 ~ Normal.
struct GeneratorOptions {
  GaussianTransition complete_model{0.98, 0.26, 2.6};
  GaussianTransition example_model{0.98, 0.26, 2.6};
  std::size_t complete_trajectories = 100;
  std::size_t example_trajectories = 20;
  std::size_t stages = 0;  // 0: the run horizon
  double x0_mean = 0.0;
  double x0_std = 1.0;
  std::vector<std::pair<double, double>> speed_profile{{0.0, 10.0}};  // (position, speed), sorted
  double complete_noise = 1.0;
  double example_noise = 0.5;
  double min_speed = 0.0;
  std::uint64_t seed = 1;
};

struct RunConfig {
  std::filesystem::path source;  // config file path
  Grid state{0.0, 300.0, 300};
  Grid control{0.0, 30.0, 100};
  std::size_t horizon = 1;

  std::filesystem::path complete_csv;  // resolved against the config directory
  std::filesystem::path example_csv;

  EstimationOptions estimation;
  std::vector<ConstraintSpec> constraints;                         // every stage
  std::map<std::size_t, std::vector<ConstraintSpec>> stage_constraints;  // per-stage overrides

  SolverOptions solver;
  SlaterOptions slater;
  bool fail_on_nonconvergence = true;
  bool report_tables = false;

  InitialState initial;
  SimulationOptions simulation;
  GeneratorOptions generator;

  const std::vector<ConstraintSpec>& constraints_for(std::size_t stage) const;
};

/// Unknown keys are rejected so that typos do not silently fall back to
/// defaults. Missing file -> IoError; malformed content -> BadConfig.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

ConstraintSet build_constraints(const std::vector<ConstraintSpec>& specs, const Grid& control, const Density& g_row);

/// Per-stage rules; stages without constraints get an empty rule.
std::vector<ConstraintRule> constraint_rules(const RunConfig& config);

}  // namespace klctrl::cli
