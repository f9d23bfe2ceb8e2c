#include "klctrl/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

namespace klctrl::cli {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  throw Error(ErrorCode::BadConfig, where + ": " + what);
}

void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) bad(where, "expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
      bad(where, "unknown key '" + k + "'");
    }
  }
}

double number(const json& j, const std::string& where) {
  if (!j.is_number()) bad(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad(where, "not finite");
  return v;
}

double positive(const json& j, const std::string& where) {
  const double v = number(j, where);
  if (!(v > 0.0)) bad(where, "must be > 0");
  return v;
}

std::size_t count(const json& j, const std::string& where) {
  if (!j.is_number_unsigned()) bad(where, "expected a nonnegative integer");
  return j.get<std::size_t>();
}

bool boolean(const json& j, const std::string& where) {
  if (!j.is_boolean()) bad(where, "expected true or false");
  return j.get<bool>();
}

std::string text(const json& j, const std::string& where) {
  if (!j.is_string()) bad(where, "expected a string");
  return j.get<std::string>();
}

template <typename Fn>
void optional_key(const json& j, const char* key, Fn&& fn) {
  if (auto it = j.find(key); it != j.end()) fn(*it);
}

Expression expression(const json& j, const std::string& where) {
  if (j.is_number()) return Expression::constant(number(j, where));
  return Expression::parse(text(j, where));
}

Grid grid(const json& j, const std::string& where) {
  allow_keys(j, where, {"lower", "upper", "cells"});
  if (!j.contains("lower") || !j.contains("upper") || !j.contains("cells")) bad(where, "needs lower, upper, cells");
  return Grid(number(j["lower"], where + ".lower"), number(j["upper"], where + ".upper"),
              count(j["cells"], where + ".cells"));
}

GaussianTransition gaussian(const json& j, const std::string& where) {
  allow_keys(j, where, {"a", "b", "sigma2"});
  if (!j.contains("a") || !j.contains("b") || !j.contains("sigma2")) bad(where, "needs a, b, sigma2");
  return {number(j["a"], where + ".a"), number(j["b"], where + ".b"), positive(j["sigma2"], where + ".sigma2")};
}

ConstraintSpec constraint(const json& j, const std::string& where) {
  allow_keys(j, where, {"kind", "order", "target", "bound", "sense", "lower", "upper", "from", "to", "epsilon"});
  if (!j.contains("kind")) bad(where, "missing 'kind'");
  const auto kind = text(j["kind"], where + ".kind");
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) bad(where, std::string("missing '") + key + "'");
    return j[key];
  };
  ConstraintSpec c;
  auto read_order = [&] {
    if (j.contains("order")) {
      const auto o = count(j["order"], where + ".order");
      if (o < 1) bad(where + ".order", "must be >= 1");
      c.order = static_cast<int>(o);
    }
  };
  if (kind == "moment_equality") {
    c.kind = ConstraintSpec::Kind::MomentEquality;
    read_order();
    c.target = expression(need("target"), where + ".target");
  } else if (kind == "moment_inequality") {
    c.kind = ConstraintSpec::Kind::MomentInequality;
    read_order();
    c.target = expression(need("bound"), where + ".bound");
    const auto sense = text(need("sense"), where + ".sense");
    if (sense == "at_most") c.sense = Sense::AtMost;
    else if (sense == "at_least") c.sense = Sense::AtLeast;
    else bad(where + ".sense", "expected at_most or at_least");
  } else if (kind == "moment_range") {
    c.kind = ConstraintSpec::Kind::MomentRange;
    read_order();
    c.lower = expression(need("lower"), where + ".lower");
    c.upper = expression(need("upper"), where + ".upper");
  } else if (kind == "probability") {
    c.kind = ConstraintSpec::Kind::Probability;
    c.from = number(need("from"), where + ".from");
    c.to = number(need("to"), where + ".to");
    c.epsilon = number(need("epsilon"), where + ".epsilon");
    if (c.to < c.from) bad(where, "'to' below 'from'");
    if (c.epsilon < 0.0 || c.epsilon > 1.0) bad(where + ".epsilon", "must lie in [0, 1]");
  } else {
    bad(where + ".kind", "unknown constraint kind '" + kind + "'");
  }
  return c;
}

std::vector<ConstraintSpec> constraint_list(const json& j, const std::string& where) {
  if (!j.is_array()) bad(where, "expected an array");
  std::vector<ConstraintSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(constraint(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

void parse_constraints(const json& j, RunConfig& c) {
  if (j.is_array()) {
    c.constraints = constraint_list(j, "constraints");
    return;
  }
  allow_keys(j, "constraints", {"default", "stages"});
  optional_key(j, "default", [&](const json& v) { c.constraints = constraint_list(v, "constraints.default"); });
  optional_key(j, "stages", [&](const json& v) {
    if (!v.is_object()) bad("constraints.stages", "expected an object keyed by stage");
    for (const auto& [key, list] : v.items()) {
      std::size_t k = 0;
      const auto [end, ec] = std::from_chars(key.data(), key.data() + key.size(), k);
      if (ec != std::errc() || end != key.data() + key.size() || k < 1 || k > c.horizon) {
        bad("constraints.stages", "stage '" + key + "' is not in 1.." + std::to_string(c.horizon));
      }
      c.stage_constraints[k] = constraint_list(list, "constraints.stages." + key);
    }
  });
}

void parse_solver(const json& j, RunConfig& c) {
  allow_keys(j, "solver",
             {"method", "gradient_tolerance", "max_iterations", "armijo", "backtrack", "active_tolerance",
              "slater_max_iterations", "slater_slack_tolerance"});
  auto& d = c.solver.dual;
  optional_key(j, "method", [&](const json& v) {
    const auto m = text(v, "solver.method");
    if (m == "newton") d.method = DualMethod::ProjectedNewton;
    else if (m == "gradient") d.method = DualMethod::ProjectedGradient;
    else bad("solver.method", "expected newton or gradient");
  });
  optional_key(j, "gradient_tolerance", [&](const json& v) { d.gradient_tolerance = positive(v, "solver.gradient_tolerance"); });
  optional_key(j, "max_iterations", [&](const json& v) {
    d.max_iterations = count(v, "solver.max_iterations");
    if (d.max_iterations == 0) bad("solver.max_iterations", "must be > 0");
  });
  optional_key(j, "armijo", [&](const json& v) { d.armijo = positive(v, "solver.armijo"); });
  optional_key(j, "backtrack", [&](const json& v) {
    d.backtrack = positive(v, "solver.backtrack");
    if (d.backtrack >= 1.0) bad("solver.backtrack", "must be < 1");
  });
  optional_key(j, "active_tolerance", [&](const json& v) { c.solver.active_tolerance = positive(v, "solver.active_tolerance"); });
  optional_key(j, "slater_max_iterations", [&](const json& v) {
    c.slater.max_iterations = count(v, "solver.slater_max_iterations");
    if (c.slater.max_iterations == 0) bad("solver.slater_max_iterations", "must be > 0");
  });
  optional_key(j, "slater_slack_tolerance",
               [&](const json& v) { c.slater.slack_tolerance = positive(v, "solver.slater_slack_tolerance"); });
}

void parse_estimation(const json& j, RunConfig& c) {
  allow_keys(j, "estimation", {"pooled", "support_floor", "smoothing", "system", "reference"});
  auto& e = c.estimation;
  optional_key(j, "pooled", [&](const json& v) { e.pooled = boolean(v, "estimation.pooled"); });
  optional_key(j, "support_floor", [&](const json& v) {
    e.support_floor = number(v, "estimation.support_floor");
    if (e.support_floor < 0.0) bad("estimation.support_floor", "must be >= 0");
  });
  optional_key(j, "smoothing", [&](const json& v) {
    if (v.is_null()) return;
    allow_keys(v, "estimation.smoothing", {"min_std"});
    e.smoothing_min_std = v.contains("min_std") ? positive(v["min_std"], "estimation.smoothing.min_std") : 0.0;
  });
  optional_key(j, "system", [&](const json& v) { e.system = gaussian(v, "estimation.system"); });
  optional_key(j, "reference", [&](const json& v) { e.reference = gaussian(v, "estimation.reference"); });
}

void parse_initial(const json& j, RunConfig& c) {
  allow_keys(j, "initial_state", {"kind", "value", "mean", "std"});
  const auto kind = j.contains("kind") ? text(j["kind"], "initial_state.kind") : std::string("uniform");
  auto& s = c.initial;
  if (kind == "uniform") {
    s.kind = InitialState::Kind::Uniform;
  } else if (kind == "point") {
    s.kind = InitialState::Kind::Point;
    if (!j.contains("value")) bad("initial_state", "point needs 'value'");
    s.value = number(j["value"], "initial_state.value");
  } else if (kind == "gaussian") {
    s.kind = InitialState::Kind::Gaussian;
    if (!j.contains("mean") || !j.contains("std")) bad("initial_state", "gaussian needs 'mean' and 'std'");
    s.mean = number(j["mean"], "initial_state.mean");
    s.stddev = positive(j["std"], "initial_state.std");
  } else {
    bad("initial_state.kind", "expected uniform, point or gaussian");
  }
}

void parse_simulation(const json& j, RunConfig& c) {
  allow_keys(j, "simulation", {"rollouts", "mode", "seed", "paths"});
  auto& s = c.simulation;
  optional_key(j, "rollouts", [&](const json& v) {
    s.rollouts = count(v, "simulation.rollouts");
    if (s.rollouts == 0) bad("simulation.rollouts", "must be >= 1");
  });
  optional_key(j, "mode", [&](const json& v) {
    const auto m = text(v, "simulation.mode");
    if (m == "mean") s.mode = ControlMode::Mean;
    else if (m == "sample") s.mode = ControlMode::Sample;
    else bad("simulation.mode", "expected mean or sample");
  });
  optional_key(j, "seed", [&](const json& v) { s.seed = static_cast<std::uint64_t>(count(v, "simulation.seed")); });
  optional_key(j, "paths", [&](const json& v) { s.write_paths = boolean(v, "simulation.paths"); });
}

void parse_generator(const json& j, RunConfig& c) {
  allow_keys(j, "generator",
             {"complete_model", "example_model", "complete_trajectories", "example_trajectories", "stages", "x0_mean",
              "x0_std", "speed_profile", "complete_noise", "example_noise", "min_speed", "seed"});
  auto& g = c.generator;
  optional_key(j, "complete_model", [&](const json& v) { g.complete_model = gaussian(v, "generator.complete_model"); });
  g.example_model = g.complete_model;
  optional_key(j, "example_model", [&](const json& v) { g.example_model = gaussian(v, "generator.example_model"); });
  optional_key(j, "complete_trajectories",
               [&](const json& v) { g.complete_trajectories = count(v, "generator.complete_trajectories"); });
  optional_key(j, "example_trajectories",
               [&](const json& v) { g.example_trajectories = count(v, "generator.example_trajectories"); });
  optional_key(j, "stages", [&](const json& v) { g.stages = count(v, "generator.stages"); });
  optional_key(j, "x0_mean", [&](const json& v) { g.x0_mean = number(v, "generator.x0_mean"); });
  optional_key(j, "x0_std", [&](const json& v) { g.x0_std = number(v, "generator.x0_std"); });
  optional_key(j, "speed_profile", [&](const json& v) {
    if (!v.is_array() || v.empty()) bad("generator.speed_profile", "expected a nonempty array of [position, speed]");
    g.speed_profile.clear();
    for (const auto& p : v) {
      if (!p.is_array() || p.size() != 2) bad("generator.speed_profile", "entries are [position, speed]");
      g.speed_profile.emplace_back(number(p[0], "generator.speed_profile"), number(p[1], "generator.speed_profile"));
    }
    if (!std::is_sorted(g.speed_profile.begin(), g.speed_profile.end())) {
      bad("generator.speed_profile", "positions must be increasing");
    }
  });
  optional_key(j, "complete_noise", [&](const json& v) { g.complete_noise = number(v, "generator.complete_noise"); });
  optional_key(j, "example_noise", [&](const json& v) { g.example_noise = number(v, "generator.example_noise"); });
  optional_key(j, "min_speed", [&](const json& v) { g.min_speed = number(v, "generator.min_speed"); });
  optional_key(j, "seed", [&](const json& v) { g.seed = static_cast<std::uint64_t>(count(v, "generator.seed")); });
  if (g.x0_std < 0.0 || g.complete_noise < 0.0 || g.example_noise < 0.0) bad("generator", "spreads must be >= 0");
}

}  // namespace

Density InitialState::density(const Grid& state) const {
  switch (kind) {
    case Kind::Point: {
      const auto cell = state.locate(value);
      if (!cell) throw Error(ErrorCode::BadConfig, "initial_state.value lies outside the state grid");
      return point_mass(state, *cell);
    }
    case Kind::Gaussian: return discretized_normal(state, mean, stddev);
    case Kind::Uniform: break;
  }
  return uniform(state);
}

const std::vector<ConstraintSpec>& RunConfig::constraints_for(std::size_t stage) const {
  if (auto it = stage_constraints.find(stage); it != stage_constraints.end()) return it->second;
  return constraints;
}

RunConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
  allow_keys(j, "config",
             {"grids", "horizon", "data", "estimation", "constraints", "solver", "synthesis", "initial_state",
              "simulation", "generator"});
  RunConfig c;
  if (!j.contains("grids")) bad("config", "missing 'grids'");
  allow_keys(j["grids"], "grids", {"state", "control"});
  if (!j["grids"].contains("state") || !j["grids"].contains("control")) bad("grids", "needs state and control");
  c.state = grid(j["grids"]["state"], "grids.state");
  c.control = grid(j["grids"]["control"], "grids.control");
  if (!j.contains("horizon")) bad("config", "missing 'horizon'");
  c.horizon = count(j["horizon"], "horizon");
  if (c.horizon == 0) bad("horizon", "must be >= 1");

  auto resolve = [&](const json& v, const std::string& where) {
    std::filesystem::path p = text(v, where);
    return p.is_absolute() ? p : base_dir / p;
  };
  c.complete_csv = base_dir / "complete.csv";
  c.example_csv = base_dir / "example.csv";
  optional_key(j, "data", [&](const json& v) {
    allow_keys(v, "data", {"complete", "example"});
    optional_key(v, "complete", [&](const json& p) { c.complete_csv = resolve(p, "data.complete"); });
    optional_key(v, "example", [&](const json& p) { c.example_csv = resolve(p, "data.example"); });
  });

  optional_key(j, "estimation", [&](const json& v) { parse_estimation(v, c); });
  optional_key(j, "constraints", [&](const json& v) { parse_constraints(v, c); });
  optional_key(j, "solver", [&](const json& v) { parse_solver(v, c); });
  optional_key(j, "synthesis", [&](const json& v) {
    allow_keys(v, "synthesis", {"fail_on_nonconvergence", "report_tables"});
    optional_key(v, "fail_on_nonconvergence",
                 [&](const json& b) { c.fail_on_nonconvergence = boolean(b, "synthesis.fail_on_nonconvergence"); });
    optional_key(v, "report_tables", [&](const json& b) { c.report_tables = boolean(b, "synthesis.report_tables"); });
  });
  optional_key(j, "initial_state", [&](const json& v) { parse_initial(v, c); });
  optional_key(j, "simulation", [&](const json& v) { parse_simulation(v, c); });
  optional_key(j, "generator", [&](const json& v) { parse_generator(v, c); });
  if (c.generator.stages == 0) c.generator.stages = c.horizon;
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  json j;
  try {
    j = json::parse(buffer.str());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  auto c = parse_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
  c.source = path;
  return c;
}

ConstraintSet build_constraints(const std::vector<ConstraintSpec>& specs, const Grid& control, const Density& g_row) {
  ConstraintSet cs;
  if (specs.empty()) return cs;
  const double mean = mean_mode(g_row);
  const double var = variance(g_row);
  for (const auto& s : specs) {
    switch (s.kind) {
      case ConstraintSpec::Kind::MomentEquality:
        cs.add(moment_equality(s.order, s.target.evaluate(mean, var), control));
        break;
      case ConstraintSpec::Kind::MomentInequality:
        cs.add(moment_inequality(s.order, s.target.evaluate(mean, var), s.sense, control));
        break;
      case ConstraintSpec::Kind::MomentRange: {
        auto [hi, lo] = rectangular_bound(s.order, s.lower.evaluate(mean, var), s.upper.evaluate(mean, var), control);
        cs.add(std::move(hi));
        cs.add(std::move(lo));
        break;
      }
      case ConstraintSpec::Kind::Probability: {
        std::vector<std::size_t> subset;
        for (std::size_t i = 0; i < control.size(); ++i) {
          if (control.center(i) >= s.from && control.center(i) <= s.to) subset.push_back(i);
        }
        cs.add(bound_probability(subset, s.epsilon, control));
        break;
      }
    }
  }
  return cs;
}

std::vector<ConstraintRule> constraint_rules(const RunConfig& config) {
  std::vector<ConstraintRule> rules(config.horizon);
  for (std::size_t k = 1; k <= config.horizon; ++k) {
    const auto& specs = config.constraints_for(k);
    if (specs.empty()) continue;
    rules[k - 1] = [specs, control = config.control](std::size_t, std::size_t, const Density& g_row) {
      return build_constraints(specs, control, g_row);
    };
  }
  return rules;
}

}  // namespace klctrl::cli
