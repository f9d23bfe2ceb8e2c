#include "klctrl/cli/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <tuple>

namespace klctrl::cli {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void note(const Context& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << '\n';
}

void detail(const Context& ctx, const std::string& line) {
  if (ctx.verbose) note(ctx, line);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
  return out;
}

double normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

double profile_at(const std::vector<std::pair<double, double>>& p, double x) {
  if (x <= p.front().first) return p.front().second;
  if (x >= p.back().first) return p.back().second;
  const auto it = std::upper_bound(p.begin(), p.end(), x, [](double v, const auto& q) { return v < q.first; });
  const auto& [x1, v1] = *it;
  const auto& [x0, v0] = *(it - 1);
  return v0 + (v1 - v0) * (x - x0) / (x1 - x0);
}

DatasetCollection generate_set(const GeneratorOptions& g, const GaussianTransition& model, std::size_t count,
                               double noise, const std::string& prefix, DatasetRole role, Rng& rng) {
  DatasetCollection data;
  data.role = role;
  const double sd = std::sqrt(model.sigma2);
  for (std::size_t t = 0; t < count; ++t) {
    Trajectory tr;
    char id[32];
    std::snprintf(id, sizeof id, "%s%05zu", prefix.c_str(), t + 1);
    tr.id = id;
    double x = g.x0_mean + g.x0_std * normal(rng);
    double u = std::max(g.min_speed, profile_at(g.speed_profile, x) + noise * normal(rng));
    tr.samples.push_back({0, x, u});
    for (std::size_t k = 1; k <= g.stages; ++k) {
      u = std::max(g.min_speed, profile_at(g.speed_profile, x) + noise * normal(rng));
      x = model.a * x + model.b * u + sd * normal(rng);
      tr.samples.push_back({k, x, u});
    }
    data.trajectories.push_back(std::move(tr));
  }
  return data;
}

json fit_report(const GaussianFit& f) {
  return {{"a", f.model.a}, {"b", f.model.b}, {"sigma2", f.model.sigma2}, {"pairs", f.pairs}, {"rss", f.rss}};
}

std::vector<Grid> policy_grids(const RunConfig& c) { return {c.state, c.control}; }


std::vector<ConditionalPtr> expand_policy(const Policy& p, std::size_t horizon, const std::string& what) {
  std::vector<ConditionalPtr> out;
  if (p.stages.size() == 1) {
    out.assign(horizon, std::make_shared<const ConditionalDensity>(p.stages.front()));
  } else if (p.stages.size() == horizon) {
    for (const auto& s : p.stages) out.push_back(std::make_shared<const ConditionalDensity>(s));
  } else {
    throw Error(ErrorCode::BadConfig, what + " has " + std::to_string(p.stages.size()) + " stages, horizon is " +
                                          std::to_string(horizon));
  }
  return out;
}

void check_policy_grids(const std::vector<ConditionalPtr>& ps, const RunConfig& c, const std::string& what) {
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const auto& cond = ps[k]->conditioning();
    if (cond.size() != 1 || !(cond[0] == c.state) || !(ps[k]->target() == c.control)) {
      throw Error(ErrorCode::GridMismatch, what + " stage " + std::to_string(k + 1) + " is not on the configured grids",
                  k + 1);
    }
  }
}

std::vector<ConditionalPtr> load_example(const Context& ctx) {
  auto ex = expand_policy(load_policy(ctx.out / kExamplePolicyFile), ctx.config.horizon, "example policy");
  check_policy_grids(ex, ctx.config, "example policy");
  return ex;
}

}  // namespace

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::Infeasible:
    case ErrorCode::InfeasibleConstraints: return 2;
    case ErrorCode::NotConverged: return 3;
    default: return 1;
  }
}

// ------------------------------------------------------------------ generate

void cmd_generate(const Context& ctx) {
  const auto& c = ctx.config;
  const auto& g = c.generator;
  // Independent streams for the two datasets keep each one stable when the
  // other's size changes.
  Rng complete_rng(rollout_seed(g.seed, 0));
  Rng example_rng(rollout_seed(g.seed, 1));
  const auto complete = generate_set(g, g.complete_model, g.complete_trajectories, g.complete_noise, "c",
                                     DatasetRole::Complete, complete_rng);
  const auto example =
      generate_set(g, g.example_model, g.example_trajectories, g.example_noise, "e", DatasetRole::Example, example_rng);
  write_trajectories_csv(complete, c.complete_csv);
  write_trajectories_csv(example, c.example_csv);
  note(ctx, "wrote " + std::to_string(g.complete_trajectories) + " complete and " +
                std::to_string(g.example_trajectories) + " example trajectories");
  detail(ctx, "  " + c.complete_csv.string());
  detail(ctx, "  " + c.example_csv.string());
}

// ------------------------------------------------------------------ estimate

void cmd_estimate(const Context& ctx) {
  const auto& c = ctx.config;
  const auto complete = read_trajectories_csv(c.complete_csv, DatasetRole::Complete);
  const auto example = read_trajectories_csv(c.example_csv, DatasetRole::Example);
  detail(ctx, "read " + std::to_string(complete.trajectories.size()) + " complete and " +
                  std::to_string(example.trajectories.size()) + " example trajectories");

  json report;
  report["pooled"] = c.estimation.pooled;
  report["complete_trajectories"] = complete.trajectories.size();
  report["example_trajectories"] = example.trajectories.size();

  const std::vector<Variable> vars{Variable::PreviousState, Variable::Control};
  const auto grids = policy_grids(c);
  std::vector<std::optional<std::size_t>> stages;
  if (c.estimation.pooled) {
    stages.push_back(std::nullopt);
  } else {
    for (std::size_t k = 1; k <= c.horizon; ++k) stages.push_back(k);
  }

  // Transition models: fixed parameters when configured, else least squares.
  auto models = [&](const DatasetCollection& data, const std::optional<GaussianTransition>& fixed, const char* name) {
    TransitionArtifact t;
    t.state = c.state;
    t.control = c.control;
    json fits = json::array();
    if (fixed) {
      t.gaussian.push_back(*fixed);
      report[name] = {{"source", "config"}, {"parameters", encode(*fixed)}};
      return t;
    }
    for (const auto& k : stages) {
      const auto pairs = transitions(data, k);
      const auto fit = fit_gaussian(pairs);
      t.gaussian.push_back(fit.model);
      json f = fit_report(fit);
      if (k) f["stage"] = *k;
      fits.push_back(std::move(f));
    }
    report[name] = {{"source", "least_squares"}, {"fits", std::move(fits)}};
    return t;
  };
  const auto system = models(complete, c.estimation.system, "system");
  const auto reference = models(example, c.estimation.reference, "reference");
  save(ctx.out / kSystemFile, system);
  save(ctx.out / kReferenceFile, reference);
  for (const auto* t : {&system, &reference}) {
    for (const auto& g : t->gaussian) {
      detail(ctx, std::string(t == &system ? "f_X" : "g_X") + ": a=" + fmt(g.a) + " b=" + fmt(g.b) +
                      " sigma2=" + fmt(g.sigma2));
    }
  }

  // Pooled joints are always written for inspection.
  const auto complete_joint = empirical_joint(complete, grids, vars);
  const auto example_joint = empirical_joint(example, grids, vars);
  save(ctx.out / kCompleteJointFile, complete_joint.joint);
  save(ctx.out / kExampleJointFile, example_joint.joint);
  report["complete_samples"] = {{"in_range", complete_joint.in_range}, {"dropped", complete_joint.dropped}};
  report["example_samples"] = {{"in_range", example_joint.in_range}, {"dropped", example_joint.dropped}};

  Policy example_policy;
  json rows = json::array();
  for (const auto& k : stages) {
    const auto joint = k ? empirical_joint(example, grids, vars, k) : example_joint;
    auto policy = extract_policy(joint.joint);
    const std::size_t filled = policy.filled_count();
    if (c.estimation.smoothing_min_std) policy = gaussian_moment_policy(policy, *c.estimation.smoothing_min_std);
    json r = {{"filled_rows", filled}, {"in_range", joint.in_range}, {"dropped", joint.dropped}};
    if (k) r["stage"] = *k;
    rows.push_back(std::move(r));
    example_policy.stages.push_back(std::move(policy));
  }
  report["example_policy"] = std::move(rows);
  report["smoothing_min_std"] = c.estimation.smoothing_min_std ? json(*c.estimation.smoothing_min_std) : json();
  save(ctx.out / kExamplePolicyFile, example_policy);
  save_artifact(ctx.out / kEstimationReportFile, "estimation_report", report);

  const auto filled = example_policy.stages.front().filled_count();
  note(ctx, "estimated models from " + std::to_string(complete_joint.in_range) + " complete and " +
                std::to_string(example_joint.in_range) + " example samples (" +
                std::to_string(complete_joint.dropped + example_joint.dropped) + " dropped, " +
                std::to_string(filled) + " example rows filled)");
}

// --------------------------------------------------------------------- check

CheckSummary cmd_check(const Context& ctx) {
  const auto& c = ctx.config;
  const auto example = load_example(ctx);

  CheckSummary summary;
  json cells = json::array();
  json stage_rows = json::array();
  // Stages sharing a constraint list and an example table share results.
  std::map<std::tuple<const void*, const void*, std::size_t>, SlaterReport> memo;

  for (std::size_t k = 1; k <= c.horizon; ++k) {
    const auto& specs = c.constraints_for(k);
    const auto& g = *example[k - 1];
    std::size_t feasible = 0;
    double min_slack = std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < c.state.size(); ++x) {
      const auto key = std::make_tuple(static_cast<const void*>(&specs), static_cast<const void*>(&g), x);
      auto it = memo.find(key);
      if (it == memo.end()) {
        const auto row = g.row_density(x);
        const auto cs = build_constraints(specs, c.control, row);
        SlaterReport rep;
        if (cs.empty()) {
          rep.feasible = true;
          rep.slack = std::numeric_limits<double>::infinity();
        } else {
          rep = check_slater(cs, row, c.slater);
        }
        rep.witness.reset();
        it = memo.emplace(key, std::move(rep)).first;
      }
      const auto& rep = it->second;
      ++summary.cells;
      min_slack = std::min(min_slack, rep.slack);
      if (rep.feasible) {
        ++feasible;
      } else {
        summary.infeasible.push_back({k, x, rep.reason, rep.slack});
        cells.push_back({{"stage", k},
                         {"state", x},
                         {"x", c.state.center(x)},
                         {"reason", rep.reason},
                         {"slack", std::isfinite(rep.slack) ? json(rep.slack) : json()},
                         {"equality_residual", rep.equality_residual}});
      }
    }
    stage_rows.push_back({{"stage", k},
                          {"constraints", specs.size()},
                          {"feasible_states", feasible},
                          {"min_slack", std::isfinite(min_slack) ? json(min_slack) : json()}});
    detail(ctx, "stage " + std::to_string(k) + ": " + std::to_string(feasible) + "/" +
                    std::to_string(c.state.size()) + " states feasible");
  }

  json report = {{"feasible", summary.feasible()},
                 {"cells", summary.cells},
                 {"stages", std::move(stage_rows)},
                 {"infeasible", std::move(cells)}};
  save_artifact(ctx.out / kCheckReportFile, "check_report", report);

  if (summary.feasible()) {
    note(ctx, "constraints feasible with Slater slack at all " + std::to_string(summary.cells) + " (stage, state) cells");
  } else {
    note(ctx, std::to_string(summary.infeasible.size()) + " of " + std::to_string(summary.cells) +
                  " (stage, state) cells infeasible:");
    const std::size_t shown = ctx.verbose ? summary.infeasible.size() : std::min<std::size_t>(10, summary.infeasible.size());
    for (std::size_t i = 0; i < shown; ++i) {
      const auto& cell = summary.infeasible[i];
      note(ctx, "  k=" + std::to_string(cell.stage) + " x=" + std::to_string(cell.state) + ": " + cell.reason);
    }
    if (shown < summary.infeasible.size()) note(ctx, "  ...");
  }
  return summary;
}

// ---------------------------------------------------------------- synthesize

SynthesisResult cmd_synthesize(const Context& ctx) {
  const auto& c = ctx.config;
  const auto check = cmd_check(ctx);
  if (!check.feasible()) {
    const auto& first = check.infeasible.front();
    throw Error(ErrorCode::InfeasibleConstraints,
                std::to_string(check.infeasible.size()) + " infeasible (stage, state) cells, first at (k=" +
                    std::to_string(first.stage) + ", x=" + std::to_string(first.state) + ")",
                first.stage);
  }

  SynthesisProblem p{c.horizon,
                     c.state,
                     c.control,
                     load_transition(ctx.out / kSystemFile).expand(c.horizon),
                     load_transition(ctx.out / kReferenceFile).expand(c.horizon),
                     load_example(ctx),
                     constraint_rules(c),
                     c.initial.density(c.state)};
  SynthesisOptions opts;
  opts.solver = c.solver;
  opts.support_floor = c.estimation.support_floor;
  opts.fail_on_nonconvergence = c.fail_on_nonconvergence;
  auto result = synthesize(p, opts);
  const auto& r = result.report;

  save(ctx.out / kPolicyFile, result.policy);
  save(ctx.out / kSynthesisReportFile, r, c.report_tables);

  auto csv = open_out(ctx.out / kPolicyMomentsFile);
  csv << "stage,state,x,mean_g,std_g,mean_f,std_f\n";
  for (std::size_t k = 0; k < c.horizon; ++k) {
    for (std::size_t x = 0; x < c.state.size(); ++x) {
      const auto g = p.example[k]->row_density(x);
      const auto f = result.policy.stages[k].row_density(x);
      csv << k + 1 << ',' << x << ',' << fmt(c.state.center(x)) << ',' << fmt(mean_mode(g)) << ','
          << fmt(std::sqrt(variance(g))) << ',' << fmt(mean_mode(f)) << ',' << fmt(std::sqrt(variance(f))) << '\n';
    }
  }
  if (!csv) throw Error(ErrorCode::IoError, "failed writing policy moments");

  for (std::size_t k = 0; k < c.horizon; ++k) note(ctx, "B*_" + std::to_string(k + 1) + " = " + fmt(r.b_star[k]));
  note(ctx, "closed-loop KL = " + fmt(r.closed_loop_kl));
  if (!r.unconverged.empty()) {
    note(ctx, std::to_string(r.unconverged.size()) + " (stage, state) cells did not converge");
  }
  return result;
}

// ------------------------------------------------------------------ simulate

RolloutResult cmd_simulate(const Context& ctx) {
  const auto& c = ctx.config;
  const auto policy = load_policy(ctx.out / kPolicyFile);
  if (policy.stages.size() != c.horizon) {
    throw Error(ErrorCode::BadConfig, "policy has " + std::to_string(policy.stages.size()) + " stages, horizon is " +
                                          std::to_string(c.horizon));
  }
  const auto system = load_transition(ctx.out / kSystemFile).expand(c.horizon);
  RolloutConfig rc{c.horizon, c.simulation.rollouts, c.simulation.mode, c.simulation.seed, c.initial.density(c.state)};
  auto result = rollout(policy, system, rc);

  save(ctx.out / kRolloutFile, result);
  if (c.simulation.write_paths) write_paths_csv(result, ctx.out / kPathsFile);
  if (c.simulation.rollouts >= 2) {
    write_band_csv(band_statistics(result), ctx.out / kBandsFile);
  } else {
    note(ctx, "one rollout: band statistics skipped");
  }
  note(ctx, "simulated " + std::to_string(c.simulation.rollouts) + " rollouts over " + std::to_string(c.horizon) +
                " stages (seed " + std::to_string(c.simulation.seed) + ", " + std::to_string(result.clipped) +
                " clipped controls)");
  return result;
}

}  // namespace klctrl::cli
