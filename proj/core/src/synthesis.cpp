#include "klctrl/synthesis.hpp"

#include <cmath>
#include <map>
#include <string>
#include <utility>

namespace klctrl {

ConstraintRule fixed_constraints(ConstraintSet constraints) {
  return [cs = std::move(constraints)](std::size_t, std::size_t, const Density&) { return cs; };
}

ConstraintRule moment_matching_rule(const Grid& control, double variance_factor) {
  return [control, variance_factor](std::size_t, std::size_t, const Density& g_row) {
    const double mean = mean_mode(g_row);
    const double var = variance(g_row);
    ConstraintSet cs;
    cs.add(moment_equality(1, mean, control));
    cs.add(moment_equality(2, variance_factor * var + mean * mean, control));
    return cs;
  };
}

double alpha_hat(std::span<const double> f_row, std::span<const double> g_row, double support_floor) {
  return kl_divergence(f_row, g_row, support_floor);
}

double beta_hat(std::span<const double> f_row, std::span<const double> ln_gamma) {
  double acc = 0.0;
  for (std::size_t i = 0; i < f_row.size(); ++i) {
    if (f_row[i] != 0.0) acc += f_row[i] * ln_gamma[i];
  }
  return -acc;
}

double gamma_update(const DualSolution& dual, std::span<const double> targets) {
  double ln_gamma = dual.lambda.at(0) + 1.0;
  for (std::size_t j : dual.active) {
    if (j == 0) continue;
    ln_gamma += dual.lambda.at(j) * targets[j - 1];
  }
  return ln_gamma;
}

double minimum_b(const Density& p_prev, std::span<const double> ln_gamma) {
  return -expectation(p_prev, ln_gamma);
}

std::vector<double> alpha_table(const ConditionalDensity& system, const ConditionalDensity& reference,
                                double support_floor) {
  if (system.rows() != reference.rows() || !(system.target() == reference.target())) {
    throw Error(ErrorCode::GridMismatch, "system and reference transitions differ in shape");
  }
  std::vector<double> table(system.rows());
  for (std::size_t r = 0; r < system.rows(); ++r) {
    try {
      table[r] = alpha_hat(system.row(r), reference.row(r), support_floor);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AbsContinuityViolation) throw;
      const std::size_t nu = system.conditioning().at(1).size();
      throw Error(ErrorCode::AbsContinuityViolation,
                  "transition row (x_prev=" + std::to_string(r / nu) + ", u=" + std::to_string(r % nu) +
                      ") of the system has mass where the reference has none",
                  r);
    }
  }
  return table;
}

void validate(const SynthesisProblem& p) {
  if (p.horizon == 0) throw Error(ErrorCode::BadConfig, "horizon must be at least 1");
  auto sized = [&](std::size_t n, const char* what) {
    if (n != p.horizon) throw Error(ErrorCode::BadConfig, std::string(what) + " must have one entry per stage");
  };
  sized(p.system.size(), "system transitions");
  sized(p.reference.size(), "reference transitions");
  sized(p.example.size(), "example policies");
  if (!p.constraints.empty()) sized(p.constraints.size(), "constraint rules");
  if (!(p.initial.grid() == p.state)) throw Error(ErrorCode::GridMismatch, "initial density is not on the state grid");

  for (std::size_t k = 0; k < p.horizon; ++k) {
    for (const auto* t : {p.system[k].get(), p.reference[k].get()}) {
      if (t == nullptr) throw Error(ErrorCode::BadConfig, "missing transition model", k + 1);
      const auto& c = t->conditioning();
      if (c.size() != 2 || !(c[0] == p.state) || !(c[1] == p.control) || !(t->target() == p.state)) {
        throw Error(ErrorCode::GridMismatch, "transition model grids differ from the problem grids", k + 1);
      }
    }
    const auto* ex = p.example[k].get();
    if (ex == nullptr) throw Error(ErrorCode::BadConfig, "missing example policy", k + 1);
    if (ex->conditioning().size() != 1 || !(ex->conditioning()[0] == p.state) || !(ex->target() == p.control)) {
      throw Error(ErrorCode::GridMismatch, "example policy grids differ from the problem grids", k + 1);
    }
  }
}

namespace {

class AlphaCache {
 public:
  explicit AlphaCache(double floor) : floor_(floor) {}

  const std::vector<double>& get(const ConditionalPtr& system, const ConditionalPtr& reference) {
    const auto key = std::make_pair(system.get(), reference.get());
    auto it = tables_.find(key);
    if (it == tables_.end()) {
      it = tables_.emplace(key, alpha_table(*system, *reference, floor_)).first;
    }
    return it->second;
  }

 private:
  double floor_;
  std::map<std::pair<const void*, const void*>, std::vector<double>> tables_;
};

}  // namespace

Density propagate(const Density& prev, const ConditionalDensity& policy, const ConditionalDensity& system) {
  const std::size_t nx = prev.size();
  const std::size_t nu = policy.row_size();
  std::vector<double> next(nx, 0.0);
  for (std::size_t x = 0; x < nx; ++x) {
    if (prev[x] == 0.0) continue;
    const auto pi = policy.row(x);
    for (std::size_t u = 0; u < nu; ++u) {
      const double w = prev[x] * pi[u];
      if (w == 0.0) continue;
      const auto row = system.row(x * nu + u);
      for (std::size_t y = 0; y < nx; ++y) next[y] += w * row[y];
    }
  }
  return normalize(next, prev.grid());
}

SynthesisResult synthesize(const SynthesisProblem& problem, const SynthesisOptions& options) {
  validate(problem);
  const std::size_t n = problem.horizon;
  const std::size_t nx = problem.state.size();
  const std::size_t nu = problem.control.size();

  SolverOptions solver = options.solver;
  solver.require_convergence = false;

  AlphaCache alphas(options.support_floor);
  SynthesisResult result;
  auto& report = result.report;
  report.stages.resize(n);
  report.filled_example_rows.resize(n);
  std::vector<std::vector<double>> policy_tables(n);

  // Terminal condition: gamma^{n+1} = 1.
  std::vector<double> ln_gamma_next(nx, 0.0);

  for (std::size_t k = n; k >= 1; --k) {
    const auto& system = problem.system[k - 1];
    const auto& example = *problem.example[k - 1];
    StageCache& cache = report.stages[k - 1];
    cache.stage = k;
    cache.alpha_hat = alphas.get(system, problem.reference[k - 1]);
    cache.beta_hat.resize(nx * nu);
    cache.omega_hat.resize(nx * nu);
    for (std::size_t r = 0; r < nx * nu; ++r) {
      cache.beta_hat[r] = beta_hat(system->row(r), ln_gamma_next);
      cache.omega_hat[r] = cache.alpha_hat[r] + cache.beta_hat[r];
    }
    report.filled_example_rows[k - 1] = example.filled_count();

    cache.ln_gamma.resize(nx);
    cache.duals.resize(nx);
    cache.targets.resize(nx);
    auto& table = policy_tables[k - 1];
    table.resize(nx * nu);
    const bool has_rule = !problem.constraints.empty() && problem.constraints[k - 1];
    for (std::size_t x = 0; x < nx; ++x) {
      const Density g_row = example.row_density(x);
      const ConstraintSet cs = has_rule ? problem.constraints[k - 1](k, x, g_row) : ConstraintSet{};
      const std::span<const double> omega(cache.omega_hat.data() + x * nu, nu);
      ProjectionResult solved = [&] {
        try {
          return solve(problem.control, g_row.mass(), omega, cs, solver);
        } catch (const Error& e) {
          throw Error(e.code(), "stage " + std::to_string(k) + ", state " + std::to_string(x) + ": " + e.what(), k);
        }
      }();
      if (!solved.dual.converged) report.unconverged.push_back({k, x});
      std::copy(solved.f_star.mass().begin(), solved.f_star.mass().end(), table.begin() + x * nu);
      std::vector<double> targets;
      for (const auto& c : cs) targets.push_back(c.target);
      cache.ln_gamma[x] = gamma_update(solved.dual, targets);
      cache.targets[x] = std::move(targets);
      cache.duals[x] = std::move(solved.dual);
    }
    ln_gamma_next = cache.ln_gamma;
  }

  result.policy.stages.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    result.policy.stages.emplace_back(std::vector<Grid>{problem.state}, problem.control,
                                      std::move(policy_tables[k]));
  }

  report.state_marginals.reserve(n + 1);
  report.state_marginals.push_back(problem.initial);
  for (std::size_t k = 1; k <= n; ++k) {
    const Density& prev = report.state_marginals.back();
    report.b_star.push_back(minimum_b(prev, report.stages[k - 1].ln_gamma));
    report.state_marginals.push_back(propagate(prev, result.policy.stages[k - 1], *problem.system[k - 1]));
  }
  report.closed_loop_kl = kl_closed_loop(result.policy, problem, options.support_floor);

  if (!report.unconverged.empty() && options.fail_on_nonconvergence) {
    std::string cells;
    for (const auto& c : report.unconverged) {
      cells += " (k=" + std::to_string(c.stage) + ", x=" + std::to_string(c.state) + ")";
    }
    throw Error(ErrorCode::NotConverged, "dual ascent did not converge at" + cells);
  }
  return result;
}

double kl_closed_loop(const Policy& policy, const SynthesisProblem& problem, double support_floor) {
  validate(problem);
  if (policy.stages.size() != problem.horizon) throw Error(ErrorCode::BadConfig, "policy horizon differs from problem");
  const std::size_t nx = problem.state.size();
  const std::size_t nu = problem.control.size();
  AlphaCache alphas(support_floor);

  Density p = problem.initial;
  double total = 0.0;
  for (std::size_t k = 1; k <= problem.horizon; ++k) {
    const auto& pi = policy.stages[k - 1];
    const auto& g = *problem.example[k - 1];
    const auto& alpha = alphas.get(problem.system[k - 1], problem.reference[k - 1]);
    for (std::size_t x = 0; x < nx; ++x) {
      if (p[x] == 0.0) continue;
      double stage_kl = kl_divergence(pi.row(x), g.row(x));
      const auto row = pi.row(x);
      for (std::size_t u = 0; u < nu; ++u) {
        if (row[u] != 0.0) stage_kl += row[u] * alpha[x * nu + u];
      }
      total += p[x] * stage_kl;
    }
    p = propagate(p, pi, *problem.system[k - 1]);
  }
  return total;
}

}  // namespace klctrl
