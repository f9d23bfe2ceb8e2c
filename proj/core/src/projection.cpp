#include "klctrl/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace klctrl {

namespace {

void check_spec(const Grid& grid, std::span<const double> g, std::span<const double> alpha,
                const ConstraintSet& constraints) {
  if (g.size() != grid.size()) throw Error(ErrorCode::GridMismatch, "reference density size differs from grid");
  if (!alpha.empty() && alpha.size() != g.size()) {
    throw Error(ErrorCode::GridMismatch, "alpha table size differs from grid");
  }
  if (!constraints.empty() && constraints.cells() != g.size()) {
    throw Error(ErrorCode::GridMismatch, "constraint tables differ in size from grid");
  }
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (g[i] > 0.0 && !std::isfinite(alpha[i])) {
      throw Error(ErrorCode::NonFiniteH, "alpha is not finite on the support of g", i);
    }
  }
}

double inner(std::span<const double> rest, const ConstraintSet& constraints, std::size_t cell) {
  double acc = 0.0;
  for (std::size_t j = 0; j < constraints.size(); ++j) acc += rest[j] * constraints[j].h[cell];
  return acc;
}

// ln sum_i g_i exp(-alpha_i - <rest, h_i>) over cells with g_i > 0.
double log_partition(const TiltSpec& spec, std::span<const double> rest) {
  const auto g = spec.g.mass();
  if (rest.size() != spec.constraints.size()) {
    throw Error(ErrorCode::BadConfig, "multiplier vector length differs from constraint count");
  }
  double shift = -std::numeric_limits<double>::infinity();
  std::vector<double> e(g.size(), shift);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] <= 0.0) continue;
    const double a = spec.alpha.empty() ? 0.0 : spec.alpha[i];
    e[i] = std::log(g[i]) - a - inner(rest, spec.constraints, i);
    shift = std::max(shift, e[i]);
  }
  if (!std::isfinite(shift)) throw Error(ErrorCode::DegenerateSupport, "tilted reference has no mass");
  double z = 0.0;
  for (double v : e) {
    if (std::isfinite(v)) z += std::exp(v - shift);
  }
  return shift + std::log(z);
}

}  // namespace

std::vector<double> tilted_density(const TiltSpec& spec, std::span<const double> lambda) {
  if (lambda.size() != spec.constraints.size() + 1) {
    throw Error(ErrorCode::BadConfig, "multiplier vector must hold lambda_0 and one entry per constraint");
  }
  const auto g = spec.g.mass();
  std::vector<double> out(g.size(), 0.0);
  const auto rest = lambda.subspan(1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] == 0.0) continue;
    const double a = spec.alpha.empty() ? 0.0 : spec.alpha[i];
    out[i] = g[i] * std::exp(-1.0 - a - lambda[0] - inner(rest, spec.constraints, i));
  }
  return out;
}

double dual_value(const TiltSpec& spec, std::span<const double> lambda) {
  const auto tilt = tilted_density(spec, lambda);
  double value = -lambda[0];
  for (std::size_t j = 0; j < spec.constraints.size(); ++j) {
    value -= lambda[j + 1] * spec.constraints[j].target;
  }
  for (double t : tilt) value -= t;
  return value;
}

double dual_value_reduced(const TiltSpec& spec, std::span<const double> rest) {
  double value = -log_partition(spec, rest);
  for (std::size_t j = 0; j < spec.constraints.size(); ++j) value -= rest[j] * spec.constraints[j].target;
  return value;
}

double lambda0_of(const TiltSpec& spec, std::span<const double> rest) {
  return log_partition(spec, rest) - 1.0;
}

ProjectionResult solve(const Grid& grid, std::span<const double> g, std::span<const double> alpha,
                       const ConstraintSet& constraints, const SolverOptions& options) {
  check_spec(grid, g, alpha, constraints);
  const auto face = detail::reduce_faces(g, constraints);
  if (face.infeasible) throw Error(ErrorCode::InfeasibleConstraints, face.reason);

  std::vector<std::size_t> kept;
  std::vector<std::size_t> cells;
  const auto dual = detail::make_reduced_dual(g, alpha, constraints, face, {}, kept, cells);

  std::vector<double> start(kept.size(), 0.0);
  if (!options.initial_lambda.empty()) {
    if (options.initial_lambda.size() != constraints.size()) {
      throw Error(ErrorCode::BadConfig, "initial multiplier vector length differs from constraint count");
    }
    for (std::size_t k = 0; k < kept.size(); ++k) start[k] = options.initial_lambda[kept[k]];
  }

  // Weak duality: the dual never exceeds the cost of any feasible density,
  // which is at most max(alpha - ln g) on the support.
  double ceiling = -std::numeric_limits<double>::infinity();
  for (std::size_t i : cells) {
    ceiling = std::max(ceiling, (alpha.empty() ? 0.0 : alpha[i]) - std::log(g[i]));
  }
  ceiling += 1.0;

  auto run = detail::maximize(dual, std::move(start), options.dual, ceiling);
  if (run.unbounded) {
    throw Error(ErrorCode::InfeasibleConstraints, "dual is unbounded above: constraints admit no density");
  }
  if (!run.converged && options.require_convergence) {
    const auto slater = check_slater(constraints, Density(grid, std::vector<double>(g.begin(), g.end())));
    if (!slater.feasible) {
      throw Error(ErrorCode::InfeasibleConstraints, "constraint set fails Slater's condition: " + slater.reason);
    }
    throw Error(ErrorCode::NotConverged,
                "dual ascent stopped after " + std::to_string(run.iterations) +
                    " iterations with projected gradient norm " + std::to_string(run.gradient_norm));
  }

  std::vector<double> f(g.size(), 0.0);
  for (std::size_t s = 0; s < cells.size(); ++s) f[cells[s]] = run.at.tilt[s];

  DualSolution sol;
  sol.lambda.assign(constraints.size() + 1, 0.0);
  sol.lambda[0] = run.at.log_partition - 1.0;
  for (std::size_t k = 0; k < kept.size(); ++k) sol.lambda[kept[k] + 1] = run.lambda[k];
  sol.value = run.at.value;
  sol.gradient_norm = run.gradient_norm;
  sol.iterations = run.iterations;
  sol.converged = run.converged;
  sol.support_restricted = face.restricted;

  Density f_star(grid, std::move(f));
  sol.active.push_back(0);
  for (std::size_t j = 0; j < constraints.size(); ++j) {
    const Constraint& c = constraints[j];
    if (!c.is_inequality() || std::abs(evaluate(c, f_star)) <= options.active_tolerance) {
      sol.active.push_back(j + 1);
    }
  }

  double minimum = kl_divergence(f_star.mass(), g);
  if (!alpha.empty()) minimum += expectation(f_star, alpha);
  return {std::move(f_star), std::move(sol), minimum};
}

ProjectionResult solve(const TiltSpec& spec, const SolverOptions& options) {
  return solve(spec.g.grid(), spec.g.mass(), spec.alpha, spec.constraints, options);
}

ProjectionResult maxent_solve(const Grid& grid, const ConstraintSet& constraints,
                              const SolverOptions& options) {
  const auto g = uniform(grid);
  return solve(grid, g.mass(), {}, constraints, options);
}

KktReport kkt_report(const TiltSpec& spec, const ProjectionResult& result) {
  KktReport r;
  const auto& f = result.f_star;
  const auto g = spec.g.mass();
  const auto& lambda = result.dual.lambda;
  r.primal_inequality = -std::numeric_limits<double>::infinity();
  r.min_inequality_multiplier = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < spec.constraints.size(); ++j) {
    const Constraint& c = spec.constraints[j];
    const double value = evaluate(c, f);
    if (c.is_inequality()) {
      r.primal_inequality = std::max(r.primal_inequality, value);
      r.min_inequality_multiplier = std::min(r.min_inequality_multiplier, lambda[j + 1]);
      r.complementary_slackness = std::max(r.complementary_slackness, std::abs(lambda[j + 1] * value));
    } else {
      r.primal_equality = std::max(r.primal_equality, std::abs(value));
    }
  }
  if (spec.constraints.inequality_count() == 0) {
    r.primal_inequality = 0.0;
    r.min_inequality_multiplier = 0.0;
  }
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] <= 1e-12) continue;
    double residual = std::log(f[i] / g[i]) + (spec.alpha.empty() ? 0.0 : spec.alpha[i]) + 1.0 + lambda[0];
    for (std::size_t j = 0; j < spec.constraints.size(); ++j) residual += lambda[j + 1] * spec.constraints[j].h[i];
    r.stationarity = std::max(r.stationarity, std::abs(residual));
  }
  double r2 = 1.0;
  for (std::size_t j : result.dual.active) r2 += lambda[j] * (j == 0 ? 1.0 : spec.constraints[j - 1].target);
  r.r2_gap = std::abs(result.minimum + r2);
  return r;
}

}  // namespace klctrl
