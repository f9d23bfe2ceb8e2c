#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "klctrl/constraints.hpp"
#include "klctrl/densities.hpp"
#include "klctrl/dual_ascent.hpp"

namespace klctrl {

/// Problem data of one constrained projection:
///   minimize KL(f || g) + E_f[alpha]  subject to `constraints`.
struct TiltSpec {
  Density g;
  std::vector<double> alpha;  // nats, one entry per cell of g's grid
  ConstraintSet constraints;
};

struct SolverOptions {
  DualOptions dual;
  double active_tolerance = kActiveTolerance;
  /// Starting multipliers for the explicit constraints (empty: all zero).
  std::vector<double> initial_lambda;
  /// When false, a run that hits the iteration cap returns its last iterate
  /// with `converged == false` instead of throwing NotConverged.
  bool require_convergence = true;
};

/// Multipliers of the projection. `lambda[0]` is the normalization
/// multiplier, `lambda[j]` belongs to explicit constraint j (1-based).
struct DualSolution {
  std::vector<double> lambda;
  std::vector<std::size_t> active;  // always contains 0 and every equality
  double value = 0.0;
  double gradient_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  /// A boundary target forced part of g's support to zero mass.
  bool support_restricted = false;
};

struct ProjectionResult {
  Density f_star;
  DualSolution dual;
  double minimum = 0.0;  // KL(f* || g) + E_f*[alpha]
};

/// g * exp(-1 - alpha - <lambda, h>) with lambda = [lambda_0, lambda_1, ...].
std::vector<double> tilted_density(const TiltSpec& spec, std::span<const double> lambda);

/// Full Lagrange dual; lambda includes lambda_0.
double dual_value(const TiltSpec& spec, std::span<const double> lambda);

/// Dual with lambda_0 eliminated; `rest` holds lambda_1..lambda_m.
double dual_value_reduced(const TiltSpec& spec, std::span<const double> rest);

/// The normalization multiplier implied by `rest`.
double lambda0_of(const TiltSpec& spec, std::span<const double> rest);

ProjectionResult solve(const TiltSpec& spec, const SolverOptions& options = {});

/// Row-level entry point used by the synthesis loop; `g` must be a valid
/// mass vector on `grid`.
ProjectionResult solve(const Grid& grid, std::span<const double> g, std::span<const double> alpha,
                       const ConstraintSet& constraints, const SolverOptions& options = {});

/// Constrained maximum entropy: the projection of the uniform density with
/// alpha = 0.
ProjectionResult maxent_solve(const Grid& grid, const ConstraintSet& constraints,
                              const SolverOptions& options = {});

/// Sum of lambda_j * c_j[f] over active inequalities, stationarity residual
/// and related KKT diagnostics of a solve output.
struct KktReport {
  double primal_equality = 0.0;    // max |c_j| over equalities
  double primal_inequality = 0.0;  // max c_j over inequalities (<= 0 is feasible)
  double min_inequality_multiplier = 0.0;
  double complementary_slackness = 0.0;  // max |lambda_j c_j| over inequalities
  double stationarity = 0.0;  // max |ln(f/g) + alpha + <lambda, h> + 1| where f > 1e-12
  double r2_gap = 0.0;        // |minimum + (1 + sum_{active} lambda_j H_j)|
};

KktReport kkt_report(const TiltSpec& spec, const ProjectionResult& result);

}  // namespace klctrl
