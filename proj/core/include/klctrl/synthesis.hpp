#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "klctrl/constraints.hpp"
#include "klctrl/densities.hpp"
#include "klctrl/projection.hpp"

namespace klctrl {

using ConditionalPtr = std::shared_ptr<const ConditionalDensity>;

/// Builds the explicit constraints of stage `k` (1-based) at previous state
/// cell `x`; `g_row` is the example policy row at that state, so targets may
/// depend on its moments.
using ConstraintRule =
    std::function<ConstraintSet(std::size_t k, std::size_t x, const Density& g_row)>;

/// Rule returning the same constraint set at every state.
ConstraintRule fixed_constraints(ConstraintSet constraints);

/// Rule for constraints whose targets are moments of the example row:
/// mean equal to the row mean and variance `variance_factor` times the row
/// variance (E[U^2] = factor * Var_g + mean_g^2).
ConstraintRule moment_matching_rule(const Grid& control, double variance_factor);

/// Transition models f(x_k | x_{k-1}, u_k) use conditioning grids
/// {state, control} (state slowest) and target the state grid. Policies
/// condition on {state} and target the control grid. Stationary problems
/// share one pointer across stages.
struct SynthesisProblem {
  std::size_t horizon = 0;
  Grid state;
  Grid control;
  std::vector<ConditionalPtr> system;     // f_X per stage, size horizon
  std::vector<ConditionalPtr> reference;  // g_X per stage
  std::vector<ConditionalPtr> example;    // g_U per stage
  std::vector<ConstraintRule> constraints;  // per stage; empty rule means none
  Density initial;                          // prior over x_0
};

struct SynthesisOptions {
  SolverOptions solver;
  /// Floor applied to zero cells of g_X when computing alpha-hat (0 = strict).
  double support_floor = 0.0;
  /// Throw NotConverged after the recursion when any state failed to converge.
  bool fail_on_nonconvergence = true;
};

/// Per-stage tables, indexed [x_prev * |U| + u] for the (u, x_prev) tables
/// and [x_prev] for ln_gamma (the value carrier produced at this stage).
struct StageCache {
  std::size_t stage = 0;
  std::vector<double> alpha_hat;
  std::vector<double> beta_hat;
  std::vector<double> omega_hat;
  std::vector<double> ln_gamma;
  std::vector<DualSolution> duals;
  std::vector<std::vector<double>> targets;  // constraint targets per state
};

struct Policy {
  std::vector<ConditionalDensity> stages;  // stages[k - 1] is the stage-k policy
};

struct CellFlag {
  std::size_t stage;
  std::size_t state;
};

struct SynthesisReport {
  std::vector<double> b_star;           // index k - 1
  std::vector<Density> state_marginals;  // p_X^0 .. p_X^n
  std::vector<StageCache> stages;        // index k - 1
  std::vector<CellFlag> unconverged;
  std::vector<std::size_t> filled_example_rows;  // per stage, uniform-filled g_U rows
  double closed_loop_kl = 0.0;
};

struct SynthesisResult {
  Policy policy;
  SynthesisReport report;
};

/// KL of one transition row pair.
double alpha_hat(std::span<const double> f_row, std::span<const double> g_row,
                 double support_floor = 0.0);

/// -E_{f row}[ln gamma].
double beta_hat(std::span<const double> f_row, std::span<const double> ln_gamma);

/// (lambda_0 + 1) + sum over active explicit constraints of lambda_j * H_j.
double gamma_update(const DualSolution& dual, std::span<const double> targets);

/// -E_{p_prev}[ln gamma].
double minimum_b(const Density& p_prev, std::span<const double> ln_gamma);

/// alpha-hat over all (x_prev, u) rows of a transition pair.
std::vector<double> alpha_table(const ConditionalDensity& system, const ConditionalDensity& reference,
                                double support_floor = 0.0);

void validate(const SynthesisProblem& problem);

SynthesisResult synthesize(const SynthesisProblem& problem, const SynthesisOptions& options = {});

/// p^k(x') = sum_{x,u} f_X(x' | x, u) policy(u | x) p^{k-1}(x).
Density propagate(const Density& prev, const ConditionalDensity& policy,
                  const ConditionalDensity& system);

/// KL(f^n || g^n) of the closed loop under `policy`, accumulated forward as
/// sum_k E_{p^{k-1}}[KL(policy || g_U) + E_policy[alpha-hat]].
double kl_closed_loop(const Policy& policy, const SynthesisProblem& problem,
                      double support_floor = 0.0);

}  // namespace klctrl
