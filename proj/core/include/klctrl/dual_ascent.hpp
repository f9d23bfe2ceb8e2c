#pragma once

// Maximization of the reduced Lagrange dual of the tilted KL projection,
//   D(l) = -<l, H> - ln sum_i exp(b_i - <l, h(z_i)>),   b_i = ln g_i - alpha_i,
// over l_j free (equalities) and l_j >= 0 (inequalities). Shared by the
// projection solver and the Slater check.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "klctrl/constraints.hpp"

namespace klctrl {

enum class DualMethod { ProjectedNewton, ProjectedGradient };

struct DualOptions {
  DualMethod method = DualMethod::ProjectedNewton;
  double gradient_tolerance = 1e-9;
  std::size_t max_iterations = 50000;
  double armijo = 1e-4;
  double backtrack = 0.5;
};

namespace detail {

/// Reduced dual restricted to the support cells; all arrays are compact.
class ReducedDual {
 public:
  ReducedDual(std::vector<double> log_base, std::vector<std::vector<double>> h,
              std::vector<double> target, std::vector<std::uint8_t> nonnegative);

  std::size_t dimension() const noexcept { return target_.size(); }
  std::size_t cells() const noexcept { return log_base_.size(); }

  struct Evaluation {
    double value = 0.0;
    double log_partition = 0.0;
    std::vector<double> gradient;
    std::vector<double> tilt;  // normalized tilted density on the support cells
  };

  Evaluation evaluate(std::span<const double> lambda) const;
  /// g-weighted covariance of the constraint functions under `tilt`.
  std::vector<double> covariance(std::span<const double> tilt,
                                 std::span<const double> means) const;

  bool nonnegative(std::size_t j) const { return nonnegative_[j] != 0; }
  double target(std::size_t j) const { return target_[j]; }

 private:
  std::vector<double> log_base_;
  std::vector<std::vector<double>> h_;
  std::vector<double> target_;
  std::vector<std::uint8_t> nonnegative_;
};

struct DualRun {
  std::vector<double> lambda;
  ReducedDual::Evaluation at;
  double gradient_norm = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
  bool unbounded = false;
};

/// Projected ascent from `start`. Stops when the projected-gradient norm
/// reaches the tolerance, or flags `unbounded` once the value exceeds
/// `value_ceiling` (a weak-duality bound on the primal optimum).
DualRun maximize(const ReducedDual& dual, std::vector<double> start, const DualOptions& options,
                 double value_ceiling = std::numeric_limits<double>::infinity());

/// Support restriction forced by constraints whose target sits on the
/// boundary of the range of h (e.g. P(U in S) >= 1, or E[U] = max grid value).
/// Such constraints push the dual multiplier to infinity; restricting the
/// support and dropping the now-constant constraint is the limit.
struct FaceReduction {
  std::vector<std::uint8_t> support;   // per grid cell
  std::vector<std::uint8_t> constant;  // per explicit constraint: h constant on support
  bool infeasible = false;
  bool restricted = false;
  bool inequality_forced = false;  // an inequality has no strict slack left
  std::string reason;
};

FaceReduction reduce_faces(std::span<const double> g, const ConstraintSet& constraints);

/// Builds the reduced dual over the support of `face`, skipping constant
/// constraints. `targets` overrides the constraint targets when non-empty.
/// `kept` receives the explicit-constraint index of every dual coordinate.
ReducedDual make_reduced_dual(std::span<const double> g, std::span<const double> alpha,
                              const ConstraintSet& constraints, const FaceReduction& face,
                              std::span<const double> targets, std::vector<std::size_t>& kept,
                              std::vector<std::size_t>& support_cells);

}  // namespace detail
}  // namespace klctrl
