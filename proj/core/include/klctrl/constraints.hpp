#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "klctrl/densities.hpp"

namespace klctrl {

/// |c_j[f]| at or below this value marks an inequality as active.
inline constexpr double kActiveTolerance = 1e-6;

enum class ConstraintKind { Equality, Inequality };

/// Expectation-form functional c[f] = E_f[h] - target. Inequalities are
/// stored in "<= 0" orientation.
struct Constraint {
  std::vector<double> h;
  double target = 0.0;
  ConstraintKind kind = ConstraintKind::Equality;
  std::string label;

  bool is_inequality() const noexcept { return kind == ConstraintKind::Inequality; }
};

/// Explicit constraints of one stage. Equalities are kept ahead of
/// inequalities so indices 1..n_e are equalities and n_e+1..n_e+n_l are
/// inequalities; normalization (index 0) is implicit.
class ConstraintSet {
 public:
  ConstraintSet() = default;
  ConstraintSet(std::size_t cells, std::vector<Constraint> constraints);

  void add(Constraint c);

  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::size_t equality_count() const noexcept { return n_eq_; }
  std::size_t inequality_count() const noexcept { return items_.size() - n_eq_; }
  /// Number of grid cells the h tables span (0 while empty).
  std::size_t cells() const noexcept { return cells_; }

  /// Zero-based; explicit constraint j (1-based in multiplier vectors) is at j-1.
  const Constraint& operator[](std::size_t i) const { return items_.at(i); }
  auto begin() const noexcept { return items_.begin(); }
  auto end() const noexcept { return items_.end(); }

 private:
  std::size_t cells_ = 0;
  std::size_t n_eq_ = 0;
  std::vector<Constraint> items_;
};

/// E[z^order] = target.
Constraint moment_equality(int order, double target, const Grid& grid);

enum class Sense { AtMost, AtLeast };

/// E[z^order] <= bound (AtMost) or E[z^order] >= bound (AtLeast, negated).
Constraint moment_inequality(int order, double bound, Sense sense, const Grid& grid);

/// lower <= E[z^order] <= upper as the pair (E - upper <= 0, -E + lower <= 0).
std::pair<Constraint, Constraint> rectangular_bound(int order, double lower, double upper,
                                                    const Grid& grid);

/// P(Z in subset) >= 1 - epsilon, encoded as h = -1_subset, target = -(1 - epsilon).
Constraint bound_probability(std::span<const std::size_t> subset, double epsilon, const Grid& grid);

double evaluate(const Constraint& c, const Density& f);

struct SlaterOptions {
  std::size_t max_iterations = 10000;
  double slack_tolerance = 1e-8;
};

/// Outcome of the constructive Slater check. On success `witness` satisfies
/// every equality within the slack tolerance and every inequality strictly.
/// `slack` is the smallest inequality slack reached (the certificate when
/// infeasible; +inf when there are no inequalities and the set is feasible).
struct SlaterReport {
  bool feasible = false;
  std::optional<Density> witness;
  double slack = 0.0;
  double equality_residual = 0.0;
  std::string reason;
};

SlaterReport check_slater(const ConstraintSet& constraints, const Density& g,
                          const SlaterOptions& options = {});

}  // namespace klctrl
