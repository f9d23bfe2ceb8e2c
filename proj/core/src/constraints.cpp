#include "klctrl/constraints.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "klctrl/dual_ascent.hpp"

namespace klctrl {

namespace {

std::vector<double> powers(const Grid& grid, int order) {
  if (order < 1) throw Error(ErrorCode::BadConfig, "moment order must be at least 1");
  std::vector<double> h;
  h.reserve(grid.size());
  for (double z : grid.centers()) h.push_back(std::pow(z, order));
  return h;
}

}  // namespace

ConstraintSet::ConstraintSet(std::size_t cells, std::vector<Constraint> constraints) : cells_(cells) {
  for (auto& c : constraints) add(std::move(c));
}

void ConstraintSet::add(Constraint c) {
  if (c.h.empty()) throw Error(ErrorCode::BadConfig, "constraint has an empty h table");
  if (cells_ == 0) cells_ = c.h.size();
  if (c.h.size() != cells_) throw Error(ErrorCode::GridMismatch, "constraint h table size differs from the set");
  for (std::size_t i = 0; i < c.h.size(); ++i) {
    if (!std::isfinite(c.h[i])) throw Error(ErrorCode::NonFiniteH, "constraint h is not finite", i);
  }
  if (!std::isfinite(c.target)) throw Error(ErrorCode::BadConfig, "constraint target is not finite");
  if (c.is_inequality()) {
    items_.push_back(std::move(c));
  } else {
    items_.insert(items_.begin() + static_cast<std::ptrdiff_t>(n_eq_), std::move(c));
    ++n_eq_;
  }
}

Constraint moment_equality(int order, double target, const Grid& grid) {
  return {powers(grid, order), target, ConstraintKind::Equality,
          "E[z^" + std::to_string(order) + "] = target"};
}

Constraint moment_inequality(int order, double bound, Sense sense, const Grid& grid) {
  auto h = powers(grid, order);
  if (sense == Sense::AtMost) {
    return {std::move(h), bound, ConstraintKind::Inequality, "E[z^" + std::to_string(order) + "] <= bound"};
  }
  for (double& v : h) v = -v;
  return {std::move(h), -bound, ConstraintKind::Inequality, "E[z^" + std::to_string(order) + "] >= bound"};
}

std::pair<Constraint, Constraint> rectangular_bound(int order, double lower, double upper,
                                                    const Grid& grid) {
  if (lower > upper) throw Error(ErrorCode::EmptyInterval, "rectangular bound has lower > upper");
  return {moment_inequality(order, upper, Sense::AtMost, grid),
          moment_inequality(order, lower, Sense::AtLeast, grid)};
}

Constraint bound_probability(std::span<const std::size_t> subset, double epsilon, const Grid& grid) {
  if (subset.empty()) throw Error(ErrorCode::BadConfig, "probability bound needs a nonempty subset");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error(ErrorCode::BadConfig, "epsilon must lie in [0, 1]");
  std::vector<double> h(grid.size(), 0.0);
  for (std::size_t cell : subset) {
    if (cell >= grid.size()) throw Error(ErrorCode::BadAxis, "subset cell outside grid", cell);
    h[cell] = -1.0;
  }
  return {std::move(h), -(1.0 - epsilon), ConstraintKind::Inequality, "P(Z in subset) >= 1 - eps"};
}

double evaluate(const Constraint& c, const Density& f) { return expectation(f, c.h) - c.target; }

// ---------------------------------------------------------------- Slater

namespace {

struct Attempt {
  bool feasible = false;
  std::vector<double> witness;  // full grid
};

}  // namespace

SlaterReport check_slater(const ConstraintSet& constraints, const Density& g,
                          const SlaterOptions& options) {
  SlaterReport report;
  if (!constraints.empty() && constraints.cells() != g.size()) {
    throw Error(ErrorCode::GridMismatch, "constraint tables and reference density differ in size");
  }
  const auto gm = g.mass();
  const auto face = detail::reduce_faces(gm, constraints);
  if (face.infeasible) {
    report.slack = -std::numeric_limits<double>::infinity();
    report.reason = face.reason;
    return report;
  }
  if (face.inequality_forced) {
    report.slack = 0.0;
    report.reason = "an inequality can only hold with equality on the support";
    return report;
  }

  std::vector<std::size_t> kept;
  std::vector<std::size_t> cells;
  double min_g = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < gm.size(); ++i) {
    if (face.support[i]) min_g = std::min(min_g, gm[i]);
  }
  // Weak duality: any feasible f has KL(f || g) <= -ln(min g) on the support.
  const double ceiling = -std::log(min_g) + 1.0;

  DualOptions dual_options;
  dual_options.gradient_tolerance = std::min(1e-10, options.slack_tolerance * 0.1);
  std::size_t budget = options.max_iterations;

  std::vector<double> targets(constraints.size());
  for (std::size_t j = 0; j < constraints.size(); ++j) targets[j] = constraints[j].target;

  auto attempt = [&](double shift) {
    Attempt out;
    std::vector<double> shifted(targets);
    for (std::size_t j = 0; j < constraints.size(); ++j) {
      if (constraints[j].is_inequality() && !face.constant[j]) shifted[j] -= shift;
    }
    const auto dual = detail::make_reduced_dual(gm, {}, constraints, face, shifted, kept, cells);
    dual_options.max_iterations = std::min<std::size_t>(budget, 500);
    auto run = detail::maximize(dual, {}, dual_options, ceiling);
    budget -= std::min(budget, std::max<std::size_t>(run.iterations, 1));
    out.feasible = run.converged;
    if (run.converged) {
      out.witness.assign(gm.size(), 0.0);
      for (std::size_t s = 0; s < cells.size(); ++s) out.witness[cells[s]] = run.at.tilt[s];
    }
    return out;
  };

  auto slack_of = [&](const std::vector<double>& w) {
    double slack = std::numeric_limits<double>::infinity();
    double residual = 0.0;
    for (const auto& c : constraints) {
      double e = -c.target;
      for (std::size_t i = 0; i < w.size(); ++i) e += w[i] * c.h[i];
      if (c.is_inequality()) {
        slack = std::min(slack, -e);
      } else {
        residual = std::max(residual, std::abs(e));
      }
    }
    return std::pair{slack, residual};
  };

  Attempt best;
  if (constraints.inequality_count() == 0) {
    best = attempt(0.0);
    if (!best.feasible) {
      report.slack = -std::numeric_limits<double>::infinity();
      report.reason = "equality constraints admit no density on the support";
      return report;
    }
  } else {
    // Largest conceivable slack: every inequality moved to the minimum of h.
    double ceiling_slack = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < constraints.size(); ++j) {
      const Constraint& c = constraints[j];
      if (!c.is_inequality() || face.constant[j]) continue;
      double lo = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < gm.size(); ++i) {
        if (face.support[i]) lo = std::min(lo, c.h[i]);
      }
      ceiling_slack = std::min(ceiling_slack, c.target - lo);
    }
    if (!std::isfinite(ceiling_slack)) ceiling_slack = 0.0;  // only constant inequalities

    double feasible_shift = 0.0;
    double infeasible_shift = ceiling_slack;
    if (ceiling_slack > 0.0) {
      for (double shift = 0.5 * ceiling_slack; shift >= 0.1 * options.slack_tolerance && budget > 0;
           shift *= 0.5) {
        auto a = attempt(shift);
        if (a.feasible) {
          feasible_shift = shift;
          best = std::move(a);
          break;
        }
        infeasible_shift = shift;
      }
      for (int step = 0; step < 30 && best.feasible && budget > 0; ++step) {
        const double mid = 0.5 * (feasible_shift + infeasible_shift);
        if (infeasible_shift - feasible_shift <= 1e-6 * infeasible_shift) break;
        auto a = attempt(mid);
        if (a.feasible) {
          feasible_shift = mid;
          best = std::move(a);
        } else {
          infeasible_shift = mid;
        }
      }
    } else {
      best = attempt(0.0);
    }
    if (!best.feasible) {
      report.slack = feasible_shift;
      report.reason = "no density with strictly positive inequality slack was found";
      return report;
    }
  }

  const auto [slack, residual] = slack_of(best.witness);
  report.slack = slack;
  report.equality_residual = residual;
  if (residual > options.slack_tolerance) {
    report.reason = "equality residual of the best witness exceeds tolerance";
    return report;
  }
  if (slack <= options.slack_tolerance) {
    report.reason = "best witness does not satisfy the inequalities strictly";
    return report;
  }
  report.feasible = true;
  report.witness = normalize(best.witness, g.grid());
  return report;
}

}  // namespace klctrl
