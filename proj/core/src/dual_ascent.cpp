#include "klctrl/dual_ascent.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace klctrl::detail {

ReducedDual::ReducedDual(std::vector<double> log_base, std::vector<std::vector<double>> h,
                         std::vector<double> target, std::vector<std::uint8_t> nonnegative)
    : log_base_(std::move(log_base)),
      h_(std::move(h)),
      target_(std::move(target)),
      nonnegative_(std::move(nonnegative)) {}

ReducedDual::Evaluation ReducedDual::evaluate(std::span<const double> lambda) const {
  Evaluation out;
  const std::size_t n = log_base_.size();
  const std::size_t m = target_.size();
  out.tilt.resize(n);

  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double e = log_base_[i];
    for (std::size_t j = 0; j < m; ++j) e -= lambda[j] * h_[j][i];
    out.tilt[i] = e;
    shift = std::max(shift, e);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.tilt[i] = std::exp(out.tilt[i] - shift);
    z += out.tilt[i];
  }
  for (double& t : out.tilt) t /= z;
  out.log_partition = shift + std::log(z);

  out.value = -out.log_partition;
  out.gradient.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    out.value -= lambda[j] * target_[j];
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out.tilt[i] * h_[j][i];
    out.gradient[j] = mean - target_[j];
  }
  return out;
}

std::vector<double> ReducedDual::covariance(std::span<const double> tilt,
                                            std::span<const double> means) const {
  const std::size_t m = target_.size();
  std::vector<double> cov(m * m, 0.0);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a; b < m; ++b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < tilt.size(); ++i) {
        acc += tilt[i] * (h_[a][i] - means[a]) * (h_[b][i] - means[b]);
      }
      cov[a * m + b] = acc;
      cov[b * m + a] = acc;
    }
  }
  return cov;
}

namespace {

void project(const ReducedDual& dual, std::vector<double>& lambda) {
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    if (dual.nonnegative(j) && lambda[j] < 0.0) lambda[j] = 0.0;
  }
}

double projected_gradient_norm(const ReducedDual& dual, std::span<const double> lambda,
                               std::span<const double> gradient) {
  double acc = 0.0;
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    double step = gradient[j];
    if (dual.nonnegative(j)) step = std::max(lambda[j] + gradient[j], 0.0) - lambda[j];
    acc += step * step;
  }
  return std::sqrt(acc);
}

/// Magnitude of rounding error in the dual value: it sums terms as large as
/// ln Z and lambda_j * H_j even when the result is small.
double rounding_noise(const ReducedDual& dual, std::span<const double> lambda, const ReducedDual::Evaluation& at) {
  double scale = 1.0 + std::abs(at.log_partition);
  for (std::size_t j = 0; j < lambda.size(); ++j) scale += std::abs(lambda[j] * dual.target(j));
  return 64.0 * std::numeric_limits<double>::epsilon() * scale;
}

std::vector<double> newton_direction(const ReducedDual& dual, std::span<const double> lambda,
                                     const ReducedDual::Evaluation& at, double active_eps) {
  const std::size_t m = lambda.size();
  std::vector<double> means(m);
  for (std::size_t j = 0; j < m; ++j) means[j] = at.gradient[j] + dual.target(j);
  const auto cov = dual.covariance(at.tilt, means);

  // Multipliers sitting on their bound with the gradient pushing outward
  // take a diagonally scaled gradient step; the rest get a Newton step.
  std::vector<std::size_t> free;
  std::vector<double> direction(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const bool pinned = dual.nonnegative(j) && lambda[j] <= active_eps && at.gradient[j] < 0.0;
    if (pinned) {
      const double scale = cov[j * m + j] > 0.0 ? cov[j * m + j] : 1.0;
      direction[j] = at.gradient[j] / scale;
    } else {
      free.push_back(j);
    }
  }
  if (free.empty()) return direction;

  const auto nf = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd hessian(nf, nf);
  Eigen::VectorXd rhs(nf);
  double trace = 0.0;
  for (Eigen::Index a = 0; a < nf; ++a) {
    rhs(a) = at.gradient[free[a]];
    for (Eigen::Index b = 0; b < nf; ++b) hessian(a, b) = cov[free[a] * m + free[b]];
    trace += hessian(a, a);
  }
  const double ridge = 1e-12 * std::max(trace / static_cast<double>(nf), 1e-300);
  hessian.diagonal().array() += ridge;
  const Eigen::VectorXd step = hessian.ldlt().solve(rhs);
  for (Eigen::Index a = 0; a < nf; ++a) direction[free[a]] = step(a);
  return direction;
}

}  // namespace

DualRun maximize(const ReducedDual& dual, std::vector<double> start, const DualOptions& options,
                 double value_ceiling) {
  DualRun run;
  run.lambda = std::move(start);
  run.lambda.resize(dual.dimension(), 0.0);
  project(dual, run.lambda);
  run.at = dual.evaluate(run.lambda);

  double gradient_step = 1.0;
  for (run.iterations = 0;; ++run.iterations) {
    run.gradient_norm = projected_gradient_norm(dual, run.lambda, run.at.gradient);
    if (run.gradient_norm <= options.gradient_tolerance) {
      run.converged = true;
      break;
    }
    if (run.at.value > value_ceiling) {
      run.unbounded = true;
      break;
    }
    if (run.iterations >= options.max_iterations) break;

    const bool newton = options.method == DualMethod::ProjectedNewton;
    std::vector<double> direction =
        newton ? newton_direction(dual, run.lambda, run.at, std::min(1e-8, run.gradient_norm))
               : run.at.gradient;

    bool accepted = false;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      double step = newton ? 1.0 : gradient_step;
      for (int k = 0; k < 200; ++k, step *= options.backtrack) {
        std::vector<double> trial(run.lambda);
        for (std::size_t j = 0; j < trial.size(); ++j) trial[j] += step * direction[j];
        project(dual, trial);
        double ascent = 0.0;
        for (std::size_t j = 0; j < trial.size(); ++j) {
          ascent += run.at.gradient[j] * (trial[j] - run.lambda[j]);
        }
        if (ascent <= 0.0 && k > 0) continue;
        auto at = dual.evaluate(trial);
        if (!std::isfinite(at.value)) continue;
        const bool armijo = at.value >= run.at.value + options.armijo * ascent;
        // Near the optimum the value change drowns in rounding of the terms
        // that make up the dual; accept a step that keeps the value flat
        // within that noise and shrinks the gradient.
        const bool flat = at.value >= run.at.value - rounding_noise(dual, run.lambda, run.at) &&
                          projected_gradient_norm(dual, trial, at.gradient) < 0.9 * run.gradient_norm;
        if (armijo || flat) {
          run.lambda = std::move(trial);
          run.at = std::move(at);
          if (!newton) gradient_step = std::min(step * 2.0, 1e12);
          accepted = true;
          break;
        }
      }
      if (!accepted && newton) {
        direction = run.at.gradient;  // fall back to steepest ascent once
      } else if (!accepted) {
        break;
      }
    }
    if (!accepted) break;  // stalled
  }
  return run;
}

// ---------------------------------------------------------------- faces

FaceReduction reduce_faces(std::span<const double> g, const ConstraintSet& constraints) {
  FaceReduction face;
  face.support.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) face.support[i] = g[i] > 0.0 ? 1 : 0;
  face.constant.assign(constraints.size(), 0);
  if (std::find(face.support.begin(), face.support.end(), std::uint8_t{1}) == face.support.end()) {
    face.infeasible = true;
    face.reason = "reference density has no support";
    return face;
  }

  bool changed = true;
  while (changed && !face.infeasible) {
    changed = false;
    for (std::size_t j = 0; j < constraints.size(); ++j) {
      const Constraint& c = constraints[j];
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      double scale = 1.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!face.support[i]) continue;
        lo = std::min(lo, c.h[i]);
        hi = std::max(hi, c.h[i]);
        scale = std::max(scale, std::abs(c.h[i]));
      }
      const double tol = 1e-12 * std::max(scale, std::abs(c.target));
      const double t = c.target;

      if (t < lo - tol || (!c.is_inequality() && t > hi + tol)) {
        face.infeasible = true;
        face.reason = "constraint " + std::to_string(j + 1) + " (" + c.label +
                      ") target lies outside the range of h on the support";
        return face;
      }
      if (hi - lo <= tol) {
        face.constant[j] = 1;
        if (c.is_inequality()) face.inequality_forced = face.inequality_forced || t <= lo + tol;
        continue;
      }
      auto restrict_to = [&](auto keep) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (face.support[i] && !keep(c.h[i])) face.support[i] = 0;
        }
        face.restricted = true;
        changed = true;
      };
      if (t <= lo + tol) {
        if (c.is_inequality()) face.inequality_forced = true;
        restrict_to([&](double v) { return v <= lo + tol; });
      } else if (!c.is_inequality() && t >= hi - tol) {
        restrict_to([&](double v) { return v >= hi - tol; });
      }
    }
  }
  return face;
}

ReducedDual make_reduced_dual(std::span<const double> g, std::span<const double> alpha,
                              const ConstraintSet& constraints, const FaceReduction& face,
                              std::span<const double> targets, std::vector<std::size_t>& kept,
                              std::vector<std::size_t>& support_cells) {
  support_cells.clear();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (face.support[i]) support_cells.push_back(i);
  }
  std::vector<double> log_base;
  log_base.reserve(support_cells.size());
  for (std::size_t i : support_cells) {
    log_base.push_back(std::log(g[i]) - (alpha.empty() ? 0.0 : alpha[i]));
  }

  kept.clear();
  std::vector<std::vector<double>> h;
  std::vector<double> target;
  std::vector<std::uint8_t> nonnegative;
  for (std::size_t j = 0; j < constraints.size(); ++j) {
    if (face.constant[j]) continue;
    kept.push_back(j);
    std::vector<double> column;
    column.reserve(support_cells.size());
    for (std::size_t i : support_cells) column.push_back(constraints[j].h[i]);
    h.push_back(std::move(column));
    target.push_back(targets.empty() ? constraints[j].target : targets[j]);
    nonnegative.push_back(constraints[j].is_inequality() ? 1 : 0);
  }
  return ReducedDual(std::move(log_base), std::move(h), std::move(target), std::move(nonnegative));
}

}  // namespace klctrl::detail
