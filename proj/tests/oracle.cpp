#include "oracle.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

std::vector<double> mirror_descent_projection(const std::vector<double>& g, const std::vector<double>& alpha,
                                              const klctrl::ConstraintSet& cs, const Options& options) {
  const std::size_t n = g.size();
  const std::size_t m = cs.size();
  std::vector<double> mult(m, 0.0);
  std::vector<double> f(g);
  const double rho = options.rho;

  double hmax = 0.0;
  for (const auto& c : cs)
    for (double v : c.h) hmax = std::max(hmax, std::abs(v));
  const double eta = 1.0 / (1.0 + rho * static_cast<double>(m) * hmax * hmax);

  auto violation = [&](std::size_t j) {
    double e = -cs[j].target;
    for (std::size_t i = 0; i < n; ++i) e += f[i] * cs[j].h[i];
    return e;
  };

  std::vector<double> grad(n), logf(n);
  for (std::size_t outer = 0; outer < options.outer; ++outer) {
    for (std::size_t it = 0; it < options.inner; ++it) {
      std::vector<double> weight(m);
      for (std::size_t j = 0; j < m; ++j) {
        const double w = mult[j] + rho * violation(j);
        weight[j] = cs[j].is_inequality() ? std::max(0.0, w) : w;
      }
      // Mirror step on the entropy geometry:
      //   f <- f^(1-eta) g^eta exp(-eta (alpha + sum_j weight_j h_j)), renormalized.
      double top = -INFINITY;
      for (std::size_t i = 0; i < n; ++i) {
        if (g[i] <= 0.0) continue;
        double s = alpha.empty() ? 0.0 : alpha[i];
        for (std::size_t j = 0; j < m; ++j) s += weight[j] * cs[j].h[i];
        logf[i] = (1.0 - eta) * std::log(f[i]) + eta * (std::log(g[i]) - s);
        top = std::max(top, logf[i]);
      }
      double total = 0.0;
      std::vector<double> next(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (g[i] <= 0.0) continue;
        next[i] = std::exp(logf[i] - top);
        total += next[i];
      }
      double change = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        next[i] /= total;
        change += std::abs(next[i] - f[i]);
      }
      f.swap(next);
      if (change < options.inner_tolerance) break;
    }
    double worst = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = violation(j);
      if (cs[j].is_inequality()) {
        mult[j] = std::max(0.0, mult[j] + rho * v);
        worst = std::max(worst, mult[j] > 0.0 ? std::abs(v) : std::max(v, 0.0));
      } else {
        mult[j] += rho * v;
        worst = std::max(worst, std::abs(v));
      }
    }
    if (worst < options.outer_tolerance) break;
  }
  return f;
}

}  // namespace oracle
