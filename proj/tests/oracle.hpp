#pragma once

// Independent primal reference for constrained KL projections: augmented
// Lagrangian outer loop with entropic mirror-descent inner solves on the
// simplex. Shares no code with the dual solver.

#include <cstddef>
#include <vector>

#include "klctrl/constraints.hpp"

namespace oracle {

struct Options {
  double rho = 20.0;
  std::size_t outer = 400;
  std::size_t inner = 200000;
  double inner_tolerance = 1e-14;
  double outer_tolerance = 1e-10;
};

/// argmin KL(f || g) + E_f[alpha] subject to `cs`, over f on the support of g.
std::vector<double> mirror_descent_projection(const std::vector<double>& g, const std::vector<double>& alpha,
                                              const klctrl::ConstraintSet& cs, const Options& options = {});

}  // namespace oracle
