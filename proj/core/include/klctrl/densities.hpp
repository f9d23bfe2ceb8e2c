#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "klctrl/error.hpp"

namespace klctrl {

/// Tolerance on total mass for every Density and every conditional row.
inline constexpr double kMassTolerance = 1e-12;

using Rng = std::mt19937_64;

/// Uniform draw in [0, 1) built from the raw 64-bit engine output so that
/// sequences are identical across standard library implementations.
double uniform01(Rng& rng);

/// One axis of a rectangular grid: `cells` equal-width cells on [lower, upper].
class Grid {
 public:
  Grid(double lower, double upper, std::size_t cells);

  double lower() const noexcept { return lower_; }
  double upper() const noexcept { return upper_; }
  std::size_t size() const noexcept { return centers_.size(); }
  double width() const noexcept { return width_; }
  double center(std::size_t i) const { return centers_.at(i); }
  std::span<const double> centers() const noexcept { return centers_; }

  /// Cell containing `value`; the upper bound belongs to the last cell.
  std::optional<std::size_t> locate(double value) const;
  /// Index of the closest cell center, clamped to the grid.
  std::size_t nearest(double value) const;

  bool operator==(const Grid& other) const noexcept {
    return lower_ == other.lower_ && upper_ == other.upper_ &&
           centers_.size() == other.centers_.size();
  }

 private:
  double lower_;
  double upper_;
  double width_;
  std::vector<double> centers_;
};

/// Normalized, nonnegative mass vector on a 1-D grid. Mass already includes
/// the cell width, so integrals are plain sums.
class Density {
 public:
  Density(Grid grid, std::vector<double> mass);

  const Grid& grid() const noexcept { return grid_; }
  std::span<const double> mass() const noexcept { return mass_; }
  double operator[](std::size_t i) const { return mass_[i]; }
  std::size_t size() const noexcept { return mass_.size(); }

 private:
  Grid grid_;
  std::vector<double> mass_;
};

Density normalize(std::span<const double> raw, const Grid& grid);
Density uniform(const Grid& grid);
Density point_mass(const Grid& grid, std::size_t cell);

/// Sum of h(cell) * mass(cell); h is tabulated per cell.
double expectation(const Density& f, std::span<const double> h);

template <typename Fn>
double expectation_of(const Density& f, Fn&& h) {
  std::vector<double> table;
  table.reserve(f.size());
  for (double z : f.grid().centers()) table.push_back(h(z));
  return expectation(f, table);
}

double mean_mode(const Density& f);
double variance(const Density& f);

/// KL(f || g) = sum f ln(f/g) over cells with f > 0.
/// With `support_floor` > 0, zero cells of g are raised to the floor and g is
/// renormalized; with the default of 0 a cell with f > 0 = g throws
/// AbsContinuityViolation.
double kl_divergence(const Density& f, const Density& g, double support_floor = 0.0);
double kl_divergence(std::span<const double> f, std::span<const double> g,
                     double support_floor = 0.0);

std::size_t sample_index(const Density& f, Rng& rng);
double sample(const Density& f, Rng& rng);
std::size_t sample_index(std::span<const double> mass, Rng& rng);

/// Multi-dimensional density, row-major with the last axis fastest.
class JointDensity {
 public:
  JointDensity(std::vector<Grid> grids, std::vector<double> mass);

  std::size_t rank() const noexcept { return grids_.size(); }
  const std::vector<Grid>& grids() const noexcept { return grids_; }
  std::span<const double> mass() const noexcept { return mass_; }
  std::vector<std::size_t> shape() const;

  std::size_t flat_index(std::span<const std::size_t> cells) const;
  std::vector<std::size_t> unflatten(std::size_t flat) const;

 private:
  std::vector<Grid> grids_;
  std::vector<double> mass_;
};

/// A Density over `target` for each cell of the product of `conditioning`
/// grids (row-major, first conditioning axis slowest). Rows that had no
/// support in the source joint are uniform-filled and flagged.
class ConditionalDensity {
 public:
  ConditionalDensity(std::vector<Grid> conditioning, Grid target, std::vector<double> table,
                     std::vector<std::uint8_t> filled = {});

  const std::vector<Grid>& conditioning() const noexcept { return conditioning_; }
  const Grid& target() const noexcept { return target_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t row_size() const noexcept { return target_.size(); }

  std::span<const double> row(std::size_t r) const {
    return {table_.data() + r * target_.size(), target_.size()};
  }
  Density row_density(std::size_t r) const;
  std::span<const double> table() const noexcept { return table_; }

  std::size_t row_index(std::span<const std::size_t> cells) const;

  bool filled(std::size_t r) const { return !filled_.empty() && filled_[r] != 0; }
  const std::vector<std::uint8_t>& filled_flags() const noexcept { return filled_; }
  std::size_t filled_count() const;

 private:
  std::vector<Grid> conditioning_;
  Grid target_;
  std::size_t rows_;
  std::vector<double> table_;
  std::vector<std::uint8_t> filled_;
};

/// Sums mass over every axis not listed in `kept`; result axes follow `kept`.
JointDensity marginalize(const JointDensity& joint, std::span<const std::size_t> kept);
Density marginal(const JointDensity& joint, std::size_t axis);

/// Conditions the joint on `conditioning` axes; exactly one axis must remain.
ConditionalDensity condition(const JointDensity& joint,
                             std::span<const std::size_t> conditioning);

/// Table of KL(f row || g row); throws AbsContinuityViolation with the row.
std::vector<double> kl_conditional(const ConditionalDensity& f, const ConditionalDensity& g,
                                   double support_floor = 0.0);

struct ChainRuleTerms {
  double marginal_kl;
  double expected_conditional_kl;
};

/// Splits KL(f || g) of two joints into KL of the marginals over the first
/// `split` axes plus the f-expected KL of the conditionals of the rest.
ChainRuleTerms chain_rule_terms(const JointDensity& f, const JointDensity& g,
                                std::size_t split);

double kl_divergence(const JointDensity& f, const JointDensity& g);

}  // namespace klctrl
