#include "klctrl/densities.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace klctrl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidGrid: return "InvalidGrid";
    case ErrorCode::InvalidDensity: return "InvalidDensity";
    case ErrorCode::AllZero: return "AllZero";
    case ErrorCode::NegativeMass: return "NegativeMass";
    case ErrorCode::NonFiniteH: return "NonFiniteH";
    case ErrorCode::BadAxis: return "BadAxis";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::AbsContinuityViolation: return "AbsContinuityViolation";
    case ErrorCode::EmptyInterval: return "EmptyInterval";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::DegenerateSupport: return "DegenerateSupport";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::InfeasibleConstraints: return "InfeasibleConstraints";
    case ErrorCode::NoInRangeSamples: return "NoInRangeSamples";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------- Grid

Grid::Grid(double lower, double upper, std::size_t cells)
    : lower_(lower), upper_(upper), width_(0.0) {
  if (!std::isfinite(lower) || !std::isfinite(upper) || !(lower < upper)) {
    throw Error(ErrorCode::InvalidGrid, "lower bound must be finite and below upper bound");
  }
  if (cells < 2) throw Error(ErrorCode::InvalidGrid, "a grid needs at least 2 cells");
  width_ = (upper - lower) / static_cast<double>(cells);
  centers_.resize(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    centers_[i] = lower + (static_cast<double>(i) + 0.5) * width_;
  }
}

std::optional<std::size_t> Grid::locate(double value) const {
  if (!(value >= lower_ && value <= upper_)) return std::nullopt;
  auto cell = static_cast<std::size_t>(std::floor((value - lower_) / width_));
  return std::min(cell, centers_.size() - 1);
}

std::size_t Grid::nearest(double value) const {
  if (!(value > lower_)) return 0;
  if (value >= upper_) return centers_.size() - 1;
  auto cell = static_cast<std::size_t>(std::floor((value - lower_) / width_));
  return std::min(cell, centers_.size() - 1);
}

// ---------------------------------------------------------------- Density

namespace {

void check_mass(std::span<const double> mass, const char* what) {
  double total = 0.0;
  for (double m : mass) {
    if (!(m >= 0.0) || !std::isfinite(m)) {
      throw Error(ErrorCode::NegativeMass, std::string(what) + " has a negative or non-finite entry");
    }
    total += m;
  }
  if (std::abs(total - 1.0) > kMassTolerance) {
    throw Error(ErrorCode::InvalidDensity,
                std::string(what) + " does not sum to 1 (sum = " + std::to_string(total) + ")");
  }
}

void require_same_grid(const Grid& a, const Grid& b) {
  if (!(a == b)) throw Error(ErrorCode::GridMismatch, "densities live on different grids");
}

}  // namespace

Density::Density(Grid grid, std::vector<double> mass) : grid_(std::move(grid)), mass_(std::move(mass)) {
  if (mass_.size() != grid_.size()) {
    throw Error(ErrorCode::InvalidDensity, "mass vector length differs from grid size");
  }
  check_mass(mass_, "density");
}

Density normalize(std::span<const double> raw, const Grid& grid) {
  if (raw.size() != grid.size()) {
    throw Error(ErrorCode::InvalidDensity, "mass vector length differs from grid size");
  }
  double total = 0.0;
  for (double v : raw) {
    if (v < 0.0 || !std::isfinite(v)) throw Error(ErrorCode::NegativeMass, "negative or non-finite entry");
    total += v;
  }
  if (total == 0.0) throw Error(ErrorCode::AllZero, "every entry is zero");
  std::vector<double> mass(raw.begin(), raw.end());
  for (double& m : mass) m /= total;
  return Density(grid, std::move(mass));
}

Density uniform(const Grid& grid) {
  return Density(grid, std::vector<double>(grid.size(), 1.0 / static_cast<double>(grid.size())));
}

Density point_mass(const Grid& grid, std::size_t cell) {
  if (cell >= grid.size()) throw Error(ErrorCode::BadAxis, "cell outside grid", cell);
  std::vector<double> mass(grid.size(), 0.0);
  mass[cell] = 1.0;
  return Density(grid, std::move(mass));
}

double expectation(const Density& f, std::span<const double> h) {
  if (h.size() != f.size()) throw Error(ErrorCode::GridMismatch, "h table length differs from grid");
  double acc = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (f[i] == 0.0) continue;
    if (!std::isfinite(h[i])) throw Error(ErrorCode::NonFiniteH, "h is not finite on a supported cell", i);
    acc += h[i] * f[i];
  }
  return acc;
}

double mean_mode(const Density& f) { return expectation(f, f.grid().centers()); }

double variance(const Density& f) {
  const double m = mean_mode(f);
  return expectation_of(f, [m](double z) { return (z - m) * (z - m); });
}

double kl_divergence(std::span<const double> f, std::span<const double> g, double support_floor) {
  if (f.size() != g.size()) throw Error(ErrorCode::GridMismatch, "densities have different sizes");
  if (support_floor > 0.0) {
    std::size_t zeros = 0;
    for (double v : g) zeros += (v == 0.0);
    const double scale = 1.0 / (1.0 + static_cast<double>(zeros) * support_floor);
    double acc = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f[i] == 0.0) continue;
      const double gi = (g[i] == 0.0 ? support_floor : g[i]) * scale;
      acc += f[i] * std::log(f[i] / gi);
    }
    return acc;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] == 0.0) continue;
    if (g[i] == 0.0) {
      throw Error(ErrorCode::AbsContinuityViolation, "f has mass where g has none", i);
    }
    acc += f[i] * std::log(f[i] / g[i]);
  }
  return acc;
}

double kl_divergence(const Density& f, const Density& g, double support_floor) {
  require_same_grid(f.grid(), g.grid());
  return kl_divergence(f.mass(), g.mass(), support_floor);
}

std::size_t sample_index(std::span<const double> mass, Rng& rng) {
  const double u = uniform01(rng);
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < mass.size(); ++i) {
    if (mass[i] <= 0.0) continue;
    cumulative += mass[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  // Rounding left the cumulative sum just below u.
  return last_positive;
}

std::size_t sample_index(const Density& f, Rng& rng) { return sample_index(f.mass(), rng); }

double sample(const Density& f, Rng& rng) { return f.grid().center(sample_index(f, rng)); }

// ---------------------------------------------------------------- JointDensity

JointDensity::JointDensity(std::vector<Grid> grids, std::vector<double> mass)
    : grids_(std::move(grids)), mass_(std::move(mass)) {
  if (grids_.empty()) throw Error(ErrorCode::BadAxis, "joint density needs at least one axis");
  std::size_t cells = 1;
  for (const auto& g : grids_) cells *= g.size();
  if (cells != mass_.size()) throw Error(ErrorCode::InvalidDensity, "mass size differs from grid product");
  check_mass(mass_, "joint density");
}

std::vector<std::size_t> JointDensity::shape() const {
  std::vector<std::size_t> s;
  for (const auto& g : grids_) s.push_back(g.size());
  return s;
}

std::size_t JointDensity::flat_index(std::span<const std::size_t> cells) const {
  if (cells.size() != grids_.size()) throw Error(ErrorCode::BadAxis, "index rank mismatch");
  std::size_t flat = 0;
  for (std::size_t a = 0; a < cells.size(); ++a) flat = flat * grids_[a].size() + cells[a];
  return flat;
}

std::vector<std::size_t> JointDensity::unflatten(std::size_t flat) const {
  std::vector<std::size_t> cells(grids_.size());
  for (std::size_t a = grids_.size(); a-- > 0;) {
    cells[a] = flat % grids_[a].size();
    flat /= grids_[a].size();
  }
  return cells;
}

// ---------------------------------------------------------------- ConditionalDensity

ConditionalDensity::ConditionalDensity(std::vector<Grid> conditioning, Grid target,
                                       std::vector<double> table, std::vector<std::uint8_t> filled)
    : conditioning_(std::move(conditioning)),
      target_(std::move(target)),
      rows_(1),
      table_(std::move(table)),
      filled_(std::move(filled)) {
  for (const auto& g : conditioning_) rows_ *= g.size();
  if (table_.size() != rows_ * target_.size()) {
    throw Error(ErrorCode::InvalidDensity, "conditional table size differs from grid product");
  }
  if (!filled_.empty() && filled_.size() != rows_) {
    throw Error(ErrorCode::InvalidDensity, "fill flags size differs from row count");
  }
  for (std::size_t r = 0; r < rows_; ++r) check_mass(row(r), "conditional row");
}

Density ConditionalDensity::row_density(std::size_t r) const {
  auto m = row(r);
  return Density(target_, std::vector<double>(m.begin(), m.end()));
}

std::size_t ConditionalDensity::row_index(std::span<const std::size_t> cells) const {
  if (cells.size() != conditioning_.size()) throw Error(ErrorCode::BadAxis, "index rank mismatch");
  std::size_t flat = 0;
  for (std::size_t a = 0; a < cells.size(); ++a) flat = flat * conditioning_[a].size() + cells[a];
  return flat;
}

std::size_t ConditionalDensity::filled_count() const {
  return static_cast<std::size_t>(std::count(filled_.begin(), filled_.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------- joint operations

namespace {

std::vector<std::size_t> remaining_axes(std::size_t rank, std::span<const std::size_t> taken) {
  std::vector<std::size_t> rest;
  for (std::size_t a = 0; a < rank; ++a) {
    if (std::find(taken.begin(), taken.end(), a) == taken.end()) rest.push_back(a);
  }
  return rest;
}

void check_axes(const JointDensity& joint, std::span<const std::size_t> axes) {
  if (axes.empty()) throw Error(ErrorCode::BadAxis, "axis list is empty");
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= joint.rank()) throw Error(ErrorCode::BadAxis, "axis index out of range", axes[i]);
    for (std::size_t j = 0; j < i; ++j) {
      if (axes[i] == axes[j]) throw Error(ErrorCode::BadAxis, "axis listed twice", axes[i]);
    }
  }
}

// Flat index in the sub-array spanned by `axes` (first listed slowest).
std::size_t sub_index(const JointDensity& joint, const std::vector<std::size_t>& cells,
                      std::span<const std::size_t> axes) {
  std::size_t flat = 0;
  for (std::size_t a : axes) flat = flat * joint.grids()[a].size() + cells[a];
  return flat;
}

std::size_t sub_size(const JointDensity& joint, std::span<const std::size_t> axes) {
  std::size_t n = 1;
  for (std::size_t a : axes) n *= joint.grids()[a].size();
  return n;
}

}  // namespace

JointDensity marginalize(const JointDensity& joint, std::span<const std::size_t> kept) {
  check_axes(joint, kept);
  std::vector<Grid> grids;
  for (std::size_t a : kept) grids.push_back(joint.grids()[a]);
  std::vector<double> mass(sub_size(joint, kept), 0.0);
  const auto m = joint.mass();
  for (std::size_t flat = 0; flat < m.size(); ++flat) {
    if (m[flat] == 0.0) continue;
    mass[sub_index(joint, joint.unflatten(flat), kept)] += m[flat];
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  for (double& v : mass) v /= total;
  return JointDensity(std::move(grids), std::move(mass));
}

Density marginal(const JointDensity& joint, std::size_t axis) {
  const std::size_t kept[] = {axis};
  auto j = marginalize(joint, kept);
  return Density(j.grids().front(), std::vector<double>(j.mass().begin(), j.mass().end()));
}

ConditionalDensity condition(const JointDensity& joint, std::span<const std::size_t> conditioning) {
  check_axes(joint, conditioning);
  const auto rest = remaining_axes(joint.rank(), conditioning);
  if (rest.size() != 1) {
    throw Error(ErrorCode::BadAxis, "conditioning must leave exactly one target axis");
  }
  const std::size_t target_axis = rest.front();
  const Grid& target = joint.grids()[target_axis];
  const std::size_t rows = sub_size(joint, conditioning);
  const std::size_t width = target.size();

  std::vector<double> table(rows * width, 0.0);
  const auto m = joint.mass();
  for (std::size_t flat = 0; flat < m.size(); ++flat) {
    if (m[flat] == 0.0) continue;
    const auto cells = joint.unflatten(flat);
    table[sub_index(joint, cells, conditioning) * width + cells[target_axis]] += m[flat];
  }

  std::vector<std::uint8_t> filled(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = table.data() + r * width;
    const double total = std::accumulate(row, row + width, 0.0);
    if (total > 0.0) {
      for (std::size_t i = 0; i < width; ++i) row[i] /= total;
    } else {
      std::fill(row, row + width, 1.0 / static_cast<double>(width));
      filled[r] = 1;
    }
  }

  std::vector<Grid> cond_grids;
  for (std::size_t a : conditioning) cond_grids.push_back(joint.grids()[a]);
  return ConditionalDensity(std::move(cond_grids), target, std::move(table), std::move(filled));
}

std::vector<double> kl_conditional(const ConditionalDensity& f, const ConditionalDensity& g,
                                   double support_floor) {
  if (f.rows() != g.rows() || !(f.target() == g.target())) {
    throw Error(ErrorCode::GridMismatch, "conditional densities have different grids");
  }
  std::vector<double> out(f.rows());
  for (std::size_t r = 0; r < f.rows(); ++r) {
    try {
      out[r] = kl_divergence(f.row(r), g.row(r), support_floor);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AbsContinuityViolation) throw;
      throw Error(ErrorCode::AbsContinuityViolation,
                  "row " + std::to_string(r) + " of f has mass where g has none", r);
    }
  }
  return out;
}

double kl_divergence(const JointDensity& f, const JointDensity& g) {
  if (f.grids().size() != g.grids().size()) throw Error(ErrorCode::GridMismatch, "joint rank mismatch");
  for (std::size_t a = 0; a < f.rank(); ++a) require_same_grid(f.grids()[a], g.grids()[a]);
  return kl_divergence(f.mass(), g.mass());
}

ChainRuleTerms chain_rule_terms(const JointDensity& f, const JointDensity& g, std::size_t split) {
  if (f.rank() != g.rank()) throw Error(ErrorCode::GridMismatch, "joint rank mismatch");
  for (std::size_t a = 0; a < f.rank(); ++a) require_same_grid(f.grids()[a], g.grids()[a]);
  if (split == 0 || split >= f.rank()) throw Error(ErrorCode::BadAxis, "split must leave both sides nonempty", split);

  // Leading axes form the marginal block Y; the rest form Z. In row-major
  // order each Y cell owns a contiguous block of Z cells.
  std::size_t y_cells = 1;
  for (std::size_t a = 0; a < split; ++a) y_cells *= f.grids()[a].size();
  const std::size_t z_cells = f.mass().size() / y_cells;

  const auto fm = f.mass();
  const auto gm = g.mass();
  double marginal_kl = 0.0;
  double conditional_kl = 0.0;
  for (std::size_t y = 0; y < y_cells; ++y) {
    const double* fz = fm.data() + y * z_cells;
    const double* gz = gm.data() + y * z_cells;
    const double fy = std::accumulate(fz, fz + z_cells, 0.0);
    if (fy == 0.0) continue;
    const double gy = std::accumulate(gz, gz + z_cells, 0.0);
    if (gy == 0.0) throw Error(ErrorCode::AbsContinuityViolation, "f marginal has mass where g has none", y);
    marginal_kl += fy * std::log(fy / gy);
    double row_kl = 0.0;
    for (std::size_t z = 0; z < z_cells; ++z) {
      if (fz[z] == 0.0) continue;
      if (gz[z] == 0.0) {
        throw Error(ErrorCode::AbsContinuityViolation, "f has mass where g has none", y * z_cells + z);
      }
      const double fc = fz[z] / fy;
      const double gc = gz[z] / gy;
      row_kl += fc * std::log(fc / gc);
    }
    conditional_kl += fy * row_kl;
  }
  return {marginal_kl, conditional_kl};
}

}  // namespace klctrl
