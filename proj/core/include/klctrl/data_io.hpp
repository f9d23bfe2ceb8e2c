#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "klctrl/densities.hpp"
#include "klctrl/synthesis.hpp"

namespace klctrl {

// ------------------------------------------------------------ trajectories

struct Sample {
  std::size_t k = 0;
  double x = 0.0;  // state, e.g. position in meters
  double u = 0.0;  // control, e.g. speed in m/s
};

struct Trajectory {
  std::string id;
  std::vector<Sample> samples;
};

enum class DatasetRole { Complete, Example };

struct DatasetCollection {
  std::vector<Trajectory> trajectories;  // sorted by id
  DatasetRole role = DatasetRole::Complete;
};

/// Stage indices strictly increasing and values finite.
void validate(const Trajectory& t);

/// Reads `trajectory_id,k,x,u` rows. Rows of one id may be interleaved with
/// other ids but must appear in stage order.
DatasetCollection read_trajectories_csv(const std::filesystem::path& path, DatasetRole role);
void write_trajectories_csv(const DatasetCollection& data, const std::filesystem::path& path);

/// Concatenates collections and re-sorts by trajectory id; duplicate ids
/// are rejected.
DatasetCollection merge(std::vector<DatasetCollection> parts);

/// One transition (x_{k-1}, u_k, x_k) taken from consecutive samples whose
/// stage indices differ by one.
struct TransitionSample {
  std::size_t k;
  double x_prev;
  double u;
  double x;
};

/// All transitions of the collection, optionally only those of stage `k`.
std::vector<TransitionSample> transitions(const DatasetCollection& data,
                                          std::optional<std::size_t> stage = std::nullopt);

// -------------------------------------------------------------- histograms

enum class Variable { PreviousState, Control, State };

struct EmpiricalJoint {
  JointDensity joint;
  std::size_t in_range = 0;
  std::size_t dropped = 0;  // samples with some coordinate outside its grid
};

/// Histogram of the listed variables on the matching grids. Tuples that
/// contain PreviousState are built from transitions; other tuples use every
/// sample (x_k, u_k) directly, with Control then read from the same sample.
EmpiricalJoint empirical_joint(const DatasetCollection& data, std::span<const Grid> grids,
                               std::span<const Variable> variables,
                               std::optional<std::size_t> stage = std::nullopt);

// ------------------------------------------------------ gaussian transition

/// x_k ~ Normal(a x_{k-1} + b u_k, sigma2).
struct GaussianTransition {
  double a = 0.0;
  double b = 0.0;       // seconds
  double sigma2 = 1.0;  // squared state units
};

struct GaussianFit {
  GaussianTransition model;
  std::size_t pairs = 0;
  double rss = 0.0;
};

/// Least squares of x_k on (x_{k-1}, u_k) without intercept;
/// sigma2 = RSS / (N - 2).
GaussianFit fit_gaussian(std::span<const TransitionSample> pairs);
GaussianTransition fit_gaussian_transition(const DatasetCollection& data,
                                           std::optional<std::size_t> stage = std::nullopt);

/// Rows indexed x * |U| + u, each the normal density at the state centers
/// times the cell width, renormalized.
ConditionalDensity gaussian_to_conditional(const GaussianTransition& gt, const Grid& state,
                                           const Grid& control);

/// Conditions a joint over (x_{k-1}, u_k) on the state axis.
ConditionalDensity extract_policy(const JointDensity& joint);

/// Replaces every row by a discretized normal with the row's mean and
/// standard deviation (at least `min_std`). Flagged rows take the moments of
/// the nearest unflagged row and stay flagged.
ConditionalDensity gaussian_moment_policy(const ConditionalDensity& policy, double min_std);

/// Discretized normal on `grid`, renormalized over the grid.
Density discretized_normal(const Grid& grid, double mean, double stddev);

// ------------------------------------------------------------ serialization

inline constexpr int kSchemaVersion = 1;

/// FNV-1a 64-bit hash as 16 lowercase hex digits.
std::string checksum(std::string_view bytes);

/// Writes {schema_version, kind, checksum, payload}; the checksum covers the
/// compact dump of `payload`.
void save_artifact(const std::filesystem::path& path, std::string_view kind,
                   const nlohmann::json& payload);
/// Verifies version, kind and checksum and returns the payload.
nlohmann::json load_artifact(const std::filesystem::path& path, std::string_view kind);

nlohmann::json encode(const Grid& g);
nlohmann::json encode(const Density& d);
nlohmann::json encode(const JointDensity& d);
nlohmann::json encode(const ConditionalDensity& c);
nlohmann::json encode(const Policy& p);
nlohmann::json encode(const GaussianTransition& gt);
nlohmann::json encode(const SynthesisReport& r, bool include_tables = true);

Grid decode_grid(const nlohmann::json& j);
Density decode_density(const nlohmann::json& j);
JointDensity decode_joint(const nlohmann::json& j);
ConditionalDensity decode_conditional(const nlohmann::json& j);
Policy decode_policy(const nlohmann::json& j);
GaussianTransition decode_gaussian(const nlohmann::json& j);
SynthesisReport decode_report(const nlohmann::json& j);

void save(const std::filesystem::path& path, const Density& d);
void save(const std::filesystem::path& path, const JointDensity& d);
void save(const std::filesystem::path& path, const ConditionalDensity& c);
void save(const std::filesystem::path& path, const Policy& p);
void save(const std::filesystem::path& path, const GaussianTransition& gt);
void save(const std::filesystem::path& path, const SynthesisReport& r, bool include_tables = true);

Density load_density(const std::filesystem::path& path);
JointDensity load_joint(const std::filesystem::path& path);
ConditionalDensity load_conditional(const std::filesystem::path& path);
Policy load_policy(const std::filesystem::path& path);
GaussianTransition load_gaussian(const std::filesystem::path& path);
SynthesisReport load_report(const std::filesystem::path& path);

/// Transition model artifact: either Gaussian parameters with the grids they
/// are discretized on (re-discretized deterministically on load) or a
/// tabulated conditional per stage. A single entry means stationary.
struct TransitionArtifact {
  std::vector<GaussianTransition> gaussian;
  std::vector<ConditionalDensity> tabulated;
  std::optional<Grid> state;
  std::optional<Grid> control;

  /// Per-stage pointers; stationary models share one table.
  std::vector<ConditionalPtr> expand(std::size_t horizon) const;
};

void save(const std::filesystem::path& path, const TransitionArtifact& t);
TransitionArtifact load_transition(const std::filesystem::path& path);

}  // namespace klctrl
