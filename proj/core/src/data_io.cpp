#include "klctrl/data_io.hpp"

#include "file_util.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/Dense>

namespace klctrl {

using nlohmann::json;

// ------------------------------------------------------------ trajectories

void validate(const Trajectory& t) {
  for (std::size_t i = 0; i < t.samples.size(); ++i) {
    const Sample& s = t.samples[i];
    if (!std::isfinite(s.x) || !std::isfinite(s.u)) {
      throw Error(ErrorCode::BadConfig, "trajectory " + t.id + " has a non-finite sample", i);
    }
    if (i > 0 && s.k <= t.samples[i - 1].k) {
      throw Error(ErrorCode::BadConfig, "trajectory " + t.id + " has non-increasing stage indices", i);
    }
  }
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& field, const std::filesystem::path& path, std::size_t line) {
  T value{};
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::IoError,
                path.string() + ":" + std::to_string(line) + ": cannot parse '" + field + "'", line);
  }
  return value;
}

std::string format(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

DatasetCollection read_trajectories_csv(const std::filesystem::path& path, DatasetRole role) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::IoError, path.string() + " is empty");
  const auto header = split(line);
  if (header != std::vector<std::string>{"trajectory_id", "k", "x", "u"}) {
    throw Error(ErrorCode::IoError, path.string() + ": expected header trajectory_id,k,x,u");
  }
  std::map<std::string, Trajectory> by_id;
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != 4) {
      throw Error(ErrorCode::IoError, path.string() + ":" + std::to_string(number) + ": expected 4 fields",
                  number);
    }
    auto& t = by_id[fields[0]];
    t.id = fields[0];
    t.samples.push_back({parse_number<std::size_t>(fields[1], path, number),
                         parse_number<double>(fields[2], path, number),
                         parse_number<double>(fields[3], path, number)});
  }
  if (by_id.empty()) throw Error(ErrorCode::IoError, path.string() + " holds no samples");
  DatasetCollection data;
  data.role = role;
  for (auto& [id, t] : by_id) {
    validate(t);
    data.trajectories.push_back(std::move(t));
  }
  return data;
}

void write_trajectories_csv(const DatasetCollection& data, const std::filesystem::path& path) {
  std::ofstream out = detail::open_for_write(path);
  out << "trajectory_id,k,x,u\n";
  for (const auto& t : data.trajectories) {
    for (const auto& s : t.samples) {
      out << t.id << ',' << s.k << ',' << format(s.x) << ',' << format(s.u) << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

DatasetCollection merge(std::vector<DatasetCollection> parts) {
  if (parts.empty()) throw Error(ErrorCode::BadConfig, "nothing to merge");
  DatasetCollection out;
  out.role = parts.front().role;
  for (auto& p : parts) {
    for (auto& t : p.trajectories) out.trajectories.push_back(std::move(t));
  }
  std::sort(out.trajectories.begin(), out.trajectories.end(),
            [](const Trajectory& a, const Trajectory& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < out.trajectories.size(); ++i) {
    if (out.trajectories[i].id == out.trajectories[i - 1].id) {
      throw Error(ErrorCode::BadConfig, "duplicate trajectory id " + out.trajectories[i].id);
    }
  }
  return out;
}

std::vector<TransitionSample> transitions(const DatasetCollection& data, std::optional<std::size_t> stage) {
  std::vector<TransitionSample> out;
  for (const auto& t : data.trajectories) {
    for (std::size_t i = 1; i < t.samples.size(); ++i) {
      const Sample& prev = t.samples[i - 1];
      const Sample& cur = t.samples[i];
      if (cur.k != prev.k + 1) continue;
      if (stage && cur.k != *stage) continue;
      out.push_back({cur.k, prev.x, cur.u, cur.x});
    }
  }
  return out;
}

// -------------------------------------------------------------- histograms

EmpiricalJoint empirical_joint(const DatasetCollection& data, std::span<const Grid> grids,
                               std::span<const Variable> variables, std::optional<std::size_t> stage) {
  if (grids.size() != variables.size() || grids.empty()) {
    throw Error(ErrorCode::BadConfig, "need one grid per variable");
  }
  const bool uses_pairs = std::find(variables.begin(), variables.end(), Variable::PreviousState) != variables.end();

  std::vector<std::vector<double>> tuples;
  if (uses_pairs) {
    for (const auto& s : transitions(data, stage)) {
      std::vector<double> v;
      for (Variable var : variables) {
        v.push_back(var == Variable::PreviousState ? s.x_prev : var == Variable::Control ? s.u : s.x);
      }
      tuples.push_back(std::move(v));
    }
  } else {
    for (const auto& t : data.trajectories) {
      for (const auto& s : t.samples) {
        if (stage && s.k != *stage) continue;
        std::vector<double> v;
        for (Variable var : variables) v.push_back(var == Variable::Control ? s.u : s.x);
        tuples.push_back(std::move(v));
      }
    }
  }

  std::vector<std::size_t> shape;
  std::size_t total = 1;
  for (const auto& g : grids) {
    shape.push_back(g.size());
    total *= g.size();
  }
  std::vector<std::size_t> counts(total, 0);
  std::size_t in_range = 0;
  std::size_t dropped = 0;
  for (const auto& v : tuples) {
    std::size_t flat = 0;
    bool inside = true;
    for (std::size_t a = 0; a < v.size() && inside; ++a) {
      const auto cell = grids[a].locate(v[a]);
      if (!cell) inside = false;
      else flat = flat * shape[a] + *cell;
    }
    if (!inside) {
      ++dropped;
      continue;
    }
    ++counts[flat];
    ++in_range;
  }
  if (in_range == 0) {
    throw Error(ErrorCode::NoInRangeSamples, std::to_string(dropped) + " samples, none inside the grids");
  }
  std::vector<double> mass(total);
  const auto n = static_cast<double>(in_range);
  for (std::size_t i = 0; i < total; ++i) mass[i] = static_cast<double>(counts[i]) / n;
  return {JointDensity(std::vector<Grid>(grids.begin(), grids.end()), std::move(mass)), in_range, dropped};
}

// ------------------------------------------------------ gaussian transition

GaussianFit fit_gaussian(std::span<const TransitionSample> pairs) {
  if (pairs.size() < 3) {
    throw Error(ErrorCode::RankDeficient, "least squares needs at least 3 transitions, got " +
                                              std::to_string(pairs.size()));
  }
  const auto n = static_cast<Eigen::Index>(pairs.size());
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = pairs[static_cast<std::size_t>(i)];
    A(i, 0) = s.x_prev;
    A(i, 1) = s.u;
    y(i) = s.x;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 2) throw Error(ErrorCode::RankDeficient, "regressors (x_prev, u) are collinear");
  const Eigen::Vector2d coef = qr.solve(y);
  const double rss = (y - A * coef).squaredNorm();

  GaussianFit fit;
  fit.model = {coef(0), coef(1), rss / static_cast<double>(n - 2)};
  fit.pairs = pairs.size();
  fit.rss = rss;
  return fit;
}

GaussianTransition fit_gaussian_transition(const DatasetCollection& data, std::optional<std::size_t> stage) {
  const auto pairs = transitions(data, stage);
  return fit_gaussian(pairs).model;
}

ConditionalDensity gaussian_to_conditional(const GaussianTransition& gt, const Grid& state, const Grid& control) {
  if (!(gt.sigma2 > 0.0) || !std::isfinite(gt.sigma2)) {
    throw Error(ErrorCode::BadConfig, "transition variance must be positive");
  }
  const std::size_t nx = state.size();
  const std::size_t nu = control.size();
  const auto z = state.centers();
  std::vector<double> table(nx * nu * nx);
  std::vector<double> logp(nx);
  for (std::size_t x = 0; x < nx; ++x) {
    for (std::size_t u = 0; u < nu; ++u) {
      const double mean = gt.a * state.center(x) + gt.b * control.center(u);
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < nx; ++i) {
        const double d = z[i] - mean;
        logp[i] = -0.5 * d * d / gt.sigma2;
        top = std::max(top, logp[i]);
      }
      double* row = table.data() + (x * nu + u) * nx;
      double total = 0.0;
      for (std::size_t i = 0; i < nx; ++i) total += row[i] = std::exp(logp[i] - top);
      for (std::size_t i = 0; i < nx; ++i) row[i] /= total;
    }
  }
  return ConditionalDensity({state, control}, state, std::move(table));
}

ConditionalDensity extract_policy(const JointDensity& joint) {
  if (joint.rank() != 2) throw Error(ErrorCode::BadAxis, "policy extraction needs a joint over (x_prev, u)");
  const std::size_t axis = 0;
  return condition(joint, std::span<const std::size_t>(&axis, 1));
}

Density discretized_normal(const Grid& grid, double mean, double stddev) {
  if (!(stddev > 0.0)) throw Error(ErrorCode::BadConfig, "standard deviation must be positive");
  std::vector<double> logp(grid.size());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double d = (grid.center(i) - mean) / stddev;
    logp[i] = -0.5 * d * d;
    top = std::max(top, logp[i]);
  }
  for (double& v : logp) v = std::exp(v - top);
  return normalize(logp, grid);
}

ConditionalDensity gaussian_moment_policy(const ConditionalDensity& policy, double min_std) {
  if (policy.conditioning().size() != 1) throw Error(ErrorCode::BadAxis, "policy must condition on one axis");
  const std::size_t rows = policy.rows();
  std::vector<std::size_t> sources;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!policy.filled(r)) sources.push_back(r);
  }
  if (sources.empty()) throw Error(ErrorCode::NoInRangeSamples, "every policy row is empty");

  const Grid& target = policy.target();
  std::vector<double> table;
  table.reserve(rows * target.size());
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t src = r;
    if (policy.filled(r)) {
      // nearest unflagged row, lower index on ties
      auto it = std::lower_bound(sources.begin(), sources.end(), r);
      if (it == sources.end()) {
        src = sources.back();
      } else if (it == sources.begin()) {
        src = *it;
      } else {
        const std::size_t hi = *it;
        const std::size_t lo = *(it - 1);
        src = (r - lo <= hi - r) ? lo : hi;
      }
    }
    const Density row = policy.row_density(src);
    const double sd = std::max(std::sqrt(variance(row)), min_std);
    const auto d = discretized_normal(target, mean_mode(row), sd);
    table.insert(table.end(), d.mass().begin(), d.mass().end());
  }
  return ConditionalDensity(policy.conditioning(), target, std::move(table), policy.filled_flags());
}

// ------------------------------------------------------------ serialization

std::string checksum(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

void save_artifact(const std::filesystem::path& path, std::string_view kind, const json& payload) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["kind"] = kind;
  doc["checksum"] = checksum(payload.dump());
  doc["payload"] = payload;
  std::ofstream out = detail::open_for_write(path);
  out << doc.dump() << '\n';
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

json load_artifact(const std::filesystem::path& path, std::string_view kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json doc = json::parse(buf.str(), nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("payload") || !doc.contains("checksum")) {
    throw Error(ErrorCode::ChecksumMismatch, path.string() + " is truncated or not an artifact");
  }
  if (!doc.contains("schema_version") || doc["schema_version"] != kSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch,
                path.string() + " has schema version " + doc.value("schema_version", json()).dump() +
                    ", expected " + std::to_string(kSchemaVersion));
  }
  if (doc.value("kind", std::string()) != kind) {
    throw Error(ErrorCode::BadConfig, path.string() + " holds a '" + doc.value("kind", std::string()) +
                                          "' artifact, expected '" + std::string(kind) + "'");
  }
  if (doc["checksum"] != checksum(doc["payload"].dump())) {
    throw Error(ErrorCode::ChecksumMismatch, path.string() + " content does not match its checksum");
  }
  return std::move(doc["payload"]);
}

namespace {

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::BadConfig, std::string("artifact lacks field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("artifact field '") + key + "': " + e.what());
  }
}

json encode_grids(const std::vector<Grid>& grids) {
  json a = json::array();
  for (const auto& g : grids) a.push_back(encode(g));
  return a;
}

std::vector<Grid> decode_grids(const json& j) {
  std::vector<Grid> out;
  for (const auto& g : j) out.push_back(decode_grid(g));
  return out;
}

json encode_dual(const DualSolution& d) {
  return {{"lambda", d.lambda},
          {"active", d.active},
          {"value", d.value},
          {"gradient_norm", d.gradient_norm},
          {"iterations", d.iterations},
          {"converged", d.converged},
          {"support_restricted", d.support_restricted}};
}

DualSolution decode_dual(const json& j) {
  DualSolution d;
  d.lambda = field<std::vector<double>>(j, "lambda");
  d.active = field<std::vector<std::size_t>>(j, "active");
  d.value = field<double>(j, "value");
  d.gradient_norm = field<double>(j, "gradient_norm");
  d.iterations = field<std::size_t>(j, "iterations");
  d.converged = field<bool>(j, "converged");
  d.support_restricted = field<bool>(j, "support_restricted");
  return d;
}

}  // namespace

json encode(const Grid& g) { return {{"lower", g.lower()}, {"upper", g.upper()}, {"cells", g.size()}}; }

Grid decode_grid(const json& j) {
  return Grid(field<double>(j, "lower"), field<double>(j, "upper"), field<std::size_t>(j, "cells"));
}

json encode(const Density& d) {
  return {{"grid", encode(d.grid())}, {"mass", std::vector<double>(d.mass().begin(), d.mass().end())}};
}

Density decode_density(const json& j) {
  return Density(decode_grid(field<json>(j, "grid")), field<std::vector<double>>(j, "mass"));
}

json encode(const JointDensity& d) {
  return {{"grids", encode_grids(d.grids())}, {"mass", std::vector<double>(d.mass().begin(), d.mass().end())}};
}

JointDensity decode_joint(const json& j) {
  return JointDensity(decode_grids(field<json>(j, "grids")), field<std::vector<double>>(j, "mass"));
}

json encode(const ConditionalDensity& c) {
  return {{"conditioning", encode_grids(c.conditioning())},
          {"target", encode(c.target())},
          {"table", std::vector<double>(c.table().begin(), c.table().end())},
          {"filled", c.filled_flags()}};
}

ConditionalDensity decode_conditional(const json& j) {
  return ConditionalDensity(decode_grids(field<json>(j, "conditioning")), decode_grid(field<json>(j, "target")),
                            field<std::vector<double>>(j, "table"),
                            field<std::vector<std::uint8_t>>(j, "filled"));
}

json encode(const Policy& p) {
  json stages = json::array();
  for (const auto& s : p.stages) stages.push_back(encode(s));
  return {{"stages", std::move(stages)}};
}

Policy decode_policy(const json& j) {
  Policy p;
  for (const auto& s : field<json>(j, "stages")) p.stages.push_back(decode_conditional(s));
  return p;
}

json encode(const GaussianTransition& gt) { return {{"a", gt.a}, {"b", gt.b}, {"sigma2", gt.sigma2}}; }

GaussianTransition decode_gaussian(const json& j) {
  return {field<double>(j, "a"), field<double>(j, "b"), field<double>(j, "sigma2")};
}

json encode(const SynthesisReport& r, bool include_tables) {
  json marginals = json::array();
  for (const auto& m : r.state_marginals) marginals.push_back(encode(m));
  json stages = json::array();
  for (const auto& s : r.stages) {
    json duals = json::array();
    for (const auto& d : s.duals) duals.push_back(encode_dual(d));
    json st = {{"stage", s.stage}, {"ln_gamma", s.ln_gamma}, {"duals", std::move(duals)}, {"targets", s.targets}};
    if (include_tables) {
      st["alpha_hat"] = s.alpha_hat;
      st["beta_hat"] = s.beta_hat;
      st["omega_hat"] = s.omega_hat;
    }
    stages.push_back(std::move(st));
  }
  json unconverged = json::array();
  for (const auto& c : r.unconverged) unconverged.push_back({c.stage, c.state});
  return {{"b_star", r.b_star},
          {"state_marginals", std::move(marginals)},
          {"stages", std::move(stages)},
          {"unconverged", std::move(unconverged)},
          {"filled_example_rows", r.filled_example_rows},
          {"closed_loop_kl", r.closed_loop_kl}};
}

SynthesisReport decode_report(const json& j) {
  SynthesisReport r;
  r.b_star = field<std::vector<double>>(j, "b_star");
  for (const auto& m : field<json>(j, "state_marginals")) r.state_marginals.push_back(decode_density(m));
  for (const auto& s : field<json>(j, "stages")) {
    StageCache c;
    c.stage = field<std::size_t>(s, "stage");
    c.ln_gamma = field<std::vector<double>>(s, "ln_gamma");
    for (const auto& d : field<json>(s, "duals")) c.duals.push_back(decode_dual(d));
    c.targets = field<std::vector<std::vector<double>>>(s, "targets");
    if (s.contains("alpha_hat")) {
      c.alpha_hat = field<std::vector<double>>(s, "alpha_hat");
      c.beta_hat = field<std::vector<double>>(s, "beta_hat");
      c.omega_hat = field<std::vector<double>>(s, "omega_hat");
    }
    r.stages.push_back(std::move(c));
  }
  for (const auto& c : field<json>(j, "unconverged")) {
    r.unconverged.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
  }
  r.filled_example_rows = field<std::vector<std::size_t>>(j, "filled_example_rows");
  r.closed_loop_kl = field<double>(j, "closed_loop_kl");
  return r;
}

void save(const std::filesystem::path& path, const Density& d) { save_artifact(path, "density", encode(d)); }
void save(const std::filesystem::path& path, const JointDensity& d) { save_artifact(path, "joint", encode(d)); }
void save(const std::filesystem::path& path, const ConditionalDensity& c) {
  save_artifact(path, "conditional", encode(c));
}
void save(const std::filesystem::path& path, const Policy& p) { save_artifact(path, "policy", encode(p)); }
void save(const std::filesystem::path& path, const GaussianTransition& gt) {
  save_artifact(path, "gaussian_transition", encode(gt));
}
void save(const std::filesystem::path& path, const SynthesisReport& r, bool include_tables) {
  save_artifact(path, "synthesis_report", encode(r, include_tables));
}

Density load_density(const std::filesystem::path& path) { return decode_density(load_artifact(path, "density")); }
JointDensity load_joint(const std::filesystem::path& path) { return decode_joint(load_artifact(path, "joint")); }
ConditionalDensity load_conditional(const std::filesystem::path& path) {
  return decode_conditional(load_artifact(path, "conditional"));
}
Policy load_policy(const std::filesystem::path& path) { return decode_policy(load_artifact(path, "policy")); }
GaussianTransition load_gaussian(const std::filesystem::path& path) {
  return decode_gaussian(load_artifact(path, "gaussian_transition"));
}
SynthesisReport load_report(const std::filesystem::path& path) {
  return decode_report(load_artifact(path, "synthesis_report"));
}

std::vector<ConditionalPtr> TransitionArtifact::expand(std::size_t horizon) const {
  std::vector<ConditionalPtr> out;
  const std::size_t stages = gaussian.empty() ? tabulated.size() : gaussian.size();
  if (stages != 1 && stages != horizon) {
    throw Error(ErrorCode::BadConfig, "transition has " + std::to_string(stages) + " stages, horizon is " +
                                          std::to_string(horizon));
  }
  if (!gaussian.empty() && (!state || !control)) {
    throw Error(ErrorCode::BadConfig, "gaussian transition artifact lacks grids");
  }
  auto build = [&](std::size_t i) {
    if (!gaussian.empty()) {
      return std::make_shared<const ConditionalDensity>(gaussian_to_conditional(gaussian[i], *state, *control));
    }
    return std::make_shared<const ConditionalDensity>(tabulated[i]);
  };
  if (stages == 1) {
    out.assign(horizon, build(0));
    return out;
  }
  for (std::size_t i = 0; i < stages; ++i) out.push_back(build(i));
  return out;
}

void save(const std::filesystem::path& path, const TransitionArtifact& t) {
  json payload;
  if (!t.gaussian.empty()) {
    if (!t.state || !t.control) throw Error(ErrorCode::BadConfig, "gaussian transition artifact lacks grids");
    json params = json::array();
    for (const auto& g : t.gaussian) params.push_back(encode(g));
    payload = {{"model", "gaussian"},
               {"parameters", std::move(params)},
               {"state", encode(*t.state)},
               {"control", encode(*t.control)}};
  } else {
    json stages = json::array();
    for (const auto& c : t.tabulated) stages.push_back(encode(c));
    payload = {{"model", "tabulated"}, {"stages", std::move(stages)}};
  }
  save_artifact(path, "transition", payload);
}

TransitionArtifact load_transition(const std::filesystem::path& path) {
  const json j = load_artifact(path, "transition");
  TransitionArtifact t;
  const auto model = field<std::string>(j, "model");
  if (model == "gaussian") {
    for (const auto& g : field<json>(j, "parameters")) t.gaussian.push_back(decode_gaussian(g));
    t.state = decode_grid(field<json>(j, "state"));
    t.control = decode_grid(field<json>(j, "control"));
  } else if (model == "tabulated") {
    for (const auto& s : field<json>(j, "stages")) t.tabulated.push_back(decode_conditional(s));
  } else {
    throw Error(ErrorCode::BadConfig, "unknown transition model '" + model + "'");
  }
  if (t.gaussian.empty() && t.tabulated.empty()) throw Error(ErrorCode::BadConfig, "transition has no stages");
  return t;
}

}  // namespace klctrl
