#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "klctrl/data_io.hpp"

using namespace klctrl;
namespace fs = std::filesystem;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected klctrl::Error");
  return ErrorCode::BadConfig;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "klctrl_test_data_io";
  fs::create_directories(dir);
  return dir / name;
}

double normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Trajectories from x_k = a x_{k-1} + b u_k + noise with u_k a noisy
/// function of x_{k-1}.
DatasetCollection synthetic(double a, double b, double sigma2, std::size_t pairs, std::uint64_t seed) {
  Rng rng(seed);
  DatasetCollection d;
  const std::size_t per = 50;
  for (std::size_t t = 0; t * per < pairs; ++t) {
    Trajectory tr;
    tr.id = "t" + std::to_string(1000 + t);
    double x = 5.0 * uniform01(rng);
    double u = 10.0;
    tr.samples.push_back({0, x, u});
    for (std::size_t k = 1; k <= per; ++k) {
      u = 8.0 + 4.0 * uniform01(rng) + 0.01 * x;
      x = a * x + b * u + std::sqrt(sigma2) * normal(rng);
      tr.samples.push_back({k, x, u});
    }
    d.trajectories.push_back(std::move(tr));
  }
  return d;
}

}  // namespace

TEST_CASE("trajectory csv round trip and validation") {
  auto d = synthetic(0.98, 0.26, 2.6, 200, 1);
  const auto path = scratch("traj.csv");
  write_trajectories_csv(d, path);
  const auto back = read_trajectories_csv(path, DatasetRole::Example);
  REQUIRE(back.trajectories.size() == d.trajectories.size());
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
    CHECK(back.trajectories[i].id == d.trajectories[i].id);
    REQUIRE(back.trajectories[i].samples.size() == d.trajectories[i].samples.size());
    for (std::size_t s = 0; s < d.trajectories[i].samples.size(); ++s) {
      CHECK(back.trajectories[i].samples[s].x == d.trajectories[i].samples[s].x);
      CHECK(back.trajectories[i].samples[s].u == d.trajectories[i].samples[s].u);
    }
  }
  CHECK(back.role == DatasetRole::Example);

  auto write = [](const std::string& name, const std::string& body) {
    const auto p = scratch(name);
    std::ofstream(p) << body;
    return p;
  };
  CHECK(code_of([&] { read_trajectories_csv(scratch("missing.csv"), DatasetRole::Complete); }) ==
        ErrorCode::IoError);
  CHECK(code_of([&] { read_trajectories_csv(write("h.csv", "id,k,x,u\n"), DatasetRole::Complete); }) ==
        ErrorCode::IoError);
  CHECK(code_of([&] {
          read_trajectories_csv(write("n.csv", "trajectory_id,k,x,u\na,0,1.0,abc\n"), DatasetRole::Complete);
        }) == ErrorCode::IoError);
  CHECK(code_of([&] {
          read_trajectories_csv(write("o.csv", "trajectory_id,k,x,u\na,1,1,1\na,1,2,2\n"), DatasetRole::Complete);
        }) == ErrorCode::BadConfig);

  // Interleaved ids are grouped and sorted.
  const auto mixed = read_trajectories_csv(
      write("m.csv", "trajectory_id,k,x,u\nb,0,1,1\na,0,2,2\nb,1,3,3\na,1,4,4\n"), DatasetRole::Complete);
  REQUIRE(mixed.trajectories.size() == 2);
  CHECK(mixed.trajectories[0].id == "a");
  CHECK(mixed.trajectories[1].samples[1].x == 3.0);
  CHECK(transitions(mixed).size() == 2);

  CHECK(code_of([&] { merge({mixed, mixed}); }) == ErrorCode::BadConfig);
}

TEST_CASE("empirical joint") {
  const Grid x(0.0, 10.0, 5);
  const Grid u(0.0, 4.0, 4);
  const std::vector<Grid> grids{x, u};
  const std::vector<Variable> vars{Variable::State, Variable::Control};

  SUBCASE("single sample") {
    DatasetCollection d{{{"a", {{0, 3.1, 2.5}}}}, DatasetRole::Example};
    const auto e = empirical_joint(d, grids, vars);
    CHECK(e.joint.mass()[1 * 4 + 2] == 1.0);
    CHECK(e.in_range == 1);
  }
  SUBCASE("exactly uniform by construction and dropped samples") {
    Trajectory t{"a", {}};
    std::size_t k = 0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) t.samples.push_back({k++, x.center(i), u.center(j)});
    t.samples.push_back({k++, 11.0, 1.0});
    t.samples.push_back({k++, 1.0, -3.0});
    DatasetCollection d{{t}, DatasetRole::Example};
    const auto e = empirical_joint(d, grids, vars);
    for (double m : e.joint.mass()) CHECK(m == 1.0 / 20.0);
    CHECK(e.dropped == 2);
    CHECK(e.in_range == 20);
  }
  SUBCASE("no samples in range") {
    DatasetCollection d{{{"a", {{0, -3.0, 2.5}}}}, DatasetRole::Example};
    CHECK(code_of([&] { empirical_joint(d, grids, vars); }) == ErrorCode::NoInRangeSamples);
  }
  SUBCASE("monte carlo against a known joint") {
    Rng rng(7);
    std::vector<double> p(20);
    for (std::size_t i = 0; i < 20; ++i) p[i] = 1.0 + static_cast<double>(i % 7);
    const auto truth = normalize(p, Grid(0.0, 20.0, 20));
    Trajectory t{"mc", {}};
    for (std::size_t s = 0; s < 10000; ++s) {
      const std::size_t c = sample_index(truth, rng);
      t.samples.push_back({s, x.center(c / 4), u.center(c % 4)});
    }
    const auto e = empirical_joint(DatasetCollection{{t}, DatasetRole::Example}, grids, vars);
    double l1 = 0.0;
    for (std::size_t i = 0; i < 20; ++i) l1 += std::abs(e.joint.mass()[i] - truth[i]);
    CHECK(l1 <= 0.05);
  }
  SUBCASE("transition tuples") {
    DatasetCollection d{{{"a", {{0, 1.0, 0.5}, {1, 3.0, 1.5}, {2, 5.0, 2.5}, {4, 7.0, 3.5}}}}, DatasetRole::Example};
    const std::vector<Variable> pv{Variable::PreviousState, Variable::Control};
    const auto e = empirical_joint(d, grids, pv);
    CHECK(e.in_range == 2);  // the k=2 -> k=4 gap is skipped
    CHECK(e.joint.mass()[0 * 4 + 1] == 0.5);
    CHECK(e.joint.mass()[1 * 4 + 2] == 0.5);
  }
}

TEST_CASE("least-squares gaussian fit") {
  SUBCASE("noiseless") {
    Trajectory t{"a", {{0, 1.0, 0.0}}};
    double x = 1.0;
    for (std::size_t k = 1; k <= 40; ++k) {
      const double u = 5.0 + std::sin(static_cast<double>(k));
      x = 0.98 * x + 0.26 * u;
      t.samples.push_back({k, x, u});
    }
    const auto fit = fit_gaussian_transition(DatasetCollection{{t}, DatasetRole::Complete});
    CHECK(std::abs(fit.a - 0.98) <= 1e-10);
    CHECK(std::abs(fit.b - 0.26) <= 1e-10);
    CHECK(std::abs(fit.sigma2) <= 1e-10);
  }
  SUBCASE("noisy recovery and residual orthogonality") {
    const auto d = synthetic(0.98, 0.26, 2.6, 10000, 42);
    const auto pairs = transitions(d);
    CHECK(pairs.size() == 10000);
    const auto fit = fit_gaussian(pairs);
    CHECK(std::abs(fit.model.a / 0.98 - 1.0) <= 0.02);
    CHECK(std::abs(fit.model.b / 0.26 - 1.0) <= 0.02);
    CHECK(std::abs(fit.model.sigma2 / 2.6 - 1.0) <= 0.02);
    double ix = 0.0, iu = 0.0, norm = 0.0;
    for (const auto& s : pairs) {
      const double r = s.x - fit.model.a * s.x_prev - fit.model.b * s.u;
      ix += r * s.x_prev;
      iu += r * s.u;
      norm += s.x * s.x;
    }
    CHECK(std::abs(ix) <= 1e-8 * norm);
    CHECK(std::abs(iu) <= 1e-8 * norm);
  }
  SUBCASE("collinear regressors") {
    Trajectory t{"a", {{0, 0.0, 2.0}}};
    for (std::size_t k = 1; k <= 10; ++k) t.samples.push_back({k, static_cast<double>(k), 2.0 * static_cast<double>(k - 1)});
    // u_k = 2 x_{k-1} exactly
    CHECK(code_of([&] { fit_gaussian_transition(DatasetCollection{{t}, DatasetRole::Complete}); }) ==
          ErrorCode::RankDeficient);
  }
  SUBCASE("too few pairs") {
    Trajectory t{"a", {{0, 1.0, 2.0}, {1, 2.0, 1.0}}};
    CHECK(code_of([&] { fit_gaussian_transition(DatasetCollection{{t}, DatasetRole::Complete}); }) ==
          ErrorCode::RankDeficient);
  }
}

TEST_CASE("gaussian discretization") {
  SUBCASE("tiny variance is a point mass at the nearest cell") {
    const Grid x(0.0, 10.0, 10);
    const Grid u(0.0, 1.0, 2);
    const auto c = gaussian_to_conditional({1.0, 2.0, 1e-6}, x, u);
    // x = 3.5, u = 0.75 -> mean 5.0 is a cell edge; x = 2.5, u = 0.25 -> 3.0
    const std::size_t row = 2 * 2 + 0;
    CHECK(c.row(row)[3] == doctest::Approx(0.5));
    CHECK(c.row(row)[2] == doctest::Approx(0.5));
    const std::size_t row2 = 4 * 2 + 1;  // x = 4.5, u = 0.75 -> 6.0
    CHECK(c.row(row2)[5] + c.row(row2)[6] == doctest::Approx(1.0));
    const auto d = gaussian_to_conditional({1.0, 0.0, 1e-6}, x, u);
    CHECK(d.row(3 * 2)[3] == doctest::Approx(1.0));
  }
  SUBCASE("symmetric about a centered mean") {
    const Grid x(-5.0, 5.0, 21);
    const Grid u(-1.0, 1.0, 2);
    const auto c = gaussian_to_conditional({0.0, 0.0, 2.0}, x, u);
    for (std::size_t i = 0; i < 21; ++i) CHECK(c.row(0)[i] == doctest::Approx(c.row(0)[20 - i]).epsilon(1e-14));
  }
  SUBCASE("moments on a 200-cell grid") {
    const Grid x(0.0, 100.0, 200);
    const Grid u(0.0, 10.0, 5);
    const GaussianTransition gt{0.9, 2.0, 9.0};
    const auto c = gaussian_to_conditional(gt, x, u);
    for (std::size_t r = 0; r < c.rows(); r += 37) {
      const double mean = gt.a * x.center(r / 5) + gt.b * u.center(r % 5);
      if (mean < 15.0 || mean > 85.0) continue;
      const auto d = c.row_density(r);
      CHECK(std::abs(mean_mode(d) - mean) <= 0.5 * x.width());
      CHECK(std::abs(variance(d) / gt.sigma2 - 1.0) <= 0.05);
    }
  }
  CHECK(code_of([] { gaussian_to_conditional({1.0, 1.0, 0.0}, Grid(0, 1, 2), Grid(0, 1, 2)); }) ==
        ErrorCode::BadConfig);
}

TEST_CASE("policy extraction and smoothing") {
  const Grid x(0.0, 4.0, 4);
  const Grid u(0.0, 10.0, 10);
  std::vector<double> m(40, 0.0);
  m[0 * 10 + 2] = 0.25;
  m[0 * 10 + 3] = 0.25;
  m[3 * 10 + 7] = 0.5;
  const auto pol = extract_policy(JointDensity({x, u}, m));
  CHECK(pol.row(0)[2] == 0.5);
  CHECK(pol.filled(1));
  CHECK(pol.filled(2));
  CHECK_FALSE(pol.filled(3));

  const auto smooth = gaussian_moment_policy(pol, 1.0);
  CHECK(smooth.filled(1));
  CHECK(mean_mode(smooth.row_density(1)) == doctest::Approx(mean_mode(smooth.row_density(0))));
  CHECK(mean_mode(smooth.row_density(2)) == doctest::Approx(mean_mode(smooth.row_density(3))));
  CHECK(std::abs(mean_mode(smooth.row_density(3)) - 7.5) <= 0.05);  // slight truncation at 10
  CHECK(std::sqrt(variance(smooth.row_density(3))) >= 0.9);
}

TEST_CASE("artifact round trips") {
  const Grid x(0.0, 3.0, 3);
  const Grid u(-1.0, 1.0, 2);
  const Density d(x, {0.1, 0.2, 0.7});
  save(scratch("d.json"), d);
  const auto d2 = load_density(scratch("d.json"));
  CHECK(d2.grid() == x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(d2[i] == d[i]);

  // Values that need all 17 digits survive.
  std::vector<double> odd{1.0 / 3.0, 1.0 / 7.0, 0.0};
  odd[2] = 1.0 - odd[0] - odd[1];
  const Density dd(x, odd);
  save(scratch("odd.json"), dd);
  const auto dd2 = load_density(scratch("odd.json"));
  for (std::size_t i = 0; i < 3; ++i) CHECK(dd2[i] == dd[i]);

  const ConditionalDensity c({x}, u, {0.5, 0.5, 1.0 / 3.0, 2.0 / 3.0, 0.5, 0.5}, {0, 0, 1});
  save(scratch("c.json"), c);
  const auto c2 = load_conditional(scratch("c.json"));
  CHECK(c2.filled(2));
  CHECK_FALSE(c2.filled(0));
  for (std::size_t i = 0; i < 6; ++i) CHECK(c2.table()[i] == c.table()[i]);

  const JointDensity j({x, u}, {0.1, 0.1, 0.2, 0.2, 0.3, 0.1});
  save(scratch("j.json"), j);
  CHECK(load_joint(scratch("j.json")).mass()[4] == 0.3);

  save(scratch("p.json"), Policy{{c, c}});
  const auto p2 = load_policy(scratch("p.json"));
  CHECK(p2.stages.size() == 2);
  CHECK(p2.stages[1].filled(2));

  save(scratch("g.json"), GaussianTransition{0.9820, 0.2591, 2.6118});
  CHECK(load_gaussian(scratch("g.json")).sigma2 == 2.6118);

  SynthesisReport r;
  r.b_star = {0.5, 0.25};
  r.state_marginals = {d, d};
  StageCache sc;
  sc.stage = 1;
  sc.alpha_hat = {0.1, 0.2};
  sc.beta_hat = {0.0, 0.1};
  sc.omega_hat = {0.1, 0.30000000000000004};
  sc.ln_gamma = {0.3, 0.4, 0.5};
  DualSolution ds;
  ds.lambda = {-0.5, 1.25};
  ds.active = {0, 1};
  ds.converged = true;
  sc.duals = {ds};
  sc.targets = {{0.75}};
  r.stages = {sc};
  r.unconverged = {{2, 1}};
  r.filled_example_rows = {3, 0};
  r.closed_loop_kl = 0.125;
  save(scratch("r.json"), r);
  const auto r2 = load_report(scratch("r.json"));
  CHECK(r2.b_star == r.b_star);
  CHECK(r2.stages[0].omega_hat == sc.omega_hat);
  CHECK(r2.stages[0].duals[0].lambda == ds.lambda);
  CHECK(r2.unconverged[0].state == 1);
  CHECK(r2.closed_loop_kl == 0.125);
  save(scratch("r_small.json"), r, false);
  CHECK(load_report(scratch("r_small.json")).stages[0].alpha_hat.empty());

  TransitionArtifact ta;
  ta.gaussian = {GaussianTransition{0.98, 0.26, 2.6}};
  ta.state = Grid(0.0, 50.0, 25);
  ta.control = Grid(0.0, 10.0, 5);
  save(scratch("t.json"), ta);
  const auto t2 = load_transition(scratch("t.json"));
  const auto e1 = ta.expand(3);
  const auto e2 = t2.expand(3);
  CHECK(e2.size() == 3);
  CHECK(e2[0].get() == e2[2].get());
  for (std::size_t i = 0; i < e1[0]->table().size(); ++i) CHECK(e1[0]->table()[i] == e2[0]->table()[i]);

  TransitionArtifact tab;
  tab.tabulated = {*e1[0], *e1[0]};
  save(scratch("tab.json"), tab);
  CHECK(load_transition(scratch("tab.json")).expand(2).size() == 2);
  CHECK(code_of([&] { load_transition(scratch("tab.json")).expand(3); }) == ErrorCode::BadConfig);
}

TEST_CASE("artifact corruption") {
  const Density d(Grid(0.0, 1.0, 2), {0.25, 0.75});
  const auto path = scratch("corrupt.json");
  save(path, d);
  std::string text;
  {
    std::ifstream in(path);
    std::getline(in, text);
  }
  auto rewrite = [&](const std::string& body) { std::ofstream(path, std::ios::trunc) << body; };

  rewrite(text.substr(0, text.size() / 2));
  CHECK(code_of([&] { load_density(path); }) == ErrorCode::ChecksumMismatch);

  auto tampered = text;
  tampered.replace(tampered.find("0.75"), 4, "0.70");
  rewrite(tampered);
  CHECK(code_of([&] { load_density(path); }) == ErrorCode::ChecksumMismatch);

  auto versioned = text;
  versioned.replace(versioned.find("\"schema_version\":1"), 18, "\"schema_version\":9");
  rewrite(versioned);
  CHECK(code_of([&] { load_density(path); }) == ErrorCode::SchemaVersionMismatch);

  rewrite(text);
  CHECK(code_of([&] { load_policy(path); }) == ErrorCode::BadConfig);
  CHECK(code_of([&] { load_density(scratch("nope.json")); }) == ErrorCode::IoError);

  CHECK(checksum("") == "cbf29ce484222325");
  CHECK(checksum("a") == "af63dc4c8601ec8c");
}
