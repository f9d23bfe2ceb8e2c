#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>

#include "klctrl/data_io.hpp"
#include "klctrl/simulation.hpp"
#include "small_problem.hpp"

using namespace klctrl;

namespace {

/// Transition that moves deterministically to cell (x + u) clamped.
ConditionalPtr shift_transition(const Grid& x, const Grid& u) {
  const std::size_t nx = x.size();
  const std::size_t nu = u.size();
  std::vector<double> t(nx * nu * nx, 0.0);
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t a = 0; a < nu; ++a) t[(i * nu + a) * nx + std::min(nx - 1, i + a)] = 1.0;
  return std::make_shared<const ConditionalDensity>(std::vector<Grid>{x, u}, x, std::move(t));
}

}  // namespace

TEST_CASE("deterministic chain in mean mode") {
  const Grid x(0.0, 10.0, 10);
  const Grid u(0.0, 3.0, 3);  // centers 0.5, 1.5, 2.5
  std::vector<double> rows;
  for (std::size_t i = 0; i < 10; ++i) {
    // mean 1.5 -> middle cell -> shift by one
    rows.insert(rows.end(), {0.25, 0.5, 0.25});
  }
  const ConditionalDensity pi({x}, u, rows);
  const Policy policy{{pi, pi, pi, pi}};
  const std::vector<ConditionalPtr> sys(4, shift_transition(x, u));
  RolloutConfig cfg{4, 3, ControlMode::Mean, 17, point_mass(x, 2)};
  const auto r = rollout(policy, sys, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r.x0[i] == 2.5);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(r.u[i][k] == 1.5);
      CHECK(r.x[i][k] == x.center(3 + k));
    }
  }
  const auto bands = band_statistics(r);
  CHECK(bands.size() == 4);
  CHECK(bands[0].std_x == 0.0);
  CHECK(bands[0].std_u == 0.0);
  CHECK(bands[3].mean_x == x.center(6));
  CHECK(r.clipped == 0);
}

TEST_CASE("example policy with point-mass transitions traces the example mean") {
  const Grid x(0.0, 20.0, 20);
  const Grid u(0.0, 3.0, 3);
  std::vector<double> rows;
  for (std::size_t i = 0; i < 20; ++i) rows.insert(rows.end(), {0.0, 0.0, 1.0});
  const ConditionalDensity pi({x}, u, rows);
  const auto r = rollout(Policy{{pi, pi, pi}}, std::vector<ConditionalPtr>(3, shift_transition(x, u)),
                         RolloutConfig{3, 2, ControlMode::Sample, 5, point_mass(x, 0)});
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(r.u[0][k] == 2.5);
    CHECK(r.x[0][k] == x.center(2 * (k + 1)));
  }
}

TEST_CASE("sample mode mean matches the policy within CLT bounds") {
  std::mt19937_64 rng(3);
  const Grid x(0.0, 5.0, 5);
  const Grid u(0.0, 4.0, 4);
  const auto sys = small::transition(rng, x, u);
  const ConditionalDensity pi({x}, u, small::random_rows(rng, 5, 4));
  const std::size_t n = 1000;
  const auto x0 = uniform(x);
  const auto r = rollout(Policy{{pi, pi, pi}}, {sys, sys, sys}, RolloutConfig{3, n, ControlMode::Sample, 99, x0});

  // Policy-implied mean of u_k uses the exact state marginals.
  Density p = x0;
  const auto bands = band_statistics(r);
  for (std::size_t k = 0; k < 3; ++k) {
    double mean = 0.0, second = 0.0;
    for (std::size_t s = 0; s < 5; ++s) {
      const auto row = pi.row_density(s);
      mean += p[s] * mean_mode(row);
      second += p[s] * expectation_of(row, [](double z) { return z * z; });
    }
    const double sd = std::sqrt(second - mean * mean);
    CHECK(std::abs(bands[k].mean_u - mean) <= 3.0 * sd / std::sqrt(static_cast<double>(n)));
    p = propagate(p, pi, *sys);
  }
}

TEST_CASE("reproducibility and per-rollout streams") {
  std::mt19937_64 rng(4);
  const Grid x(0.0, 6.0, 6);
  const Grid u(0.0, 3.0, 3);
  const auto sys = small::transition(rng, x, u);
  const ConditionalDensity pi({x}, u, small::random_rows(rng, 6, 3));
  const Policy policy{{pi, pi, pi, pi, pi}};
  const std::vector<ConditionalPtr> s5(5, sys);
  const auto a = rollout(policy, s5, RolloutConfig{5, 20, ControlMode::Sample, 7, uniform(x)});
  const auto b = rollout(policy, s5, RolloutConfig{5, 20, ControlMode::Sample, 7, uniform(x)});
  CHECK(a.x == b.x);
  CHECK(a.u == b.u);
  const auto c = rollout(policy, s5, RolloutConfig{5, 50, ControlMode::Sample, 7, uniform(x)});
  for (std::size_t i = 0; i < 20; ++i) CHECK(c.x[i] == a.x[i]);
  const auto d = rollout(policy, s5, RolloutConfig{5, 20, ControlMode::Sample, 8, uniform(x)});
  CHECK(d.x != a.x);
  CHECK(rollout_seed(7, 0) != rollout_seed(7, 1));

  // Grid containment.
  for (const auto& path : c.x)
    for (double v : path) CHECK(x.center(x.nearest(v)) == v);
}

TEST_CASE("band statistics") {
  RolloutResult r;
  r.x0 = {0.0, 0.0};
  r.x = {{1.0}, {1.0}};
  r.u = {{1.0}, {3.0}};
  const auto b = band_statistics(r);
  CHECK(b[0].mean_u == 2.0);
  CHECK(b[0].std_u == doctest::Approx(std::sqrt(2.0)));
  CHECK(b[0].std_x == 0.0);

  RolloutResult one;
  one.x0 = {0.0};
  one.x = {{1.0}};
  one.u = {{1.0}};
  CHECK_THROWS_AS(band_statistics(one), Error);
}

TEST_CASE("exports") {
  RolloutResult r;
  r.x0 = {0.5, 1.5};
  r.x = {{1.0, 2.0}, {1.5, 2.5}};
  r.u = {{1.0, 3.0}, {3.0, 1.0}};
  r.clipped = 1;
  const auto dir = std::filesystem::temp_directory_path() / "klctrl_test_sim";
  std::filesystem::create_directories(dir);
  write_band_csv(band_statistics(r), dir / "bands.csv");
  std::ifstream in(dir / "bands.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "stage,mean_x,std_x,mean_u,std_u");
  CHECK(first.rfind("1,1.25,", 0) == 0);

  write_paths_csv(r, dir / "paths.csv");
  std::ifstream paths(dir / "paths.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(paths, line)) ++lines;
  CHECK(lines == 1 + 2 * 3);

  save(dir / "rollout.json", r);
  const auto back = load_rollout(dir / "rollout.json");
  CHECK(back.x == r.x);
  CHECK(back.u == r.u);
  CHECK(back.clipped == 1);
}

TEST_CASE("rollout validation") {
  const Grid x(0.0, 4.0, 4);
  const Grid u(0.0, 2.0, 2);
  const ConditionalDensity pi({x}, u, std::vector<double>(8, 0.5));
  const auto sys = shift_transition(x, u);
  CHECK_THROWS_AS(rollout(Policy{{pi}}, {sys}, RolloutConfig{2, 1, ControlMode::Mean, 0, uniform(x)}), Error);
  CHECK_THROWS_AS(rollout(Policy{{pi}}, {sys}, RolloutConfig{1, 0, ControlMode::Mean, 0, uniform(x)}), Error);
  CHECK_THROWS_AS(rollout(Policy{{pi}}, {sys}, RolloutConfig{1, 1, ControlMode::Mean, 0, uniform(Grid(0.0, 4.0, 5))}),
                  Error);
}
