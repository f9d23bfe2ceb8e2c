#include <doctest.h>

#include <cmath>
#include <random>

#include "klctrl/synthesis.hpp"
#include "small_problem.hpp"

using namespace klctrl;

namespace {

template <typename Fn>
Error error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected klctrl::Error");
  return Error(ErrorCode::BadConfig, "unreachable");
}

}  // namespace

TEST_CASE("stage helpers") {
  const std::vector<double> row{0.2, 0.5, 0.3};
  CHECK(beta_hat(row, std::vector<double>{0, 0, 0}) == 0.0);
  CHECK(beta_hat(row, std::vector<double>{1.5, 1.5, 1.5}) == doctest::Approx(-1.5));
  CHECK(beta_hat(std::vector<double>{0, 1, 0}, std::vector<double>{4, -2, 9}) == 2.0);

  CHECK(alpha_hat(row, row) == 0.0);
  CHECK(alpha_hat(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}) ==
        doctest::Approx(0.143841036225890).epsilon(1e-12));

  const Grid x(0.0, 2.0, 2);
  const std::vector<double> lg{0.4, -1.0};
  CHECK(minimum_b(uniform(x), lg) == doctest::Approx(0.3));
  CHECK(minimum_b(point_mass(x, 1), lg) == doctest::Approx(1.0));
  CHECK(minimum_b(uniform(x), std::vector<double>{0, 0}) == 0.0);

  DualSolution d;
  d.lambda = {std::log(2.0) - 1.0, -std::log(3.0)};
  d.active = {0, 1};
  const std::vector<double> targets{0.75};
  CHECK(gamma_update(d, targets) == doctest::Approx(std::log(2.0) - 0.75 * std::log(3.0)).epsilon(1e-14));
  DualSolution unconstrained;
  unconstrained.lambda = {-1.0};
  unconstrained.active = {0};
  CHECK(gamma_update(unconstrained, {}) == 0.0);
  // Inactive multipliers are skipped.
  d.active = {0};
  CHECK(gamma_update(d, targets) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("fixpoint: f_X = g_X and no constraints") {
  std::mt19937_64 rng(1);
  const Grid x(0.0, 50.0, 12);
  const Grid u(0.0, 10.0, 7);
  const auto shared = small::transition(rng, x, u);
  SynthesisProblem p{6, x, u, {}, {}, {}, {}, uniform(x)};
  for (int k = 0; k < 6; ++k) {
    p.system.push_back(shared);
    p.reference.push_back(shared);
    p.example.push_back(small::policy(rng, x, u));
  }
  const auto r = synthesize(p);
  for (std::size_t k = 0; k < 6; ++k) {
    const auto got = r.policy.stages[k].table();
    const auto want = p.example[k]->table();
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-10);
    CHECK(std::abs(r.report.b_star[k]) <= 1e-10);
    for (double v : r.report.stages[k].omega_hat) CHECK(std::abs(v) <= 1e-14);
  }
  CHECK(std::abs(r.report.closed_loop_kl) <= 1e-10);
  CHECK(r.report.state_marginals.size() == 7);
}

TEST_CASE("horizon one is a single projection") {
  std::mt19937_64 rng(2);
  auto p = small::random_problem(rng, 4, 3, 1);
  ConstraintSet cs;
  cs.add(moment_inequality(1, 1.2, Sense::AtMost, p.control));
  p.constraints = {fixed_constraints(cs)};
  const auto r = synthesize(p);
  const auto alpha = alpha_table(*p.system[0], *p.reference[0]);
  for (double b : r.report.stages[0].beta_hat) CHECK(b == 0.0);
  for (std::size_t x = 0; x < 4; ++x) {
    const std::span<const double> a(alpha.data() + x * 3, 3);
    const auto single = solve(p.control, p.example[0]->row(x), a, cs);
    for (std::size_t i = 0; i < 3; ++i) CHECK(r.policy.stages[0].row(x)[i] == doctest::Approx(single.f_star[i]));
  }
}

TEST_CASE("telescoped KL equals the explicit joint KL") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 40; ++t) {
    const std::size_t nx = 2 + rng() % 3;
    const std::size_t nu = 2 + rng() % 3;
    const std::size_t n = 1 + rng() % 3;
    const auto p = small::random_problem(rng, nx, nu, n);
    std::vector<ConditionalPtr> rows;
    for (std::size_t k = 0; k < n; ++k) rows.push_back(small::policy(rng, p.state, p.control));
    const auto pol = small::as_policy(rows);
    CHECK(std::abs(kl_closed_loop(pol, p) - small::direct_kl(pol, p)) <= 1e-10);
    CHECK(std::abs(kl_closed_loop(small::as_policy(p.example), p) -
                   small::direct_kl(small::as_policy(p.example), p)) <= 1e-10);
  }
}

TEST_CASE("example policy with matching models has zero closed-loop KL") {
  std::mt19937_64 rng(4);
  auto p = small::random_problem(rng, 3, 2, 3);
  p.reference = p.system;
  CHECK(std::abs(kl_closed_loop(small::as_policy(p.example), p)) <= 1e-15);
}

TEST_CASE("synthesized policy: constraints, bookkeeping and optimality") {
  std::mt19937_64 rng(5);
  auto p = small::random_problem(rng, 4, 3, 3);  // controls at 0.5, 1.5, 2.5
  ConstraintSet cs;
  cs.add(moment_equality(1, 1.2, p.control));
  p.constraints.assign(3, fixed_constraints(cs));
  const auto r = synthesize(p);

  for (std::size_t k = 0; k < 3; ++k) {
    const auto& st = r.report.stages[k];
    for (std::size_t i = 0; i < st.omega_hat.size(); ++i) CHECK(st.omega_hat[i] == st.alpha_hat[i] + st.beta_hat[i]);
    for (std::size_t x = 0; x < 4; ++x) {
      CHECK(std::abs(mean_mode(r.policy.stages[k].row_density(x)) - 1.2) <= 1e-6);
    }
    CHECK(std::isfinite(r.report.b_star[k]));
  }
  for (double b : r.report.stages[2].beta_hat) CHECK(b == 0.0);

  const double best = kl_closed_loop(r.policy, p);
  CHECK(std::abs(best - small::direct_kl(r.policy, p)) <= 1e-10);
  CHECK(std::abs(best - r.report.closed_loop_kl) <= 1e-12);
  // B*_1 is the optimal total cost.
  CHECK(std::abs(r.report.b_star[0] - best) <= 1e-8);

  // Feasible perturbations keep sum and mean: direction (1, -2, 1).
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = rng() % 3;
    const std::size_t x = rng() % 4;
    auto stages = r.policy.stages;
    std::vector<double> table(stages[k].table().begin(), stages[k].table().end());
    double* row = table.data() + x * 3;
    const double cap = std::min({row[0], row[1] / 2.0, row[2]});
    const double s = u(rng) * cap;
    row[0] += s;
    row[1] -= 2.0 * s;
    row[2] += s;
    stages[k] = ConditionalDensity({p.state}, p.control, std::move(table));
    CHECK(kl_closed_loop(Policy{stages}, p) >= best - 1e-12);
  }
}

TEST_CASE("moment matching rule") {
  const Grid u(0.0, 30.0, 100);
  const auto rule = moment_matching_rule(u, 4.0);
  std::vector<double> raw(100);
  for (std::size_t i = 0; i < 100; ++i) raw[i] = std::exp(-0.5 * std::pow((u.center(i) - 15.0) / 2.0, 2));
  const auto g = normalize(raw, u);
  const auto cs = rule(1, 0, g);
  REQUIRE(cs.size() == 2);
  CHECK(cs[0].target == doctest::Approx(mean_mode(g)));
  CHECK(cs[1].target == doctest::Approx(4.0 * variance(g) + mean_mode(g) * mean_mode(g)));
  const auto r = solve(u, g.mass(), {}, cs);
  CHECK(std::sqrt(variance(r.f_star)) == doctest::Approx(2.0 * std::sqrt(variance(g))).epsilon(1e-6));
}

TEST_CASE("synthesis errors") {
  std::mt19937_64 rng(6);
  auto p = small::random_problem(rng, 3, 2, 2);

  SUBCASE("infeasible stage") {
    ConstraintSet cs;
    cs.add(moment_equality(1, 5.0, p.control));
    p.constraints = {ConstraintRule{}, fixed_constraints(cs)};
    const auto e = error_of([&] { synthesize(p); });
    CHECK(e.code() == ErrorCode::InfeasibleConstraints);
    CHECK(e.index().value() == 2);
  }
  SUBCASE("non-convergence lists cells") {
    ConstraintSet cs;
    cs.add(moment_equality(1, 0.9, p.control));
    p.constraints = {fixed_constraints(cs), fixed_constraints(cs)};
    SynthesisOptions o;
    o.solver.dual.method = DualMethod::ProjectedGradient;
    o.solver.dual.max_iterations = 1;
    const auto e = error_of([&] { synthesize(p, o); });
    CHECK(e.code() == ErrorCode::NotConverged);
    CHECK(std::string(e.what()).find("(k=2, x=0)") != std::string::npos);
    o.fail_on_nonconvergence = false;
    const auto r = synthesize(p, o);
    CHECK(r.report.unconverged.size() == 6);
  }
  SUBCASE("absolute continuity") {
    std::vector<double> t(p.reference[0]->table().begin(), p.reference[0]->table().end());
    // row (x=1, u=0) of the reference loses cell 2
    t[(1 * 2 + 0) * 3 + 2] = 0.0;
    const double s = t[(1 * 2 + 0) * 3 + 0] + t[(1 * 2 + 0) * 3 + 1];
    t[(1 * 2 + 0) * 3 + 0] /= s;
    t[(1 * 2 + 0) * 3 + 1] /= s;
    p.reference[0] = std::make_shared<const ConditionalDensity>(std::vector<Grid>{p.state, p.control}, p.state, t);
    const auto e = error_of([&] { synthesize(p); });
    CHECK(e.code() == ErrorCode::AbsContinuityViolation);
    CHECK(e.index().value() == 2);
    SynthesisOptions o;
    o.support_floor = 1e-9;
    CHECK_NOTHROW(synthesize(p, o));
  }
  SUBCASE("grid mismatch") {
    p.example[1] = small::policy(rng, p.state, Grid(0.0, 1.0, 2));
    CHECK(error_of([&] { synthesize(p); }).code() == ErrorCode::GridMismatch);
  }
  SUBCASE("horizon mismatch") {
    p.system.pop_back();
    CHECK(error_of([&] { synthesize(p); }).code() == ErrorCode::BadConfig);
  }
}
