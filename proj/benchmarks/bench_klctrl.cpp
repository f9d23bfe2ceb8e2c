#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "klctrl/data_io.hpp"
#include "klctrl/projection.hpp"
#include "klctrl/simulation.hpp"
#include "klctrl/synthesis.hpp"

namespace {

using namespace klctrl;

std::vector<double> gaussian_mass(const Grid& grid, double mean, double sd) {
  std::vector<double> raw(grid.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double z = (grid.center(i) - mean) / sd;
    raw[i] = std::exp(-0.5 * z * z);
  }
  return raw;
}

// Speed-keeping example policy: mean speed drifts down with position.
ConditionalPtr example_policy(const Grid& x, const Grid& u) {
  std::vector<double> table;
  table.reserve(x.size() * u.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mean = 12.0 - 4.0 * x.center(i) / x.upper();
    const auto d = normalize(gaussian_mass(u, mean, 1.5), u);
    table.insert(table.end(), d.mass().begin(), d.mass().end());
  }
  return std::make_shared<const ConditionalDensity>(std::vector<Grid>{x}, u, std::move(table));
}

SynthesisProblem problem(std::size_t nx, std::size_t nu, std::size_t horizon, bool constrained) {
  const Grid x(0.0, 300.0, nx);
  const Grid u(0.0, 30.0, nu);
  auto f = std::make_shared<const ConditionalDensity>(
      gaussian_to_conditional(GaussianTransition{0.9820, 0.2591, 2.6118}, x, u));
  auto g = std::make_shared<const ConditionalDensity>(
      gaussian_to_conditional(GaussianTransition{0.9811, 0.2723, 1.7622}, x, u));
  auto gu = example_policy(x, u);
  SynthesisProblem p{horizon, x, u, {}, {}, {}, {}, normalize(gaussian_mass(x, 20.0, 2.0), x)};
  p.system.assign(horizon, f);
  p.reference.assign(horizon, g);
  p.example.assign(horizon, gu);
  if (constrained) p.constraints.assign(horizon, moment_matching_rule(u, 4.0));
  return p;
}

void BM_ProjectionSolve(benchmark::State& state) {
  const auto cells = static_cast<std::size_t>(state.range(0));
  const Grid u(0.0, 30.0, cells);
  const auto g = normalize(gaussian_mass(u, 10.0, 1.5), u);
  std::mt19937_64 rng(3);
  std::vector<double> alpha(cells);
  for (auto& a : alpha) a = 0.1 * uniform01(rng);
  ConstraintSet cs;
  cs.add(moment_equality(1, 10.0, u));
  cs.add(moment_equality(2, 4.0 * 2.25 + 100.0, u));
  for (auto _ : state) {
    auto r = solve(u, g.mass(), alpha, cs);
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(BM_ProjectionSolve)->Arg(30)->Arg(100)->Arg(300);

void BM_Synthesize(benchmark::State& state) {
  const auto nx = static_cast<std::size_t>(state.range(0));
  const auto p = problem(nx, nx / 3, 28, state.range(1) != 0);
  SynthesisOptions opt;
  opt.support_floor = 1e-300;
  for (auto _ : state) {
    auto r = synthesize(p, opt);
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(BM_Synthesize)->Args({60, 0})->Args({60, 1})->Args({300, 1})->Unit(benchmark::kMillisecond);

void BM_Rollout(benchmark::State& state) {
  const auto p = problem(300, 100, 28, false);
  SynthesisOptions opt;
  opt.support_floor = 1e-300;
  const auto policy = synthesize(p, opt).policy;
  RolloutConfig cfg{28, static_cast<std::size_t>(state.range(0)), ControlMode::Sample, 7, p.initial};
  for (auto _ : state) {
    auto r = rollout(policy, p.system, cfg);
    benchmark::DoNotOptimize(r);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Rollout)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
