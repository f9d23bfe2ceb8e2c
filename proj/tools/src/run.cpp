#include <exception>
#include <ostream>

#include <CLI11.hpp>

#include "klctrl/cli/commands.hpp"

namespace klctrl::cli {

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Constrained KL control: estimate models, check constraints, synthesize and simulate policies"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "klctrl-out";
  std::optional<std::uint64_t> seed;
  bool verbose = false;

  const std::vector<std::pair<const char*, const char*>> commands{
      {"generate", "write a synthetic complete/example dataset pair"},
      {"estimate", "estimate f_X, g_X and g_U from trajectory CSVs"},
      {"check", "check feasibility and Slater's condition per stage and state"},
      {"synthesize", "run the backward recursion and write the policy"},
      {"simulate", "closed-loop rollouts of the synthesized policy"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--out", out_dir, "run directory for artifacts")->capture_default_str();
    sub->add_option("--seed", seed, "override the simulation and generator seeds");
    sub->add_flag("--verbose", verbose, "print per-stage progress");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    Context ctx{load_config(config_path), out_dir, verbose, &out};
    if (seed) {
      ctx.config.simulation.seed = *seed;
      ctx.config.generator.seed = *seed;
    }
    const auto& name = app.get_subcommands().front()->get_name();
    if (name == "generate") {
      cmd_generate(ctx);
    } else if (name == "estimate") {
      cmd_estimate(ctx);
    } else if (name == "check") {
      return cmd_check(ctx).feasible() ? 0 : 2;
    } else if (name == "synthesize") {
      cmd_synthesize(ctx);
    } else {
      cmd_simulate(ctx);
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace klctrl::cli
