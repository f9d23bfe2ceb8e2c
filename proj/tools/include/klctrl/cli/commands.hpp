#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "klctrl/cli/config.hpp"

namespace klctrl::cli {

// Artifact file names inside the run directory.
inline constexpr const char* kSystemFile = "system.json";
inline constexpr const char* kReferenceFile = "reference.json";
inline constexpr const char* kExamplePolicyFile = "example_policy.json";
inline constexpr const char* kCompleteJointFile = "complete_joint.json";
inline constexpr const char* kExampleJointFile = "example_joint.json";
inline constexpr const char* kEstimationReportFile = "estimation_report.json";
inline constexpr const char* kCheckReportFile = "check_report.json";
inline constexpr const char* kPolicyFile = "policy.json";
inline constexpr const char* kSynthesisReportFile = "synthesis_report.json";
inline constexpr const char* kPolicyMomentsFile = "policy_moments.csv";
inline constexpr const char* kBandsFile = "bands.csv";
inline constexpr const char* kPathsFile = "paths.csv";
inline constexpr const char* kRolloutFile = "rollout.json";

struct Context {
  RunConfig config;
  std::filesystem::path out;
  bool verbose = false;
  std::ostream* log = nullptr;  // progress and summaries
};

/// 0 ok, 1 usage or I/O, 2 infeasible, 3 solver non-convergence.
int exit_code(ErrorCode code);

/// Writes synthetic complete and example CSVs to the configured data paths.
void cmd_generate(const Context& ctx);

/// Estimates f_X, g_X and g_U from the CSVs and writes them to the run
/// directory with an estimation report.
void cmd_estimate(const Context& ctx);

struct CheckCell {
  std::size_t stage;
  std::size_t state;
  std::string reason;
  double slack;
};

struct CheckSummary {
  std::size_t cells = 0;
  std::vector<CheckCell> infeasible;
  bool feasible() const noexcept { return infeasible.empty(); }
};

/// Slater check for every (stage, state); writes the check report.
CheckSummary cmd_check(const Context& ctx);

/// Runs the check, then the backward recursion; writes the policy, the
/// synthesis report and per-row policy moments. Throws
/// InfeasibleConstraints when the check fails.
SynthesisResult cmd_synthesize(const Context& ctx);

/// Closed-loop rollouts of the synthesized policy through f_X.
RolloutResult cmd_simulate(const Context& ctx);

/// Full command-line entry point.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace klctrl::cli
