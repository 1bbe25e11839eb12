#pragma once

// Executes a configured run and writes its files:
//   trace.jsonl    one record per (step, prompt), ordered by step then prompt
//   result.json    best prompt per behavior, its metric and oracle expected reward
//   dynamics.csv   per-step rewards and cross entropies per role
//   timing.csv     per-phase milliseconds (not reproducible, kept apart)

#include <optional>
#include <string>
#include <vector>

#include "ra/config.hpp"

namespace ra {

struct RunSummary {
  std::vector<AttackResult> results;
  std::vector<std::optional<double>> oracle_reward;  // per prompt, when enumeration is tractable
  std::optional<std::string> error;
  int exit_code = 0;
};

// Runs the attack in memory.
RunSummary execute(const RunConfig& cfg, const Setup& setup);
// execute() plus the output files.
RunSummary run(const RunConfig& cfg);

std::vector<const TraceRecord*> ordered_records(const std::vector<AttackResult>& results);
std::string trace_jsonl(const std::vector<AttackResult>& results, bool with_timing);
std::string result_json(const RunConfig& cfg, const RunSummary& s);
std::string dynamics_csv(const std::vector<AttackResult>& results);
std::string timing_csv(const std::vector<AttackResult>& results);

struct VerifyCase {
  std::string name;
  double prob_sum_error = 0.0;     // |sum_y P(y) - 1|
  double forms_max_diff = 0.0;     // score form vs tree form
  double exact_fd_error = 0.0;     // exact policy gradient vs finite differences
  double loglik_fd_error = 0.0;    // loglik_gradient vs finite differences
  double rloo_fd_error = 0.0;      // rloo_gradient vs finite differences
  double max_gradient_error() const;
};

struct VerifyReport {
  std::vector<VerifyCase> cases;
  double max_gradient_error = 0.0;
  bool passed = false;
};

inline constexpr double kVerifyGradTol = 1e-4;

// Oracle checks on the bundled toy instances plus the configured model when
// it is small enough to enumerate.
VerifyReport verify(const RunConfig& cfg);
std::string verify_json(const VerifyReport& r);

// Mean per-phase milliseconds per step of the configured attack, as a table.
std::string bench_table(const RunConfig& cfg);

}  // namespace ra
