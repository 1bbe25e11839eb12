#pragma once

// Per-step trace records shared by the attack loops and their file encodings.

#include <array>
#include <optional>
#include <string>

#include "ra/core.hpp"
#include "ra/reinforce.hpp"

namespace ra {

inline constexpr int kTraceSchemaVersion = 1;

struct RoleSnapshot {
  bool present = false;
  std::vector<RewardCheckpoint> checkpoints;  // raw judge rewards (seed clipped)
  double terminal = 0.0;
  double avg_ce = 0.0;  // at the prompt of this step
  std::size_t length = 0;
};

struct TraceRecord {
  std::string attack;  // "gcg" or "pgd"
  std::size_t step = 0;
  std::size_t prompt_id = 0;
  double loss = 0.0;    // RLOO loss over all samples at the current prompt
  double metric = 0.0;  // target metric of the current discrete prompt
  std::array<RoleSnapshot, 4> roles;
  bool greedy_harmful = false;
  TokenSeq attack_tokens;

  // GCG
  std::optional<bool> accepted;
  std::optional<std::size_t> selection_len;
  std::optional<double> selected_loss;

  // PGD
  std::optional<double> lr;
  std::optional<double> entropy_target;
  std::optional<double> relaxed_loss;
  std::optional<double> discrete_loss;
  std::optional<bool> restarted;
  std::optional<std::size_t> donor_index;

  PhaseTimes timing;
  double wall_ms = 0.0;
};

// Fills roles, loss and greedy_harmful from a sample set evaluated at x.
void snapshot_samples(TraceRecord& rec, const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x,
                      const RlooConfig& cfg);

// One JSON object, fixed key order, no trailing newline. Timing fields are
// omitted unless requested because they are not reproducible.
std::string to_json_line(const TraceRecord& rec, bool with_timing);

std::string dynamics_header();
std::string dynamics_row(const TraceRecord& rec);

}  // namespace ra
