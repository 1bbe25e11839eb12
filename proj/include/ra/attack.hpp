#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ra/judge.hpp"
#include "ra/policy.hpp"
#include "ra/reinforce.hpp"
#include "ra/trace.hpp"

namespace ra {

// One behavior to attack: the model, the attack-time judge, the prompt layout
// and the seed response that biases the sampler.
struct AttackProblem {
  const PolicyModel& model;
  const Judge& judge;
  PromptLayout layout;
  TokenSeq seed_response;
  RlooConfig rloo{};
  Objective objective = Objective::Reinforce;
  const TokenRoundtrip* tokenizer = nullptr;  // identity when null

  const TokenRoundtrip& roundtrip() const;
  // Samples at a discrete prompt for the configured objective.
  SampleSet sample(const RelaxedPrompt& x, const HarmfulTracker& tracker, Rng& rng, PhaseTimes* times) const;
  // The loss configuration actually used (flat, b = 0 for the affirmative objective).
  RlooConfig loss_config() const;
};

struct AttackResult {
  TokenSeq best_prompt;  // full prompt
  TokenSeq best_attack;  // attack slot tokens only
  double best_metric = 0.0;
  std::vector<TraceRecord> trace;
  std::optional<std::string> error;  // set if a step failed; trace holds the steps so far
};

}  // namespace ra
