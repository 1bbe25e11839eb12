#include "ra/attack.hpp"

namespace ra {

const TokenRoundtrip& AttackProblem::roundtrip() const {
  static const TokenRoundtrip identity;
  return tokenizer ? *tokenizer : identity;
}

RlooConfig AttackProblem::loss_config() const {
  return objective == Objective::Affirmative ? RlooConfig::affirmative(rloo.max_len) : rloo;
}

SampleSet AttackProblem::sample(const RelaxedPrompt& x, const HarmfulTracker& tracker, Rng& rng,
                                PhaseTimes* times) const {
  if (objective == Objective::Affirmative) return pinned_samples(model, x, seed_response, loss_config());
  return draw_samples(model, judge, x, seed_response, tracker, rng, rloo, times);
}

}  // namespace ra
