#pragma once

// Small rigged ToyLM/ToyJudge instances with planted structure, sized for
// exact enumeration. Token ids: 0 eos, 1 pad, 2 "!", 3 H (harmful),
// 4 S ("sure"), 5 R (refusal).

#include <cstdint>

#include "ra/judge.hpp"
#include "ra/oracle.hpp"
#include "ra/policy.hpp"
#include "ra/reinforce.hpp"

namespace ra::toy {

inline constexpr TokenId kEos = 0;
inline constexpr TokenId kPad = 1;
inline constexpr TokenId kBang = 2;
inline constexpr TokenId kH = 3;
inline constexpr TokenId kS = 4;
inline constexpr TokenId kR = 5;
inline constexpr std::size_t kVocabSize = 6;
inline constexpr std::size_t kGenLen = 4;

Vocab vocab();

struct Instance {
  ToyLM model;
  ToyJudge judge;
  PromptLayout layout;
  TokenSeq seed_response;  // what REINFORCE starts from
  TokenSeq affirmative;    // fixed target of the affirmative objective
  EnumSpec spec;
  RlooConfig rloo;
  TokenId trigger = kBang;  // planted token that makes the mode harmful
  TokenId decoy = kBang;    // planted token that maximizes the affirmative target (misleading instances)
};

// One attack token (the trigger) flips a refusing model into a harmful one.
Instance trigger_instance(std::uint64_t seed);

// Like trigger_instance, plus a decoy token that makes the affirmative target
// [S, S] likely while the continuation stays harmless.
Instance misleading_instance(std::uint64_t seed);

// Affirmative target log-likelihood maximizer found by exhaustive search.
SuffixSearchResult best_affirmative_suffix(const Instance& inst);

}  // namespace ra::toy
