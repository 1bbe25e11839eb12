#pragma once

// Exact ground truth on tiny instances: enumeration of every terminated
// generation, exact expected reward and policy gradient, finite-difference
// checks and exhaustive suffix search.

#include <functional>
#include <span>
#include <vector>

#include "ra/judge.hpp"
#include "ra/policy.hpp"

namespace ra {

inline constexpr std::size_t kEnumMaxLen = 6;
inline constexpr std::size_t kEnumVocabCap = 6;
inline constexpr std::size_t kEnumMaxLeaves = 50000;

struct EnumSpec {
  std::size_t max_len = 4;
  std::size_t vocab_cap = kEnumVocabCap;

  // Throws CapacityError when |V|^max_len or the caps are exceeded.
  void validate(std::size_t vocab_size) const;
};

struct EnumeratedSequence {
  TokenSeq tokens;
  double prob = 0.0;
};

// Every sequence ending at eos (inclusive) or at max_len, with its probability
// under the untempered policy.
std::vector<EnumeratedSequence> enumerate_generations(const PolicyModel& m, const RelaxedPrompt& x,
                                                      const EnumSpec& spec);

using RewardFn = std::function<double(std::span<const TokenId>)>;

// The judge's harmfulness against the clean prompt of x's layout.
RewardFn judge_reward(const Judge& j, const RelaxedPrompt& x, TokenId pad_id);

double exact_expected_reward(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                             const EnumSpec& spec);
double exact_expected_reward(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x, const EnumSpec& spec);

struct ExactGradientForms {
  GradientMatrix score_form;  // sum_y R P grad log P
  GradientMatrix tree_form;   // sum over tree nodes of P(node) grad sum_v p(v|node) value(child)
  double max_abs_diff = 0.0;
};

ExactGradientForms exact_policy_gradient_forms(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                                               const EnumSpec& spec);
// Gradient of the expected reward; throws NumericError if the two forms disagree beyond 1e-9.
GradientMatrix exact_policy_gradient(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                                     const EnumSpec& spec);
GradientMatrix exact_policy_gradient(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x,
                                     const EnumSpec& spec);

using ScalarFn = std::function<double(const RelaxedPrompt&)>;

// Central differences on raw attack-row coordinates (no renormalization).
// Other rows are zero.
Matrix finite_difference_gradient(const ScalarFn& f, const RelaxedPrompt& x, double h = 1e-5);

struct FdReport {
  Matrix numeric;
  Matrix relative_error;  // attack rows only; other rows zero
  double max_relative_error = 0.0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor) per attack coordinate.
FdReport fd_check(const ScalarFn& f, const RelaxedPrompt& x, const GradientMatrix& analytic, double h = 1e-5,
                  double abs_floor = 1e-4);

struct SuffixSearchResult {
  TokenSeq attack;
  TokenSeq prompt;
  double value = 0.0;
  std::size_t evaluated = 0;
};

// Maximizer of the exact expected reward over every ascii attack assignment,
// ties to the lexicographically first. Parallel over assignments.
SuffixSearchResult exhaustive_best_suffix(const PolicyModel& m, const Judge& j, const PromptLayout& layout,
                                          const EnumSpec& spec);
SuffixSearchResult exhaustive_best_suffix_serial(const PolicyModel& m, const Judge& j, const PromptLayout& layout,
                                                 const EnumSpec& spec);

}  // namespace ra
