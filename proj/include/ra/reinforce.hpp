#pragma once

// REINFORCE leave-one-out objective: the biased sampler, position weights,
// token-level RLOO coefficients, the weighted cross-entropy loss, its
// gradient and the global target metric used to pick the best step.

#include <array>
#include <span>
#include <vector>

#include "ra/core.hpp"
#include "ra/judge.hpp"
#include "ra/policy.hpp"

namespace ra {

// Reinforce: the RLOO objective over the biased sampler.
// Affirmative: plain cross entropy of the fixed seed response (the classic
// GCG/PGD objective), expressed as a single pinned sample with reward one.
enum class Objective { Reinforce, Affirmative };

struct RlooConfig {
  double b_static = 0.1;
  double weight_first = 5.0;
  double weight_last = 1.0;
  std::size_t max_len = kMaxGenerationLen;

  void validate() const;
  // b_static = 0 and flat weights: the loss reduces to sum of CE.
  static RlooConfig affirmative(std::size_t max_len = kMaxGenerationLen);
};

inline constexpr double kNotHarmfulPenalty = 10.0;

struct PhaseTimes {
  double generate_ms = 0.0;
  double gradient_ms = 0.0;
  double reward_ms = 0.0;
  double selection_ms = 0.0;

  double total() const { return generate_ms + gradient_ms + reward_ms + selection_ms; }
};

// Seed (greedily extended, clipped), Greedy, Random (T=0.7, top-256) and the
// tracked Harmful generation, each with forward-maxed and prefix-maxed rewards.
SampleSet draw_samples(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x,
                       std::span<const TokenId> seed_resp, const HarmfulTracker& tracker, Rng& rng,
                       const RlooConfig& cfg, PhaseTimes* times = nullptr);

// The sample set of the affirmative objective: the seed response alone, reward one.
SampleSet pinned_samples(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> target,
                         const RlooConfig& cfg);

// Linear ramp weight_first -> weight_last over the canonical max_len grid,
// rescaled to mean one over that grid; first `length` entries.
std::vector<double> position_weights(const RlooConfig& cfg, std::size_t length);

// coeff_i = r_i - (b_static + sum_{j != i} r_j) / K
template <class T>
std::vector<T> leave_one_out_coefficients(std::span<const T> rewards, T b_static) {
  const std::size_t k = rewards.size();
  std::vector<T> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    T others = b_static;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != i) others += rewards[j];
    }
    out[i] = rewards[i] - others / T(static_cast<long>(k));
  }
  return out;
}

// Textbook RLOO with divisor K - 1 (K = 1 falls back to a zero baseline).
template <class T>
std::vector<T> rloo_divisor_km1(std::span<const T> rewards) {
  const std::size_t k = rewards.size();
  std::vector<T> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (k == 1) {
      out[i] = rewards[i];
      continue;
    }
    T others = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      if (j != i) others += rewards[j];
    }
    out[i] = rewards[i] - others / T(static_cast<long>(k - 1));
  }
  return out;
}

using RoleVectors = std::array<std::vector<double>, 4>;

// Per role, per position (over cfg.max_len) coefficients from the token-level
// rewards in `samples`. Roles excluded or absent get empty vectors.
RoleVectors rloo_coefficients(const SampleSet& samples, const RlooConfig& cfg, bool exclude_random = false);

struct LossBreakdown {
  double total = 0.0;
  RoleVectors per_sample_coeff;
  RoleVectors per_sample_ce;
  std::array<double, 4> contribution{};  // sum_t coeff * weight * ce per role
};

// A frozen weighted cross-entropy objective sum_i sum_t weight_i[t] CE(y_t^(i) | x + y_{:t}^(i)).
// This is what candidate scoring evaluates many times per step.
struct WeightedCE {
  std::vector<TokenSeq> sequences;
  std::vector<std::vector<double>> weights;

  double eval(const PolicyModel& m, const RelaxedPrompt& x) const;
  GradientMatrix gradient(const PolicyModel& m, const RelaxedPrompt& x) const;
};

// Coefficient * position weight per token, truncated to `upto` tokens.
WeightedCE frozen_objective(const SampleSet& samples, const RlooConfig& cfg, bool exclude_random,
                            std::size_t upto = kMaxGenerationLen);

LossBreakdown rloo_loss(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x,
                        const RlooConfig& cfg, bool exclude_random, std::size_t upto = kMaxGenerationLen);

GradientMatrix rloo_gradient(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x,
                             const RlooConfig& cfg);

bool greedy_harmful(const SampleSet& samples);

// Loss without the random sample, +10 if the greedy generation is harmless,
// greedy contribution doubled otherwise. Lower is better. Without a greedy
// sample (affirmative objective) this is the plain loss.
double target_metric(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x, const RlooConfig& cfg);

// Candidates offered to the harmful tracker: the greedy and random samples.
std::vector<HarmfulCandidate> tracker_candidates(const SampleSet& samples);

}  // namespace ra
