#pragma once

// REINFORCE-GCG: gradient-guided single-token mutations, candidate filtering,
// adaptive selection length, mode-harmful acceptance and best-step tracking.

#include <vector>

#include "ra/attack.hpp"

namespace ra {

struct GcgConfig {
  std::size_t search_width = 512;
  std::size_t iterations = 500;
  std::size_t top_k = 256;  // clamped to the number of eligible tokens
  double select_threshold = 0.01;
  std::size_t min_select_len = 40;

  void validate() const;
};

// Default attack suffix length, filled with "!".
inline constexpr std::size_t kGcgSuffixInitLen = 20;

struct GcgState {
  TokenSeq current;  // full discrete prompt
  HarmfulTracker tracker;
  TokenSeq best_prompt;
  double best_metric = 0.0;
  bool greedy_harmful = false;
  std::size_t step = 0;
};

// Eligible replacement tokens for one attack row: ascii tokens other than the
// current one, the top-k by -G (ties -> lowest id).
std::vector<TokenId> candidate_tokens(std::span<const double> grad_row, TokenId current, std::size_t top_k,
                                      const Vocab& vocab);

// S candidates; candidate j = 1..S rewrites attack slot (j mod n_slots) with a
// uniform draw from that slot's candidate tokens.
std::vector<TokenSeq> mutate(const GradientMatrix& grad, std::span<const TokenId> current, const PromptLayout& layout,
                             const GcgConfig& cfg, const Vocab& vocab, Rng& rng);

// Drops candidates that do not survive the tokenizer round-trip unless none do.
std::vector<TokenSeq> filter_roundtrip(std::vector<TokenSeq> cands, const TokenRoundtrip& tok);

// Generation length used to score candidates, from the raw greedy checkpoints.
std::size_t select_len(const SampleSet& samples, const GcgConfig& cfg, std::size_t max_len = kMaxGenerationLen);

struct ScoreResult {
  std::size_t best = 0;
  std::vector<double> losses;
};

// Parallel (OpenMP) candidate scoring of a frozen objective. Ties -> lowest index.
ScoreResult score_candidates(const PolicyModel& m, const WeightedCE& objective, std::span<const TokenSeq> cands,
                             const PromptLayout& layout);
// Serial reference implementation.
ScoreResult score_candidates_serial(const PolicyModel& m, const WeightedCE& objective,
                                    std::span<const TokenSeq> cands, const PromptLayout& layout);

// Installs the winner unless the current greedy generation is harmful and the
// winner's is not. The tracker is updated either way; best follows the metric.
GcgState accept(GcgState state, const TokenSeq& winner, const SampleSet& new_samples, double winner_metric,
                bool* accepted = nullptr);

AttackResult run_gcg(const AttackProblem& problem, const GcgConfig& cfg, Rng& rng,
                     std::optional<TokenSeq> init_attack = std::nullopt);

}  // namespace ra
