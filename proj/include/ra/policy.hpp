#pragma once

// Autoregressive policy abstraction and the ToyLM reference model.

#include <filesystem>
#include <span>
#include <vector>

#include "ra/core.hpp"

namespace ra {

// An autoregressive next-token model that is differentiable in the relaxed
// prompt. Implementations are read-only after construction and may be
// evaluated concurrently.
class PolicyModel {
 public:
  virtual ~PolicyModel() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::size_t max_context() const = 0;

  // Row t holds the logits predicting y[t] from x and y[:t], for t < len(y) + 1
  // (the last row predicts the token following y).
  virtual Matrix sequence_logits(const RelaxedPrompt& x, std::span<const TokenId> y) const = 0;

  // Logits predicting the token after `prefix`.
  virtual std::vector<double> next_logits(const RelaxedPrompt& x, std::span<const TokenId> prefix) const;

  // Accumulates into `grad` (T' x |V|) the vector-Jacobian product
  // sum_t upstream[t] . d logits_t / dX for the logits rows of sequence_logits(x, y).
  // `upstream` may have fewer rows than len(y) + 1.
  virtual void logits_vjp(const RelaxedPrompt& x, std::span<const TokenId> y, const Matrix& upstream,
                          Matrix& grad) const = 0;
};

// Bag-of-tokens plus bigram reference model:
//   logits(t) = bias + (1/T') sum_i X_i . bag + bigram[y_{t-1}]
// where for t = 0 the previous token is the (relaxed) last prompt row.
class ToyLM final : public PolicyModel {
 public:
  static constexpr std::size_t kDefaultMaxContext = 1024;

  ToyLM(Vocab vocab, std::vector<double> bias, Matrix bag, Matrix bigram,
        std::size_t max_context = kDefaultMaxContext);

  // Standard normal weights scaled by `scale`.
  static ToyLM random(Vocab vocab, std::uint64_t seed, double scale = 0.3,
                      std::size_t max_context = kDefaultMaxContext);

  const Vocab& vocab() const override { return vocab_; }
  std::size_t max_context() const override { return max_context_; }

  Matrix sequence_logits(const RelaxedPrompt& x, std::span<const TokenId> y) const override;
  std::vector<double> next_logits(const RelaxedPrompt& x, std::span<const TokenId> prefix) const override;
  void logits_vjp(const RelaxedPrompt& x, std::span<const TokenId> y, const Matrix& upstream,
                  Matrix& grad) const override;

  const std::vector<double>& bias() const { return bias_; }
  const Matrix& bag() const { return bag_; }
  const Matrix& bigram() const { return bigram_; }
  std::vector<double>& bias() { return bias_; }
  Matrix& bag() { return bag_; }
  Matrix& bigram() { return bigram_; }

  // Flat binary format: "TOYLM1", |V| as u32 LE, then bias, bag, bigram as f64 LE row-major.
  void save(const std::filesystem::path& path) const;
  static ToyLM load(const std::filesystem::path& path, SpecialTokens special,
                    std::vector<bool> ascii_ok = {}, std::size_t max_context = kDefaultMaxContext);

 private:
  // bias + (1/T') sum_i X_i . bag
  std::vector<double> context(const RelaxedPrompt& x) const;

  Vocab vocab_;
  std::vector<double> bias_;
  Matrix bag_;
  Matrix bigram_;
  std::size_t max_context_;
};

// ---------------------------------------------------------------------------
// Operations over any PolicyModel
// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
std::vector<double> log_softmax(std::span<const double> logits);

std::vector<double> next_token_dist(const PolicyModel& m, const RelaxedPrompt& x,
                                    std::span<const TokenId> prefix);

struct SamplingMode {
  bool greedy = true;
  double temperature = 0.7;
  std::size_t top_k = 256;

  static SamplingMode Greedy() { return {}; }
  static SamplingMode Sampled(double temperature, std::size_t top_k) { return {false, temperature, top_k}; }
};

inline constexpr double kAttackTemperature = 0.7;
inline constexpr std::size_t kAttackTopK = 256;

// Stops at eos (inclusive) or max_len. Log-probabilities are recorded under
// the untempered model distribution. Ties in greedy mode go to the lowest id.
Generation generate(const PolicyModel& m, const RelaxedPrompt& x, const SamplingMode& mode,
                    std::size_t max_len, Rng& rng);

// Builds a Generation for an externally supplied token sequence, scoring it under x.
Generation score_tokens(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> tokens);

struct LogLikelihood {
  double total_logprob = 0.0;
  std::vector<double> per_token_ce;
};

// `upto` limits evaluation to the first `upto` tokens.
LogLikelihood log_likelihood(const PolicyModel& m, std::span<const TokenId> y, const RelaxedPrompt& x,
                             std::size_t upto = kMaxGenerationLen + 1);
inline LogLikelihood log_likelihood(const PolicyModel& m, const Generation& y, const RelaxedPrompt& x) {
  return log_likelihood(m, y.tokens, x);
}

// d/dX sum_i sum_t coeffs[i][t] * CE(y_t^(i) | x + y_{:t}^(i)), zeroed outside attack rows.
// coeffs[i] may be shorter than ys[i] (remaining tokens get weight 0) but not longer.
GradientMatrix loglik_gradient(const PolicyModel& m, std::span<const TokenSeq> ys,
                               std::span<const std::vector<double>> coeffs, const RelaxedPrompt& x);

// d/dX sum_v w_v P(v | x + prefix), zeroed outside attack rows.
GradientMatrix dist_gradient(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> prefix,
                             std::span<const double> w);

// Preserves y as a prefix and continues greedily up to to_len tokens.
Generation extend_greedy(const PolicyModel& m, const RelaxedPrompt& x, const Generation& y, std::size_t to_len);

}  // namespace ra
