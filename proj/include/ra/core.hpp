#pragma once

// Shared domain types for the attack framework: vocabularies, prompt layouts,
// relaxed (row-stochastic) prompts, generations, sample sets and the
// one-hot/argmax bridge between token sequences and relaxed prompts.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ra {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;
using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SearchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dense row-major matrix
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct SpecialTokens {
  TokenId eos_id = 0;
  TokenId pad_id = 1;
  TokenId bang_id = 2;  // the "!" token used for attack initialization
};

class Vocab {
 public:
  Vocab() = default;
  // All ids except eos/pad are ascii-eligible unless `ascii_ok` says otherwise.
  Vocab(std::size_t size, SpecialTokens special, std::vector<bool> ascii_ok = {});

  std::size_t size() const { return size_; }
  const SpecialTokens& special() const { return special_; }
  bool ascii_ok(TokenId id) const { return ascii_ok_.at(static_cast<std::size_t>(id)); }
  const std::vector<bool>& ascii_mask() const { return ascii_ok_; }
  bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < size_; }
  std::vector<TokenId> ascii_tokens() const;

  void check(std::span<const TokenId> seq) const;

 private:
  std::size_t size_ = 0;
  SpecialTokens special_;
  std::vector<bool> ascii_ok_;
};

// ---------------------------------------------------------------------------
// Prompt layout: system prefix | attack prefix | user prompt | attack suffix | system suffix
// ---------------------------------------------------------------------------

struct PromptLayout {
  TokenSeq system_prefix;
  TokenSeq user_prompt;
  std::size_t attack_prefix_len = 0;
  std::size_t attack_suffix_len = 0;
  TokenSeq system_suffix;

  std::size_t total_len() const {
    return system_prefix.size() + attack_prefix_len + user_prompt.size() + attack_suffix_len +
           system_suffix.size();
  }
  std::size_t n_attack() const { return attack_prefix_len + attack_suffix_len; }

  // Row indices of attacker-controlled positions, in prompt order.
  std::vector<std::size_t> attack_rows() const;
  std::vector<bool> attack_mask() const;

  // Full prompt with the given attack tokens written into the slots.
  TokenSeq assemble(std::span<const TokenId> attack_tokens) const;
  // Attack tokens read back out of a full prompt.
  TokenSeq extract_attack(std::span<const TokenId> full) const;
  // The clean prompt: the full prompt with the attack slots deleted.
  TokenSeq clean_prompt() const;
  // Attack slots filled with `tok`.
  TokenSeq filled(TokenId tok) const;
};

// ---------------------------------------------------------------------------
// Relaxed prompt
// ---------------------------------------------------------------------------

// Row-stochastic T' x |V| matrix. Rows outside the attack slots are exact
// one-hot rows; every row is non-negative and sums to one.
class RelaxedPrompt {
 public:
  static constexpr double kRowTol = 1e-9;

  RelaxedPrompt(Matrix weights, PromptLayout layout);

  const Matrix& weights() const { return weights_; }
  const PromptLayout& layout() const { return layout_; }
  std::size_t rows() const { return weights_.rows(); }
  std::size_t vocab_size() const { return weights_.cols(); }

  // Replace one attack row. Throws ShapeError on non-attack rows or invalid rows.
  void set_attack_row(std::size_t r, std::span<const double> values);

  // Throws ShapeError if the invariants do not hold.
  void validate() const;

  // Hash of the fixed (non-attack) rows, used to check they are never touched.
  std::uint64_t fixed_rows_hash() const;

  // Raw access used by finite-difference checks; skips the invariants.
  Matrix& unchecked_weights() { return weights_; }

 private:
  Matrix weights_;
  PromptLayout layout_;
};

struct GradientMatrix {
  Matrix values;
};

RelaxedPrompt one_hot(std::span<const TokenId> seq, const PromptLayout& layout, std::size_t vocab_size);

// encode(decode(.)) of a tokenizer. The identity is the default for toy vocabularies.
class TokenRoundtrip {
 public:
  virtual ~TokenRoundtrip() = default;
  virtual TokenSeq roundtrip(std::span<const TokenId> seq) const { return {seq.begin(), seq.end()}; }
};

// Row-wise argmax (ties -> lowest id) followed by the tokenizer round-trip.
TokenSeq discretize(const RelaxedPrompt& x, const TokenRoundtrip& tok);
TokenSeq row_argmax(const RelaxedPrompt& x);

// ---------------------------------------------------------------------------
// Generations and samples
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxGenerationLen = 128;

struct Generation {
  TokenSeq tokens;
  std::vector<double> logprobs;  // natural log, untempered model distribution
  bool stopped_at_eos = false;
  double origin_temperature = 0.0;  // 0 means greedy
  std::size_t original_len = 0;     // length before greedy extension

  std::size_t size() const { return tokens.size(); }
  double total_logprob() const;
  double avg_ce() const;
  void validate() const;
};

struct RewardCheckpoint {
  std::size_t length = 0;
  double reward = 0.0;
  bool operator==(const RewardCheckpoint&) const = default;
};

struct RewardProfile {
  std::vector<RewardCheckpoint> checkpoints;  // strictly increasing lengths

  double terminal() const { return checkpoints.empty() ? 0.0 : checkpoints.back().reward; }
  std::size_t length() const { return checkpoints.empty() ? 0 : checkpoints.back().length; }
  void validate() const;
  bool operator==(const RewardProfile&) const = default;
};

enum class Role : int { Seed = 0, Greedy = 1, Random = 2, Harmful = 3 };
inline constexpr std::array<Role, 4> kAllRoles{Role::Seed, Role::Greedy, Role::Random, Role::Harmful};
const char* role_name(Role r);

// Up to four role-tagged generations approximating the biased sampler.
struct SampleSet {
  struct Entry {
    Generation generation;
    RewardProfile raw_profile;         // judge output (seed already clipped)
    RewardProfile profile;             // after forward_max
    std::vector<double> token_rewards; // per position over the padded horizon
  };
  std::array<std::optional<Entry>, 4> entries;

  bool has(Role r) const { return entries[static_cast<int>(r)].has_value(); }
  const Entry& at(Role r) const;
  Entry& at(Role r);
  std::size_t count() const;
  std::vector<Role> roles() const;
};

// Uniform draw in [0, n) using a fixed bit recipe so results are identical
// across standard library implementations.
std::size_t uniform_index(Rng& rng, std::size_t n);
double uniform01(Rng& rng);
// Independent stream for (seed, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace ra
