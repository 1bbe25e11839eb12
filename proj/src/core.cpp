#include "ra/core.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace ra {

Vocab::Vocab(std::size_t size, SpecialTokens special, std::vector<bool> ascii_ok)
    : size_(size), special_(special), ascii_ok_(std::move(ascii_ok)) {
  if (size_ == 0) throw ParameterError("vocabulary must be non-empty");
  const auto in_range = [&](TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < size_; };
  if (!in_range(special_.eos_id) || !in_range(special_.pad_id) || !in_range(special_.bang_id)) {
    throw ParameterError("special token id outside vocabulary");
  }
  if (ascii_ok_.empty()) {
    ascii_ok_.assign(size_, true);
    ascii_ok_[static_cast<std::size_t>(special_.eos_id)] = false;
    ascii_ok_[static_cast<std::size_t>(special_.pad_id)] = false;
  }
  if (ascii_ok_.size() != size_) throw ShapeError("ascii_ok must have one entry per token");
}

std::vector<TokenId> Vocab::ascii_tokens() const {
  std::vector<TokenId> out;
  for (std::size_t v = 0; v < size_; ++v) {
    if (ascii_ok_[v]) out.push_back(static_cast<TokenId>(v));
  }
  return out;
}

void Vocab::check(std::span<const TokenId> seq) const {
  for (TokenId id : seq) {
    if (!contains(id)) throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
  }
}

std::vector<std::size_t> PromptLayout::attack_rows() const {
  std::vector<std::size_t> rows;
  std::size_t base = system_prefix.size();
  for (std::size_t i = 0; i < attack_prefix_len; ++i) rows.push_back(base + i);
  base += attack_prefix_len + user_prompt.size();
  for (std::size_t i = 0; i < attack_suffix_len; ++i) rows.push_back(base + i);
  return rows;
}

std::vector<bool> PromptLayout::attack_mask() const {
  std::vector<bool> mask(total_len(), false);
  for (std::size_t r : attack_rows()) mask[r] = true;
  return mask;
}

TokenSeq PromptLayout::assemble(std::span<const TokenId> attack_tokens) const {
  if (attack_tokens.size() != n_attack()) throw ShapeError("attack token count does not match layout");
  TokenSeq out;
  out.reserve(total_len());
  out.insert(out.end(), system_prefix.begin(), system_prefix.end());
  out.insert(out.end(), attack_tokens.begin(), attack_tokens.begin() + static_cast<std::ptrdiff_t>(attack_prefix_len));
  out.insert(out.end(), user_prompt.begin(), user_prompt.end());
  out.insert(out.end(), attack_tokens.begin() + static_cast<std::ptrdiff_t>(attack_prefix_len), attack_tokens.end());
  out.insert(out.end(), system_suffix.begin(), system_suffix.end());
  return out;
}

TokenSeq PromptLayout::extract_attack(std::span<const TokenId> full) const {
  if (full.size() != total_len()) throw ShapeError("prompt length does not match layout");
  TokenSeq out;
  for (std::size_t r : attack_rows()) out.push_back(full[r]);
  return out;
}

TokenSeq PromptLayout::clean_prompt() const {
  TokenSeq out;
  out.insert(out.end(), system_prefix.begin(), system_prefix.end());
  out.insert(out.end(), user_prompt.begin(), user_prompt.end());
  out.insert(out.end(), system_suffix.begin(), system_suffix.end());
  return out;
}

TokenSeq PromptLayout::filled(TokenId tok) const { return assemble(TokenSeq(n_attack(), tok)); }

RelaxedPrompt::RelaxedPrompt(Matrix weights, PromptLayout layout)
    : weights_(std::move(weights)), layout_(std::move(layout)) {
  validate();
}

void RelaxedPrompt::validate() const {
  if (weights_.rows() != layout_.total_len()) throw ShapeError("relaxed prompt rows do not match layout");
  if (weights_.cols() == 0) throw ShapeError("relaxed prompt has no columns");
  const auto mask = layout_.attack_mask();
  for (std::size_t r = 0; r < weights_.rows(); ++r) {
    double sum = 0.0;
    std::size_t ones = 0;
    for (double w : weights_.row(r)) {
      if (!(w >= 0.0) || w > 1.0 + kRowTol) throw ShapeError("relaxed prompt entry outside [0,1]");
      sum += w;
      if (w == 1.0) ++ones;
    }
    if (std::abs(sum - 1.0) > kRowTol) throw ShapeError("relaxed prompt row does not sum to 1");
    if (!mask[r] && ones != 1) throw ShapeError("fixed prompt row is not one-hot");
  }
}

void RelaxedPrompt::set_attack_row(std::size_t r, std::span<const double> values) {
  if (r >= weights_.rows() || !layout_.attack_mask()[r]) throw ShapeError("row is not an attack row");
  if (values.size() != weights_.cols()) throw ShapeError("row width mismatch");
  double sum = 0.0;
  for (double v : values) {
    if (!(v >= 0.0)) throw ShapeError("negative relaxed entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kRowTol) throw ShapeError("relaxed row does not sum to 1");
  std::copy(values.begin(), values.end(), weights_.row(r).begin());
}

std::uint64_t RelaxedPrompt::fixed_rows_hash() const {
  // FNV-1a over the raw bytes of every fixed row.
  std::uint64_t h = 1469598103934665603ULL;
  const auto mask = layout_.attack_mask();
  for (std::size_t r = 0; r < weights_.rows(); ++r) {
    if (mask[r]) continue;
    for (double w : weights_.row(r)) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &w, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

RelaxedPrompt one_hot(std::span<const TokenId> seq, const PromptLayout& layout, std::size_t vocab_size) {
  if (seq.size() != layout.total_len()) throw ShapeError("sequence length does not match layout");
  Matrix w(seq.size(), vocab_size);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (seq[t] < 0 || static_cast<std::size_t>(seq[t]) >= vocab_size) {
      throw ShapeError("token id outside vocabulary");
    }
    w(t, static_cast<std::size_t>(seq[t])) = 1.0;
  }
  return RelaxedPrompt(std::move(w), layout);
}

TokenSeq row_argmax(const RelaxedPrompt& x) {
  TokenSeq out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.weights().row(r);
    // max_element returns the first maximum: ties go to the lowest id.
    out[r] = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

TokenSeq discretize(const RelaxedPrompt& x, const TokenRoundtrip& tok) { return tok.roundtrip(row_argmax(x)); }

double Generation::total_logprob() const { return std::accumulate(logprobs.begin(), logprobs.end(), 0.0); }

double Generation::avg_ce() const {
  return logprobs.empty() ? 0.0 : -total_logprob() / static_cast<double>(logprobs.size());
}

void Generation::validate() const {
  if (logprobs.size() != tokens.size()) throw ShapeError("logprobs and tokens differ in length");
  if (tokens.size() > kMaxGenerationLen) throw ShapeError("generation exceeds the attack-time cap");
  for (double lp : logprobs) {
    if (lp > 0.0) throw NumericError("positive log-probability");
  }
}

void RewardProfile::validate() const {
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto& c = checkpoints[i];
    if (!(c.reward >= 0.0 && c.reward <= 1.0)) throw NumericError("reward outside [0,1]");
    if (i > 0 && c.length <= checkpoints[i - 1].length) throw ShapeError("checkpoint lengths not increasing");
  }
}

const char* role_name(Role r) {
  switch (r) {
    case Role::Seed: return "seed";
    case Role::Greedy: return "greedy";
    case Role::Random: return "random";
    case Role::Harmful: return "harmful";
  }
  return "?";
}

const SampleSet::Entry& SampleSet::at(Role r) const {
  const auto& e = entries[static_cast<int>(r)];
  if (!e) throw std::out_of_range(std::string("sample role missing: ") + role_name(r));
  return *e;
}

SampleSet::Entry& SampleSet::at(Role r) {
  auto& e = entries[static_cast<int>(r)];
  if (!e) throw std::out_of_range(std::string("sample role missing: ") + role_name(r));
  return *e;
}

std::size_t SampleSet::count() const {
  std::size_t k = 0;
  for (const auto& e : entries) k += e.has_value();
  return k;
}

std::vector<Role> SampleSet::roles() const {
  std::vector<Role> out;
  for (Role r : kAllRoles) {
    if (has(r)) out.push_back(r);
  }
  return out;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) throw ParameterError("uniform_index over an empty range");
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the mixed pair
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace ra
