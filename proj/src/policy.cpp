#include "ra/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

namespace ra {

namespace {

void check_context(const PolicyModel& m, const RelaxedPrompt& x, std::size_t prefix_len) {
  if (x.vocab_size() != m.vocab().size()) throw ShapeError("relaxed prompt width does not match vocabulary");
  if (x.rows() > m.max_context() || prefix_len > m.max_context() - x.rows()) {
    throw CapacityError("prompt plus prefix exceeds the model context");
  }
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double l : v) s += std::exp(l - mx);
  return mx + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// PolicyModel defaults
// ---------------------------------------------------------------------------

std::vector<double> PolicyModel::next_logits(const RelaxedPrompt& x, std::span<const TokenId> prefix) const {
  Matrix all = sequence_logits(x, prefix);
  auto last = all.row(all.rows() - 1);
  return {last.begin(), last.end()};
}

// ---------------------------------------------------------------------------
// ToyLM
// ---------------------------------------------------------------------------

ToyLM::ToyLM(Vocab vocab, std::vector<double> bias, Matrix bag, Matrix bigram, std::size_t max_context)
    : vocab_(std::move(vocab)),
      bias_(std::move(bias)),
      bag_(std::move(bag)),
      bigram_(std::move(bigram)),
      max_context_(max_context) {
  const std::size_t n = vocab_.size();
  if (bias_.size() != n || bag_.rows() != n || bag_.cols() != n || bigram_.rows() != n || bigram_.cols() != n) {
    throw ShapeError("ToyLM weight shapes do not match the vocabulary");
  }
  if (max_context_ == 0) throw ParameterError("max_context must be positive");
}

ToyLM ToyLM::random(Vocab vocab, std::uint64_t seed, double scale, std::size_t max_context) {
  const std::size_t n = vocab.size();
  Rng rng(seed);
  // Box-Muller on the portable uniform draw keeps weights identical across platforms.
  auto normal = [&rng]() {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  };
  std::vector<double> bias(n);
  Matrix bag(n, n), bigram(n, n);
  for (double& b : bias) b = scale * normal();
  for (double& b : bag.data()) b = scale * normal();
  for (double& b : bigram.data()) b = scale * normal();
  return ToyLM(std::move(vocab), std::move(bias), std::move(bag), std::move(bigram), max_context);
}

std::vector<double> ToyLM::context(const RelaxedPrompt& x) const {
  const std::size_t n = vocab_.size();
  std::vector<double> h(n, 0.0);
  const Matrix& w = x.weights();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    auto row = w.row(i);
    for (std::size_t v = 0; v < n; ++v) {
      const double xv = row[v];
      if (xv == 0.0) continue;
      auto brow = bag_.row(v);
      for (std::size_t c = 0; c < n; ++c) h[c] += xv * brow[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(w.rows());
  for (std::size_t c = 0; c < n; ++c) h[c] = bias_[c] + inv * h[c];
  return h;
}

Matrix ToyLM::sequence_logits(const RelaxedPrompt& x, std::span<const TokenId> y) const {
  check_context(*this, x, y.size());
  const std::size_t n = vocab_.size();
  const std::vector<double> h = context(x);
  Matrix out(y.size() + 1, n);
  // Row 0: previous token is the relaxed last prompt row.
  auto first = out.row(0);
  std::copy(h.begin(), h.end(), first.begin());
  auto last = x.weights().row(x.rows() - 1);
  for (std::size_t v = 0; v < n; ++v) {
    if (last[v] == 0.0) continue;
    auto brow = bigram_.row(v);
    for (std::size_t c = 0; c < n; ++c) first[c] += last[v] * brow[c];
  }
  for (std::size_t t = 1; t <= y.size(); ++t) {
    const TokenId prev = y[t - 1];
    if (!vocab_.contains(prev)) throw ShapeError("token id outside vocabulary");
    auto row = out.row(t);
    auto brow = bigram_.row(static_cast<std::size_t>(prev));
    for (std::size_t c = 0; c < n; ++c) row[c] = h[c] + brow[c];
  }
  return out;
}

std::vector<double> ToyLM::next_logits(const RelaxedPrompt& x, std::span<const TokenId> prefix) const {
  check_context(*this, x, prefix.size());
  if (prefix.empty()) {
    Matrix first = sequence_logits(x, {});
    auto r = first.row(0);
    return {r.begin(), r.end()};
  }
  std::vector<double> h = context(x);
  const TokenId prev = prefix.back();
  if (!vocab_.contains(prev)) throw ShapeError("token id outside vocabulary");
  auto brow = bigram_.row(static_cast<std::size_t>(prev));
  for (std::size_t c = 0; c < h.size(); ++c) h[c] += brow[c];
  return h;
}

void ToyLM::logits_vjp(const RelaxedPrompt& x, std::span<const TokenId> y, const Matrix& upstream,
                       Matrix& grad) const {
  const std::size_t n = vocab_.size();
  if (upstream.cols() != n || upstream.rows() > y.size() + 1) throw ShapeError("upstream shape mismatch");
  if (grad.rows() != x.rows() || grad.cols() != n) throw ShapeError("gradient shape mismatch");
  if (upstream.rows() == 0) return;

  // Bag term: every row receives (1/T') bag . sum_t upstream[t].
  std::vector<double> total(n, 0.0);
  for (std::size_t t = 0; t < upstream.rows(); ++t) {
    auto u = upstream.row(t);
    for (std::size_t c = 0; c < n; ++c) total[c] += u[c];
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  std::vector<double> bag_term(n, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    auto brow = bag_.row(v);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += brow[c] * total[c];
    bag_term[v] = inv * s;
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto g = grad.row(i);
    for (std::size_t v = 0; v < n; ++v) g[v] += bag_term[v];
  }
  // Bigram term of the first step flows into the last prompt row.
  auto u0 = upstream.row(0);
  auto glast = grad.row(x.rows() - 1);
  for (std::size_t v = 0; v < n; ++v) {
    auto brow = bigram_.row(v);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += brow[c] * u0[c];
    glast[v] += s;
  }
}

namespace {

constexpr char kMagic[6] = {'T', 'O', 'Y', 'L', 'M', '1'};

void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64_le(std::ostream& os, double d) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32_le(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ConfigError("truncated ToyLM weight file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double read_f64_le(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ConfigError("truncated ToyLM weight file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void ToyLM::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  write_u32_le(os, static_cast<std::uint32_t>(vocab_.size()));
  for (double b : bias_) write_f64_le(os, b);
  for (double b : bag_.data()) write_f64_le(os, b);
  for (double b : bigram_.data()) write_f64_le(os, b);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

ToyLM ToyLM::load(const std::filesystem::path& path, SpecialTokens special, std::vector<bool> ascii_ok,
                  std::size_t max_context) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open ToyLM weight file " + path.string());
  char magic[6];
  if (!is.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0) {
    throw ConfigError("bad ToyLM magic in " + path.string());
  }
  const std::size_t n = read_u32_le(is);
  if (n == 0 || n > (1u << 16)) throw ConfigError("implausible ToyLM vocabulary size");
  std::vector<double> bias(n);
  Matrix bag(n, n), bigram(n, n);
  for (double& b : bias) b = read_f64_le(is);
  for (double& b : bag.data()) b = read_f64_le(is);
  for (double& b : bigram.data()) b = read_f64_le(is);
  if (is.peek() != std::char_traits<char>::eof()) throw ConfigError("trailing bytes in ToyLM weight file");
  return ToyLM(Vocab(n, special, std::move(ascii_ok)), std::move(bias), std::move(bag), std::move(bigram),
               max_context);
}

// ---------------------------------------------------------------------------
// Generic operations
// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> next_token_dist(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> prefix) {
  check_context(m, x, prefix.size());
  return softmax(m.next_logits(x, prefix));
}

Generation generate(const PolicyModel& m, const RelaxedPrompt& x, const SamplingMode& mode, std::size_t max_len,
                    Rng& rng) {
  if (max_len > kMaxGenerationLen) throw ParameterError("max_len exceeds the attack-time cap of 128");
  if (!mode.greedy && !(mode.temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (!mode.greedy && mode.top_k == 0) throw ParameterError("top_k must be positive");

  const std::size_t n = m.vocab().size();
  const TokenId eos = m.vocab().special().eos_id;
  Generation g;
  g.origin_temperature = mode.greedy ? 0.0 : mode.temperature;
  std::vector<std::size_t> order(n);
  while (g.tokens.size() < max_len) {
    check_context(m, x, g.tokens.size());
    const std::vector<double> logits = m.next_logits(x, g.tokens);
    std::size_t tok;
    if (mode.greedy) {
      tok = argmax(logits);
    } else {
      const std::size_t k = std::min(mode.top_k, n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
      const double top = logits[order[0]];
      std::vector<double> w(k);
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp((logits[order[i]] - top) / mode.temperature);
        s += w[i];
      }
      double u = uniform01(rng) * s;
      std::size_t pick = k - 1;
      for (std::size_t i = 0; i < k; ++i) {
        if (u < w[i]) {
          pick = i;
          break;
        }
        u -= w[i];
      }
      tok = order[pick];
    }
    g.tokens.push_back(static_cast<TokenId>(tok));
    g.logprobs.push_back(logits[tok] - log_sum_exp(logits));
    if (static_cast<TokenId>(tok) == eos) {
      g.stopped_at_eos = true;
      break;
    }
  }
  g.original_len = g.tokens.size();
  return g;
}

Generation score_tokens(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> tokens) {
  m.vocab().check(tokens);
  Generation g;
  g.tokens.assign(tokens.begin(), tokens.end());
  const LogLikelihood ll = log_likelihood(m, tokens, x);
  g.logprobs.resize(ll.per_token_ce.size());
  for (std::size_t t = 0; t < g.logprobs.size(); ++t) g.logprobs[t] = -ll.per_token_ce[t];
  g.stopped_at_eos = !tokens.empty() && tokens.back() == m.vocab().special().eos_id;
  g.original_len = g.tokens.size();
  return g;
}

LogLikelihood log_likelihood(const PolicyModel& m, std::span<const TokenId> y, const RelaxedPrompt& x,
                             std::size_t upto) {
  const std::size_t len = std::min(upto, y.size());
  const auto ys = y.subspan(0, len);
  const Matrix logits = m.sequence_logits(x, ys);
  LogLikelihood out;
  out.per_token_ce.resize(len);
  for (std::size_t t = 0; t < len; ++t) {
    auto row = logits.row(t);
    const double ce = log_sum_exp(row) - row[static_cast<std::size_t>(ys[t])];
    out.per_token_ce[t] = std::max(ce, 0.0);
    out.total_logprob -= out.per_token_ce[t];
  }
  return out;
}

namespace {

void mask_fixed_rows(const RelaxedPrompt& x, Matrix& g) {
  const auto mask = x.layout().attack_mask();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    if (!mask[r]) std::fill(g.row(r).begin(), g.row(r).end(), 0.0);
  }
}

}  // namespace

GradientMatrix loglik_gradient(const PolicyModel& m, std::span<const TokenSeq> ys,
                               std::span<const std::vector<double>> coeffs, const RelaxedPrompt& x) {
  if (ys.size() != coeffs.size()) throw ShapeError("one coefficient vector per generation required");
  const std::size_t n = m.vocab().size();
  GradientMatrix g{Matrix(x.rows(), n)};
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto& c = coeffs[i];
    if (c.size() > ys[i].size()) throw ShapeError("coefficient vector longer than its generation");
    const std::size_t len = c.size();
    if (len == 0) continue;
    const std::span<const TokenId> y(ys[i].data(), len);
    const Matrix logits = m.sequence_logits(x, y);
    Matrix upstream(len, n);
    for (std::size_t t = 0; t < len; ++t) {
      if (c[t] == 0.0) continue;
      const std::vector<double> p = softmax(logits.row(t));
      auto u = upstream.row(t);
      for (std::size_t v = 0; v < n; ++v) u[v] = c[t] * p[v];
      u[static_cast<std::size_t>(y[t])] -= c[t];
    }
    m.logits_vjp(x, y, upstream, g.values);
  }
  mask_fixed_rows(x, g.values);
  return g;
}

GradientMatrix dist_gradient(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> prefix,
                             std::span<const double> w) {
  const std::size_t n = m.vocab().size();
  if (w.size() != n) throw ShapeError("weight vector must cover the vocabulary");
  const std::vector<double> p = next_token_dist(m, x, prefix);
  double pw = 0.0;
  for (std::size_t v = 0; v < n; ++v) pw += p[v] * w[v];
  Matrix upstream(prefix.size() + 1, n);
  auto u = upstream.row(prefix.size());
  for (std::size_t v = 0; v < n; ++v) u[v] = p[v] * (w[v] - pw);
  GradientMatrix g{Matrix(x.rows(), n)};
  m.logits_vjp(x, prefix, upstream, g.values);
  mask_fixed_rows(x, g.values);
  return g;
}

Generation extend_greedy(const PolicyModel& m, const RelaxedPrompt& x, const Generation& y, std::size_t to_len) {
  if (to_len > kMaxGenerationLen) throw ParameterError("to_len exceeds the attack-time cap of 128");
  Generation out = y;
  if (out.original_len == 0) out.original_len = y.size();
  const TokenId eos = m.vocab().special().eos_id;
  while (out.tokens.size() < to_len && !out.stopped_at_eos) {
    const std::vector<double> logits = m.next_logits(x, out.tokens);
    const std::size_t tok = argmax(logits);
    out.tokens.push_back(static_cast<TokenId>(tok));
    out.logprobs.push_back(logits[tok] - log_sum_exp(logits));
    if (static_cast<TokenId>(tok) == eos) out.stopped_at_eos = true;
  }
  return out;
}

}  // namespace ra
