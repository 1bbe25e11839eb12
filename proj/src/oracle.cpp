#include "ra/oracle.hpp"

#include <cmath>
#include <string>

#include "ra/parallel.hpp"

namespace ra {

namespace {

bool is_leaf(TokenId v, std::size_t len_after, const EnumSpec& spec, TokenId eos) {
  return v == eos || len_after >= spec.max_len;
}

void enumerate_rec(const PolicyModel& m, const RelaxedPrompt& x, const EnumSpec& spec, TokenSeq& prefix,
                   double prob, std::vector<EnumeratedSequence>& out) {
  const auto dist = next_token_dist(m, x, prefix);
  const TokenId eos = m.vocab().special().eos_id;
  for (std::size_t v = 0; v < dist.size(); ++v) {
    const auto tok = static_cast<TokenId>(v);
    prefix.push_back(tok);
    if (is_leaf(tok, prefix.size(), spec, eos)) {
      out.push_back({prefix, prob * dist[v]});
    } else {
      enumerate_rec(m, x, spec, prefix, prob * dist[v], out);
    }
    prefix.pop_back();
  }
}

// Returns the expected reward below `prefix` and adds P(prefix) * grad of the
// local mixture into g.
double tree_rec(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x, const EnumSpec& spec,
                TokenSeq& prefix, double prob, Matrix& g) {
  const auto dist = next_token_dist(m, x, prefix);
  const TokenId eos = m.vocab().special().eos_id;
  std::vector<double> child(dist.size());
  double value = 0.0;
  for (std::size_t v = 0; v < dist.size(); ++v) {
    const auto tok = static_cast<TokenId>(v);
    prefix.push_back(tok);
    child[v] = is_leaf(tok, prefix.size(), spec, eos) ? reward(prefix)
                                                      : tree_rec(m, reward, x, spec, prefix, prob * dist[v], g);
    prefix.pop_back();
    value += dist[v] * child[v];
  }
  const GradientMatrix local = dist_gradient(m, x, prefix, child);
  auto& dst = g.data();
  const auto& src = local.values.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += prob * src[i];
  return value;
}

TokenSeq decode_assignment(std::size_t idx, std::span<const TokenId> ascii, std::size_t n_attack) {
  TokenSeq out(n_attack);
  for (std::size_t k = n_attack; k-- > 0;) {
    out[k] = ascii[idx % ascii.size()];
    idx /= ascii.size();
  }
  return out;
}

std::size_t assignment_count(std::size_t base, std::size_t n_attack) {
  std::size_t total = 1;
  for (std::size_t k = 0; k < n_attack; ++k) {
    if (base != 0 && total > kEnumMaxLeaves / base) throw CapacityError("suffix search space exceeds 50000");
    total *= base;
  }
  if (total > kEnumMaxLeaves) throw CapacityError("suffix search space exceeds 50000");
  return total;
}

SuffixSearchResult pick_best(std::vector<double> values, std::span<const TokenId> ascii, const PromptLayout& layout) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  SuffixSearchResult r;
  r.attack = decode_assignment(best, ascii, layout.n_attack());
  r.prompt = layout.assemble(r.attack);
  r.value = values[best];
  r.evaluated = values.size();
  return r;
}

}  // namespace

void EnumSpec::validate(std::size_t vocab_size) const {
  if (max_len == 0) throw ParameterError("enumeration max_len must be positive");
  if (max_len > kEnumMaxLen) throw CapacityError("enumeration max_len exceeds 6");
  if (vocab_cap > kEnumVocabCap) throw CapacityError("enumeration vocab cap exceeds 6");
  if (vocab_size > vocab_cap) {
    throw CapacityError("vocabulary of " + std::to_string(vocab_size) + " exceeds the enumeration cap");
  }
  double leaves = std::pow(static_cast<double>(vocab_size), static_cast<double>(max_len));
  if (leaves > static_cast<double>(kEnumMaxLeaves)) throw CapacityError("|V|^max_len exceeds 50000");
}

std::vector<EnumeratedSequence> enumerate_generations(const PolicyModel& m, const RelaxedPrompt& x,
                                                      const EnumSpec& spec) {
  spec.validate(m.vocab().size());
  std::vector<EnumeratedSequence> out;
  TokenSeq prefix;
  enumerate_rec(m, x, spec, prefix, 1.0, out);
  return out;
}

RewardFn judge_reward(const Judge& j, const RelaxedPrompt& x, TokenId pad_id) {
  return [&j, clean = x.layout().clean_prompt(), pad_id](std::span<const TokenId> y) {
    return harmfulness(j, y, clean, pad_id);
  };
}

double exact_expected_reward(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                             const EnumSpec& spec) {
  double total = 0.0;
  for (const auto& s : enumerate_generations(m, x, spec)) total += s.prob * reward(s.tokens);
  return total;
}

double exact_expected_reward(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x, const EnumSpec& spec) {
  return exact_expected_reward(m, judge_reward(j, x, m.vocab().special().pad_id), x, spec);
}

ExactGradientForms exact_policy_gradient_forms(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                                               const EnumSpec& spec) {
  const auto seqs = enumerate_generations(m, x, spec);
  std::vector<TokenSeq> ys;
  std::vector<std::vector<double>> coeffs;
  for (const auto& s : seqs) {
    ys.push_back(s.tokens);
    coeffs.emplace_back(s.tokens.size(), reward(s.tokens) * s.prob);
  }
  ExactGradientForms f;
  f.score_form = loglik_gradient(m, ys, coeffs, x);
  // loglik_gradient differentiates cross entropy, the negative log-likelihood.
  for (double& v : f.score_form.values.data()) v = -v;

  f.tree_form = GradientMatrix{Matrix(x.rows(), x.vocab_size())};
  TokenSeq prefix;
  tree_rec(m, reward, x, spec, prefix, 1.0, f.tree_form.values);

  const auto& a = f.score_form.values.data();
  const auto& b = f.tree_form.values.data();
  for (std::size_t i = 0; i < a.size(); ++i) f.max_abs_diff = std::max(f.max_abs_diff, std::abs(a[i] - b[i]));
  return f;
}

GradientMatrix exact_policy_gradient(const PolicyModel& m, const RewardFn& reward, const RelaxedPrompt& x,
                                     const EnumSpec& spec) {
  auto f = exact_policy_gradient_forms(m, reward, x, spec);
  if (!(f.max_abs_diff <= 1e-9)) throw NumericError("exact gradient forms disagree");
  return std::move(f.tree_form);
}

GradientMatrix exact_policy_gradient(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x,
                                     const EnumSpec& spec) {
  return exact_policy_gradient(m, judge_reward(j, x, m.vocab().special().pad_id), x, spec);
}

Matrix finite_difference_gradient(const ScalarFn& f, const RelaxedPrompt& x, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw ParameterError("finite-difference step must be positive");
  Matrix out(x.rows(), x.vocab_size());
  RelaxedPrompt probe = x;
  Matrix& w = probe.unchecked_weights();
  for (std::size_t r : x.layout().attack_rows()) {
    for (std::size_t v = 0; v < x.vocab_size(); ++v) {
      const double orig = w(r, v);
      w(r, v) = orig + h;
      const double up = f(probe);
      w(r, v) = orig - h;
      const double down = f(probe);
      w(r, v) = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("function is not finite near x");
      out(r, v) = (up - down) / (2.0 * h);
    }
  }
  return out;
}

FdReport fd_check(const ScalarFn& f, const RelaxedPrompt& x, const GradientMatrix& analytic, double h,
                  double abs_floor) {
  if (analytic.values.rows() != x.rows() || analytic.values.cols() != x.vocab_size()) {
    throw ShapeError("analytic gradient shape does not match x");
  }
  FdReport rep;
  rep.numeric = finite_difference_gradient(f, x, h);
  rep.relative_error = Matrix(x.rows(), x.vocab_size());
  for (std::size_t r : x.layout().attack_rows()) {
    for (std::size_t v = 0; v < x.vocab_size(); ++v) {
      const double a = analytic.values(r, v);
      const double n = rep.numeric(r, v);
      const double e = std::abs(a - n) / std::max({std::abs(a), std::abs(n), abs_floor});
      rep.relative_error(r, v) = e;
      rep.max_relative_error = std::max(rep.max_relative_error, e);
    }
  }
  return rep;
}

SuffixSearchResult exhaustive_best_suffix(const PolicyModel& m, const Judge& j, const PromptLayout& layout,
                                          const EnumSpec& spec) {
  spec.validate(m.vocab().size());
  const auto ascii = m.vocab().ascii_tokens();
  const std::size_t total = assignment_count(ascii.size(), layout.n_attack());
  if (ascii.empty() && layout.n_attack() > 0) throw ConfigError("no ascii-eligible tokens");
  std::vector<double> values(total);
  const auto count = static_cast<std::int64_t>(total);
  ParallelErrors errors;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < count; ++i) {
    errors.run([&] {
      const auto idx = static_cast<std::size_t>(i);
      const TokenSeq prompt = layout.assemble(decode_assignment(idx, ascii, layout.n_attack()));
      values[idx] = exact_expected_reward(m, j, one_hot(prompt, layout, m.vocab().size()), spec);
    });
  }
  errors.rethrow();
  return pick_best(std::move(values), ascii, layout);
}

SuffixSearchResult exhaustive_best_suffix_serial(const PolicyModel& m, const Judge& j, const PromptLayout& layout,
                                                 const EnumSpec& spec) {
  spec.validate(m.vocab().size());
  const auto ascii = m.vocab().ascii_tokens();
  const std::size_t total = assignment_count(ascii.size(), layout.n_attack());
  if (ascii.empty() && layout.n_attack() > 0) throw ConfigError("no ascii-eligible tokens");
  std::vector<double> values(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    const TokenSeq prompt = layout.assemble(decode_assignment(idx, ascii, layout.n_attack()));
    values[idx] = exact_expected_reward(m, j, one_hot(prompt, layout, m.vocab().size()), spec);
  }
  return pick_best(std::move(values), ascii, layout);
}

}  // namespace ra
