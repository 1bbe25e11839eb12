#include "ra/reinforce.hpp"

#include <algorithm>
#include <chrono>

namespace ra {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void finish_entry(SampleSet::Entry& e) { e.profile = forward_max(e.raw_profile); }

void fill_token_rewards(SampleSet& s, std::size_t horizon) {
  auto rewards = prefix_max_rewards(s, horizon);
  for (Role r : s.roles()) s.at(r).token_rewards = std::move(rewards[static_cast<int>(r)]);
}

}  // namespace

void RlooConfig::validate() const {
  if (!(b_static >= 0.0)) throw ParameterError("b_static must be non-negative");
  if (!(weight_last > 0.0) || weight_first < weight_last) {
    throw ParameterError("position weights need weight_first >= weight_last > 0");
  }
  if (max_len == 0 || max_len > kMaxGenerationLen) throw ParameterError("max_len must be in [1, 128]");
}

RlooConfig RlooConfig::affirmative(std::size_t max_len) { return {0.0, 1.0, 1.0, max_len}; }

SampleSet draw_samples(const PolicyModel& m, const Judge& j, const RelaxedPrompt& x,
                       std::span<const TokenId> seed_resp, const HarmfulTracker& tracker, Rng& rng,
                       const RlooConfig& cfg, PhaseTimes* times) {
  if (seed_resp.empty()) throw ParameterError("seed response must be non-empty");
  cfg.validate();
  const TokenSeq clean = x.layout().clean_prompt();
  const TokenId pad = m.vocab().special().pad_id;
  const std::size_t seed_len = std::min(seed_resp.size(), cfg.max_len);

  auto t0 = Clock::now();
  Generation seed = score_tokens(m, x, seed_resp.subspan(0, seed_len));
  seed = extend_greedy(m, x, seed, cfg.max_len);
  Generation greedy = generate(m, x, SamplingMode::Greedy(), cfg.max_len, rng);
  Generation random = generate(m, x, SamplingMode::Sampled(kAttackTemperature, kAttackTopK), cfg.max_len, rng);
  std::optional<Generation> harmful;
  if (tracker.best) harmful = score_tokens(m, x, tracker.best->generation.tokens);
  if (times) times->generate_ms += ms_since(t0);

  t0 = Clock::now();
  SampleSet s;
  auto& es = s.entries[static_cast<int>(Role::Seed)].emplace();
  es.generation = std::move(seed);
  es.raw_profile = clip_seed_reward(reward_profile(j, es.generation, clean, seed_len, pad), seed_len);
  auto& eg = s.entries[static_cast<int>(Role::Greedy)].emplace();
  eg.generation = std::move(greedy);
  eg.raw_profile = reward_profile(j, eg.generation, clean, seed_len, pad);
  auto& er = s.entries[static_cast<int>(Role::Random)].emplace();
  er.generation = std::move(random);
  er.raw_profile = reward_profile(j, er.generation, clean, seed_len, pad);
  if (harmful) {
    auto& eh = s.entries[static_cast<int>(Role::Harmful)].emplace();
    eh.generation = std::move(*harmful);
    eh.raw_profile = tracker.best->profile;  // historical rewards are reused
  }
  for (Role r : s.roles()) finish_entry(s.at(r));
  fill_token_rewards(s, cfg.max_len);
  if (times) times->reward_ms += ms_since(t0);
  return s;
}

SampleSet pinned_samples(const PolicyModel& m, const RelaxedPrompt& x, std::span<const TokenId> target,
                         const RlooConfig& cfg) {
  if (target.empty()) throw ParameterError("target must be non-empty");
  SampleSet s;
  auto& e = s.entries[static_cast<int>(Role::Seed)].emplace();
  e.generation = score_tokens(m, x, target.subspan(0, std::min(target.size(), cfg.max_len)));
  e.raw_profile.checkpoints = {{e.generation.size(), 1.0}};
  finish_entry(e);
  fill_token_rewards(s, cfg.max_len);
  return s;
}

std::vector<double> position_weights(const RlooConfig& cfg, std::size_t length) {
  cfg.validate();
  if (length == 0 || length > cfg.max_len) throw ParameterError("length must be in [1, max_len]");
  std::vector<double> w(length);
  if (cfg.max_len == 1) {
    w[0] = 1.0;
    return w;
  }
  const double span = static_cast<double>(cfg.max_len - 1);
  const double mean = 0.5 * (cfg.weight_first + cfg.weight_last);
  for (std::size_t t = 0; t < length; ++t) {
    const double raw = cfg.weight_first - (cfg.weight_first - cfg.weight_last) * static_cast<double>(t) / span;
    w[t] = raw / mean;
  }
  return w;
}

RoleVectors rloo_coefficients(const SampleSet& samples, const RlooConfig& cfg, bool exclude_random) {
  std::vector<Role> roles;
  for (Role r : samples.roles()) {
    if (exclude_random && r == Role::Random) continue;
    roles.push_back(r);
  }
  RoleVectors out;
  if (roles.empty()) return out;
  for (Role r : roles) out[static_cast<int>(r)].resize(cfg.max_len);
  std::vector<double> rewards(roles.size());
  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    for (std::size_t i = 0; i < roles.size(); ++i) {
      const auto& tr = samples.at(roles[i]).token_rewards;
      rewards[i] = t < tr.size() ? tr[t] : (tr.empty() ? 0.0 : tr.back());
    }
    const auto c = leave_one_out_coefficients<double>(rewards, cfg.b_static);
    for (std::size_t i = 0; i < roles.size(); ++i) out[static_cast<int>(roles[i])][t] = c[i];
  }
  return out;
}

double WeightedCE::eval(const PolicyModel& m, const RelaxedPrompt& x) const {
  double total = 0.0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& w = weights[i];
    if (w.empty()) continue;
    const LogLikelihood ll = log_likelihood(m, sequences[i], x, w.size());
    for (std::size_t t = 0; t < w.size(); ++t) total += w[t] * ll.per_token_ce[t];
  }
  return total;
}

GradientMatrix WeightedCE::gradient(const PolicyModel& m, const RelaxedPrompt& x) const {
  return loglik_gradient(m, sequences, weights, x);
}

WeightedCE frozen_objective(const SampleSet& samples, const RlooConfig& cfg, bool exclude_random, std::size_t upto) {
  const RoleVectors coeff = rloo_coefficients(samples, cfg, exclude_random);
  WeightedCE obj;
  for (Role r : samples.roles()) {
    if (exclude_random && r == Role::Random) continue;
    const auto& g = samples.at(r).generation;
    const std::size_t len = std::min({g.size(), upto, cfg.max_len});
    obj.sequences.push_back(g.tokens);
    std::vector<double> w;
    if (len > 0) {
      w = position_weights(cfg, len);
      for (std::size_t t = 0; t < len; ++t) w[t] *= coeff[static_cast<int>(r)][t];
    }
    obj.weights.push_back(std::move(w));
  }
  return obj;
}

LossBreakdown rloo_loss(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x, const RlooConfig& cfg,
                        bool exclude_random, std::size_t upto) {
  LossBreakdown out;
  out.per_sample_coeff = rloo_coefficients(samples, cfg, exclude_random);
  for (Role r : samples.roles()) {
    if (exclude_random && r == Role::Random) continue;
    const auto& g = samples.at(r).generation;
    const std::size_t len = std::min({g.size(), upto, cfg.max_len});
    if (len == 0) continue;
    const auto w = position_weights(cfg, len);
    const LogLikelihood ll = log_likelihood(m, g.tokens, x, len);
    const int k = static_cast<int>(r);
    auto& coeff = out.per_sample_coeff[k];
    coeff.resize(len);
    double contrib = 0.0;
    for (std::size_t t = 0; t < len; ++t) contrib += coeff[t] * w[t] * ll.per_token_ce[t];
    out.per_sample_ce[k] = ll.per_token_ce;
    out.contribution[k] = contrib;
    out.total += contrib;
  }
  return out;
}

GradientMatrix rloo_gradient(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x,
                             const RlooConfig& cfg) {
  return frozen_objective(samples, cfg, false).gradient(m, x);
}

bool greedy_harmful(const SampleSet& samples) {
  return samples.has(Role::Greedy) && samples.at(Role::Greedy).raw_profile.terminal() > kHarmfulThreshold;
}

double target_metric(const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x, const RlooConfig& cfg) {
  const LossBreakdown lb = rloo_loss(m, samples, x, cfg, true);
  if (!samples.has(Role::Greedy)) return lb.total;
  if (!greedy_harmful(samples)) return lb.total + kNotHarmfulPenalty;
  return lb.total + lb.contribution[static_cast<int>(Role::Greedy)];
}

std::vector<HarmfulCandidate> tracker_candidates(const SampleSet& samples) {
  std::vector<HarmfulCandidate> out;
  for (Role r : {Role::Greedy, Role::Random}) {
    if (!samples.has(r)) continue;
    const auto& e = samples.at(r);
    out.push_back({e.generation, e.raw_profile, e.raw_profile.terminal(), e.generation.avg_ce()});
  }
  return out;
}

}  // namespace ra
