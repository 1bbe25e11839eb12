#include <doctest.h>

#include <boost/rational.hpp>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "ra/instances.hpp"
#include "ra/oracle.hpp"
#include "ra/reinforce.hpp"

using namespace ra;
using Q = boost::rational<long long>;

namespace {

SampleSet::Entry entry(TokenSeq toks, double terminal) {
  SampleSet::Entry e;
  e.generation.tokens = toks;
  e.generation.logprobs.assign(toks.size(), -0.5);
  e.raw_profile.checkpoints = {{toks.size(), terminal}};
  e.profile = e.raw_profile;
  return e;
}

// Token rewards filled by prefix max, as draw_samples does.
SampleSet finish(SampleSet s, std::size_t horizon) {
  auto r = prefix_max_rewards(s, horizon);
  for (Role role : s.roles()) s.at(role).token_rewards = r[static_cast<int>(role)];
  return s;
}

RlooConfig short_cfg(std::size_t len) {
  RlooConfig c;
  c.max_len = len;
  return c;
}

}  // namespace

TEST_CASE("phantom baseline identity in exact arithmetic") {
  std::mt19937_64 rng(17);
  const Q b(1, 10);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t k = 1 + trial % 4;
    std::vector<Q> r(k);
    for (auto& v : r) v = Q(static_cast<long long>(rng() % 101), 100);
    const auto ours = leave_one_out_coefficients<Q>(r, b);
    std::vector<Q> with_phantom = r;
    with_phantom.push_back(b);
    const auto textbook = rloo_divisor_km1<Q>(with_phantom);
    for (std::size_t i = 0; i < k; ++i) CHECK(ours[i] == textbook[i]);
    // sum_i coeff_i = (1/K) sum_i r_i - b
    const Q total = std::accumulate(ours.begin(), ours.end(), Q(0));
    CHECK(total == std::accumulate(r.begin(), r.end(), Q(0)) / Q(static_cast<long long>(k)) - b);
  }
}

TEST_CASE("K = 2 worked coefficients") {
  const Q b(1, 10);
  const std::vector<Q> mixed{Q(1), Q(0)}, none{Q(0), Q(0)}, all{Q(1), Q(1)};
  CHECK(leave_one_out_coefficients<Q>(mixed, b) == std::vector<Q>{Q(95, 100), Q(-55, 100)});
  CHECK(leave_one_out_coefficients<Q>(none, b) == std::vector<Q>{Q(-5, 100), Q(-5, 100)});
  CHECK(leave_one_out_coefficients<Q>(all, b) == std::vector<Q>{Q(45, 100), Q(45, 100)});
}

TEST_CASE("coefficient sum identity in floating point") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(1 + trial % 4);
    for (double& v : r) v = u(rng);
    const auto c = leave_one_out_coefficients<double>(r, 0.1);
    const double lhs = std::accumulate(c.begin(), c.end(), 0.0);
    const double rhs = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size()) - 0.1;
    CHECK(std::abs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("rewards equal to the static baseline cancel") {
  const std::vector<double> r{0.25, 0.25, 0.25};
  for (double c : leave_one_out_coefficients<double>(r, 0.25)) CHECK(c == 0.0);
  // with b = 0 equal rewards keep r / K
  for (double c : leave_one_out_coefficients<double>(r, 0.0)) CHECK(c == doctest::Approx(0.25 / 3));
}

TEST_CASE("position weights") {
  const RlooConfig cfg;
  const auto w = position_weights(cfg, 128);
  CHECK(w[0] == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  CHECK(w[127] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) / 128.0 == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t t = 1; t < w.size(); ++t) CHECK(w[t] < w[t - 1]);
  const auto flat = position_weights(RlooConfig{0.1, 1.0, 1.0, 128}, 50);
  for (double v : flat) CHECK(v == 1.0);
  CHECK_THROWS_AS(position_weights(cfg, 0), ParameterError);
  CHECK_THROWS_AS(position_weights(RlooConfig{0.1, 1.0, 2.0, 128}, 4), ParameterError);
}

TEST_CASE("rloo coefficients from a sample set") {
  SampleSet s;
  s.entries[0] = entry({2, 3}, 1.0);
  s.entries[1] = entry({4, 3}, 0.0);
  s = finish(std::move(s), 2);
  const auto c = rloo_coefficients(s, short_cfg(2));
  CHECK(c[0][0] == doctest::Approx(0.95));
  CHECK(c[1][0] == doctest::Approx(-0.55));
  CHECK(c[2].empty());
}

TEST_CASE("single sample coefficient is r - b") {
  SampleSet s;
  s.entries[0] = entry({2, 3, 4}, 0.7);
  s = finish(std::move(s), 3);
  const auto c = rloo_coefficients(s, short_cfg(3));
  REQUIRE(c[0].size() == 3);
  for (double v : c[0]) CHECK(v == doctest::Approx(0.6));
}

TEST_CASE("rloo loss breakdown and sign contract") {
  const ToyLM m = ToyLM::random(Vocab(6, {}), 4, 1.0);
  const PromptLayout l = testing::small_layout();
  const auto x = one_hot(l.filled(2), l, 6);
  const RlooConfig cfg = short_cfg(4);

  SampleSet s;
  s.entries[0] = entry({2, 3, 4, 5}, 0.0);
  s.entries[1] = entry({5, 4, 3, 2}, 0.0);
  s = finish(std::move(s), 4);
  const LossBreakdown lb = rloo_loss(m, s, x, cfg, false);
  double recomputed = 0.0;
  const auto w = position_weights(cfg, 4);
  for (int r : {0, 1}) {
    for (std::size_t t = 0; t < 4; ++t) recomputed += lb.per_sample_coeff[r][t] * w[t] * lb.per_sample_ce[r][t];
  }
  CHECK(lb.total == doctest::Approx(recomputed).epsilon(1e-12));
  // All coefficients are negative here: raising a sample's CE lowers the loss.
  CHECK(lb.total < 0.0);

  SampleSet zero;
  zero.entries[0] = entry({2, 3}, 0.0);
  zero = finish(std::move(zero), 2);
  RlooConfig no_b = short_cfg(2);
  no_b.b_static = 0.0;
  CHECK(rloo_loss(m, zero, x, no_b, false).total == 0.0);
}

TEST_CASE("exclude_random drops the random role before counting K") {
  SampleSet s;
  s.entries[0] = entry({2, 3}, 1.0);
  s.entries[2] = entry({4, 4}, 0.0);
  s = finish(std::move(s), 2);
  const auto c = rloo_coefficients(s, short_cfg(2), true);
  CHECK(c[0][0] == doctest::Approx(0.9));
  CHECK(c[2].empty());
}

TEST_CASE("rloo gradient matches finite differences with frozen samples") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = trial % 2 ? toy::trigger_instance(trial) : toy::misleading_instance(trial);
    const auto x = testing::random_interior(inst.layout, toy::kVocabSize, rng);
    HarmfulTracker tr;
    const auto xd = one_hot(row_argmax(x), inst.layout, toy::kVocabSize);
    const SampleSet s = draw_samples(inst.model, inst.judge, xd, inst.seed_response, tr, rng, inst.rloo);
    const auto g = rloo_gradient(inst.model, s, x, inst.rloo);
    const ScalarFn f = [&](const RelaxedPrompt& p) { return rloo_loss(inst.model, s, p, inst.rloo, false).total; };
    CHECK(fd_check(f, x, g).max_relative_error < 1e-4);
  }
}

TEST_CASE("draw_samples role presence") {
  const auto inst = toy::trigger_instance(0);
  const auto x = one_hot(inst.layout.filled(toy::kBang), inst.layout, toy::kVocabSize);
  Rng rng(1);
  HarmfulTracker tr;
  const SampleSet s = draw_samples(inst.model, inst.judge, x, inst.seed_response, tr, rng, inst.rloo);
  CHECK(s.count() == 3);
  CHECK_FALSE(s.has(Role::Harmful));

  tr.best = HarmfulCandidate{score_tokens(inst.model, x, TokenSeq{3, 3, 3, 3}), {{{4, 0.9}}}, 0.9, 1.0};
  const SampleSet s4 = draw_samples(inst.model, inst.judge, x, inst.seed_response, tr, rng, inst.rloo);
  CHECK(s4.count() == 4);
  CHECK(s4.at(Role::Harmful).generation.tokens == TokenSeq{3, 3, 3, 3});
  CHECK_THROWS_AS(draw_samples(inst.model, inst.judge, x, TokenSeq{}, tr, rng, inst.rloo), ParameterError);
}

TEST_CASE("greedy equal to the seed extension keeps both roles") {
  // Deterministic chain 3 -> 3 -> ... ; seed [3] extends to the same tokens greedy produces.
  Matrix bigram(5, 5);
  for (int r = 0; r < 5; ++r) bigram(r, 3) = 30.0;
  const ToyLM m(Vocab(5, {}), std::vector<double>(5, 0.0), Matrix(5, 5), bigram);
  const ToyJudge j({3}, {}, 1.0, 0.0, 1);
  const PromptLayout l = testing::small_layout();
  const auto x = one_hot(l.filled(2), l, 5);
  Rng rng(3);
  HarmfulTracker tr;
  const SampleSet s = draw_samples(m, j, x, TokenSeq{3}, tr, rng, short_cfg(6));
  CHECK(s.at(Role::Seed).generation.tokens == s.at(Role::Greedy).generation.tokens);
  CHECK(s.count() == 3);
  CHECK(rloo_coefficients(s, short_cfg(6))[1].size() == 6);
}

TEST_CASE("seed reward is clipped only on the original prefix") {
  const auto inst = toy::trigger_instance(2);
  const auto x = one_hot(inst.layout.filled(toy::kBang), inst.layout, toy::kVocabSize);
  Rng rng(1);
  HarmfulTracker tr;
  const SampleSet s = draw_samples(inst.model, inst.judge, x, TokenSeq{5}, tr, rng, inst.rloo);
  const auto& seed = s.at(Role::Seed);
  CHECK(seed.generation.original_len == 1);
  CHECK(seed.raw_profile.checkpoints.front().length == 1);
  CHECK(seed.raw_profile.checkpoints.front().reward >= 0.5);
}

TEST_CASE("target metric penalty and doubling") {
  const auto inst = toy::trigger_instance(3);
  Rng rng(5);
  HarmfulTracker tr;
  const auto clean = one_hot(inst.layout.filled(toy::kBang), inst.layout, toy::kVocabSize);
  const SampleSet harmless = draw_samples(inst.model, inst.judge, clean, inst.seed_response, tr, rng, inst.rloo);
  REQUIRE_FALSE(greedy_harmful(harmless));
  const LossBreakdown lb0 = rloo_loss(inst.model, harmless, clean, inst.rloo, true);
  CHECK(target_metric(inst.model, harmless, clean, inst.rloo) == doctest::Approx(lb0.total + 10.0).epsilon(1e-12));

  const auto trig = one_hot(inst.layout.assemble(TokenSeq{inst.trigger, inst.trigger}), inst.layout, toy::kVocabSize);
  const SampleSet harmful = draw_samples(inst.model, inst.judge, trig, inst.seed_response, tr, rng, inst.rloo);
  REQUIRE(greedy_harmful(harmful));
  const LossBreakdown lb1 = rloo_loss(inst.model, harmful, trig, inst.rloo, true);
  CHECK(target_metric(inst.model, harmful, trig, inst.rloo) ==
        doctest::Approx(lb1.total + lb1.contribution[1]).epsilon(1e-12));
  CHECK(target_metric(inst.model, harmful, trig, inst.rloo) < target_metric(inst.model, harmless, clean, inst.rloo));
}

TEST_CASE("single-sample REINFORCE estimates average to the exact gradient") {
  // |V| = 4, generations up to 3 tokens.
  const Vocab v(4, SpecialTokens{0, 1, 2});
  const ToyLM m = ToyLM::random(v, 42, 1.0);
  const ToyJudge j({3}, {2}, 3.0, -0.5, 1);
  PromptLayout l;
  l.user_prompt = {2};
  l.attack_suffix_len = 1;
  Rng rng(9);
  const auto x = testing::random_interior(l, 4, rng);
  const EnumSpec spec{3};
  const RewardFn reward = judge_reward(j, x, 1);
  const Matrix exact = exact_policy_gradient(m, reward, x, spec).values;

  const std::size_t draws = 20000;
  const std::size_t row = l.attack_rows()[0];
  std::vector<double> mean(4), sq(4);
  for (std::size_t d = 0; d < draws; ++d) {
    const Generation g = generate(m, x, SamplingMode::Sampled(1.0, 4), 3, rng);
    const std::vector<TokenSeq> ys{g.tokens};
    const std::vector<std::vector<double>> ones{std::vector<double>(g.size(), 1.0)};
    const Matrix gl = loglik_gradient(m, ys, ones, x).values;
    const double r = reward(g.tokens);
    for (std::size_t c = 0; c < 4; ++c) {
      const double est = -r * gl(row, c);
      mean[c] += est;
      sq[c] += est * est;
    }
  }
  for (std::size_t c = 0; c < 4; ++c) {
    const double mu = mean[c] / draws;
    const double sd = std::sqrt(std::max(0.0, sq[c] / draws - mu * mu) / draws);
    CHECK(std::abs(mu - exact(row, c)) <= 3.0 * sd + 1e-12);
  }
}
