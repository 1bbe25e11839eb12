#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "ra/gcg.hpp"
#include "ra/instances.hpp"
#include "ra/oracle.hpp"
#include "vanilla_gcg.hpp"

using namespace ra;

namespace {

// Merges the adjacent pair (3, 4) into 3.
struct MergingRoundtrip : TokenRoundtrip {
  TokenSeq roundtrip(std::span<const TokenId> seq) const override {
    TokenSeq out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      out.push_back(seq[i]);
      if (seq[i] == 3 && i + 1 < seq.size() && seq[i + 1] == 4) ++i;
    }
    return out;
  }
};

struct RejectAll : TokenRoundtrip {
  TokenSeq roundtrip(std::span<const TokenId>) const override { return {}; }
};

SampleSet with_greedy(std::vector<std::pair<std::size_t, double>> cps, std::size_t seed_len = 20) {
  SampleSet s;
  auto& seed = s.entries[0].emplace();
  seed.generation.tokens.assign(seed_len, 2);
  seed.generation.logprobs.assign(seed_len, -0.1);
  seed.generation.original_len = seed_len;
  auto& g = s.entries[1].emplace();
  for (auto [l, r] : cps) g.raw_profile.checkpoints.push_back({l, r});
  g.generation.tokens.assign(g.raw_profile.length(), 3);
  g.generation.logprobs.assign(g.raw_profile.length(), -0.1);
  return s;
}

SampleSet harmful_greedy(bool harmful) { return with_greedy({{4, harmful ? 0.9 : 0.1}}); }

}  // namespace

TEST_CASE("candidate tokens are ascii, exclude the current token and follow -G") {
  const Vocab v(6, SpecialTokens{0, 1, 2});
  const std::vector<double> g{-9.0, -9.0, -1.0, -3.0, 2.0, -3.0};
  CHECK(candidate_tokens(g, 2, 10, v) == std::vector<TokenId>{3, 5, 4});
  CHECK(candidate_tokens(g, 3, 2, v) == std::vector<TokenId>{5, 2});
  const Vocab tiny(3, SpecialTokens{0, 1, 2});
  CHECK_THROWS_AS(candidate_tokens(std::vector<double>(3), 2, 4, tiny), ConfigError);
}

TEST_CASE("mutation contract on random gradients") {
  const Vocab v(12, SpecialTokens{0, 1, 2}, {false, false, true, true, true, true, true, true, true, false, true, true});
  const PromptLayout l = testing::small_layout(2, 3);
  GcgConfig cfg;
  cfg.search_width = 37;
  cfg.top_k = 4;
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    GradientMatrix g{Matrix(l.total_len(), 12)};
    for (double& x : g.values.data()) x = uniform01(rng) - 0.5;
    TokenSeq parent = l.filled(2);
    for (std::size_t r : l.attack_rows()) parent[r] = static_cast<TokenId>(2 + uniform_index(rng, 7));
    const auto cands = mutate(g, parent, l, cfg, v, rng);
    REQUIRE(cands.size() == cfg.search_width);
    const auto rows = l.attack_rows();
    for (std::size_t j = 0; j < cands.size(); ++j) {
      std::vector<std::size_t> diff;
      for (std::size_t p = 0; p < parent.size(); ++p) {
        if (cands[j][p] != parent[p]) diff.push_back(p);
      }
      REQUIRE(diff.size() == 1);
      const std::size_t slot = (j + 1) % rows.size();
      CHECK(diff[0] == rows[slot]);
      const auto pool = candidate_tokens(g.values.row(rows[slot]), parent[rows[slot]], cfg.top_k, v);
      CHECK(std::find(pool.begin(), pool.end(), cands[j][diff[0]]) != pool.end());
      CHECK(v.ascii_ok(cands[j][diff[0]]));
    }
  }
}

TEST_CASE("S = n_slots with k = 1 flips each slot to its best token") {
  const Vocab v(5, SpecialTokens{0, 1, 2});
  PromptLayout l;
  l.user_prompt = {1};
  l.attack_suffix_len = 2;
  GradientMatrix g{Matrix(3, 5)};
  g.values(1, 4) = -5.0;  // best for slot 0
  g.values(2, 3) = -5.0;  // best for slot 1
  GcgConfig cfg;
  cfg.search_width = 2;
  cfg.top_k = 1;
  Rng rng(0);
  const auto c = mutate(g, TokenSeq{1, 2, 2}, l, cfg, v, rng);
  CHECK(c[0] == TokenSeq{1, 2, 3});  // j = 1 -> slot 1
  CHECK(c[1] == TokenSeq{1, 4, 2});  // j = 2 -> slot 0
}

TEST_CASE("round-trip filter") {
  const std::vector<TokenSeq> cands{{3, 4, 2}, {2, 3, 2}, {4, 3, 4}};
  CHECK(filter_roundtrip(cands, TokenRoundtrip{}) == cands);
  CHECK(filter_roundtrip(cands, MergingRoundtrip{}) == std::vector<TokenSeq>{{2, 3, 2}});
  CHECK(filter_roundtrip(cands, RejectAll{}) == cands);
}

TEST_CASE("selection length") {
  const GcgConfig cfg;
  CHECK(select_len(with_greedy({{20, 0}, {40, 0}, {80, 0}, {128, 0}}), cfg) == 40);
  CHECK(select_len(with_greedy({{20, 0}, {40, 0.3}, {80, 0}, {128, 0}}), cfg) == 80);
  CHECK(select_len(with_greedy({{20, 0}, {40, 0}, {80, 0}, {128, 0.9}}), cfg) == 128);
  CHECK(select_len(with_greedy({{20, 0.5}, {40, 0}, {80, 0}, {128, 0}}), cfg) == 40);
  CHECK(select_len(with_greedy({{22, 0}, {40, 0.02}, {80, 0}, {128, 0}}, 22), cfg) == 80);
  CHECK(select_len(with_greedy({{4, 0.9}}), cfg, 4) == 4);
}

TEST_CASE("candidate scoring") {
  const auto inst = toy::trigger_instance(1);
  const auto x = one_hot(inst.layout.filled(toy::kBang), inst.layout, toy::kVocabSize);
  Rng rng(2);
  HarmfulTracker tr;
  const SampleSet s = draw_samples(inst.model, inst.judge, x, inst.seed_response, tr, rng, inst.rloo);
  const WeightedCE obj = frozen_objective(s, inst.rloo, true);
  std::vector<TokenSeq> cands;
  for (TokenId a : {2, 3, 4, 5}) {
    for (TokenId b : {2, 3, 4, 5}) cands.push_back(inst.layout.assemble(TokenSeq{a, b}));
  }
  const ScoreResult par = score_candidates(inst.model, obj, cands, inst.layout);
  const ScoreResult ser = score_candidates_serial(inst.model, obj, cands, inst.layout);
  CHECK(par.losses == ser.losses);
  CHECK(par.best == ser.best);
  for (double l : par.losses) CHECK(par.losses[par.best] <= l);

  SUBCASE("duplicate of a candidate scores identically and ties go to the lower index") {
    std::vector<TokenSeq> dup{cands[par.best], cands[par.best]};
    const ScoreResult r = score_candidates(inst.model, obj, dup, inst.layout);
    CHECK(r.losses[0] == r.losses[1]);
    CHECK(r.best == 0);
  }
  SUBCASE("parent at index 0 wins against worse candidates") {
    std::vector<TokenSeq> list{cands[par.best]};
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (par.losses[i] > par.losses[par.best]) list.push_back(cands[i]);
    }
    CHECK(score_candidates(inst.model, obj, list, inst.layout).best == 0);
  }
  SUBCASE("the random sample does not influence selection") {
    SampleSet other = s;
    auto& r = other.at(Role::Random);
    for (auto& t : r.generation.tokens) t = t == toy::kH ? toy::kR : toy::kH;
    r.token_rewards.assign(r.token_rewards.size(), 0.77);
    const WeightedCE obj2 = frozen_objective(other, inst.rloo, true);
    const ScoreResult r2 = score_candidates(inst.model, obj2, cands, inst.layout);
    CHECK(r2.best == par.best);
    CHECK(r2.losses == par.losses);
  }
  CHECK_THROWS_AS(score_candidates(inst.model, obj, std::vector<TokenSeq>{}, inst.layout), SearchError);
}

TEST_CASE("mode-harmful acceptance guard") {
  GcgState st;
  st.current = {1, 2, 2};
  st.best_prompt = st.current;
  st.best_metric = 5.0;
  bool ok = false;

  const GcgState a = accept(st, TokenSeq{1, 3, 2}, harmful_greedy(false), 7.0, &ok);
  CHECK(ok);
  CHECK(a.current == TokenSeq{1, 3, 2});
  CHECK(a.best_metric == 5.0);

  st.greedy_harmful = true;
  const GcgState b = accept(st, TokenSeq{1, 4, 2}, harmful_greedy(false), 1.0, &ok);
  CHECK_FALSE(ok);
  CHECK(b.current == st.current);
  CHECK(b.greedy_harmful);

  // A rejected step still records the harmful random sample in the tracker.
  SampleSet with_random = harmful_greedy(false);
  auto& r = with_random.entries[2].emplace();
  r.generation.tokens = {3, 3, 3};
  r.generation.logprobs = {-0.1, -0.1, -0.1};
  r.raw_profile.checkpoints = {{3, 0.95}};
  const GcgState c = accept(st, TokenSeq{1, 4, 2}, with_random, 1.0, &ok);
  CHECK_FALSE(ok);
  REQUIRE(c.tracker.best.has_value());
  CHECK(c.tracker.best->reward == 0.95);

  const GcgState d = accept(st, TokenSeq{1, 5, 2}, harmful_greedy(true), 2.0, &ok);
  CHECK(ok);
  CHECK(d.best_metric == 2.0);
  CHECK(d.best_prompt == TokenSeq{1, 5, 2});
}

TEST_CASE("zero iterations returns the initial prompt") {
  const auto inst = toy::trigger_instance(4);
  AttackProblem p{inst.model, inst.judge, inst.layout, inst.seed_response, inst.rloo};
  GcgConfig cfg;
  cfg.iterations = 0;
  Rng rng(1);
  const AttackResult r = run_gcg(p, cfg, rng);
  CHECK(r.best_attack == TokenSeq{toy::kBang, toy::kBang});
  REQUIRE(r.trace.size() == 1);
  CHECK(r.trace[0].metric == r.best_metric);
}

TEST_CASE("rigged trigger instances are solved within three steps") {
  int solved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = toy::trigger_instance(seed);
    AttackProblem p{inst.model, inst.judge, inst.layout, inst.seed_response, inst.rloo};
    GcgConfig cfg;
    cfg.search_width = 8;  // >= |V|
    cfg.iterations = 3;
    Rng rng(seed);
    const AttackResult r = run_gcg(p, cfg, rng);
    REQUIRE_FALSE(r.error);
    const double er = exact_expected_reward(inst.model, inst.judge,
                                            one_hot(r.best_prompt, inst.layout, toy::kVocabSize), inst.spec);
    if (er > 0.9) ++solved;
  }
  CHECK(solved == 10);
}

TEST_CASE("run_gcg trace invariants") {
  const auto inst = toy::misleading_instance(3);
  AttackProblem p{inst.model, inst.judge, inst.layout, inst.seed_response, inst.rloo};
  GcgConfig cfg;
  cfg.search_width = 16;
  cfg.iterations = 25;
  Rng rng(7);
  const AttackResult r = run_gcg(p, cfg, rng);
  REQUIRE(r.trace.size() == cfg.iterations + 1);
  bool harmful_seen = false;
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    const auto& t = r.trace[i];
    CHECK(t.step == i);
    CHECK(r.best_metric <= t.metric);
    // Once an accepted state is greedy-harmful it stays so.
    if (harmful_seen) CHECK(t.greedy_harmful);
    harmful_seen = harmful_seen || t.greedy_harmful;
    if (i + 1 < r.trace.size()) {
      CHECK(t.accepted.has_value());
      CHECK(t.selection_len.has_value());
    }
  }
}

TEST_CASE("pinned affirmative GCG matches a plain GCG loop step for step") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ToyLM m = ToyLM::random(Vocab(10, {}), 40 + seed, 1.0);
    const ToyJudge j({3}, {}, 1.0, 0.0, 1);
    PromptLayout l;
    l.user_prompt = {5, 6};
    l.attack_suffix_len = 3;
    l.system_suffix = {1};
    const TokenSeq target{7, 8, 9, 0};
    AttackProblem p{m, j, l, target, RlooConfig{}, Objective::Affirmative};
    GcgConfig cfg;
    cfg.search_width = 12;
    cfg.top_k = 4;
    cfg.iterations = 15;
    Rng a(seed), b(seed);
    const AttackResult r = run_gcg(p, cfg, a);
    const auto v = testing::vanilla_gcg(m, l, target, cfg.search_width, cfg.top_k, cfg.iterations, b);
    REQUIRE(r.trace.size() == v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(r.trace[i].attack_tokens == v[i].attack);
      CHECK(r.trace[i].loss == doctest::Approx(v[i].loss).epsilon(1e-12));
      if (i + 1 < v.size()) CHECK(*r.trace[i].selected_loss == doctest::Approx(v[i].best_cand).epsilon(1e-12));
    }
  }
}
