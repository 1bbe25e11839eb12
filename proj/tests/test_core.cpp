#include <doctest.h>

#include "helpers.hpp"
#include "ra/core.hpp"

using namespace ra;

namespace {

PromptLayout plain(std::size_t len) {
  PromptLayout l;
  l.user_prompt.assign(len, 0);
  return l;
}

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

}  // namespace

TEST_CASE("one_hot of [2,0] over three tokens") {
  const RelaxedPrompt x = one_hot(TokenSeq{2, 0}, plain(2), 3);
  Matrix want(2, 3);
  want(0, 2) = 1.0;
  want(1, 0) = 1.0;
  CHECK(x.weights() == want);
}

TEST_CASE("one_hot rejects out-of-vocabulary ids and wrong lengths") {
  CHECK_THROWS_AS(one_hot(TokenSeq{3, 0}, plain(2), 3), ShapeError);
  CHECK_THROWS_AS(one_hot(TokenSeq{1}, plain(2), 3), ShapeError);
}

TEST_CASE("discretize picks the row argmax with ties to the lowest id") {
  PromptLayout l;
  l.attack_suffix_len = 2;
  RelaxedPrompt x = one_hot(TokenSeq{0, 0}, l, 2);
  const std::vector<double> a{0.1, 0.9}, b{0.6, 0.4}, tie{0.5, 0.5};
  x.set_attack_row(0, a);
  x.set_attack_row(1, b);
  const TokenRoundtrip identity;
  CHECK(discretize(x, identity) == TokenSeq{1, 0});
  CHECK(row_argmax(x) == TokenSeq{1, 0});
  x.set_attack_row(0, tie);
  CHECK(discretize(x, identity) == TokenSeq{0, 0});
}

TEST_CASE("discretize after one_hot is the identity") {
  Rng rng(5);
  const TokenRoundtrip identity;
  const PromptLayout l = testing::small_layout(2, 3);
  for (int trial = 0; trial < 50; ++trial) {
    TokenSeq attack(l.n_attack());
    for (auto& t : attack) t = static_cast<TokenId>(uniform_index(rng, 7));
    const TokenSeq seq = l.assemble(attack);
    CHECK(discretize(one_hot(seq, l, 7), identity) == seq);
  }
}

TEST_CASE("a merging round-trip shortens the discretized prompt") {
  PromptLayout l;
  l.attack_suffix_len = 3;
  const RelaxedPrompt x = one_hot(TokenSeq{3, 4, 2}, l, 5);
  CHECK(discretize(x, MergingRoundtrip{}) == TokenSeq{3, 2});
}

TEST_CASE("layout assembles, extracts and strips attack slots") {
  PromptLayout l;
  l.system_prefix = {9};
  l.attack_prefix_len = 2;
  l.user_prompt = {7, 8};
  l.attack_suffix_len = 1;
  l.system_suffix = {6};
  CHECK(l.total_len() == 7);
  CHECK(l.attack_rows() == std::vector<std::size_t>{1, 2, 5});
  const TokenSeq full = l.assemble(TokenSeq{1, 2, 3});
  CHECK(full == TokenSeq{9, 1, 2, 7, 8, 3, 6});
  CHECK(l.extract_attack(full) == TokenSeq{1, 2, 3});
  CHECK(l.clean_prompt() == TokenSeq{9, 7, 8, 6});
  CHECK(l.filled(0) == TokenSeq{9, 0, 0, 7, 8, 0, 6});
  CHECK_THROWS_AS(l.assemble(TokenSeq{1}), ShapeError);
}

TEST_CASE("relaxed prompt invariants are enforced") {
  const PromptLayout l = testing::small_layout();
  RelaxedPrompt x = one_hot(l.filled(2), l, 4);
  const std::vector<double> bad_sum{0.5, 0.2, 0.2, 0.0};
  const std::vector<double> negative{1.2, -0.2, 0.0, 0.0};
  const std::vector<double> ok{0.25, 0.25, 0.25, 0.25};
  const std::size_t attack = l.attack_rows()[0];
  CHECK_THROWS_AS(x.set_attack_row(attack, bad_sum), ShapeError);
  CHECK_THROWS_AS(x.set_attack_row(attack, negative), ShapeError);
  CHECK_THROWS_AS(x.set_attack_row(0, ok), ShapeError);  // fixed row
  const auto h = x.fixed_rows_hash();
  x.set_attack_row(attack, ok);
  CHECK_NOTHROW(x.validate());
  CHECK(x.fixed_rows_hash() == h);
  x.unchecked_weights()(0, 0) = 0.5;
  CHECK_THROWS_AS(x.validate(), ShapeError);
}

TEST_CASE("vocab validates special ids and ascii mask size") {
  CHECK_THROWS_AS(Vocab(2, SpecialTokens{0, 1, 2}), ParameterError);
  CHECK_THROWS_AS(Vocab(4, SpecialTokens{}, std::vector<bool>(3, true)), ShapeError);
  const Vocab v(5, SpecialTokens{});
  CHECK(v.ascii_tokens() == std::vector<TokenId>{2, 3, 4});
  CHECK_THROWS_AS(v.check(TokenSeq{0, 5}), ShapeError);
}

TEST_CASE("generation and reward profile validation") {
  Generation g;
  g.tokens = {1, 2};
  g.logprobs = {-0.1};
  CHECK_THROWS_AS(g.validate(), ShapeError);
  g.logprobs = {-0.1, 0.2};
  CHECK_THROWS_AS(g.validate(), NumericError);
  g.logprobs = {-0.1, -0.3};
  CHECK_NOTHROW(g.validate());
  CHECK(g.total_logprob() == doctest::Approx(-0.4));
  CHECK(g.avg_ce() == doctest::Approx(0.2));

  RewardProfile p{{{20, 0.1}, {20, 0.2}}};
  CHECK_THROWS_AS(p.validate(), ShapeError);
  p = RewardProfile{{{20, 0.1}, {40, 1.5}}};
  CHECK_THROWS_AS(p.validate(), NumericError);
}

TEST_CASE("uniform_index stays in range and derive_seed separates streams") {
  Rng rng(1);
  std::vector<int> counts(3);
  for (int i = 0; i < 3000; ++i) counts[uniform_index(rng, 3)]++;
  for (int c : counts) CHECK(c > 800);
  CHECK_THROWS_AS(uniform_index(rng, 0), ParameterError);
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}
