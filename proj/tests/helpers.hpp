#pragma once

#include <cmath>
#include <random>

#include "ra/policy.hpp"

namespace ra::testing {

inline PromptLayout small_layout(std::size_t prefix = 0, std::size_t suffix = 2) {
  PromptLayout l;
  l.system_prefix = {1};
  l.user_prompt = {2, 3};
  l.attack_prefix_len = prefix;
  l.attack_suffix_len = suffix;
  l.system_suffix = {1};
  return l;
}

// Attack rows drawn from softmax of normals over every column.
inline RelaxedPrompt random_interior(const PromptLayout& layout, std::size_t vocab, Rng& rng, TokenId fill = 2) {
  RelaxedPrompt x = one_hot(layout.filled(fill), layout, vocab);
  std::normal_distribution<double> normal;
  for (std::size_t r : layout.attack_rows()) {
    std::vector<double> z(vocab);
    for (double& v : z) v = normal(rng);
    x.set_attack_row(r, softmax(z));
  }
  return x;
}

inline ToyLM zero_model(std::size_t n) {
  return ToyLM(Vocab(n, {}), std::vector<double>(n, 0.0), Matrix(n, n), Matrix(n, n));
}

}  // namespace ra::testing
