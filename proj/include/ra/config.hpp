#pragma once

// Run configuration: a single strict JSON document.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include "ra/gcg.hpp"
#include "ra/pgd.hpp"

namespace ra {

enum class AttackKind { Gcg, Pgd, OracleVerify, Exhaustive };
const char* attack_name(AttackKind k);

struct ModelSpec {
  enum class Kind { Random, Weights, ToyInstance };
  Kind kind = Kind::Random;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
  double scale = 0.3;
  std::filesystem::path weights;
  std::string instance;  // "trigger" or "misleading"
  std::uint64_t instance_seed = 0;
  SpecialTokens special;
  std::optional<std::vector<TokenId>> ascii_tokens;
  std::size_t max_context = ToyLM::kDefaultMaxContext;
};

struct JudgeSpec {
  std::set<TokenId> harm;
  std::set<TokenId> refusal;
  double slope = 1.0;
  double bias = 0.0;
};

struct RunConfig {
  AttackKind attack = AttackKind::Gcg;
  std::uint64_t rng_seed = 0;
  std::filesystem::path output_dir = "ra_out";
  bool record_timing = false;

  ModelSpec model;
  std::optional<JudgeSpec> judge;       // attack-time reward
  std::optional<JudgeSpec> eval_judge;  // evaluation reward; defaults to judge
  std::optional<PromptLayout> layout;
  std::optional<TokenSeq> seed_response;  // default: greedy generation at the initial prompt
  std::optional<std::size_t> max_len;

  Objective objective = Objective::Reinforce;
  RlooConfig rloo;
  GcgConfig gcg;
  PgdConfig pgd;
};

// Throws ConfigError naming the offending field path.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = ".");

// Model, judges, layout and seed response built from a validated config.
struct Setup {
  std::unique_ptr<ToyLM> model;
  std::unique_ptr<ToyJudge> judge;
  std::unique_ptr<ToyJudge> eval_judge;
  PromptLayout layout;
  TokenSeq seed_response;
  RlooConfig rloo;
  Objective objective = Objective::Reinforce;

  AttackProblem problem() const;
};

Setup materialize(const RunConfig& cfg);

}  // namespace ra
