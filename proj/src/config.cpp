#include "ra/config.hpp"

#include <fstream>
#include <initializer_list>
#include <json.hpp>
#include <sstream>

#include "ra/instances.hpp"

namespace ra {

namespace {

using nlohmann::json;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config error at " + (path.empty() ? std::string("<root>") : path) + ": " + what);
}

void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  expect_object(j, path);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(join(path, key), "unknown key \"" + key + "\"");
  }
}

std::uint64_t as_uint(const json& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path, "expected a non-negative integer");
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  const auto v = j.get<std::int64_t>();
  if (v < 0) fail(path, "expected a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

double as_real(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) fail(path, "expected true or false");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected a string");
  return j.get<std::string>();
}

TokenSeq as_tokens(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array of token ids");
  TokenSeq out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto v = as_uint(j[i], path + "[" + std::to_string(i) + "]");
    if (v > static_cast<std::uint64_t>(std::numeric_limits<TokenId>::max())) fail(path, "token id out of range");
    out.push_back(static_cast<TokenId>(v));
  }
  return out;
}

template <class T, class F>
void opt(const json& j, const char* key, const std::string& path, T& dst, F conv) {
  if (j.contains(key)) dst = static_cast<T>(conv(j.at(key), join(path, key)));
}

JudgeSpec parse_judge(const json& j, const std::string& path) {
  check_keys(j, path, {"harm_tokens", "refusal_tokens", "slope", "bias"});
  JudgeSpec s;
  if (!j.contains("harm_tokens")) fail(join(path, "harm_tokens"), "required");
  for (TokenId t : as_tokens(j.at("harm_tokens"), join(path, "harm_tokens"))) s.harm.insert(t);
  if (j.contains("refusal_tokens")) {
    for (TokenId t : as_tokens(j.at("refusal_tokens"), join(path, "refusal_tokens"))) s.refusal.insert(t);
  }
  opt(j, "slope", path, s.slope, as_real);
  opt(j, "bias", path, s.bias, as_real);
  return s;
}

ModelSpec parse_model(const json& j, const std::string& path, const std::filesystem::path& base_dir) {
  check_keys(j, path,
             {"vocab_size", "seed", "scale", "weights", "toy_instance", "instance_seed", "special", "ascii_tokens",
              "max_context"});
  ModelSpec m;
  const int kinds = int(j.contains("vocab_size")) + int(j.contains("weights")) + int(j.contains("toy_instance"));
  if (kinds != 1) fail(path, "exactly one of vocab_size, weights or toy_instance is required");
  if (j.contains("special")) {
    const auto& s = j.at("special");
    const std::string sp = join(path, "special");
    check_keys(s, sp, {"eos", "pad", "bang"});
    opt(s, "eos", sp, m.special.eos_id, as_uint);
    opt(s, "pad", sp, m.special.pad_id, as_uint);
    opt(s, "bang", sp, m.special.bang_id, as_uint);
  }
  if (j.contains("ascii_tokens")) m.ascii_tokens = as_tokens(j.at("ascii_tokens"), join(path, "ascii_tokens"));
  opt(j, "max_context", path, m.max_context, as_uint);
  if (j.contains("toy_instance")) {
    m.kind = ModelSpec::Kind::ToyInstance;
    m.instance = as_string(j.at("toy_instance"), join(path, "toy_instance"));
    if (m.instance != "trigger" && m.instance != "misleading") {
      fail(join(path, "toy_instance"), "expected \"trigger\" or \"misleading\"");
    }
    opt(j, "instance_seed", path, m.instance_seed, as_uint);
    for (const char* k : {"seed", "scale", "special", "ascii_tokens"}) {
      if (j.contains(k)) fail(join(path, k), "not allowed with toy_instance");
    }
    return m;
  }
  if (j.contains("instance_seed")) fail(join(path, "instance_seed"), "only allowed with toy_instance");
  if (j.contains("weights")) {
    m.kind = ModelSpec::Kind::Weights;
    m.weights = as_string(j.at("weights"), join(path, "weights"));
    if (m.weights.is_relative()) m.weights = base_dir / m.weights;
    if (!std::filesystem::exists(m.weights)) fail(join(path, "weights"), "file not found: " + m.weights.string());
    for (const char* k : {"seed", "scale"}) {
      if (j.contains(k)) fail(join(path, k), "not allowed with weights");
    }
    return m;
  }
  m.kind = ModelSpec::Kind::Random;
  m.vocab_size = as_uint(j.at("vocab_size"), join(path, "vocab_size"));
  if (m.vocab_size < 3) fail(join(path, "vocab_size"), "must be at least 3");
  opt(j, "seed", path, m.seed, as_uint);
  opt(j, "scale", path, m.scale, as_real);
  return m;
}

PromptLayout parse_layout(const json& j, const std::string& path, AttackKind kind) {
  check_keys(j, path, {"system_prefix", "user_prompt", "attack_prefix_len", "attack_suffix_len", "system_suffix"});
  PromptLayout l;
  if (!j.contains("user_prompt")) fail(join(path, "user_prompt"), "required");
  l.user_prompt = as_tokens(j.at("user_prompt"), join(path, "user_prompt"));
  if (j.contains("system_prefix")) l.system_prefix = as_tokens(j.at("system_prefix"), join(path, "system_prefix"));
  if (j.contains("system_suffix")) l.system_suffix = as_tokens(j.at("system_suffix"), join(path, "system_suffix"));
  // Defaults: GCG attacks a 20-token suffix; PGD a 25-token prefix and suffix.
  if (kind == AttackKind::Pgd) {
    l.attack_prefix_len = kPgdInitLen;
    l.attack_suffix_len = kPgdInitLen;
  } else {
    l.attack_suffix_len = kGcgSuffixInitLen;
  }
  opt(j, "attack_prefix_len", path, l.attack_prefix_len, as_uint);
  opt(j, "attack_suffix_len", path, l.attack_suffix_len, as_uint);
  return l;
}

void parse_rloo(const json& j, const std::string& path, RlooConfig& c) {
  check_keys(j, path, {"b_static", "weight_first", "weight_last"});
  opt(j, "b_static", path, c.b_static, as_real);
  opt(j, "weight_first", path, c.weight_first, as_real);
  opt(j, "weight_last", path, c.weight_last, as_real);
}

void parse_gcg(const json& j, const std::string& path, GcgConfig& c) {
  check_keys(j, path, {"search_width", "iterations", "top_k", "select_threshold", "min_select_len"});
  opt(j, "search_width", path, c.search_width, as_uint);
  opt(j, "iterations", path, c.iterations, as_uint);
  opt(j, "top_k", path, c.top_k, as_uint);
  opt(j, "select_threshold", path, c.select_threshold, as_real);
  opt(j, "min_select_len", path, c.min_select_len, as_uint);
}

void parse_pgd(const json& j, const std::string& path, PgdConfig& c) {
  check_keys(j, path,
             {"iterations", "base_lr", "terminal_lr", "entropy_frac", "ramp_steps", "restart_period", "patience",
              "grad_clip", "batch_size", "donor_temperature", "self_reset_prob", "gap_tau"});
  opt(j, "iterations", path, c.iterations, as_uint);
  opt(j, "base_lr", path, c.base_lr, as_real);
  opt(j, "terminal_lr", path, c.terminal_lr, as_real);
  opt(j, "entropy_frac", path, c.entropy_frac, as_real);
  opt(j, "ramp_steps", path, c.ramp_steps, as_uint);
  opt(j, "restart_period", path, c.restart_period, as_uint);
  opt(j, "patience", path, c.patience, as_uint);
  opt(j, "grad_clip", path, c.grad_clip, as_real);
  opt(j, "batch_size", path, c.batch_size, as_uint);
  opt(j, "donor_temperature", path, c.donor_temperature, as_real);
  opt(j, "self_reset_prob", path, c.self_reset_prob, as_real);
  opt(j, "gap_tau", path, c.gap_tau, as_real);
}

AttackKind parse_attack(const json& j) {
  const std::string s = as_string(j, "attack");
  if (s == "gcg") return AttackKind::Gcg;
  if (s == "pgd") return AttackKind::Pgd;
  if (s == "oracle-verify") return AttackKind::OracleVerify;
  if (s == "exhaustive") return AttackKind::Exhaustive;
  fail("attack", "expected one of gcg, pgd, oracle-verify, exhaustive");
}

// Invariants that need the assembled pieces; errors name the field.
void validate(const RunConfig& c) {
  const bool toy = c.model.kind == ModelSpec::Kind::ToyInstance;
  if (!toy && !c.judge) fail("judge", "required unless model.toy_instance is set");
  if (!toy && !c.layout) fail("layout", "required unless model.toy_instance is set");
  try {
    c.rloo.validate();
  } catch (const std::exception& e) {
    fail("rloo", e.what());
  }
  try {
    c.gcg.validate();
  } catch (const std::exception& e) {
    fail("gcg", e.what());
  }
  try {
    c.pgd.validate();
  } catch (const std::exception& e) {
    fail("pgd", e.what());
  }
  if (c.max_len && (*c.max_len == 0 || *c.max_len > kMaxGenerationLen)) fail("max_len", "must be in [1, 128]");
  if (c.seed_response && c.seed_response->empty()) fail("seed_response", "must be non-empty");
  if (c.layout && c.layout->n_attack() == 0 && (c.attack == AttackKind::Gcg || c.attack == AttackKind::Pgd)) {
    fail("layout", "the attack needs at least one attack slot");
  }
}

}  // namespace

const char* attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::Gcg: return "gcg";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::OracleVerify: return "oracle-verify";
    case AttackKind::Exhaustive: return "exhaustive";
  }
  return "?";
}

RunConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  check_keys(j, "",
             {"attack", "rng_seed", "output_dir", "record_timing", "model", "judge", "eval_judge", "layout",
              "seed_response", "max_len", "objective", "rloo", "gcg", "pgd"});
  RunConfig c;
  if (!j.contains("attack")) fail("attack", "required");
  c.attack = parse_attack(j.at("attack"));
  if (!j.contains("rng_seed")) fail("rng_seed", "required (runs must be reproducible)");
  c.rng_seed = as_uint(j.at("rng_seed"), "rng_seed");
  if (j.contains("output_dir")) {
    c.output_dir = as_string(j.at("output_dir"), "output_dir");
    if (c.output_dir.is_relative()) c.output_dir = base_dir / c.output_dir;
  }
  opt(j, "record_timing", "", c.record_timing, as_bool);
  if (!j.contains("model")) fail("model", "required");
  c.model = parse_model(j.at("model"), "model", base_dir);
  if (j.contains("judge")) c.judge = parse_judge(j.at("judge"), "judge");
  if (j.contains("eval_judge")) c.eval_judge = parse_judge(j.at("eval_judge"), "eval_judge");
  if (j.contains("layout")) c.layout = parse_layout(j.at("layout"), "layout", c.attack);
  if (j.contains("seed_response")) c.seed_response = as_tokens(j.at("seed_response"), "seed_response");
  if (j.contains("max_len")) c.max_len = as_uint(j.at("max_len"), "max_len");
  if (j.contains("objective")) {
    const std::string o = as_string(j.at("objective"), "objective");
    if (o == "reinforce") {
      c.objective = Objective::Reinforce;
    } else if (o == "affirmative") {
      c.objective = Objective::Affirmative;
    } else {
      fail("objective", "expected \"reinforce\" or \"affirmative\"");
    }
  }
  if (j.contains("rloo")) parse_rloo(j.at("rloo"), "rloo", c.rloo);
  if (j.contains("gcg")) parse_gcg(j.at("gcg"), "gcg", c.gcg);
  if (j.contains("pgd")) parse_pgd(j.at("pgd"), "pgd", c.pgd);
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

AttackProblem Setup::problem() const {
  return AttackProblem{*model, *judge, layout, seed_response, rloo, objective, nullptr};
}

Setup materialize(const RunConfig& cfg) {
  Setup s;
  s.objective = cfg.objective;
  s.rloo = cfg.rloo;
  const auto make_judge = [](const JudgeSpec& j, TokenId pad) {
    return std::make_unique<ToyJudge>(j.harm, j.refusal, j.slope, j.bias, pad);
  };
  try {
    if (cfg.model.kind == ModelSpec::Kind::ToyInstance) {
      toy::Instance inst = cfg.model.instance == "trigger" ? toy::trigger_instance(cfg.model.instance_seed)
                                                           : toy::misleading_instance(cfg.model.instance_seed);
      s.model = std::make_unique<ToyLM>(inst.model);
      s.judge = std::make_unique<ToyJudge>(inst.judge);
      s.layout = inst.layout;
      s.seed_response = cfg.objective == Objective::Affirmative ? inst.affirmative : inst.seed_response;
      s.rloo.max_len = inst.rloo.max_len;
    } else {
      std::vector<bool> ascii;
      const std::size_t n = cfg.model.kind == ModelSpec::Kind::Random ? cfg.model.vocab_size : 0;
      if (cfg.model.kind == ModelSpec::Kind::Random) {
        if (cfg.model.ascii_tokens) {
          ascii.assign(n, false);
          for (TokenId t : *cfg.model.ascii_tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= n) fail("model.ascii_tokens", "token id outside vocabulary");
            ascii[static_cast<std::size_t>(t)] = true;
          }
        }
        s.model = std::make_unique<ToyLM>(ToyLM::random(Vocab(n, cfg.model.special, ascii), cfg.model.seed,
                                                        cfg.model.scale, cfg.model.max_context));
      } else {
        ToyLM loaded = ToyLM::load(cfg.model.weights, cfg.model.special, {}, cfg.model.max_context);
        if (cfg.model.ascii_tokens) {
          ascii.assign(loaded.vocab().size(), false);
          for (TokenId t : *cfg.model.ascii_tokens) {
            if (!loaded.vocab().contains(t)) fail("model.ascii_tokens", "token id outside vocabulary");
            ascii[static_cast<std::size_t>(t)] = true;
          }
          loaded = ToyLM::load(cfg.model.weights, cfg.model.special, ascii, cfg.model.max_context);
        }
        s.model = std::make_unique<ToyLM>(std::move(loaded));
      }
    }
    const TokenId pad = s.model->vocab().special().pad_id;
    if (cfg.judge) s.judge = make_judge(*cfg.judge, pad);
    s.eval_judge = cfg.eval_judge ? make_judge(*cfg.eval_judge, pad) : std::make_unique<ToyJudge>(*s.judge);
    if (cfg.layout) s.layout = *cfg.layout;
    if (cfg.max_len) s.rloo.max_len = *cfg.max_len;

    const Vocab& v = s.model->vocab();
    for (const auto* part : {&s.layout.system_prefix, &s.layout.user_prompt, &s.layout.system_suffix}) {
      try {
        v.check(*part);
      } catch (const std::exception& e) {
        fail("layout", e.what());
      }
    }
    if (cfg.seed_response) {
      try {
        v.check(*cfg.seed_response);
      } catch (const std::exception& e) {
        fail("seed_response", e.what());
      }
      s.seed_response = *cfg.seed_response;
    } else if (s.seed_response.empty()) {
      // No seed given: the greedy generation at the initial prompt.
      const TokenSeq init = s.layout.filled(v.special().bang_id);
      Rng unused(0);
      Generation g = generate(*s.model, one_hot(init, s.layout, v.size()), SamplingMode::Greedy(), s.rloo.max_len,
                              unused);
      s.seed_response = g.tokens;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config error at model: ") + e.what());
  }
  return s;
}

}  // namespace ra
