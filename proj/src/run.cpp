#include "ra/run.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "ra/instances.hpp"
#include "ra/oracle.hpp"

namespace ra {

namespace {

using nlohmann::ordered_json;

std::optional<EnumSpec> tractable_spec(const PolicyModel& m, std::size_t max_len) {
  EnumSpec spec{max_len};
  try {
    spec.validate(m.vocab().size());
  } catch (const CapacityError&) {
    return std::nullopt;
  } catch (const ParameterError&) {
    return std::nullopt;
  }
  return spec;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

// Attack rows drawn from softmax of standard normals over the ascii columns.
RelaxedPrompt interior_point(const PromptLayout& layout, const Vocab& v, Rng& rng) {
  RelaxedPrompt x = one_hot(layout.filled(v.special().bang_id), layout, v.size());
  std::normal_distribution<double> normal;
  for (std::size_t r : layout.attack_rows()) {
    std::vector<double> logits(v.size(), -std::numeric_limits<double>::infinity());
    for (TokenId t : v.ascii_tokens()) logits[static_cast<std::size_t>(t)] = normal(rng);
    const auto p = softmax(logits);
    x.set_attack_row(r, p);
  }
  return x;
}

VerifyCase verify_case(const std::string& name, const PolicyModel& m, const Judge& j, const PromptLayout& layout,
                       std::span<const TokenId> seed_resp, const RlooConfig& rloo, const EnumSpec& spec,
                       std::uint64_t seed) {
  VerifyCase c;
  c.name = name;
  Rng rng(seed);
  const RelaxedPrompt x = interior_point(layout, m.vocab(), rng);
  const TokenId pad = m.vocab().special().pad_id;

  double total = 0.0;
  for (const auto& s : enumerate_generations(m, x, spec)) total += s.prob;
  c.prob_sum_error = std::abs(total - 1.0);

  const RewardFn reward = judge_reward(j, x, pad);
  const auto forms = exact_policy_gradient_forms(m, reward, x, spec);
  c.forms_max_diff = forms.max_abs_diff;
  const ScalarFn er = [&](const RelaxedPrompt& p) { return exact_expected_reward(m, judge_reward(j, p, pad), p, spec); };
  c.exact_fd_error = fd_check(er, x, forms.tree_form).max_relative_error;

  // Weighted log-likelihood of a few sampled sequences with random weights.
  std::vector<TokenSeq> ys;
  std::vector<std::vector<double>> coeffs;
  std::normal_distribution<double> normal;
  for (int i = 0; i < 3; ++i) {
    Generation g = generate(m, x, SamplingMode::Sampled(1.0, m.vocab().size()), spec.max_len, rng);
    std::vector<double> w(g.size());
    for (double& v : w) v = normal(rng);
    ys.push_back(g.tokens);
    coeffs.push_back(std::move(w));
  }
  const GradientMatrix lg = loglik_gradient(m, ys, coeffs, x);
  const ScalarFn wce = [&](const RelaxedPrompt& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const auto ll = log_likelihood(m, ys[i], p);
      for (std::size_t t = 0; t < coeffs[i].size(); ++t) s += coeffs[i][t] * ll.per_token_ce[t];
    }
    return s;
  };
  c.loglik_fd_error = fd_check(wce, x, lg).max_relative_error;

  HarmfulTracker tracker;
  const RelaxedPrompt xd = one_hot(row_argmax(x), layout, m.vocab().size());
  SampleSet samples = draw_samples(m, j, xd, seed_resp, tracker, rng, rloo);
  const GradientMatrix rg = rloo_gradient(m, samples, x, rloo);
  const ScalarFn rl = [&](const RelaxedPrompt& p) { return rloo_loss(m, samples, p, rloo, false).total; };
  c.rloo_fd_error = fd_check(rl, x, rg).max_relative_error;
  return c;
}

}  // namespace

double VerifyCase::max_gradient_error() const { return std::max({exact_fd_error, loglik_fd_error, rloo_fd_error}); }

RunSummary execute(const RunConfig& cfg, const Setup& setup) {
  RunSummary s;
  const AttackProblem problem = setup.problem();
  switch (cfg.attack) {
    case AttackKind::Gcg: {
      Rng rng(cfg.rng_seed);
      s.results.push_back(run_gcg(problem, cfg.gcg, rng));
      break;
    }
    case AttackKind::Pgd: {
      std::vector<AttackProblem> batch(cfg.pgd.batch_size, problem);
      s.results = run_pgd(batch, cfg.pgd, cfg.rng_seed);
      break;
    }
    case AttackKind::Exhaustive: {
      AttackResult r;
      const auto found = exhaustive_best_suffix(*setup.model, *setup.eval_judge, setup.layout,
                                                EnumSpec{setup.rloo.max_len});
      r.best_attack = found.attack;
      r.best_prompt = found.prompt;
      r.best_metric = std::numeric_limits<double>::quiet_NaN();
      s.results.push_back(std::move(r));
      s.oracle_reward.push_back(found.value);
      return s;
    }
    case AttackKind::OracleVerify:
      throw ParameterError("oracle-verify runs through verify()");
  }
  const auto spec = tractable_spec(*setup.model, setup.rloo.max_len);
  for (const auto& r : s.results) {
    if (!s.error && r.error) s.error = r.error;
    if (spec && !r.best_prompt.empty()) {
      s.oracle_reward.push_back(exact_expected_reward(
          *setup.model, *setup.eval_judge, one_hot(r.best_prompt, setup.layout, setup.model->vocab().size()), *spec));
    } else {
      s.oracle_reward.push_back(std::nullopt);
    }
  }
  s.exit_code = s.error ? 1 : 0;
  return s;
}

std::vector<const TraceRecord*> ordered_records(const std::vector<AttackResult>& results) {
  std::vector<const TraceRecord*> recs;
  for (const auto& r : results) {
    for (const auto& t : r.trace) recs.push_back(&t);
  }
  std::stable_sort(recs.begin(), recs.end(), [](const TraceRecord* a, const TraceRecord* b) {
    return a->step != b->step ? a->step < b->step : a->prompt_id < b->prompt_id;
  });
  return recs;
}

std::string trace_jsonl(const std::vector<AttackResult>& results, bool with_timing) {
  std::string out;
  for (const TraceRecord* t : ordered_records(results)) {
    out += to_json_line(*t, with_timing);
    out += '\n';
  }
  return out;
}

std::string result_json(const RunConfig& cfg, const RunSummary& s) {
  ordered_json j;
  j["schema_version"] = kTraceSchemaVersion;
  j["attack"] = attack_name(cfg.attack);
  j["objective"] = cfg.objective == Objective::Affirmative ? "affirmative" : "reinforce";
  j["rng_seed"] = cfg.rng_seed;
  double best = std::numeric_limits<double>::infinity();
  ordered_json prompts = ordered_json::array();
  for (std::size_t p = 0; p < s.results.size(); ++p) {
    const auto& r = s.results[p];
    ordered_json e;
    e["prompt_id"] = p;
    e["best_attack"] = r.best_attack;
    e["best_prompt"] = r.best_prompt;
    if (std::isfinite(r.best_metric)) {
      e["best_metric"] = r.best_metric;
      best = std::min(best, r.best_metric);
    } else {
      e["best_metric"] = nullptr;
    }
    if (p < s.oracle_reward.size() && s.oracle_reward[p]) {
      e["oracle_expected_reward"] = *s.oracle_reward[p];
    } else {
      e["oracle_expected_reward"] = nullptr;
    }
    e["error"] = r.error ? ordered_json(*r.error) : ordered_json(nullptr);
    prompts.push_back(std::move(e));
  }
  j["best_metric"] = std::isfinite(best) ? ordered_json(best) : ordered_json(nullptr);
  j["prompts"] = std::move(prompts);
  return j.dump(2) + "\n";
}

std::string dynamics_csv(const std::vector<AttackResult>& results) {
  std::string out = dynamics_header() + "\n";
  for (const TraceRecord* t : ordered_records(results)) out += dynamics_row(*t) + "\n";
  return out;
}

std::string timing_csv(const std::vector<AttackResult>& results) {
  std::ostringstream os;
  os << "step,prompt_id,generate_ms,gradient_ms,reward_ms,selection_ms,wall_ms\n";
  os << std::setprecision(6);
  for (const TraceRecord* t : ordered_records(results)) {
    os << t->step << ',' << t->prompt_id << ',' << t->timing.generate_ms << ',' << t->timing.gradient_ms << ','
       << t->timing.reward_ms << ',' << t->timing.selection_ms << ',' << t->wall_ms << '\n';
  }
  return os.str();
}

RunSummary run(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  if (cfg.attack == AttackKind::OracleVerify) {
    const VerifyReport rep = verify(cfg);
    write_file(cfg.output_dir / "verify.json", verify_json(rep));
    RunSummary s;
    s.exit_code = rep.passed ? 0 : 1;
    if (!rep.passed) s.error = "oracle verification failed";
    return s;
  }
  const Setup setup = materialize(cfg);
  RunSummary s = execute(cfg, setup);
  write_file(cfg.output_dir / "trace.jsonl", trace_jsonl(s.results, cfg.record_timing));
  write_file(cfg.output_dir / "result.json", result_json(cfg, s));
  write_file(cfg.output_dir / "dynamics.csv", dynamics_csv(s.results));
  write_file(cfg.output_dir / "timing.csv", timing_csv(s.results));
  return s;
}

VerifyReport verify(const RunConfig& cfg) {
  VerifyReport rep;
  std::uint64_t k = 0;
  for (const char* kind : {"trigger", "misleading"}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const toy::Instance inst =
          std::string(kind) == "trigger" ? toy::trigger_instance(seed) : toy::misleading_instance(seed);
      rep.cases.push_back(verify_case(std::string(kind) + "/" + std::to_string(seed), inst.model, inst.judge,
                                      inst.layout, inst.seed_response, inst.rloo, inst.spec,
                                      derive_seed(cfg.rng_seed, k++)));
    }
  }
  const bool toy_model = cfg.model.kind == ModelSpec::Kind::ToyInstance;
  if (!toy_model && cfg.judge && cfg.layout) {
    const Setup setup = materialize(cfg);
    const std::size_t len = std::min<std::size_t>(setup.rloo.max_len, kEnumMaxLen);
    if (const auto spec = tractable_spec(*setup.model, len)) {
      RlooConfig rloo = setup.rloo;
      rloo.max_len = len;
      rep.cases.push_back(verify_case("configured", *setup.model, *setup.judge, setup.layout, setup.seed_response,
                                      rloo, *spec, derive_seed(cfg.rng_seed, k++)));
    }
  }
  rep.passed = true;
  for (const auto& c : rep.cases) {
    rep.max_gradient_error = std::max(rep.max_gradient_error, c.max_gradient_error());
    rep.passed = rep.passed && c.prob_sum_error <= 1e-9 && c.forms_max_diff <= 1e-9 &&
                 c.max_gradient_error() < kVerifyGradTol;
  }
  return rep;
}

std::string verify_json(const VerifyReport& r) {
  ordered_json j;
  j["passed"] = r.passed;
  j["max_gradient_relative_error"] = r.max_gradient_error;
  j["tolerance"] = kVerifyGradTol;
  ordered_json cases = ordered_json::array();
  for (const auto& c : r.cases) {
    ordered_json e;
    e["name"] = c.name;
    e["prob_sum_error"] = c.prob_sum_error;
    e["forms_max_diff"] = c.forms_max_diff;
    e["exact_fd_error"] = c.exact_fd_error;
    e["loglik_fd_error"] = c.loglik_fd_error;
    e["rloo_fd_error"] = c.rloo_fd_error;
    cases.push_back(std::move(e));
  }
  j["cases"] = std::move(cases);
  return j.dump(2) + "\n";
}

std::string bench_table(const RunConfig& cfg) {
  const Setup setup = materialize(cfg);
  RunConfig c = cfg;
  if (c.attack != AttackKind::Gcg && c.attack != AttackKind::Pgd) c.attack = AttackKind::Gcg;
  const RunSummary s = execute(c, setup);
  PhaseTimes sum;
  double wall = 0.0;
  std::size_t n = 0;
  for (const TraceRecord* t : ordered_records(s.results)) {
    // The last record only evaluates the final prompt.
    if (!t->lr && !t->accepted) continue;
    sum.generate_ms += t->timing.generate_ms;
    sum.gradient_ms += t->timing.gradient_ms;
    sum.reward_ms += t->timing.reward_ms;
    sum.selection_ms += t->timing.selection_ms;
    wall += t->wall_ms;
    ++n;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "attack " << attack_name(c.attack) << ", " << n << " steps\n";
  os << std::left << std::setw(12) << "phase" << std::right << std::setw(14) << "ms/step" << std::setw(10) << "share"
     << "\n";
  const double total = sum.total();
  const auto row = [&](const char* name, double v) {
    os << std::left << std::setw(12) << name << std::right << std::setw(14) << (n ? v / n : 0.0) << std::setw(9)
       << (total > 0 ? 100.0 * v / total : 0.0) << "%\n";
  };
  row("generate", sum.generate_ms);
  row("gradient", sum.gradient_ms);
  row("reward", sum.reward_ms);
  row("selection", sum.selection_ms);
  row("sum", total);
  os << std::left << std::setw(12) << "wall" << std::right << std::setw(14) << (n ? wall / n : 0.0) << "\n";
  return os.str();
}

}  // namespace ra
