// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <boost/rational.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "qp_oracle.hpp"
#include "ra/gcg.hpp"
#include "ra/instances.hpp"
#include "ra/oracle.hpp"
#include "ra/parallel.hpp"
#include "ra/pgd.hpp"
#include "ra/run.hpp"
#include "vanilla_gcg.hpp"

using namespace ra;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

RelaxedPrompt interior(const PromptLayout& l, std::size_t n, Rng& rng) {
  RelaxedPrompt x = one_hot(l.filled(2), l, n);
  std::normal_distribution<double> normal;
  for (std::size_t r : l.attack_rows()) {
    std::vector<double> z(n);
    for (double& v : z) v = normal(rng);
    x.set_attack_row(r, softmax(z));
  }
  return x;
}

double oracle_er(const toy::Instance& inst, const TokenSeq& prompt) {
  return exact_expected_reward(inst.model, inst.judge, one_hot(prompt, inst.layout, toy::kVocabSize), inst.spec);
}

// 1
Outcome projection() {
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + i % 3;
    std::vector<double> s(n);
    for (double& v : s) v = (uniform01(rng) - 0.5) * 4.0;
    const auto p = simplex_project(s);
    const auto q = testing::simplex_qp_oracle(s);
    for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(p[k] - q[k]));
  }
  const auto a = simplex_project(std::vector<double>{0.5, 0.5, 0.5});
  const auto b = simplex_project(std::vector<double>{2, 0, 0});
  const auto c = simplex_project(std::vector<double>{0.6, 0.3});
  // "Exactly" at double precision: the decimal inputs are not representable,
  // so allow the rounding of one subtraction.
  const double ex = std::max({std::abs(a[0] - 1.0 / 3), std::abs(a[1] - 1.0 / 3), std::abs(a[2] - 1.0 / 3),
                              std::abs(b[0] - 1.0), std::abs(b[1]), std::abs(b[2]), std::abs(c[0] - 0.65),
                              std::abs(c[1] - 0.35)});
  return {worst < 1e-9 && ex <= 1e-15, fmt("max |p - qp| %.2e over 1000, worked examples off by %.1e", worst, ex)};
}

// 2
Outcome entropy() {
  Rng rng(202);
  double worst = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + i % 6;
    std::vector<double> s(n);
    double sum = 0.0;
    for (double& v : s) {
      v = uniform01(rng) < 0.25 ? 0.0 : uniform01(rng);
      sum += v;
    }
    if (sum == 0.0) {
      s[0] = 1.0;
      sum = 1.0;
    }
    for (double& v : s) v /= sum;
    const auto nnz = std::count_if(s.begin(), s.end(), [](double v) { return v > 0.0; });
    const double target = uniform01(rng) * (1.0 - 1.0 / static_cast<double>(nnz));
    worst = std::min(worst, tsallis2(entropy_project(s, target)) - target);
  }
  const auto p = entropy_project(std::vector<double>{0.9, 0.1, 0.0}, 0.3);
  const double ex = std::max({std::abs(p[0] - 0.8162), std::abs(p[1] - 0.1838), std::abs(p[2])});
  return {worst >= -1e-9 && ex < 1e-3, fmt("min (S - target) %.2e over 1000, worked example off by %.1e", worst, ex)};
}

// 3
Outcome gradient_fidelity() {
  double worst_ll = 0.0, worst_rloo = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng rng(derive_seed(303, i));
    const std::size_t n = 4 + i % 5;
    const ToyLM m = ToyLM::random(Vocab(n, {}), derive_seed(304, i), 1.0);
    const ToyJudge j({3}, {2}, 2.0, -0.5, 1);
    PromptLayout l;
    l.system_prefix = {1};
    l.attack_prefix_len = i % 2;
    l.user_prompt = {2, 3};
    l.attack_suffix_len = 1 + i % 3;
    l.system_suffix = {1};
    const auto x = interior(l, n, rng);

    std::vector<TokenSeq> ys;
    std::vector<std::vector<double>> coeffs;
    for (int k = 0; k < 3; ++k) {
      TokenSeq y(2 + uniform_index(rng, 6));
      for (auto& t : y) t = static_cast<TokenId>(uniform_index(rng, n));
      std::vector<double> c(y.size());
      for (double& v : c) v = uniform01(rng) * 2.0 - 1.0;
      ys.push_back(std::move(y));
      coeffs.push_back(std::move(c));
    }
    const ScalarFn wce = [&](const RelaxedPrompt& p) {
      double s = 0.0;
      for (std::size_t a = 0; a < ys.size(); ++a) {
        const auto ll = log_likelihood(m, ys[a], p);
        for (std::size_t t = 0; t < coeffs[a].size(); ++t) s += coeffs[a][t] * ll.per_token_ce[t];
      }
      return s;
    };
    worst_ll = std::max(worst_ll, fd_check(wce, x, loglik_gradient(m, ys, coeffs, x)).max_relative_error);

    RlooConfig cfg;
    cfg.max_len = 12;
    HarmfulTracker tr;
    const TokenSeq seed{3, 3, 2};
    const auto xd = one_hot(row_argmax(x), l, n);
    const SampleSet s = draw_samples(m, j, xd, seed, tr, rng, cfg);
    const ScalarFn loss = [&](const RelaxedPrompt& p) { return rloo_loss(m, s, p, cfg, false).total; };
    worst_rloo = std::max(worst_rloo, fd_check(loss, x, rloo_gradient(m, s, x, cfg)).max_relative_error);
  }
  return {worst_ll < 1e-4 && worst_rloo < 1e-4,
          fmt("max rel err loglik %.2e, rloo %.2e over 100 instances", worst_ll, worst_rloo)};
}

// 4
Outcome unbiasedness() {
  const ToyLM m = ToyLM::random(Vocab(4, SpecialTokens{0, 1, 2}), 404, 1.0);
  const ToyJudge j({3}, {2}, 3.0, -0.5, 1);
  PromptLayout l;
  l.user_prompt = {2};
  l.attack_suffix_len = 2;
  Rng rng(405);
  const auto x = interior(l, 4, rng);
  const EnumSpec spec{3};
  const RewardFn reward = judge_reward(j, x, 1);
  const Matrix exact = exact_policy_gradient(m, reward, x, spec).values;

  const auto rows = l.attack_rows();
  const std::size_t draws = 100000;
  Matrix mean(rows.size(), 4), sq(rows.size(), 4);
  for (std::size_t d = 0; d < draws; ++d) {
    const Generation g = generate(m, x, SamplingMode::Sampled(1.0, 4), spec.max_len, rng);
    const std::vector<TokenSeq> ys{g.tokens};
    const std::vector<std::vector<double>> ones{std::vector<double>(g.size(), 1.0)};
    const Matrix gl = loglik_gradient(m, ys, ones, x).values;
    const double r = reward(g.tokens);
    for (std::size_t a = 0; a < rows.size(); ++a) {
      for (std::size_t c = 0; c < 4; ++c) {
        const double est = -r * gl(rows[a], c);  // R * grad log P
        mean(a, c) += est;
        sq(a, c) += est * est;
      }
    }
  }
  double worst_z = 0.0;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double mu = mean(a, c) / draws;
      const double se = std::sqrt((sq(a, c) / draws - mu * mu) / draws);
      worst_z = std::max(worst_z, std::abs(mu - exact(rows[a], c)) / se);
    }
  }
  return {worst_z <= 3.0, fmt("worst |mean - exact| / sigma = %.2f over %zu coordinates", worst_z, rows.size() * 4)};
}

// 5
Outcome phantom() {
  using Q = boost::rational<long long>;
  std::mt19937_64 rng(505);
  const Q b(1, 10);
  std::size_t mismatches = 0;
  for (int i = 0; i < 4000; ++i) {
    const std::size_t k = 1 + i % 4;
    std::vector<Q> r(k);
    for (auto& v : r) v = Q(static_cast<long long>(rng() % 1001), 1000);
    std::vector<Q> aug = r;
    aug.push_back(b);
    const auto ours = leave_one_out_coefficients<Q>(r, b);
    const auto textbook = rloo_divisor_km1<Q>(aug);
    for (std::size_t a = 0; a < k; ++a) mismatches += ours[a] != textbook[a];
  }
  const std::vector<Q> mixed{Q(1), Q(0)}, none{Q(0), Q(0)}, all{Q(1), Q(1)};
  const bool worked = leave_one_out_coefficients<Q>(mixed, b) == std::vector<Q>{Q(95, 100), Q(-55, 100)} &&
                      leave_one_out_coefficients<Q>(none, b) == std::vector<Q>{Q(-5, 100), Q(-5, 100)} &&
                      leave_one_out_coefficients<Q>(all, b) == std::vector<Q>{Q(45, 100), Q(45, 100)};
  return {mismatches == 0 && worked,
          fmt("%zu mismatches over 4000 rational reward sets, worked values %s", mismatches, worked ? "ok" : "wrong")};
}

// 6
Outcome vanilla() {
  std::size_t steps = 0, diffs = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ToyLM m = ToyLM::random(Vocab(24, {}), 600 + seed, 1.0);
    const ToyJudge j({3}, {}, 1.0, 0.0, 1);
    PromptLayout l;
    l.user_prompt = {5, 6, 7};
    l.attack_suffix_len = 4;
    l.system_suffix = {1};
    const TokenSeq target{10, 11, 12, 13, 0};
    const AttackProblem p{m, j, l, target, RlooConfig{}, Objective::Affirmative};
    GcgConfig cfg;
    cfg.search_width = 32;
    cfg.top_k = 8;
    cfg.iterations = 30;
    Rng a(seed), b(seed);
    const AttackResult r = run_gcg(p, cfg, a);
    const auto v = testing::vanilla_gcg(m, l, target, cfg.search_width, cfg.top_k, cfg.iterations, b);
    if (r.trace.size() != v.size()) return {false, "trace lengths differ"};
    for (std::size_t i = 0; i < v.size(); ++i) {
      ++steps;
      const bool same_tokens = r.trace[i].attack_tokens == v[i].attack;
      const bool same_loss = std::abs(r.trace[i].loss - v[i].loss) <= 1e-12 * std::max(1.0, std::abs(v[i].loss));
      diffs += !(same_tokens && same_loss);
    }
  }
  return {diffs == 0, fmt("%zu of %zu steps differ from the plain GCG loop", diffs, steps)};
}

// 7
Outcome end_to_end() {
  std::size_t certified = 0, gcg_ok = 0, pgd_ok = 0;
  for (std::uint64_t seed = 0; certified < 20 && seed < 100; ++seed) {
    const auto inst = toy::trigger_instance(seed);
    const double base = oracle_er(inst, inst.layout.filled(toy::kBang));
    const double best = exhaustive_best_suffix(inst.model, inst.judge, inst.layout, inst.spec).value;
    if (!(best > 0.9 && base < 0.1)) continue;
    ++certified;
    const AttackProblem p{inst.model, inst.judge, inst.layout, inst.seed_response, inst.rloo};

    GcgConfig g;
    g.search_width = 64;
    g.iterations = 50;
    Rng rng(derive_seed(700, seed));
    const AttackResult rg = run_gcg(p, g, rng);
    if (!rg.error && oracle_er(inst, rg.best_prompt) > 0.9) ++gcg_ok;

    PgdConfig c;
    c.iterations = 1000;
    const auto rp = run_pgd(std::span(&p, 1), c, derive_seed(701, seed));
    if (!rp[0].error && oracle_er(inst, rp[0].best_prompt) > 0.9) ++pgd_ok;
  }
  return {certified == 20 && gcg_ok >= 18 && pgd_ok >= 15,
          fmt("%zu certified, REINFORCE-GCG %zu/20, REINFORCE-PGD %zu/20", certified, gcg_ok, pgd_ok)};
}

// 8
Outcome consistency() {
  std::size_t certified = 0, aff_low = 0, rl_high = 0;
  for (std::uint64_t seed = 0; certified < 10 && seed < 100; ++seed) {
    const auto inst = toy::misleading_instance(seed);
    if (!(toy::best_affirmative_suffix(inst).value < 0.2)) continue;
    ++certified;
    GcgConfig g;
    g.search_width = 64;
    g.iterations = 50;

    const AttackProblem aff{inst.model, inst.judge, inst.layout, inst.affirmative, inst.rloo, Objective::Affirmative};
    Rng r1(derive_seed(800, seed));
    const AttackResult ra = run_gcg(aff, g, r1);
    if (!ra.error && oracle_er(inst, ra.best_prompt) < 0.2) ++aff_low;

    const AttackProblem rl{inst.model, inst.judge, inst.layout, inst.seed_response, inst.rloo};
    Rng r2(derive_seed(801, seed));
    const AttackResult rr = run_gcg(rl, g, r2);
    if (!rr.error && oracle_er(inst, rr.best_prompt) > 0.8) ++rl_high;
  }
  return {certified == 10 && aff_low >= 8 && rl_high >= 8,
          fmt("%zu certified, affirmative GCG < 0.2 on %zu/10, REINFORCE-GCG > 0.8 on %zu/10", certified, aff_low,
              rl_high)};
}

// 9
Outcome determinism() {
  namespace fs = std::filesystem;
  const int before = max_workers();
  std::size_t identical = 0, total = 0;
  const char* extras[] = {
      R"("attack": "gcg", "gcg": {"search_width": 64, "iterations": 20})",
      R"("attack": "pgd", "pgd": {"iterations": 150, "batch_size": 4, "patience": 20})",
  };
  for (const char* extra : extras) {
    std::string first;
    for (int w : {1, 8, 1, 8}) {
      set_workers(w);
      const fs::path out = fs::temp_directory_path() / ("ra_acceptance_det_" + std::to_string(total));
      fs::remove_all(out);
      const std::string text = std::string("{") + extra + R"(, "rng_seed": 99, "output_dir": ")" + out.string() +
                               R"(", "model": {"toy_instance": "misleading", "instance_seed": 4}})";
      const RunConfig cfg = parse_config(text);
      if (run(cfg).exit_code != 0) return {false, "run failed"};
      std::ifstream in(out / "trace.jsonl", std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      if (first.empty()) first = ss.str();
      identical += ss.str() == first;
      ++total;
      fs::remove_all(out);
    }
  }
  set_workers(before);
  return {identical == total, fmt("%zu/%zu runs byte-identical (gcg and pgd, workers 1 and 8)", identical, total)};
}

// 10
Outcome mutation_contract() {
  std::vector<bool> ascii(40, true);
  ascii[0] = ascii[1] = false;
  for (std::size_t t = 30; t < 40; t += 3) ascii[t] = false;
  const Vocab v(40, SpecialTokens{0, 1, 2}, ascii);
  PromptLayout l;
  l.system_prefix = {1};
  l.attack_prefix_len = 3;
  l.user_prompt = {5, 6};
  l.attack_suffix_len = 4;
  l.system_suffix = {1};
  const auto rows = l.attack_rows();
  GcgConfig cfg;
  cfg.search_width = 500;
  cfg.top_k = 7;
  Rng rng(1010);
  std::size_t checked = 0, bad = 0;
  while (checked < 10000) {
    GradientMatrix g{Matrix(l.total_len(), 40)};
    for (double& x : g.values.data()) x = uniform01(rng) - 0.5;
    TokenSeq parent = l.filled(2);
    for (std::size_t r : rows) parent[r] = v.ascii_tokens()[uniform_index(rng, v.ascii_tokens().size())];
    const auto cands = mutate(g, parent, l, cfg, v, rng);
    for (std::size_t j = 0; j < cands.size(); ++j, ++checked) {
      std::vector<std::size_t> diff;
      for (std::size_t p = 0; p < parent.size(); ++p) {
        if (cands[j][p] != parent[p]) diff.push_back(p);
      }
      if (diff.size() != 1) {
        ++bad;
        continue;
      }
      const std::size_t slot = (j + 1) % rows.size();
      const std::size_t r = diff[0];
      const TokenId tok = cands[j][r];
      // top-k of -G among ascii tokens other than the parent's, computed independently
      std::size_t better = 0;
      for (TokenId t = 0; t < 40; ++t) {
        if (!ascii[t] || t == parent[r] || t == tok) continue;
        if (-g.values(r, t) > -g.values(r, tok) || (-g.values(r, t) == -g.values(r, tok) && t < tok)) ++better;
      }
      bad += !(r == rows[slot] && ascii[tok] && better < cfg.top_k);
    }
  }
  return {bad == 0, fmt("%zu violations in %zu mutations", bad, checked)};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double budget_s;  // 0: no runtime bound
  };
  const Criterion criteria[] = {
      {"projection correctness", projection, 1.0},
      {"entropy projection", entropy, 1.0},
      {"gradient fidelity", gradient_fidelity, 30.0},
      {"estimator unbiasedness", unbiasedness, 120.0},
      {"phantom-baseline identity", phantom, 0.0},
      {"vanilla degradation", vanilla, 0.0},
      {"end-to-end desk attack", end_to_end, 300.0},
      {"consistency demonstration", consistency, 0.0},
      {"determinism", determinism, 0.0},
      {"mutation contract", mutation_contract, 0.0},
  };
  int failed = 0;
  int i = 0;
  for (const auto& c : criteria) {
    ++i;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    bool pass = o.pass;
    if (c.budget_s > 0 && secs >= c.budget_s) {
      pass = false;
      o.detail += fmt(" (over the %.0f s budget)", c.budget_s);
    }
    failed += !pass;
    std::printf("%s %2d %-27s %s [%.2f s]\n", pass ? "PASS" : "FAIL", i, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
