#include "ra/gcg.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <numeric>

#include "ra/parallel.hpp"

namespace ra {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::size_t argmin_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

}  // namespace

void GcgConfig::validate() const {
  if (search_width == 0) throw ParameterError("search_width must be >= 1");
  if (top_k == 0) throw ParameterError("top_k must be >= 1");
  if (!(select_threshold >= 0.0 && select_threshold <= 1.0)) throw ParameterError("select_threshold outside [0,1]");
}

std::vector<TokenId> candidate_tokens(std::span<const double> grad_row, TokenId current, std::size_t top_k,
                                      const Vocab& vocab) {
  std::vector<TokenId> eligible;
  for (TokenId v : vocab.ascii_tokens()) {
    if (v != current) eligible.push_back(v);
  }
  if (eligible.empty()) throw ConfigError("no ascii-eligible replacement tokens");
  // Largest -G first; stable sort over ascending ids keeps ties at the lowest id.
  std::stable_sort(eligible.begin(), eligible.end(), [&](TokenId a, TokenId b) {
    return -grad_row[static_cast<std::size_t>(a)] > -grad_row[static_cast<std::size_t>(b)];
  });
  eligible.resize(std::min(top_k, eligible.size()));
  return eligible;
}

std::vector<TokenSeq> mutate(const GradientMatrix& grad, std::span<const TokenId> current, const PromptLayout& layout,
                             const GcgConfig& cfg, const Vocab& vocab, Rng& rng) {
  cfg.validate();
  if (current.size() != layout.total_len()) throw ShapeError("prompt length does not match layout");
  if (grad.values.rows() != layout.total_len() || grad.values.cols() != vocab.size()) {
    throw ShapeError("gradient shape does not match prompt");
  }
  const auto rows = layout.attack_rows();
  if (rows.empty()) throw ConfigError("layout has no attack slots to mutate");
  std::vector<std::vector<TokenId>> pool(rows.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    pool[a] = candidate_tokens(grad.values.row(rows[a]), current[rows[a]], cfg.top_k, vocab);
  }
  std::vector<TokenSeq> out;
  out.reserve(cfg.search_width);
  for (std::size_t j = 1; j <= cfg.search_width; ++j) {
    const std::size_t a = j % rows.size();
    TokenSeq cand(current.begin(), current.end());
    cand[rows[a]] = pool[a][uniform_index(rng, pool[a].size())];
    out.push_back(std::move(cand));
  }
  return out;
}

std::vector<TokenSeq> filter_roundtrip(std::vector<TokenSeq> cands, const TokenRoundtrip& tok) {
  std::vector<TokenSeq> kept;
  for (const auto& c : cands) {
    if (tok.roundtrip(c) == c) kept.push_back(c);
  }
  if (kept.empty()) return cands;
  return kept;
}

std::size_t select_len(const SampleSet& samples, const GcgConfig& cfg, std::size_t max_len) {
  const std::size_t floor_len = std::min(cfg.min_select_len, max_len);
  if (!samples.has(Role::Greedy)) return floor_len;
  const auto& profile = samples.at(Role::Greedy).raw_profile;
  std::size_t largest = 0;
  bool any = false;
  for (const auto& c : profile.checkpoints) {
    if (c.reward > cfg.select_threshold) {
      largest = c.length;
      any = true;
    }
  }
  if (!any) return floor_len;
  const std::size_t seed_len = samples.has(Role::Seed) ? samples.at(Role::Seed).generation.original_len : 20;
  std::size_t next = kMaxGenerationLen;
  for (std::size_t g : checkpoint_grid(std::max<std::size_t>(seed_len, 1))) {
    if (g > largest) {
      next = g;
      break;
    }
  }
  return std::min(std::max(next, floor_len), max_len);
}

ScoreResult score_candidates(const PolicyModel& m, const WeightedCE& objective, std::span<const TokenSeq> cands,
                             const PromptLayout& layout) {
  if (cands.empty()) throw SearchError("no candidates to score");
  ScoreResult r;
  r.losses.assign(cands.size(), 0.0);
  const std::size_t n = m.vocab().size();
  const auto count = static_cast<std::int64_t>(cands.size());
  ParallelErrors errors;
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i) {
    errors.run([&] {
      const auto k = static_cast<std::size_t>(i);
      r.losses[k] = objective.eval(m, one_hot(cands[k], layout, n));
    });
  }
  errors.rethrow();
  r.best = argmin_lowest(r.losses);
  return r;
}

ScoreResult score_candidates_serial(const PolicyModel& m, const WeightedCE& objective,
                                    std::span<const TokenSeq> cands, const PromptLayout& layout) {
  if (cands.empty()) throw SearchError("no candidates to score");
  ScoreResult r;
  for (const auto& c : cands) r.losses.push_back(objective.eval(m, one_hot(c, layout, m.vocab().size())));
  r.best = argmin_lowest(r.losses);
  return r;
}

GcgState accept(GcgState state, const TokenSeq& winner, const SampleSet& new_samples, double winner_metric,
                bool* accepted) {
  const auto cands = tracker_candidates(new_samples);
  state.tracker = update_tracker(std::move(state.tracker), cands);
  const bool winner_harmful = greedy_harmful(new_samples);
  const bool ok = !(state.greedy_harmful && !winner_harmful);
  if (ok) {
    state.current = winner;
    state.greedy_harmful = winner_harmful;
    if (winner_metric < state.best_metric) {
      state.best_metric = winner_metric;
      state.best_prompt = winner;
    }
  }
  ++state.step;
  if (accepted) *accepted = ok;
  return state;
}

AttackResult run_gcg(const AttackProblem& problem, const GcgConfig& cfg, Rng& rng, std::optional<TokenSeq> init_attack) {
  cfg.validate();
  const PolicyModel& m = problem.model;
  const PromptLayout& layout = problem.layout;
  const std::size_t n = m.vocab().size();
  const RlooConfig loss_cfg = problem.loss_config();
  const bool affirmative = problem.objective == Objective::Affirmative;

  AttackResult result;
  GcgState state;
  state.current = init_attack ? layout.assemble(*init_attack) : layout.filled(m.vocab().special().bang_id);
  m.vocab().check(state.current);

  auto t_step = Clock::now();
  PhaseTimes times;
  RelaxedPrompt x = one_hot(state.current, layout, n);
  SampleSet samples = problem.sample(x, state.tracker, rng, &times);
  auto t0 = Clock::now();
  state.tracker = update_tracker(std::move(state.tracker), tracker_candidates(samples));
  state.greedy_harmful = greedy_harmful(samples);
  double metric = target_metric(m, samples, x, loss_cfg);
  times.selection_ms += ms_since(t0);
  state.best_metric = metric;
  state.best_prompt = state.current;

  for (std::size_t step = 0;; ++step) {
    TraceRecord rec;
    rec.attack = "gcg";
    rec.step = step;
    rec.metric = metric;
    rec.attack_tokens = layout.extract_attack(state.current);
    try {
      t0 = Clock::now();
      snapshot_samples(rec, m, samples, x, loss_cfg);
      times.selection_ms += ms_since(t0);
      if (step == cfg.iterations) {
        rec.timing = times;
        rec.wall_ms = ms_since(t_step);
        result.trace.push_back(std::move(rec));
        break;
      }

      t0 = Clock::now();
      const GradientMatrix grad = rloo_gradient(m, samples, x, loss_cfg);
      times.gradient_ms += ms_since(t0);

      t0 = Clock::now();
      auto cands = filter_roundtrip(mutate(grad, state.current, layout, cfg, m.vocab(), rng), problem.roundtrip());
      const std::size_t sel = affirmative ? loss_cfg.max_len : select_len(samples, cfg, loss_cfg.max_len);
      const WeightedCE objective = frozen_objective(samples, loss_cfg, true, sel);
      const ScoreResult scored = score_candidates(m, objective, cands, layout);
      const TokenSeq& winner = cands[scored.best];
      times.selection_ms += ms_since(t0);
      rec.selection_len = sel;
      rec.selected_loss = scored.losses[scored.best];

      const RelaxedPrompt xw = one_hot(winner, layout, n);
      SampleSet winner_samples = problem.sample(xw, state.tracker, rng, &times);
      t0 = Clock::now();
      const double winner_metric = target_metric(m, winner_samples, xw, loss_cfg);
      bool accepted = true;
      state = accept(std::move(state), winner, winner_samples, winner_metric, &accepted);
      times.selection_ms += ms_since(t0);
      rec.accepted = accepted;
      if (accepted) {
        x = xw;
        samples = std::move(winner_samples);
        metric = winner_metric;
      } else {
        // Rejected: stay put and draw fresh generations at the current prompt.
        samples = problem.sample(x, state.tracker, rng, &times);
        t0 = Clock::now();
        state.tracker = update_tracker(std::move(state.tracker), tracker_candidates(samples));
        metric = target_metric(m, samples, x, loss_cfg);
        if (metric < state.best_metric) {
          state.best_metric = metric;
          state.best_prompt = state.current;
        }
        times.selection_ms += ms_since(t0);
      }
    } catch (const std::exception& e) {
      result.error = e.what();
      result.trace.push_back(std::move(rec));
      break;
    }
    rec.timing = times;
    rec.wall_ms = ms_since(t_step);
    result.trace.push_back(std::move(rec));
    times = {};
    t_step = Clock::now();
  }

  result.best_prompt = state.best_prompt;
  result.best_attack = layout.extract_attack(state.best_prompt);
  result.best_metric = state.best_metric;
  return result;
}

}  // namespace ra
