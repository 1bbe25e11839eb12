#include "ra/pgd.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "ra/parallel.hpp"

namespace ra {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::size_t categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace

void PgdConfig::validate() const {
  if (!(base_lr > 0.0)) throw ParameterError("base_lr must be positive");
  if (!(terminal_lr > 0.0 && terminal_lr <= 1.0)) throw ParameterError("terminal_lr must be in (0, 1]");
  if (!(entropy_frac > 0.0 && entropy_frac <= 1.0)) throw ParameterError("entropy_frac must be in (0, 1]");
  if (ramp_steps == 0) throw ParameterError("ramp_steps must be positive");
  if (restart_period == 0) throw ParameterError("restart_period must be positive");
  if (patience == 0) throw ParameterError("patience must be positive");
  if (!(grad_clip > 0.0)) throw ParameterError("grad_clip must be positive");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  if (!(donor_temperature > 0.0)) throw ParameterError("donor_temperature must be positive");
  if (!(self_reset_prob >= 0.0 && self_reset_prob <= 1.0)) throw ParameterError("self_reset_prob outside [0,1]");
  if (!(gap_tau > 0.0)) throw ParameterError("gap_tau must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0)) {
    throw ParameterError("invalid Adam constants");
  }
}

std::vector<double> simplex_project(std::span<const double> s) {
  if (s.empty()) return {};
  std::vector<double> mu(s.begin(), s.end());
  std::sort(mu.begin(), mu.end(), std::greater<>());
  double cum = 0.0;
  double cum_rho = 0.0;
  std::size_t rho = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    cum += mu[i];
    if (mu[i] - (cum - 1.0) / static_cast<double>(i + 1) > 0.0) {
      rho = i + 1;
      cum_rho = cum;
    }
  }
  const double psi = (cum_rho - 1.0) / static_cast<double>(rho);
  std::vector<double> p(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) p[i] = std::max(s[i] - psi, 0.0);
  return p;
}

double tsallis2(std::span<const double> p) {
  double sq = 0.0;
  for (double v : p) sq += v * v;
  return 1.0 - sq;
}

std::vector<double> entropy_project(std::span<const double> s, double target) {
  std::vector<double> out(s.begin(), s.end());
  const auto nnz = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](double v) { return v > 0.0; }));
  if (nnz == 0) return out;
  const double inv = 1.0 / static_cast<double>(nnz);
  std::vector<double> c(s.size(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] > 0.0) c[i] = inv;
  }
  const double r2 = 1.0 - target - inv;
  if (r2 < 0.0) return c;
  const double radius = std::sqrt(r2);
  double dist2 = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) dist2 += (s[i] - c[i]) * (s[i] - c[i]);
  const double dist = std::sqrt(dist2);
  if (dist <= radius) return out;
  const double scale = radius / dist;
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = c[i] + scale * (s[i] - c[i]);
  return simplex_project(out);
}

GradientMatrix clip_rows(GradientMatrix g, double max_norm) {
  if (!(max_norm > 0.0)) throw ParameterError("max_norm must be positive");
  for (std::size_t r = 0; r < g.values.rows(); ++r) {
    auto row = g.values.row(r);
    double n2 = 0.0;
    for (double v : row) n2 += v * v;
    const double norm = std::sqrt(n2);
    if (norm > max_norm) {
      const double f = max_norm / norm;
      for (double& v : row) v *= f;
    }
  }
  return g;
}

ScheduleValue schedule(std::size_t step, const PgdConfig& cfg) {
  const double a = cfg.base_lr;
  double lr;
  if (step < cfg.ramp_steps) {
    lr = a * static_cast<double>(step + 1) / static_cast<double>(cfg.ramp_steps);
  } else {
    const double floor_lr = cfg.terminal_lr * a;
    const double u = static_cast<double>((step - cfg.ramp_steps) % cfg.restart_period) /
                     static_cast<double>(cfg.restart_period);
    lr = floor_lr + (a - floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
  }
  return {lr, lr / a};
}

double gap_multiplier(double relaxed_loss, double discrete_loss, double tau) {
  return std::clamp(1.0 + (relaxed_loss - discrete_loss) / tau, 0.5, 2.0);
}

PgdState::PgdState(RelaxedPrompt x) : relaxed(std::move(x)) { reset_moments(); }

void PgdState::reset_moments() {
  const std::size_t n = relaxed.layout().n_attack();
  m1 = Matrix(n, relaxed.vocab_size());
  m2 = Matrix(n, relaxed.vocab_size());
  adam_t = 0;
}

void pgd_step(PgdState& state, const GradientMatrix& grad, double lr, double entropy_scale, const Vocab& vocab,
              const PgdConfig& cfg) {
  const auto rows = state.relaxed.layout().attack_rows();
  const std::size_t n = state.relaxed.vocab_size();
  if (grad.values.rows() != state.relaxed.rows() || grad.values.cols() != n) {
    throw ShapeError("gradient shape does not match the relaxed prompt");
  }
  if (vocab.size() != n) throw ShapeError("vocabulary does not match the relaxed prompt");
  ++state.adam_t;
  const double t = static_cast<double>(state.adam_t);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
  Matrix& w = state.relaxed.unchecked_weights();
  std::vector<double> vals;
  std::vector<std::size_t> cols;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    const std::size_t r = rows[a];
    vals.clear();
    cols.clear();
    // A constant offset along a row is invisible to the simplex projection,
    // so only the row-centered gradient drives the moments.
    double mean = 0.0;
    std::size_t n_ok = 0;
    for (std::size_t v = 0; v < n; ++v) {
      if (!vocab.ascii_ok(static_cast<TokenId>(v))) continue;
      mean += grad.values(r, v);
      ++n_ok;
    }
    if (n_ok > 0) mean /= static_cast<double>(n_ok);
    for (std::size_t v = 0; v < n; ++v) {
      if (!vocab.ascii_ok(static_cast<TokenId>(v))) continue;
      const double g = grad.values(r, v) - mean;
      double& m1 = state.m1(a, v);
      double& m2 = state.m2(a, v);
      m1 = cfg.adam_beta1 * m1 + (1.0 - cfg.adam_beta1) * g;
      m2 = cfg.adam_beta2 * m2 + (1.0 - cfg.adam_beta2) * g * g;
      vals.push_back(w(r, v) - lr * (m1 / bc1) / (std::sqrt(m2 / bc2) + cfg.adam_eps));
      cols.push_back(v);
    }
    if (cols.empty()) throw ConfigError("no ascii-eligible tokens for the relaxed prompt");
    auto p = simplex_project(vals);
    const auto nnz = std::count_if(p.begin(), p.end(), [](double v) { return v > 0.0; });
    const double target = entropy_scale * (1.0 - 1.0 / static_cast<double>(nnz));
    p = entropy_project(p, target);
    auto row = w.row(r);
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t i = 0; i < cols.size(); ++i) row[cols[i]] = p[i];
  }
  state.relaxed.validate();
}

TokenSeq discretize_prompt(const RelaxedPrompt& x, const TokenRoundtrip& tok) {
  TokenSeq raw = row_argmax(x);
  TokenSeq rt = tok.roundtrip(raw);
  return rt.size() == raw.size() ? rt : raw;
}

std::vector<double> donor_probabilities(std::span<const double> metrics, double temperature) {
  if (metrics.empty()) throw ParameterError("empty batch");
  const double best = *std::min_element(metrics.begin(), metrics.end());
  std::vector<double> p(metrics.size());
  double z = 0.0;
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    p[i] = std::exp(-(metrics[i] - best) / temperature);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<RestartEvent> patience_restart(std::vector<PgdState>& states, std::span<const PromptLayout> layouts,
                                           const PgdConfig& cfg, Rng& rng) {
  if (states.empty()) throw ParameterError("empty batch");
  if (layouts.size() != states.size()) throw ShapeError("one layout per prompt required");
  std::vector<double> metrics;
  for (const auto& s : states) metrics.push_back(s.best_metric);
  const auto probs = donor_probabilities(metrics, cfg.donor_temperature);
  std::vector<RestartEvent> events(states.size());
  for (std::size_t p = 0; p < states.size(); ++p) {
    if (states[p].steps_since_improve < cfg.patience) continue;
    std::size_t src = p;
    if (uniform01(rng) >= cfg.self_reset_prob) {
      src = categorical(probs, rng);
      events[p].donor = src;
    }
    const TokenSeq attack = layouts[src].extract_attack(states[src].best_prompt);
    if (attack.size() != layouts[p].n_attack()) throw ShapeError("attack lengths differ across the batch");
    auto& st = states[p];
    st.relaxed = one_hot(layouts[p].assemble(attack), layouts[p], st.relaxed.vocab_size());
    st.reset_moments();
    st.steps_since_improve = 0;
    st.gap_mult = 1.0;
    events[p].restarted = true;
  }
  return events;
}

namespace {

struct Lane {
  PgdState state;
  Rng rng;
  AttackResult result;
  TraceRecord rec;
};

void lane_iteration(Lane& lane, const AttackProblem& problem, const PgdConfig& cfg, std::size_t step,
                    std::size_t prompt_id, bool last) {
  const auto t_step = Clock::now();
  PhaseTimes times;
  const PolicyModel& m = problem.model;
  const PromptLayout& layout = problem.layout;
  const std::size_t n = m.vocab().size();
  const RlooConfig lc = problem.loss_config();
  PgdState& st = lane.state;

  const TokenSeq disc = discretize_prompt(st.relaxed, problem.roundtrip());
  const RelaxedPrompt xd = one_hot(disc, layout, n);
  const SampleSet samples = problem.sample(xd, st.tracker, lane.rng, &times);

  auto t0 = Clock::now();
  st.tracker = update_tracker(std::move(st.tracker), tracker_candidates(samples));
  const double metric = target_metric(m, samples, xd, lc);
  if (metric < st.best_metric) {
    st.best_metric = metric;
    st.best_prompt = disc;
    st.steps_since_improve = 0;
  } else {
    ++st.steps_since_improve;
  }
  TraceRecord rec;
  rec.attack = "pgd";
  rec.step = step;
  rec.prompt_id = prompt_id;
  rec.metric = metric;
  rec.attack_tokens = layout.extract_attack(disc);
  snapshot_samples(rec, m, samples, xd, lc);
  times.selection_ms += ms_since(t0);

  if (!last) {
    t0 = Clock::now();
    const auto sched = schedule(step, cfg);
    const double scale = cfg.entropy_frac * sched.strength * st.gap_mult;
    const GradientMatrix grad = clip_rows(rloo_gradient(m, samples, st.relaxed, lc), cfg.grad_clip);
    pgd_step(st, grad, sched.lr, scale, m.vocab(), cfg);
    times.gradient_ms += ms_since(t0);

    t0 = Clock::now();
    const double relaxed_loss = rloo_loss(m, samples, st.relaxed, lc, false).total;
    const RelaxedPrompt next_disc = one_hot(discretize_prompt(st.relaxed, problem.roundtrip()), layout, n);
    const double discrete_loss = rloo_loss(m, samples, next_disc, lc, false).total;
    st.gap_mult = gap_multiplier(relaxed_loss, discrete_loss, cfg.gap_tau);
    times.selection_ms += ms_since(t0);

    rec.lr = sched.lr;
    rec.entropy_target = scale;
    rec.relaxed_loss = relaxed_loss;
    rec.discrete_loss = discrete_loss;
    rec.restarted = false;
  }
  rec.timing = times;
  rec.wall_ms = ms_since(t_step);
  lane.rec = std::move(rec);
}

}  // namespace

std::vector<AttackResult> run_pgd(std::span<const AttackProblem> problems, const PgdConfig& cfg, std::uint64_t seed,
                                  Execution exec, std::optional<TokenSeq> init_attack) {
  cfg.validate();
  if (problems.empty()) throw ParameterError("run_pgd needs at least one prompt");
  const std::size_t batch = problems.size();
  std::vector<PromptLayout> layouts;
  std::vector<Lane> lanes;
  lanes.reserve(batch);
  for (std::size_t p = 0; p < batch; ++p) {
    const auto& pr = problems[p];
    layouts.push_back(pr.layout);
    if (pr.layout.n_attack() != problems[0].layout.n_attack()) {
      throw ShapeError("attack lengths differ across the batch");
    }
    TokenSeq init = init_attack ? pr.layout.assemble(*init_attack) : pr.layout.filled(pr.model.vocab().special().bang_id);
    pr.model.vocab().check(init);
    PgdState st(one_hot(init, pr.layout, pr.model.vocab().size()));
    st.best_prompt = init;
    st.best_metric = std::numeric_limits<double>::infinity();
    lanes.push_back(Lane{std::move(st), Rng(derive_seed(seed, p)), AttackResult{}, TraceRecord{}});
  }
  Rng coordinator(derive_seed(seed, std::numeric_limits<std::uint64_t>::max()));
  std::vector<PgdState> states;

  std::optional<std::string> error;
  for (std::size_t step = 0; step <= cfg.iterations; ++step) {
    const bool last = step == cfg.iterations;
    const auto count = static_cast<std::int64_t>(batch);
    std::vector<std::optional<std::string>> errs(batch);
#pragma omp parallel for schedule(dynamic) if (exec == Execution::Parallel)
    for (std::int64_t i = 0; i < count; ++i) {
      const auto p = static_cast<std::size_t>(i);
      try {
        lane_iteration(lanes[p], problems[p], cfg, step, p, last);
      } catch (const std::exception& e) {
        errs[p] = e.what();
      }
    }
    for (const auto& e : errs) {
      if (e && !error) error = e;
    }
    if (error) break;
    if (!last) {
      states.clear();
      for (auto& l : lanes) states.push_back(std::move(l.state));
      const auto events = patience_restart(states, layouts, cfg, coordinator);
      for (std::size_t p = 0; p < batch; ++p) {
        lanes[p].state = std::move(states[p]);
        lanes[p].rec.restarted = events[p].restarted;
        if (events[p].donor) lanes[p].rec.donor_index = *events[p].donor;
      }
    }
    for (auto& l : lanes) l.result.trace.push_back(std::move(l.rec));
  }

  std::vector<AttackResult> out;
  for (std::size_t p = 0; p < batch; ++p) {
    auto& l = lanes[p];
    l.result.best_prompt = l.state.best_prompt;
    l.result.best_attack = layouts[p].extract_attack(l.state.best_prompt);
    l.result.best_metric = l.state.best_metric;
    l.result.error = error;
    out.push_back(std::move(l.result));
  }
  return out;
}

}  // namespace ra
