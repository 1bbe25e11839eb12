#pragma once

// REINFORCE-PGD: relaxed-prompt descent with simplex and Tsallis-2 entropy
// projections, per-row gradient clipping, Adam updates, a ramped cosine
// schedule with warm restarts and patience restarts across a prompt batch.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ra/attack.hpp"

namespace ra {

struct PgdConfig {
  std::size_t iterations = 5000;
  double base_lr = 0.11;
  double terminal_lr = 0.325;  // cosine floor as a fraction of base_lr
  double entropy_frac = 0.40;
  std::size_t ramp_steps = 100;
  std::size_t restart_period = 60;
  std::size_t patience = 100;
  double grad_clip = 20.0;
  std::size_t batch_size = 1;
  double donor_temperature = 0.25;
  double self_reset_prob = 0.5;
  double gap_tau = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

inline constexpr std::size_t kPgdInitLen = 25;

std::vector<double> simplex_project(std::span<const double> s);

// Tsallis-2 entropy 1 - sum p^2.
double tsallis2(std::span<const double> p);

// Pulls s towards the uniform distribution on its support until its Tsallis-2
// entropy is at least `target`. Infeasible targets return that uniform center.
std::vector<double> entropy_project(std::span<const double> s, double target);

// Rescales every row with L2 norm above max_norm down to max_norm.
GradientMatrix clip_rows(GradientMatrix g, double max_norm = 20.0);

struct ScheduleValue {
  double lr = 0.0;
  double strength = 0.0;  // lr / base_lr
};
ScheduleValue schedule(std::size_t step, const PgdConfig& cfg);

// Gap coupling multiplier clamp(1 + (relaxed - discrete) / tau, 0.5, 2).
double gap_multiplier(double relaxed_loss, double discrete_loss, double tau);

struct PgdState {
  RelaxedPrompt relaxed;
  Matrix m1;  // n_attack x |V|
  Matrix m2;
  std::size_t adam_t = 0;
  TokenSeq best_prompt;
  double best_metric = 0.0;
  std::size_t steps_since_improve = 0;
  double gap_mult = 1.0;
  HarmfulTracker tracker;

  PgdState(RelaxedPrompt x);
  void reset_moments();
};

// Adam update of the attack rows followed by the row-wise projections over the
// ascii columns. `entropy_scale` is the fraction of the maximal Tsallis-2
// entropy (1 - 1/n_nonzero) demanded of each row.
void pgd_step(PgdState& state, const GradientMatrix& grad, double lr, double entropy_scale,
              const Vocab& vocab, const PgdConfig& cfg);

// Row argmax through the tokenizer round-trip; the raw argmax when the
// round-trip changes the length.
TokenSeq discretize_prompt(const RelaxedPrompt& x, const TokenRoundtrip& tok);

struct RestartEvent {
  bool restarted = false;
  std::optional<std::size_t> donor;  // set when another prompt donated its best
};

// Donor weights softmax(-metric / temperature).
std::vector<double> donor_probabilities(std::span<const double> metrics, double temperature);

// Restarts every prompt whose patience ran out. Attack lengths must agree
// across the batch.
std::vector<RestartEvent> patience_restart(std::vector<PgdState>& states, std::span<const PromptLayout> layouts,
                                           const PgdConfig& cfg, Rng& rng);

enum class Execution { Parallel, Serial };

// Per-prompt RNG streams come from derive_seed(seed, prompt index) so results
// do not depend on the worker count.
std::vector<AttackResult> run_pgd(std::span<const AttackProblem> problems, const PgdConfig& cfg,
                                  std::uint64_t seed, Execution exec = Execution::Parallel,
                                  std::optional<TokenSeq> init_attack = std::nullopt);

}  // namespace ra
