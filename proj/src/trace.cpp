#include "ra/trace.hpp"

#include <json.hpp>
#include <sstream>

namespace ra {

void snapshot_samples(TraceRecord& rec, const PolicyModel& m, const SampleSet& samples, const RelaxedPrompt& x,
                      const RlooConfig& cfg) {
  const LossBreakdown lb = rloo_loss(m, samples, x, cfg, false);
  rec.loss = lb.total;
  rec.greedy_harmful = greedy_harmful(samples);
  for (Role r : kAllRoles) {
    auto& snap = rec.roles[static_cast<int>(r)];
    snap = {};
    if (!samples.has(r)) continue;
    const auto& e = samples.at(r);
    snap.present = true;
    snap.checkpoints = e.raw_profile.checkpoints;
    snap.terminal = e.raw_profile.terminal();
    snap.length = e.generation.size();
    const auto& ce = lb.per_sample_ce[static_cast<int>(r)];
    double s = 0.0;
    for (double c : ce) s += c;
    snap.avg_ce = ce.empty() ? 0.0 : s / static_cast<double>(ce.size());
  }
}

std::string to_json_line(const TraceRecord& rec, bool with_timing) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["schema_version"] = kTraceSchemaVersion;
  j["attack"] = rec.attack;
  j["step"] = rec.step;
  j["prompt_id"] = rec.prompt_id;
  j["loss"] = rec.loss;
  j["metric"] = rec.metric;
  j["greedy_harmful"] = rec.greedy_harmful;
  if (rec.accepted) j["accepted"] = *rec.accepted;
  if (rec.selection_len) j["selection_len"] = *rec.selection_len;
  if (rec.selected_loss) j["selected_loss"] = *rec.selected_loss;
  if (rec.lr) j["lr"] = *rec.lr;
  if (rec.entropy_target) j["entropy_target"] = *rec.entropy_target;
  if (rec.relaxed_loss) j["relaxed_loss"] = *rec.relaxed_loss;
  if (rec.discrete_loss) j["discrete_loss"] = *rec.discrete_loss;
  if (rec.restarted) j["restarted"] = *rec.restarted;
  if (rec.donor_index) j["donor_index"] = *rec.donor_index;
  ordered_json rewards = ordered_json::object();
  for (Role r : kAllRoles) {
    const auto& s = rec.roles[static_cast<int>(r)];
    if (!s.present) continue;
    ordered_json cps = ordered_json::array();
    for (const auto& c : s.checkpoints) cps.push_back(ordered_json::array({c.length, c.reward}));
    ordered_json rj;
    rj["terminal"] = s.terminal;
    rj["checkpoints"] = std::move(cps);
    rj["avg_ce"] = s.avg_ce;
    rj["length"] = s.length;
    rewards[role_name(r)] = std::move(rj);
  }
  j["rewards"] = std::move(rewards);
  j["suffix_tokens"] = rec.attack_tokens;
  if (with_timing) {
    ordered_json t;
    t["generate"] = rec.timing.generate_ms;
    t["gradient"] = rec.timing.gradient_ms;
    t["reward"] = rec.timing.reward_ms;
    t["selection"] = rec.timing.selection_ms;
    t["wall"] = rec.wall_ms;
    j["timing_ms"] = std::move(t);
  }
  return j.dump();
}

std::string dynamics_header() {
  std::ostringstream os;
  os << "step,prompt_id,loss,metric";
  for (Role r : kAllRoles) os << ",reward_" << role_name(r);
  for (Role r : kAllRoles) os << ",early_reward_" << role_name(r);
  for (Role r : kAllRoles) os << ",ce_" << role_name(r);
  return os.str();
}

std::string dynamics_row(const TraceRecord& rec) {
  std::ostringstream os;
  os.precision(17);
  os << rec.step << ',' << rec.prompt_id << ',' << rec.loss << ',' << rec.metric;
  for (const auto& s : rec.roles) {
    os << ',';
    if (s.present) os << s.terminal;
  }
  // reward at the first checkpoint
  for (const auto& s : rec.roles) {
    os << ',';
    if (s.present && !s.checkpoints.empty()) os << s.checkpoints.front().reward;
  }
  for (const auto& s : rec.roles) {
    os << ',';
    if (s.present) os << s.avg_ce;
  }
  return os.str();
}

}  // namespace ra
