#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ra/parallel.hpp"
#include "ra/run.hpp"

using namespace ra;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ra_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kMinimal = R"({
  "attack": "gcg",
  "rng_seed": 1,
  "model": {"vocab_size": 16, "seed": 3},
  "judge": {"harm_tokens": [3]},
  "layout": {"user_prompt": [4, 5]}
})";

std::string toy_config(const std::string& attack, const fs::path& out, const std::string& extra = "") {
  return R"({"attack": ")" + attack + R"(", "rng_seed": 5, "output_dir": ")" + out.string() +
         R"(", "model": {"toy_instance": "trigger", "instance_seed": 2})" + extra + "}";
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("minimal config picks up the defaults") {
  const RunConfig c = parse_config(kMinimal);
  CHECK(c.attack == AttackKind::Gcg);
  CHECK(c.gcg.search_width == 512);
  CHECK(c.gcg.iterations == 500);
  CHECK(c.gcg.top_k == 256);
  CHECK(c.gcg.select_threshold == 0.01);
  CHECK(c.gcg.min_select_len == 40);
  CHECK(c.pgd.base_lr == 0.11);
  CHECK(c.pgd.iterations == 5000);
  CHECK(c.pgd.entropy_frac == 0.4);
  CHECK(c.pgd.patience == 100);
  CHECK(c.rloo.b_static == 0.1);
  CHECK(c.rloo.max_len == 128);
  CHECK(c.layout->attack_suffix_len == kGcgSuffixInitLen);
  CHECK(c.objective == Objective::Reinforce);

  json j = json::parse(kMinimal);
  j["attack"] = "pgd";
  const RunConfig p = parse_config(j.dump());
  CHECK(p.layout->attack_prefix_len == kPgdInitLen);
  CHECK(p.layout->attack_suffix_len == kPgdInitLen);
}

TEST_CASE("config strictness") {
  json j = json::parse(kMinimal);
  j["gcg"] = {{"serch_width", 4}};
  CHECK(error_of(j.dump()).find("serch_width") != std::string::npos);

  j = json::parse(kMinimal);
  j.erase("rng_seed");
  CHECK(error_of(j.dump()).find("rng_seed") != std::string::npos);

  j = json::parse(kMinimal);
  j["model"]["weights"] = "/nonexistent/weights.bin";
  CHECK(error_of(j.dump()).find("model") != std::string::npos);

  j = json::parse(kMinimal);
  j["attack"] = "beam";
  CHECK(error_of(j.dump()).find("attack") != std::string::npos);

  j = json::parse(kMinimal);
  j["pgd"] = {{"entropy_frac", 1.5}};
  CHECK(error_of(j.dump()).find("pgd") != std::string::npos);

  j = json::parse(kMinimal);
  j["layout"]["bogus"] = 1;
  CHECK(error_of(j.dump()).find("layout.bogus") != std::string::npos);

  CHECK(error_of("{not json").find("malformed") != std::string::npos);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("weights file model loads relative to the config") {
  const fs::path dir = scratch("weights");
  ToyLM::random(Vocab(8, {}), 4).save(dir / "m.bin");
  json j = json::parse(kMinimal);
  j["model"] = {{"weights", "m.bin"}};
  std::ofstream(dir / "c.json") << j.dump();
  const RunConfig c = load_config(dir / "c.json");
  CHECK(c.model.kind == ModelSpec::Kind::Weights);
  const Setup s = materialize(c);
  CHECK(s.model->vocab().size() == 8);
}

TEST_CASE("run writes consistent trace, result and dynamics files") {
  const fs::path out = scratch("gcg");
  const RunConfig c = parse_config(toy_config("gcg", out, R"(, "gcg": {"search_width": 8, "iterations": 6})"));
  const RunSummary s = run(c);
  CHECK(s.exit_code == 0);

  std::ifstream trace(out / "trace.jsonl");
  std::string line;
  double min_metric = 1e300;
  std::size_t n = 0, last_step = 0;
  while (std::getline(trace, line)) {
    const json r = json::parse(line);
    CHECK(r.at("schema_version") == kTraceSchemaVersion);
    CHECK(line.rfind(R"({"schema_version":)", 0) == 0);
    CHECK(r.contains("suffix_tokens"));
    CHECK(r.at("rewards").contains("greedy"));
    CHECK_FALSE(r.contains("timing_ms"));
    if (n > 0) CHECK(r.at("step").get<std::size_t>() == last_step + 1);
    last_step = r.at("step");
    min_metric = std::min(min_metric, r.at("metric").get<double>());
    ++n;
  }
  CHECK(n == 7);

  const json res = json::parse(slurp(out / "result.json"));
  CHECK(res.at("best_metric").get<double>() == min_metric);
  CHECK(res.at("prompts")[0].at("oracle_expected_reward").is_number());
  CHECK(res.at("prompts")[0].at("best_prompt").size() == 4);

  std::ifstream dyn(out / "dynamics.csv");
  std::getline(dyn, line);
  for (const char* col : {"step", "reward_seed", "reward_greedy", "reward_random", "early_reward_seed", "ce_seed", "ce_greedy"}) {
    CHECK(line.find(col) != std::string::npos);
  }
  std::size_t rows = 0;
  while (std::getline(dyn, line)) ++rows;
  CHECK(rows == 7);
}

TEST_CASE("identical config and seed give byte-identical traces for any worker count") {
  const int before = max_workers();
  for (const std::string attack : {"gcg", "pgd"}) {
    std::string traces[3];
    const int workers[3] = {1, 8, 8};
    for (int i = 0; i < 3; ++i) {
      set_workers(workers[i]);
      const fs::path out = scratch(attack + std::to_string(i));
      const RunConfig c = parse_config(toy_config(
          attack, out, R"(, "gcg": {"search_width": 16, "iterations": 8}, "pgd": {"iterations": 40, "batch_size": 3})"));
      CHECK(run(c).exit_code == 0);
      traces[i] = slurp(out / "trace.jsonl");
    }
    CHECK(!traces[0].empty());
    CHECK(traces[0] == traces[1]);
    CHECK(traces[1] == traces[2]);
  }
  set_workers(before);
}

TEST_CASE("pgd trace carries the relaxation fields") {
  const fs::path out = scratch("pgdfields");
  const RunConfig c = parse_config(toy_config("pgd", out, R"(, "pgd": {"iterations": 5, "batch_size": 2})"));
  CHECK(run(c).exit_code == 0);
  std::ifstream trace(out / "trace.jsonl");
  std::string line;
  std::getline(trace, line);
  const json r = json::parse(line);
  for (const char* k : {"lr", "entropy_target", "relaxed_loss", "discrete_loss", "restarted"}) CHECK(r.contains(k));
  std::getline(trace, line);
  CHECK(json::parse(line).at("prompt_id") == 1);
  const json res = json::parse(slurp(out / "result.json"));
  CHECK(res.at("prompts").size() == 2);
}

TEST_CASE("exhaustive mode reports the certified optimum") {
  const fs::path out = scratch("exh");
  const RunConfig c = parse_config(toy_config("exhaustive", out));
  CHECK(run(c).exit_code == 0);
  const json res = json::parse(slurp(out / "result.json"));
  CHECK(res.at("prompts")[0].at("oracle_expected_reward").get<double>() > 0.9);
}

TEST_CASE("oracle verification passes on the bundled instances") {
  const fs::path out = scratch("verify");
  const RunConfig c = parse_config(toy_config("oracle-verify", out));
  const VerifyReport r = verify(c);
  CHECK(r.passed);
  CHECK(r.cases.size() >= 6);
  CHECK(r.max_gradient_error < 1e-4);
  CHECK(run(c).exit_code == 0);
  CHECK(json::parse(slurp(out / "verify.json")).at("passed") == true);
}

TEST_CASE("phase timings account for the step wall time") {
  const fs::path out = scratch("timing");
  json j = json::parse(kMinimal);
  j["output_dir"] = out.string();
  j["record_timing"] = true;
  j["model"] = {{"vocab_size", 200}, {"seed", 1}};
  j["gcg"] = {{"search_width", 64}, {"iterations", 4}};
  const RunConfig c = parse_config(j.dump());
  const RunSummary s = run(c);
  REQUIRE(s.exit_code == 0);
  double phases = 0.0, wall = 0.0;
  for (const auto& t : s.results[0].trace) {
    phases += t.timing.total();
    wall += t.wall_ms;
  }
  CHECK(wall > 0.0);
  CHECK(std::abs(phases - wall) <= 0.2 * wall);
  std::ifstream trace(out / "trace.jsonl");
  std::string line;
  std::getline(trace, line);
  CHECK(json::parse(line).contains("timing_ms"));
  CHECK(fs::exists(out / "timing.csv"));
  CHECK(bench_table(c).find("selection") != std::string::npos);
}

TEST_CASE("command line front end") {
  const fs::path dir = scratch("cli");
  std::ofstream(dir / "c.json") << toy_config("gcg", dir / "unused", R"(, "gcg": {"search_width": 8, "iterations": 3})");
  const std::string exe = RA_CLI_PATH;
  const std::string cfg = (dir / "c.json").string();
  const auto sh = [](const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); };

  CHECK(sh(exe + " attack --config " + cfg + " --output-dir " + (dir / "a").string() + " --workers 2") == 0);
  CHECK(sh("RA_WORKERS=1 " + exe + " attack --config " + cfg + " --output-dir " + (dir / "b").string()) == 0);
  CHECK(slurp(dir / "a" / "trace.jsonl") == slurp(dir / "b" / "trace.jsonl"));
  CHECK(fs::exists(dir / "a" / "result.json"));
  CHECK(fs::exists(dir / "a" / "dynamics.csv"));
  CHECK(sh(exe + " verify --config " + cfg) == 0);
  CHECK(sh(exe + " bench --config " + cfg) == 0);
  CHECK(sh("RA_WORKERS=zero " + exe + " attack --config " + cfg) != 0);
  CHECK(sh(exe + " attack --config " + (dir / "missing.json").string()) != 0);
  std::ofstream(dir / "bad.json") << R"({"attack": "gcg"})";
  CHECK(sh(exe + " attack --config " + (dir / "bad.json").string()) != 0);
}
