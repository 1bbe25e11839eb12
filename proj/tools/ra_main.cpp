// ra: command line front end.
//   ra attack --config run.json [--output-dir out] [--workers N]
//   ra verify --config run.json
//   ra bench  --config run.json

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ra/parallel.hpp"
#include "ra/run.hpp"

namespace {

// RA_WORKERS wins over --workers.
int resolve_workers(int flag) {
  if (const char* env = std::getenv("RA_WORKERS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ra::ConfigError(std::string("RA_WORKERS must be a positive integer, got ") + env);
    return static_cast<int>(v);
  }
  return flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reinforce-style adversarial prompt attacks on toy language models"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  int workers = 0;

  auto* attack = app.add_subcommand("attack", "run the configured attack and write trace/result files");
  attack->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
  attack->add_option("--output-dir", output_dir, "overrides output_dir from the config");
  attack->add_option("--workers", workers, "worker threads (RA_WORKERS overrides)")->check(CLI::NonNegativeNumber);

  auto* verify = app.add_subcommand("verify", "oracle gradient checks on the bundled toy instances");
  verify->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);

  auto* bench = app.add_subcommand("bench", "per-phase step cost of the configured attack");
  bench->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    ra::set_workers(resolve_workers(workers));
    ra::RunConfig cfg = ra::load_config(config_path);

    if (*attack) {
      if (!output_dir.empty()) cfg.output_dir = output_dir;
      const ra::RunSummary s = ra::run(cfg);
      if (s.error) std::cerr << "ra: " << *s.error << "\n";
      std::cout << "wrote " << cfg.output_dir.string() << "\n";
      return s.exit_code;
    }
    if (*verify) {
      const ra::VerifyReport r = ra::verify(cfg);
      std::filesystem::create_directories(cfg.output_dir);
      std::ofstream(cfg.output_dir / "verify.json") << ra::verify_json(r);
      for (const auto& c : r.cases) {
        std::cout << c.name << ": prob_sum " << c.prob_sum_error << ", forms " << c.forms_max_diff
                  << ", grad rel err " << c.max_gradient_error() << "\n";
      }
      std::cout << (r.passed ? "PASS" : "FAIL") << " max gradient relative error " << r.max_gradient_error
                << " (tol " << ra::kVerifyGradTol << ")\n";
      return r.passed ? 0 : 1;
    }
    if (*bench) {
      std::cout << ra::bench_table(cfg);
      return 0;
    }
  } catch (const ra::ConfigError& e) {
    std::cerr << "ra: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ra: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
