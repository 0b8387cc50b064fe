// cmsckf command line:
//   cmsckf run      --mode <full|schmidt|compressed> --scenario <file> --seed <u64> --out <dir>
//                   [--lockstep] [--keyframe-interval <s>] [--timing]
//   cmsckf compare  --scenario <file> --seed <u64> --out <dir>
//   cmsckf simulate --scenario <file> --seed <u64> --out <dir>
//   cmsckf scaling  --out <dir>
// Exit status 0 on success; otherwise the error class name goes to stderr.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cmsckf/cmsckf.hpp"

namespace {

using namespace cmsckf;

int run_cmd(const std::string& mode, const std::string& scenario_path, std::optional<std::uint64_t> seed,
            const std::string& out, bool lockstep, std::optional<double> kf_interval, bool timing) {
  const Scenario scenario = load_scenario(scenario_path);
  RunConfig cfg;
  cfg.mode = parse_mode(mode);
  cfg.seed = seed.value_or(scenario.seed);
  cfg.lockstep = lockstep;
  cfg.keyframe_interval = kf_interval;
  const RunReport report = run(scenario, cfg);
  export_run(report, out, timing);
  std::cout << summary_text(report.summary, timing);
  return 0;
}

int compare_cmd(const std::string& scenario_path, std::optional<std::uint64_t> seed, const std::string& out) {
  const Scenario scenario = load_scenario(scenario_path);
  const CompareReport cmp = compare_backends(scenario, seed.value_or(scenario.seed));
  export_compare(cmp, out);
  for (const RunReport& r : cmp.runs) {
    const auto sub = std::filesystem::path(out) / std::string(mode_name(r.summary.mode));
    export_run(r, sub);
    std::cout << mode_name(r.summary.mode) << ": rmse_position=" << r.summary.rmse_position
              << " mean_nees=" << r.summary.mean_nees << " peak_state_dim=" << r.summary.peak_state_dim << '\n';
  }
  std::cout << "compressed_full_rmse_diff=" << cmp.compressed_full_rmse_diff
            << " schmidt_envelope_ok=" << (cmp.schmidt_envelope_ok ? "true" : "false") << '\n';
  return 0;
}

int simulate_cmd(const std::string& scenario_path, std::optional<std::uint64_t> seed, const std::string& out) {
  const Scenario scenario = load_scenario(scenario_path);
  export_streams(simulate(scenario, seed.value_or(scenario.seed)), out);
  return 0;
}

int scaling_cmd(const std::string& out) {
  const auto rows = measure_update_scaling({5, 10, 20, 40, 80});
  detail::ensure_dir(out);
  csv::Writer w(std::filesystem::path(out) / "scaling.csv",
                "global_keyframes,local_dim,total_dim,compressed_flops,dense_flops,recovery_flops,"
                "compressed_seconds,dense_seconds");
  for (const ScalingRow& r : rows) {
    w.row(r.global_keyframes, r.local_dim, r.total_dim, csv::num(r.compressed_flops), csv::num(r.dense_flops),
          csv::num(r.recovery_flops), csv::num(r.compressed_seconds), csv::num(r.dense_seconds));
    std::cout << r.global_keyframes << " global keyframes: compressed " << r.compressed_flops << " flops, dense "
              << r.dense_flops << " flops\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compressed/Schmidt MSCKF simulation harness"};
  app.require_subcommand(1);

  std::string mode = "compressed";
  std::string scenario = "scenarios/default.scn";
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool lockstep = false;
  bool timing = false;
  std::optional<double> kf_interval;

  auto* run = app.add_subcommand("run", "run one filter back end");
  run->add_option("--mode", mode, "full, schmidt or compressed");
  run->add_option("--scenario", scenario, "scenario file");
  run->add_option("--seed", seed, "random seed (default: scenario seed)");
  run->add_option("--out", out, "output directory");
  run->add_flag("--lockstep", lockstep, "run a dense twin on the same linearizations");
  run->add_option("--keyframe-interval", kf_interval, "keyframe cadence in seconds");
  run->add_flag("--timing", timing, "also write wall-clock timing.csv");

  auto* compare = app.add_subcommand("compare", "run all back ends on one scenario");
  compare->add_option("--scenario", scenario);
  compare->add_option("--seed", seed);
  compare->add_option("--out", out);

  auto* sim = app.add_subcommand("simulate", "export the sensor streams");
  sim->add_option("--scenario", scenario);
  sim->add_option("--seed", seed);
  sim->add_option("--out", out);

  auto* scaling = app.add_subcommand("scaling", "update cost versus global keyframe count");
  scaling->add_option("--out", out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_cmd(mode, scenario, seed, out, lockstep, kf_interval, timing);
    if (*compare) return compare_cmd(scenario, seed, out);
    if (*sim) return simulate_cmd(scenario, seed, out);
    if (*scaling) return scaling_cmd(out);
  } catch (const cmsckf::Error& e) {
    std::cerr << e.name() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "Error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
