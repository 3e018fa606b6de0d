#include <CLI11.hpp>
#include <cstdio>
#include <exception>

#include "enclab/errors.hpp"
#include "enclab/harness.hpp"
#include "enclab/util.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

enclab::RunConfig load_with_overrides(const std::string& config_path,
                                      const std::string& out_override,
                                      std::int64_t seed_override) {
  enclab::RunConfig config = enclab::load_config(config_path);
  if (!out_override.empty()) config.out_dir = out_override;
  if (seed_override >= 0) {
    config.seed = static_cast<std::uint64_t>(seed_override);
    config.plan.seed = config.seed;
  }
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"encoderlab: controlled encoder pretraining experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::int64_t seed = -1;
  bool resume = false;
  double bench_seconds = 2.0;
  std::vector<std::string> compare_configs;

  auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
    if (needs_config)
      cmd->add_option("--config", config_path, "run config file")->required();
    cmd->add_option("--out", out_dir, "output directory override");
    cmd->add_option("--seed", seed, "root seed override");
  };

  CLI::App* filter = app.add_subcommand(
      "filter", "run the corpus pipeline: dedup, select, curate");
  add_common(filter);

  CLI::App* pretrain =
      app.add_subcommand("pretrain", "warmup-stable pretraining run");
  add_common(pretrain);
  pretrain->add_flag("--resume", resume, "resume from the latest checkpoint");

  CLI::App* cool = app.add_subcommand(
      "cooldown", "decay a branch of every saved checkpoint to zero lr");
  add_common(cool);

  CLI::App* extend =
      app.add_subcommand("extend", "context-extension phase on final.bin");
  add_common(extend);

  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "probe suite over the cooled checkpoints");
  add_common(evaluate);

  CLI::App* compare = app.add_subcommand(
      "compare", "matched-budget comparison across model families");
  compare->add_option("--config", compare_configs, "config files (2+)")
      ->required()
      ->expected(-2);
  compare->add_option("--out", out_dir, "report directory")->required();

  CLI::App* bench =
      app.add_subcommand("bench", "packed vs padded throughput benchmark");
  add_common(bench);
  bench->add_option("--seconds", bench_seconds,
                    "timed duration per mode (default 2.0)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (filter->parsed()) {
      const auto report =
          enclab::cmd_filter(load_with_overrides(config_path, out_dir, seed));
      std::printf("%s\n", report.to_json().dump(2).c_str());
    } else if (pretrain->parsed()) {
      const auto ckpt = enclab::cmd_pretrain(
          load_with_overrides(config_path, out_dir, seed), resume);
      std::printf("pretrain done: %lld tokens, %llu steps\n",
                  static_cast<long long>(ckpt.tokens_seen),
                  static_cast<unsigned long long>(ckpt.step));
    } else if (cool->parsed()) {
      const auto paths =
          enclab::cmd_cooldown(load_with_overrides(config_path, out_dir, seed));
      std::printf("cooled %zu checkpoints\n", paths.size());
    } else if (extend->parsed()) {
      const auto ckpt =
          enclab::cmd_extend(load_with_overrides(config_path, out_dir, seed));
      std::printf("extended to max_len %lld (%lld tokens total)\n",
                  static_cast<long long>(ckpt.spec.max_len),
                  static_cast<long long>(ckpt.tokens_seen));
    } else if (evaluate->parsed()) {
      const auto results = enclab::cmd_evaluate(
          load_with_overrides(config_path, out_dir, seed));
      std::printf("evaluated: %zu probe results\n", results.size());
    } else if (compare->parsed()) {
      const auto report = enclab::cmd_compare(compare_configs, out_dir);
      std::printf("%s", enclab::read_file(out_dir + "/summary.txt").c_str());
    } else if (bench->parsed()) {
      const auto rep = enclab::cmd_bench(
          load_with_overrides(config_path, out_dir, seed), bench_seconds);
      std::printf(
          "family=%s packed=%.0f tok/s (pad %.2f) padded=%.0f tok/s (pad "
          "%.2f) speedup=%.2fx\n",
          rep.family.c_str(), rep.packed.tokens_per_sec, rep.packed.pad_frac,
          rep.padded.tokens_per_sec, rep.padded.pad_frac,
          rep.packed.tokens_per_sec / rep.padded.tokens_per_sec);
    }
  } catch (const enclab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const enclab::NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kExitNumeric;
  } catch (const enclab::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const enclab::ContractError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitOk;
}
