// imunity: command-line front end for the harmonization pipeline.
//
// Exit codes: 0 ok, 1 usage/config error, 2 data or format error, 3 numeric
// failure (NaN/Inf detected).

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "imunity/cli.hpp"
#include "imunity/common.hpp"

namespace {

// Swallows progress output under --quiet.
class NullBuf : public std::streambuf {
 protected:
  int overflow(int c) override { return c; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ImUnity MR harmonization pipeline"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  imunity::cli::GlobalOverrides overrides;
  std::string out_flag;
  std::uint64_t seed_flag = 0;
  int threads_flag = 0;
  app.add_option("--config", config_path, "Run configuration JSON file");
  auto* seed_opt = app.add_option("--seed", seed_flag, "Master seed override");
  auto* out_opt = app.add_option("--out", out_flag, "Output directory override");
  auto* threads_opt =
      app.add_option("--threads", threads_flag, "Worker thread count (env IMUNITY_THREADS)");
  app.add_flag("--quiet", overrides.quiet, "Suppress progress output");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-site cohort");
  auto* preprocess =
      app.add_subcommand("preprocess", "Rescale and White-Stripe normalize a cohort");
  std::string from_dir, to_dir;
  preprocess->add_option("--from", from_dir, "Input cohort directory (default <out>/raw)");
  preprocess->add_option("--to", to_dir, "Output directory (default <out>/preprocessed)");

  auto* train = app.add_subcommand("train", "Train the harmonization model");
  imunity::cli::TrainOptions topt;
  int epochs_flag = 0;
  train->add_option("--resume", topt.resume, "Checkpoint to continue from");
  train->add_flag("--bio-off", topt.bio_off, "Disable the biological module (zeroes lambda3)");
  auto* epochs_opt = train->add_option("--epochs", epochs_flag, "Epoch count override");

  auto* harmonize = app.add_subcommand("harmonize", "Map the cohort into a reference site");
  int ref_flag = 0;
  auto* ref_opt =
      harmonize->add_option("--reference-site", ref_flag, "Target site (default from config)");

  auto* evaluate = app.add_subcommand("evaluate", "Run the evaluation experiments");
  std::vector<std::string> experiments;
  evaluate->add_option("--experiments", experiments,
                       "Subset to run: traveling-ssim, site-classification, "
                       "patient-classification (default all)")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // --help exits 0; any parse failure is a usage error
  }

  NullBuf null_buf;
  std::ostream null_stream(&null_buf);

  try {
    if (*seed_opt) overrides.seed = seed_flag;
    if (*out_opt) overrides.out = out_flag;
    if (*threads_opt) overrides.threads = threads_flag;
    const auto cfg = imunity::cli::resolve_config(config_path, overrides);
    std::ostream& log = overrides.quiet ? null_stream : std::cout;

    if (*synth) {
      imunity::cli::cmd_synth(cfg, log);
    } else if (*preprocess) {
      imunity::cli::cmd_preprocess(cfg, log, from_dir, to_dir);
    } else if (*train) {
      if (*epochs_opt) topt.epochs = epochs_flag;
      imunity::cli::cmd_train(cfg, topt, log);
    } else if (*harmonize) {
      std::optional<int> ref;
      if (*ref_opt) ref = ref_flag;
      imunity::cli::cmd_harmonize(cfg, ref, log);
    } else if (*evaluate) {
      imunity::cli::cmd_evaluate(cfg, experiments, log);
    }
    return 0;
  } catch (const imunity::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const imunity::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
