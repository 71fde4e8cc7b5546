#pragma once

// Batch front end: one JSON run configuration drives the synth -> preprocess
// -> train -> harmonize -> evaluate pipeline. Every command is a pure
// function of (config, input files); all randomness derives from the master
// seed split per stage, so single-threaded reruns are byte-identical.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "imunity/common.hpp"
#include "imunity/model.hpp"
#include "imunity/synthdata.hpp"

namespace imunity::cli {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "run";  // output directory, resolved against the config file
  int threads = 1;

  // cohort spec
  int subjects = 24;
  int sites = 3;
  int traveling = 8;
  int slices = 8;
  int image_size = 64;

  // preprocessing
  int bins = 256;

  // model architecture
  int base_width = 16;
  int d_c = 16;
  std::vector<std::string> bio_features = {"status", "sex"};
  bool non_saturating = false;

  model::LossWeights weights;

  // training
  int epochs = 200;
  int batch = 16;
  double lr = 3e-4;
  double gamma_lo = 0.5, gamma_hi = 1.5;
  int slices_per_subject = 8;
  bool bio = true;

  // evaluation
  int k_folds = 10;
  int reference_site = 0;
  double p_threshold = 1e-3;

  void validate() const;  // throws ConfigError naming the offending field

  // Derived helpers.
  synth::CohortConfig cohort_config() const;
  model::ArchConfig arch_config() const;
  std::uint64_t stage_seed(const std::string& stage) const;

  std::string raw_dir() const;
  std::string preprocessed_dir() const;
  std::string harmonized_dir() const;
  std::string reports_dir() const;
  std::string checkpoint_path() const;
  std::string training_log_path() const;
};

// Parse the JSON file; unknown keys anywhere are rejected with a ConfigError
// that names the key. Relative "out" is resolved against the config location.
RunConfig load_run_config(const std::string& path);

// Flag-level overrides applied after the config file (flags win).
struct GlobalOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;  // resolved against the current directory
  std::optional<int> threads;      // falls back to env IMUNITY_THREADS
  bool quiet = false;
};
RunConfig resolve_config(const std::optional<std::string>& config_path,
                         const GlobalOverrides& overrides);

struct TrainOptions {
  std::string resume;  // checkpoint to continue from; empty starts fresh
  bool bio_off = false;
  std::optional<int> epochs;
};

// Commands. `log` receives progress lines (pass a null stream for --quiet);
// errors are reported by throwing (ConfigError -> usage, FormatError/Error ->
// data, NumericError -> numeric failure).
void cmd_synth(const RunConfig& cfg, std::ostream& log);
void cmd_preprocess(const RunConfig& cfg, std::ostream& log, const std::string& from_dir = "",
                    const std::string& to_dir = "");
void cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log);
void cmd_harmonize(const RunConfig& cfg, std::optional<int> reference_site, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, const std::vector<std::string>& experiments,
                  std::ostream& log);

}  // namespace imunity::cli
