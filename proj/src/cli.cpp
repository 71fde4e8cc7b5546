#include "imunity/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "imunity/evalkit.hpp"
#include "imunity/preprocess.hpp"
#include "imunity/rng.hpp"

namespace imunity::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* k) { return it.key() == k; }) == allowed.end())
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

const json* section(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) return nullptr;
  if (!j.at(key).is_object())
    throw ConfigError("'" + std::string(key) + "' in " + where + " must be an object");
  return &j.at(key);
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

std::string join(const std::string& dir, const std::string& leaf) {
  return (fs::path(dir) / leaf).string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir + ": " + ec.message());
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  if (subjects < 1) throw ConfigError("cohort.subjects must be >= 1, got " + std::to_string(subjects));
  if (sites < 1) throw ConfigError("cohort.sites must be >= 1, got " + std::to_string(sites));
  if (traveling < 0) throw ConfigError("cohort.traveling must be >= 0, got " + std::to_string(traveling));
  if (slices < 1) throw ConfigError("cohort.slices must be >= 1, got " + std::to_string(slices));
  if (image_size < 16 || image_size % 16 != 0)
    throw ConfigError("cohort.image_size must be a positive multiple of 16, got " +
                      std::to_string(image_size));
  if (bins < 2) throw ConfigError("preprocess.bins must be >= 2, got " + std::to_string(bins));
  if (base_width < 1) throw ConfigError("model.base_width must be >= 1");
  if (d_c < 1) throw ConfigError("model.d_c must be >= 1");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(gamma_lo > 0.0) || gamma_hi < gamma_lo)
    throw ConfigError("train.gamma_lo/gamma_hi must satisfy 0 < lo <= hi");
  if (slices_per_subject < 1) throw ConfigError("train.slices_per_subject must be >= 1");
  if (k_folds < 2) throw ConfigError("evaluate.k_folds must be >= 2");
  if (reference_site < 0 || reference_site >= sites)
    throw ConfigError("evaluate.reference_site must be in [0, sites), got " +
                      std::to_string(reference_site));
  if (!(p_threshold >= 0.0 && p_threshold <= 1.0))
    throw ConfigError("evaluate.p_threshold must be in [0, 1]");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (out.empty()) throw ConfigError("out directory must not be empty");
}

synth::CohortConfig RunConfig::cohort_config() const {
  synth::CohortConfig c;
  c.n_subjects = subjects;
  c.n_sites = sites;
  c.n_traveling = traveling;
  c.slice_count = slices;
  c.size = image_size;
  c.seed = stage_seed("synth");
  return c;
}

model::ArchConfig RunConfig::arch_config() const {
  model::ArchConfig a;
  a.image_size = image_size;
  a.base_width = base_width;
  a.d_c = d_c;
  a.n_sites = sites;
  a.bio_features = bio ? bio_features : std::vector<std::string>{};
  a.non_saturating = non_saturating;
  return a;
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const {
  return Rng(seed).split(stage).seed();
}

std::string RunConfig::raw_dir() const { return join(out, "raw"); }
std::string RunConfig::preprocessed_dir() const { return join(out, "preprocessed"); }
std::string RunConfig::harmonized_dir() const { return join(out, "harmonized"); }
std::string RunConfig::reports_dir() const { return join(out, "reports"); }
std::string RunConfig::checkpoint_path() const { return join(out, "checkpoint.imuc"); }
std::string RunConfig::training_log_path() const { return join(out, "training_log.csv"); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path);
  if (!j.is_object()) throw ConfigError("config root must be a JSON object: " + path);

  RunConfig cfg;
  check_keys(j, {"seed", "out", "threads", "cohort", "preprocess", "model", "loss_weights",
                 "train", "evaluate"},
             "config root");
  read_field(j, "seed", cfg.seed, "config root");
  read_field(j, "out", cfg.out, "config root");
  read_field(j, "threads", cfg.threads, "config root");

  if (const json* c = section(j, "cohort", "config root")) {
    check_keys(*c, {"subjects", "sites", "traveling", "slices", "image_size"}, "cohort");
    read_field(*c, "subjects", cfg.subjects, "cohort");
    read_field(*c, "sites", cfg.sites, "cohort");
    read_field(*c, "traveling", cfg.traveling, "cohort");
    read_field(*c, "slices", cfg.slices, "cohort");
    read_field(*c, "image_size", cfg.image_size, "cohort");
  }
  if (const json* p = section(j, "preprocess", "config root")) {
    check_keys(*p, {"bins"}, "preprocess");
    read_field(*p, "bins", cfg.bins, "preprocess");
  }
  if (const json* m = section(j, "model", "config root")) {
    check_keys(*m, {"base_width", "d_c", "bio_features", "non_saturating"}, "model");
    read_field(*m, "base_width", cfg.base_width, "model");
    read_field(*m, "d_c", cfg.d_c, "model");
    read_field(*m, "bio_features", cfg.bio_features, "model");
    read_field(*m, "non_saturating", cfg.non_saturating, "model");
  }
  if (const json* w = section(j, "loss_weights", "config root")) {
    check_keys(*w, {"lambda1", "lambda2", "lambda3", "lambda4", "lambda5"}, "loss_weights");
    read_field(*w, "lambda1", cfg.weights.lambda1, "loss_weights");
    read_field(*w, "lambda2", cfg.weights.lambda2, "loss_weights");
    read_field(*w, "lambda3", cfg.weights.lambda3, "loss_weights");
    read_field(*w, "lambda4", cfg.weights.lambda4, "loss_weights");
    read_field(*w, "lambda5", cfg.weights.lambda5, "loss_weights");
  }
  if (const json* t = section(j, "train", "config root")) {
    check_keys(*t, {"epochs", "batch", "lr", "gamma_lo", "gamma_hi", "slices_per_subject", "bio"},
               "train");
    read_field(*t, "epochs", cfg.epochs, "train");
    read_field(*t, "batch", cfg.batch, "train");
    read_field(*t, "lr", cfg.lr, "train");
    read_field(*t, "gamma_lo", cfg.gamma_lo, "train");
    read_field(*t, "gamma_hi", cfg.gamma_hi, "train");
    read_field(*t, "slices_per_subject", cfg.slices_per_subject, "train");
    read_field(*t, "bio", cfg.bio, "train");
  }
  if (const json* e = section(j, "evaluate", "config root")) {
    check_keys(*e, {"k_folds", "reference_site", "p_threshold"}, "evaluate");
    read_field(*e, "k_folds", cfg.k_folds, "evaluate");
    read_field(*e, "reference_site", cfg.reference_site, "evaluate");
    read_field(*e, "p_threshold", cfg.p_threshold, "evaluate");
  }

  // paths in the config resolve relative to the config file
  const fs::path base = fs::path(path).parent_path();
  if (!cfg.out.empty() && fs::path(cfg.out).is_relative())
    cfg.out = (base / cfg.out).lexically_normal().string();

  cfg.validate();
  return cfg;
}

RunConfig resolve_config(const std::optional<std::string>& config_path,
                         const GlobalOverrides& overrides) {
  RunConfig cfg = config_path ? load_run_config(*config_path) : RunConfig{};
  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.out) cfg.out = *overrides.out;
  if (overrides.threads) {
    cfg.threads = *overrides.threads;
  } else if (const char* env = std::getenv("IMUNITY_THREADS")) {
    try {
      cfg.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("IMUNITY_THREADS is not an integer: ") + env);
    }
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared I/O helpers
// ---------------------------------------------------------------------------

namespace {

synth::Cohort load_cohort_dir(const std::string& dir) {
  synth::Cohort c;
  c.manifest = synth::load_manifest(join(dir, "manifest.csv"));
  if (c.manifest.empty()) throw Error("manifest has no rows: " + join(dir, "manifest.csv"));
  c.volumes.reserve(c.manifest.size());
  for (const auto& row : c.manifest) c.volumes.push_back(synth::load_volume(join(dir, row.path)));
  return c;
}

void save_cohort_dir(const std::string& dir, const synth::Cohort& c) {
  ensure_dir(dir);
  for (std::size_t i = 0; i < c.manifest.size(); ++i)
    synth::save_volume(join(dir, c.manifest[i].path), c.volumes[i]);
  synth::save_manifest(join(dir, "manifest.csv"), c.manifest);
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg, std::ostream& log) {
  const auto cohort = synth::make_cohort(cfg.cohort_config());
  save_cohort_dir(cfg.raw_dir(), cohort);
  log << "synth: wrote " << cohort.volumes.size() << " volumes (" << cfg.subjects
      << " subjects + " << cfg.traveling << " traveling x " << cfg.sites << " sites) to "
      << cfg.raw_dir() << "\n";
}

void cmd_preprocess(const RunConfig& cfg, std::ostream& log, const std::string& from_dir,
                    const std::string& to_dir) {
  const std::string from = from_dir.empty() ? cfg.raw_dir() : from_dir;
  const std::string to = to_dir.empty() ? cfg.preprocessed_dir() : to_dir;

  synth::Cohort cohort = load_cohort_dir(from);
  const bool first_flag = cohort.manifest.front().preprocessed != 0;
  for (const auto& row : cohort.manifest)
    if ((row.preprocessed != 0) != first_flag)
      throw Error("manifest mixes preprocessed and unpreprocessed volumes; refusing to run "
                  "(split the cohort or regenerate it)");
  // Already-preprocessed input is on the canonical intensity scale; re-running
  // only realigns the WM peak. Re-stretching it would undo that alignment.
  const bool already_preprocessed = first_flag;

  ensure_dir(to);
  std::ofstream scales(join(to, "white_stripe_scales.csv"), std::ios::trunc);
  if (!scales) throw Error("cannot write " + join(to, "white_stripe_scales.csv"));
  scales << "subject_id,site_id,wm_peak,scale\n";

  for (std::size_t i = 0; i < cohort.volumes.size(); ++i) {
    auto res = prep::white_stripe(
        already_preprocessed ? cohort.volumes[i] : prep::rescale_volume(cohort.volumes[i]),
        cfg.bins);
    cohort.volumes[i] = std::move(res.vol);
    cohort.manifest[i].preprocessed = 1;
    scales << cohort.manifest[i].subject_id << ',' << cohort.manifest[i].site_id << ','
           << fmt_double(res.peak) << ',' << fmt_double(res.scale) << '\n';
    log << "preprocess: " << cohort.manifest[i].subject_id << " site "
        << cohort.manifest[i].site_id << " wm-peak " << fmt_double(res.peak) << " scale "
        << fmt_double(res.scale) << "\n";
  }
  save_cohort_dir(to, cohort);
  log << "preprocess: wrote " << cohort.volumes.size() << " volumes to " << to << "\n";
}

void cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log) {
  const synth::Cohort cohort = load_cohort_dir(cfg.preprocessed_dir());
  for (const auto& row : cohort.manifest)
    if (!row.preprocessed)
      throw Error("cohort in " + cfg.preprocessed_dir() +
                  " is not marked preprocessed; run `imunity preprocess` first");
  for (const auto& v : cohort.volumes)
    if (v.height != cfg.image_size || v.width != cfg.image_size)
      throw Error("volume " + v.meta.subject_id + " is " + std::to_string(v.height) + "x" +
                  std::to_string(v.width) + " but the config says image_size " +
                  std::to_string(cfg.image_size));

  std::optional<model::ImUnityModel> m;
  if (!opt.resume.empty()) {
    m.emplace(model::load_checkpoint(opt.resume));
    if (m->arch.image_size != cfg.image_size)
      throw Error("resume checkpoint was trained at image_size " +
                  std::to_string(m->arch.image_size) + ", config says " +
                  std::to_string(cfg.image_size));
    log << "train: resuming from " << opt.resume << " at epoch " << m->epochs_trained << "\n";
  } else {
    m.emplace(cfg.arch_config(), cfg.stage_seed("init"));
  }

  model::TrainConfig tc;
  tc.epochs = opt.epochs.value_or(cfg.epochs);
  tc.batch = cfg.batch;
  tc.lr = cfg.lr;
  tc.gamma_lo = cfg.gamma_lo;
  tc.gamma_hi = cfg.gamma_hi;
  tc.slices_per_subject = cfg.slices_per_subject;
  tc.weights = cfg.weights;
  tc.bio_enabled = cfg.bio && !opt.bio_off;
  if (!tc.bio_enabled) tc.weights.lambda3 = 0.0;
  tc.seed = cfg.stage_seed("train");
  tc.log_path = cfg.training_log_path();

  const auto losses = model::train_model(*m, cohort.volumes, tc);
  model::save_checkpoint(cfg.checkpoint_path(), *m);

  if (!losses.empty()) {
    const auto& last = losses.back();
    log << "train: epoch " << last.epoch << " l_gen " << fmt_double(last.l_gen) << " l_disc "
        << fmt_double(last.l_disc) << " l_site " << fmt_double(last.l_site) << "\n";
  }
  log << "train: wrote " << cfg.checkpoint_path() << " (epochs trained: " << m->epochs_trained
      << ")\n";
}

void cmd_harmonize(const RunConfig& cfg, std::optional<int> reference_site, std::ostream& log) {
  const int ref = reference_site.value_or(cfg.reference_site);
  const synth::Cohort cohort = load_cohort_dir(cfg.preprocessed_dir());
  const model::ImUnityModel m = model::load_checkpoint(cfg.checkpoint_path());

  synth::Cohort out;
  out.manifest = cohort.manifest;
  out.volumes = eval::harmonize_cohort(m, cohort, ref, cfg.threads);
  save_cohort_dir(cfg.harmonized_dir(), out);

  std::ofstream csv(join(cfg.harmonized_dir(), "harmonize_ssim.csv"), std::ios::trunc);
  if (!csv) throw Error("cannot write harmonize_ssim.csv");
  csv << "subject_id,site_id,ssim_vs_source\n";
  double mean = 0.0;
  for (std::size_t i = 0; i < out.volumes.size(); ++i) {
    const double s = eval::ssim_volume(out.volumes[i], cohort.volumes[i]);
    mean += s;
    csv << out.manifest[i].subject_id << ',' << out.manifest[i].site_id << ',' << fmt_double(s)
        << '\n';
  }
  mean /= static_cast<double>(out.volumes.size());
  log << "harmonize: " << out.volumes.size() << " volumes -> site " << ref
      << ", mean SSIM vs source " << fmt_double(mean) << "\n";
}

void cmd_evaluate(const RunConfig& cfg, const std::vector<std::string>& experiments,
                  std::ostream& log) {
  static const std::vector<std::string> kAll = {"traveling-ssim", "site-classification",
                                                "patient-classification"};
  std::vector<std::string> run = experiments.empty() ? kAll : experiments;
  for (const auto& e : run)
    if (std::find(kAll.begin(), kAll.end(), e) == kAll.end())
      throw ConfigError("unknown experiment '" + e +
                        "'; valid: traveling-ssim, site-classification, patient-classification");

  const synth::Cohort cohort = load_cohort_dir(cfg.preprocessed_dir());
  const model::ImUnityModel m = model::load_checkpoint(cfg.checkpoint_path());

  eval::ExperimentConfig ec;
  ec.k_folds = cfg.k_folds;
  ec.reference_site = cfg.reference_site;
  ec.p_threshold = cfg.p_threshold;
  ec.seed = cfg.stage_seed("evaluate");
  ec.threads = cfg.threads;

  ensure_dir(cfg.reports_dir());
  for (const auto& e : run) {
    if (e == "traveling-ssim") {
      const auto rep = eval::experiment_traveling_ssim(cohort, m, ec.reference_site, ec.ssim);
      eval::write_traveling_report(rep, cfg.reports_dir());
      log << "evaluate: traveling-ssim over " << rep.rows.size() << " pairs: before "
          << fmt_double(rep.before_mean) << " after " << fmt_double(rep.after_mean) << "\n";
    } else if (e == "site-classification") {
      const auto rep = eval::experiment_site_classification(cohort, &m, ec);
      eval::write_site_report(rep, cfg.reports_dir());
      log << "evaluate: site accuracy raw " << fmt_double(rep.raw_cv.mean_accuracy)
          << " harmonized " << fmt_double(rep.harmonized_cv.mean_accuracy) << "\n";
    } else {
      const auto rep = eval::experiment_patient_classification(cohort, &m, {}, ec);
      eval::write_patient_report(rep, cfg.reports_dir());
      for (const auto& agg : rep.by_size)
        log << "evaluate: patient AUC over " << agg.size << "-site subsets: raw "
            << fmt_double(agg.raw_mean) << " harmonized " << fmt_double(agg.harm_mean) << "\n";
    }
  }
  log << "evaluate: reports in " << cfg.reports_dir() << "\n";
}

}  // namespace imunity::cli
