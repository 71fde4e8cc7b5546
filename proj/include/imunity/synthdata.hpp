#pragma once

// Synthetic multi-site brain phantoms and the on-disk dataset formats
// (IMUV volumes + cohort manifest). Phantoms are concentric-ellipse
// anatomies; site effects are monotone intensity transfers plus a smooth
// bias field and additive noise, applied to brain pixels only.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "imunity/common.hpp"
#include "imunity/rng.hpp"

namespace imunity::synth {

enum class Tissue : std::uint8_t { Background = 0, CSF = 1, GM = 2, WM = 3, Lesion = 4 };

struct SubjectMeta {
  std::string subject_id;
  int site_id = 0;
  std::map<std::string, int> bio_labels;  // binary features, e.g. "status", "sex"
  double age_years = 0.0;

  int label(const std::string& name) const {
    auto it = bio_labels.find(name);
    return it == bio_labels.end() ? 0 : it->second;
  }
};

struct SubjectVolume {
  SubjectMeta meta;
  int height = 0;
  int width = 0;
  std::vector<std::vector<float>> slices;         // row-major height*width each
  std::vector<std::vector<std::uint8_t>> masks;   // tissue labels; may be empty

  int slice_count() const { return static_cast<int>(slices.size()); }
  bool has_masks() const { return !masks.empty(); }
};

// Monotone intensity transfer + degree-2 polynomial bias field + noise.
struct SiteEffect {
  int site_id = 0;
  double gamma = 1.0;     // transfer exponent
  double mix = 0.0;       // sigmoid blend weight in [0,1)
  double midpoint = 0.5;  // sigmoid midpoint
  double slope = 8.0;     // sigmoid steepness
  double bias_coef[5] = {0, 0, 0, 0, 0};  // x, y, x^2, y^2, xy on [-1,1]^2
  double bias_amp = 0.0;
  double noise_sigma = 0.0;

  // Strictly increasing on [0,1] with fixed points 0 and 1.
  double transfer(double v) const;
  // Multiplicative field at normalized coordinates in [-1,1].
  double bias_field(double x, double y) const;
};

struct ManifestRow {
  std::string subject_id;
  int site_id = 0;
  int status = 0;
  int sex = 0;
  std::string path;          // volume file name, relative to the manifest
  std::string travel_group;  // empty for non-traveling subjects
  int preprocessed = 0;      // set by the preprocessing stage; guards mixing
};

struct CohortConfig {
  int n_subjects = 24;   // non-traveling subjects, assigned round-robin to sites
  int n_sites = 3;
  int n_traveling = 0;   // each rendered once per site
  int slice_count = 8;
  int size = 64;
  std::uint64_t seed = 1;
};

struct Cohort {
  std::vector<SubjectVolume> volumes;   // parallel to manifest
  std::vector<ManifestRow> manifest;
  std::vector<SiteEffect> effects;
};

// Concentric-ellipse anatomy: CSF core, WM ring, GM rim, optional WM lesions
// when meta.bio_labels["status"] == 1. Pure function of its arguments.
SubjectVolume make_phantom(const SubjectMeta& meta, std::uint64_t subject_seed, int slice_count,
                           int size);

// transfer(intensity) * bias(x,y) + noise on brain pixels; background stays 0.
SubjectVolume apply_site_effect(const SubjectVolume& vol, const SiteEffect& effect,
                                std::uint64_t scan_seed);

std::vector<SiteEffect> make_site_effects(int n_sites, std::uint64_t seed);

Cohort make_cohort(const CohortConfig& cfg);

// IMUV binary volume format (little-endian).
void save_volume(const std::string& path, const SubjectVolume& vol);
SubjectVolume load_volume(const std::string& path);

void save_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> load_manifest(const std::string& path);

}  // namespace imunity::synth
