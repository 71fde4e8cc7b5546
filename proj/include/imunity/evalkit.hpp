#pragma once

// Evaluation machinery: SSIM / MS-SSIM slice similarity, a 20-feature
// radiomics-lite extractor, Pearson feature selection, an RBF-kernel SVM
// trained by SMO, ROC/AUC, grouped stratified k-fold cross-validation, PCA
// scatter export, and the three cohort-level experiments built on top
// (traveling-subject SSIM, site classification, patient classification).
//
// All metric math runs in double precision; everything here is deterministic
// given the seeds it is handed.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "imunity/common.hpp"
#include "imunity/model.hpp"
#include "imunity/rng.hpp"
#include "imunity/synthdata.hpp"

namespace imunity::eval {

using synth::SubjectVolume;

// ---------------------------------------------------------------------------
// SSIM / MS-SSIM
// ---------------------------------------------------------------------------

struct SsimParams {
  int window = 11;     // odd Gaussian window side; shrunk to fit small images
  double sigma = 1.5;  // Gaussian weight std
  double k1 = 0.01;
  double k2 = 0.03;
  double L = 1.4;  // dynamic range; the post-White-Stripe intensity ceiling
};

// Gaussian-windowed SSIM between two slices, averaged over the windows that
// contain brain. A pixel counts as brain per the tissue mask when one is
// given, else when its value is strictly positive; a window is kept when it
// contains brain from either image. If no window qualifies, all windows are
// averaged. Only fully-inside window positions are evaluated, and the window
// shrinks (kept odd) when it exceeds the image.
double ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
            const SsimParams& p = {}, const std::uint8_t* mask_a = nullptr,
            const std::uint8_t* mask_b = nullptr);

// Mean slice SSIM over the union of both volumes' kept slices (the 1%
// brain-fraction rule); falls back to all slices if the union is empty.
double ssim_volume(const SubjectVolume& a, const SubjectVolume& b, const SsimParams& p = {});

// Multi-scale SSIM: contrast/structure terms at every scale, luminance at the
// coarsest, combined with the standard five exponents (renormalized when the
// image only supports fewer levels: min side >= 11 * 2^(levels-1)).
double ms_ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
               int levels = 5, const SsimParams& p = {});

// ---------------------------------------------------------------------------
// Radiomics-lite features
// ---------------------------------------------------------------------------

inline constexpr int kFeatureCount = 20;

struct FeatureVector {
  std::string subject_id;
  std::vector<double> values;       // kFeatureCount entries
  std::vector<std::string> names;   // parallel to values
};

// The 20 feature names: 14 first-order (over brain pixels pooled across kept
// slices) then 6 GLCM (32 gray levels, distance 1, averaged over 4 angles and
// kept slices).
const std::vector<std::string>& feature_names();

// Throws Error when no slice passes the brain-fraction filter or the brain is
// empty. Brain pixels follow the mask-else-positive rule.
FeatureVector extract_features(const SubjectVolume& vol);

// Keep only the given value indices (e.g. the output of pearson_select).
std::vector<FeatureVector> subset_features(const std::vector<FeatureVector>& features,
                                           const std::vector<int>& keep);

// ---------------------------------------------------------------------------
// Pearson feature selection
// ---------------------------------------------------------------------------

// Pearson correlation; 0 when either side is constant.
double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

// Regularized incomplete beta I_x(a, b).
double betainc(double a, double b, double x);

// Two-sided p-value for H0: rho = 0 given a sample correlation r over n pairs
// (t = r sqrt((n-2)/(1-r^2)), p = I_{nu/(nu+t^2)}(nu/2, 1/2)).
double pearson_p(double r, int n);

// Indices of features whose correlation with any one-vs-rest site indicator
// has p < p_threshold. Sorted ascending.
std::vector<int> pearson_select(const std::vector<FeatureVector>& features,
                                const std::vector<int>& site_labels, double p_threshold = 1e-3);

// ---------------------------------------------------------------------------
// RBF-kernel SVM via sequential minimal optimization
// ---------------------------------------------------------------------------

struct SvmParams {
  double C = 1.0;
  double gamma_rbf = 0.0;  // <= 0 selects the scale heuristic 1 / (d * var(X))
  double tol = 1e-3;       // KKT tolerance
  std::uint64_t seed = 1;  // partner picks in SMO
};

struct SvmModel {
  double gamma_rbf = 0.0;
  double C = 1.0;
  std::vector<int> classes;  // sorted ascending
  // Rows with a nonzero coefficient in any classifier. dual_coefs[c][i] is
  // alpha_i * y_i of one-vs-rest classifier c (a single classifier when
  // binary, with classes[1] as the positive class).
  std::vector<std::vector<double>> support_vectors;
  std::vector<std::vector<double>> dual_coefs;
  std::vector<double> biases;

  int n_classifiers() const { return static_cast<int>(biases.size()); }
};

// Throws Error when y holds a single class.
SvmModel svm_train(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                   const SvmParams& params = {});

// Decision values, one entry per classifier and sample: [n][n_classifiers].
std::vector<std::vector<double>> svm_predict(const SvmModel& m,
                                             const std::vector<std::vector<double>>& X);

// Labels: sign rule when binary, argmax of decision values otherwise.
std::vector<int> svm_classify(const SvmModel& m, const std::vector<std::vector<double>>& X);

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

struct RocCurve {
  std::vector<double> thresholds;  // descending, +inf sentinel first
  std::vector<double> tpr;
  std::vector<double> fpr;
  double auc = 0.0;  // rank-based (Mann-Whitney); ties count 0.5
};

// labels are 0/1; throws Error unless both classes are present.
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Grouped stratified k-fold cross-validation
// ---------------------------------------------------------------------------

// Fold index per sample. Samples sharing a group id always land in the same
// fold; groups are stratified by the label of their first sample and dealt
// round-robin after a seeded shuffle within each class.
std::vector<int> make_folds(const std::vector<std::string>& groups, const std::vector<int>& labels,
                            int k, std::uint64_t seed);

struct KFoldResult {
  struct Fold {
    double accuracy = 0.0;
    std::optional<double> auc;  // unset when the test fold has a single class
    int test_size = 0;
  };
  std::vector<Fold> folds;
  std::vector<int> predictions;  // per input sample, from its test fold
  std::vector<double> scores;    // binary problems: positive-class decision value
  double mean_accuracy = 0.0, std_accuracy = 0.0;
  double mean_auc = 0.0, std_auc = 0.0;  // over folds with a defined AUC
  int auc_folds = 0;
};

// Features are z-scored with training-fold statistics before the SVM. Groups
// come from FeatureVector::subject_id. Binary problems report the AUC of the
// positive-class decision values; multi-class problems report the macro
// one-vs-rest AUC over classes present in the fold.
KFoldResult kfold_cv(const std::vector<FeatureVector>& features, const std::vector<int>& labels,
                     int k = 10, std::uint64_t seed = 1, const SvmParams& svm = {});

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaResult {
  std::vector<std::vector<double>> coords;       // n x dims
  std::vector<double> explained_variance;        // top eigenvalues, descending
  std::vector<double> explained_variance_ratio;  // eigenvalue / total variance
};

// Mean-centered projection onto the top principal axes of the sample
// covariance. Component signs are fixed so the largest-magnitude loading of
// each axis is positive.
PcaResult pca_project(const std::vector<std::vector<double>>& X, int dims = 2);

// ---------------------------------------------------------------------------
// Cohort-level experiments (volumes are expected preprocessed)
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  int k_folds = 10;
  int reference_site = 0;
  double p_threshold = 1e-3;
  std::uint64_t seed = 1;
  int threads = 1;  // harmonization + feature extraction fan out per volume
  SvmParams svm;
  SsimParams ssim;
};

// Every volume re-rendered into the reference domain: the contrast donor is
// the first manifest entry of reference_site. Throws Error (listing the
// available sites) when the reference site has no volume.
std::vector<SubjectVolume> harmonize_cohort(const model::ImUnityModel& m,
                                            const synth::Cohort& cohort, int reference_site,
                                            int threads = 1);

// Per-volume latent summary (pooled anatomy code + contrast mu), averaged
// over kept slices; the input of site-probe checks on the latent space.
std::vector<std::vector<double>> latent_summaries(const model::ImUnityModel& m,
                                                  const synth::Cohort& cohort);

struct PcaRow {
  std::string subject_id;
  int site_id = 0;
  double pc1 = 0.0, pc2 = 0.0;
};

struct SiteReport {
  std::vector<int> selected;        // Pearson picks, fitted on the raw arm
  bool selection_fallback = false;  // empty selection fell back to all features
  KFoldResult raw_cv;
  std::vector<PcaRow> raw_scatter;
  bool has_harmonized = false;
  KFoldResult harmonized_cv;
  std::vector<PcaRow> harmonized_scatter;
  std::vector<int> site_labels;         // per volume, manifest order
  std::vector<std::string> subject_ids;
};

// extract -> pearson_select (raw arm only) -> SVM k-fold, on the raw cohort
// and, when a model is given, on the harmonized one.
SiteReport experiment_site_classification(const synth::Cohort& cohort,
                                          const model::ImUnityModel* m,
                                          const ExperimentConfig& cfg = {});

struct PatientReport {
  struct Subset {
    std::vector<int> sites;
    int n_samples = 0;
    double raw_accuracy = 0.0, harmonized_accuracy = 0.0;
    std::optional<double> raw_auc, harmonized_auc;  // mean CV AUC
  };
  struct SizeAgg {
    int size = 0;  // number of sites in the subset
    int count = 0;
    double raw_mean = 0.0, raw_std = 0.0;
    double harm_mean = 0.0, harm_std = 0.0;
  };
  std::vector<Subset> subsets;
  std::vector<SizeAgg> by_size;
  bool has_harmonized = false;
};

// Same pipeline targeting the binary "status" label, evaluated on every site
// subset given (all subsets of 2..S sites when the list is empty). One
// harmonized cohort (per cfg.reference_site) serves all subsets.
PatientReport experiment_patient_classification(const synth::Cohort& cohort,
                                                const model::ImUnityModel* m,
                                                std::vector<std::vector<int>> site_subsets = {},
                                                const ExperimentConfig& cfg = {});

struct TravelingReport {
  struct Row {
    std::string subject_id;
    int source_site = 0;
    double before = 0.0;  // SSIM(source, ground truth at the reference site)
    double after = 0.0;   // SSIM(harmonized source, same ground truth)
  };
  int reference_site = 0;
  std::vector<Row> rows;
  double before_mean = 0.0, before_std = 0.0;
  double after_mean = 0.0, after_std = 0.0;
};

// For every traveling subject and non-reference site: SSIM against the
// subject's reference-site scan before and after harmonization (the subject's
// own reference scan is the contrast donor). Throws Error when the cohort has
// no traveling subjects at the reference site.
TravelingReport experiment_traveling_ssim(const synth::Cohort& cohort,
                                          const model::ImUnityModel& m, int reference_site,
                                          const SsimParams& p = {});

// ---------------------------------------------------------------------------
// Report files: one per-subject/per-unit CSV and one JSON summary each, plus
// PCA scatter CSVs (subject_id,site_id,pc1,pc2) for the site experiment.
// ---------------------------------------------------------------------------

void write_site_report(const SiteReport& r, const std::string& dir);
void write_patient_report(const PatientReport& r, const std::string& dir);
void write_traveling_report(const TravelingReport& r, const std::string& dir);

}  // namespace imunity::eval
