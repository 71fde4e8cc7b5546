#pragma once

// The ImUnity networks and losses: dual-encoder VAE generator (anatomy +
// variational contrast), CNN discriminator, site-unlearning module, and
// biological module, plus the loss family they are trained with.
//
// Training schedule, harmonization inference, and checkpoint I/O live in
// model.cpp; everything here is templated so tests can run the math in
// double precision.

#include <json.hpp>

#include <string>
#include <vector>

#include "imunity/nn.hpp"
#include "imunity/synthdata.hpp"
#include "imunity/tensor_ops.hpp"

namespace imunity::model {

using ad::Shape;
using ad::Tape;
using ad::TensorT;

struct LossWeights {
  double lambda1 = 1.0;    // adversarial (discriminator) term
  double lambda2 = 1.0;    // confusion term
  double lambda3 = 1.0;    // biological term
  double lambda4 = 100.0;  // L1 reconstruction term
  double lambda5 = 1e-3;   // KL term
};

struct ArchConfig {
  int image_size = 64;   // square slices; must be divisible by 16
  int base_width = 16;   // conv widths base, 2x, 4x, 4x
  int d_c = 16;          // contrast code dimension
  int n_sites = 3;
  std::vector<std::string> bio_features;  // empty disables the bio module
  bool non_saturating = false;            // alternative GAN generator objective

  int latent_channels() const { return 4 * base_width; }
  int latent_extent() const { return image_size / 16; }
  int hidden_dim() const { return 4 * base_width; }
  int code_dim() const { return latent_channels() + d_c; }  // site/bio input

  void validate() const {
    if (image_size < 16 || image_size % 16 != 0)
      throw ConfigError("image_size must be a positive multiple of 16, got " +
                        std::to_string(image_size));
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
    if (d_c < 1) throw ConfigError("d_c must be >= 1");
    if (n_sites < 1) throw ConfigError("n_sites must be >= 1");
  }

  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Losses (Eq 1-4). Probabilities are clamped at 1e-7 before logs.
// ---------------------------------------------------------------------------

template <typename S>
inline constexpr S kProbClamp = S(1e-7);

// Binary cross-entropy, mean over all entries; y is a constant target tensor.
template <typename S>
TensorT<S> bce_loss(Tape<S>* t, const TensorT<S>& p, const TensorT<S>& y) {
  ad::detail::check_same_shape(p.shape(), y.shape(), "bce_loss");
  auto pc = ad::clamp_min(t, p, kProbClamp<S>);
  auto qc = ad::clamp_min(t, ad::add_scalar(t, ad::scale(t, p, S(-1)), S(1)), kProbClamp<S>);
  auto pos = ad::mul(t, y, ad::log_t(t, pc));
  auto one_minus_y = ad::add_scalar(t, ad::scale(t, y, S(-1)), S(1));
  auto neg = ad::mul(t, one_minus_y, ad::log_t(t, qc));
  return ad::scale(t, ad::mean_all(t, ad::add(t, pos, neg)), S(-1));
}

// Eq 1: categorical cross-entropy against the true site, mean over the batch.
template <typename S>
TensorT<S> site_loss(Tape<S>* t, const TensorT<S>& probs, const std::vector<int>& sites) {
  auto picked = ad::take_per_row(t, probs, sites);
  return ad::scale(t, ad::mean_all(t, ad::log_t(t, ad::clamp_min(t, picked, kProbClamp<S>))),
                   S(-1));
}

// Eq 2: -(1/N) sum_i sum_s log(p_i^s) / S == mean over all entries, negated.
// Minimized (value ln S) exactly at uniform rows.
template <typename S>
TensorT<S> confusion_loss(Tape<S>* t, const TensorT<S>& probs) {
  return ad::scale(t, ad::mean_all(t, ad::log_t(t, ad::clamp_min(t, probs, kProbClamp<S>))),
                   S(-1));
}

// Eq 3: per-feature binary cross-entropies, summed over features with a
// single mean over the batch. (The printed equation repeats the sample sum;
// implemented with one batch average.)
template <typename S>
TensorT<S> bio_loss(Tape<S>* t, const TensorT<S>& probs, const TensorT<S>& targets) {
  ad::detail::check_same_shape(probs.shape(), targets.shape(), "bio_loss");
  if (probs.shape().size() != 2) throw ShapeError("bio_loss expects [N,F] probabilities");
  const int n = probs.dim(0);
  auto pc = ad::clamp_min(t, probs, kProbClamp<S>);
  auto qc = ad::clamp_min(t, ad::add_scalar(t, ad::scale(t, probs, S(-1)), S(1)), kProbClamp<S>);
  auto pos = ad::mul(t, targets, ad::log_t(t, pc));
  auto one_minus_y = ad::add_scalar(t, ad::scale(t, targets, S(-1)), S(1));
  auto neg = ad::mul(t, one_minus_y, ad::log_t(t, qc));
  return ad::scale(t, ad::sum_all(t, ad::add(t, pos, neg)), S(-1) / static_cast<S>(n));
}

// KL(q(z|x) || N(0,I)) = 0.5 sum_d (mu^2 + e^logvar - 1 - logvar), batch mean.
template <typename S>
TensorT<S> kl_loss(Tape<S>* t, const TensorT<S>& mu, const TensorT<S>& logvar) {
  ad::detail::check_same_shape(mu.shape(), logvar.shape(), "kl_loss");
  const int n = mu.dim(0);
  auto spread = ad::sub(t, ad::exp_t(t, logvar), ad::add_scalar(t, logvar, S(1)));
  auto total = ad::add(t, ad::mul(t, mu, mu), spread);
  return ad::scale(t, ad::sum_all(t, total), S(0.5) / static_cast<S>(n));
}

// Mean absolute error over the per-sample brain bounding boxes of `target`
// (the smallest axis-aligned rectangle holding its positive pixels).
template <typename S>
TensorT<S> l1_loss_bbox(Tape<S>* t, const TensorT<S>& out, const TensorT<S>& target) {
  ad::detail::check_same_shape(out.shape(), target.shape(), "l1_loss_bbox");
  if (out.shape().size() != 4) throw ShapeError("l1_loss_bbox expects [N,1,H,W]");
  const int n = out.dim(0), c = out.dim(1), h = out.dim(2), w = out.dim(3);
  if (c != 1) throw ShapeError("l1_loss_bbox expects a single channel");

  auto mask = TensorT<S>::zeros(out.shape());
  std::int64_t inside = 0;
  for (int i = 0; i < n; ++i) {
    const S* tp = target.data() + static_cast<std::int64_t>(i) * h * w;
    int y0 = h, y1 = -1, x0 = w, x1 = -1;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (tp[y * w + x] > S(0)) {
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
    if (y1 < 0) continue;  // empty target: sample contributes nothing
    S* mp = mask.data() + static_cast<std::int64_t>(i) * h * w;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) mp[y * w + x] = S(1);
    inside += static_cast<std::int64_t>(y1 - y0 + 1) * (x1 - x0 + 1);
  }
  if (inside == 0) return TensorT<S>::scalar(S(0));
  auto diff = ad::abs_t(t, ad::sub(t, out, target));
  return ad::scale(t, ad::sum_all(t, ad::mul(t, diff, mask)), S(1) / static_cast<S>(inside));
}

// Eq 4: l_gen = -L1*l_disc + L2*l_conf + L3*l_bio + L4*l_1 + L5*l_KL.
template <typename S>
TensorT<S> generator_loss(Tape<S>* t, const TensorT<S>& l_disc, const TensorT<S>& l_conf,
                          const TensorT<S>& l_bio, const TensorT<S>& l_1, const TensorT<S>& l_kl,
                          const LossWeights& w) {
  auto total = ad::scale(t, l_disc, static_cast<S>(-w.lambda1));
  total = ad::add(t, total, ad::scale(t, l_conf, static_cast<S>(w.lambda2)));
  total = ad::add(t, total, ad::scale(t, l_bio, static_cast<S>(w.lambda3)));
  total = ad::add(t, total, ad::scale(t, l_1, static_cast<S>(w.lambda4)));
  return ad::add(t, total, ad::scale(t, l_kl, static_cast<S>(w.lambda5)));
}

// ---------------------------------------------------------------------------
// Network blocks
// ---------------------------------------------------------------------------

template <typename S>
struct LatentCode {
  TensorT<S> anatomy;  // [N, 4b, H/16, W/16], deterministic spatial code
  TensorT<S> mu;       // [N, d_c]
  TensorT<S> logvar;   // [N, d_c]
  TensorT<S> sample;   // mu + exp(0.5 logvar) * eps
  TensorT<S> eps;      // the recorded noise draw
};

template <typename S>
struct ConvBlock {
  nn::Conv2d<S> conv;
  nn::InstanceNorm2d<S> norm;
  bool use_norm = true;

  ConvBlock() = default;
  ConvBlock(int cin, int cout, Rng& rng, bool with_norm = true)
      : conv(cin, cout, 4, 2, 1, rng), norm(cout), use_norm(with_norm) {}

  TensorT<S> operator()(Tape<S>* t, const TensorT<S>& x) const {
    auto h = conv(t, x);
    if (use_norm) h = norm(t, h);
    return ad::leaky_relu(t, h, S(0.2));
  }
  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    conv.collect(p + ".conv", out);
    if (use_norm) norm.collect(p + ".norm", out);
  }
};

template <typename S>
struct UpBlock {
  nn::ConvTranspose2d<S> conv;
  nn::InstanceNorm2d<S> norm;

  UpBlock() = default;
  UpBlock(int cin, int cout, Rng& rng) : conv(cin, cout, 4, 2, 1, rng), norm(cout) {}

  TensorT<S> operator()(Tape<S>* t, const TensorT<S>& x) const {
    return ad::leaky_relu(t, norm(t, conv(t, x)), S(0.2));
  }
  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    conv.collect(p + ".conv", out);
    norm.collect(p + ".norm", out);
  }
};

// Dual-encoder VAE generator. The anatomy path is all-convolutional (no
// dense layer, preserving spatial structure); the contrast path pools to a
// variational vector code. The decoder sees only the LatentCode.
template <typename S>
struct Generator {
  ArchConfig arch;
  ConvBlock<S> a1, a2, a3, a4;  // anatomy encoder
  ConvBlock<S> c1, c2, c3, c4;  // contrast encoder
  nn::Dense<S> mu_head, logvar_head;
  UpBlock<S> d1, d2, d3;
  nn::ConvTranspose2d<S> d4;

  Generator() = default;
  Generator(const ArchConfig& a, Rng rng) : arch(a) {
    const int b = a.base_width;
    a1 = ConvBlock<S>(1, b, rng);
    a2 = ConvBlock<S>(b, 2 * b, rng);
    a3 = ConvBlock<S>(2 * b, 4 * b, rng);
    a4 = ConvBlock<S>(4 * b, 4 * b, rng);
    c1 = ConvBlock<S>(1, b, rng);
    c2 = ConvBlock<S>(b, 2 * b, rng);
    c3 = ConvBlock<S>(2 * b, 4 * b, rng);
    c4 = ConvBlock<S>(4 * b, 4 * b, rng);
    mu_head = nn::Dense<S>(4 * b, a.d_c, rng);
    logvar_head = nn::Dense<S>(4 * b, a.d_c, rng);
    d1 = UpBlock<S>(4 * b + a.d_c, 4 * b, rng);
    d2 = UpBlock<S>(4 * b, 2 * b, rng);
    d3 = UpBlock<S>(2 * b, b, rng);
    d4 = nn::ConvTranspose2d<S>(b, 1, 4, 2, 1, rng);
  }

  // eps: [N, d_c] noise for the reparameterized contrast sample; pass zeros
  // for a deterministic (mu) code at inference.
  LatentCode<S> encode(Tape<S>* t, const TensorT<S>& s1, const TensorT<S>& s2_gamma,
                       const TensorT<S>& eps) const {
    ad::detail::check_same_shape(s1.shape(), s2_gamma.shape(), "encode");
    LatentCode<S> code;
    code.anatomy = a4(t, a3(t, a2(t, a1(t, s1))));
    auto cfeat = ad::global_avg_pool(t, c4(t, c3(t, c2(t, c1(t, s2_gamma)))));
    code.mu = mu_head(t, cfeat);
    code.logvar = logvar_head(t, cfeat);
    code.eps = eps;
    auto std_dev = ad::exp_t(t, ad::scale(t, code.logvar, S(0.5)));
    code.sample = ad::add(t, code.mu, ad::mul(t, std_dev, eps));
    return code;
  }

  // Reads only the LatentCode (no skip connections by construction).
  TensorT<S> decode(Tape<S>* t, const LatentCode<S>& code) const {
    const int he = code.anatomy.dim(2), we = code.anatomy.dim(3);
    auto tiled = ad::tile_spatial(t, code.sample, he, we);
    auto x = ad::concat(t, code.anatomy, tiled, 1);
    x = d3(t, d2(t, d1(t, x)));
    auto raw = d4(t, x);
    return ad::scale(t, ad::sigmoid_t(t, raw), S(1.4));  // intensity ceiling
  }

  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    a1.collect(p + ".a1", out);
    a2.collect(p + ".a2", out);
    a3.collect(p + ".a3", out);
    a4.collect(p + ".a4", out);
    c1.collect(p + ".c1", out);
    c2.collect(p + ".c2", out);
    c3.collect(p + ".c3", out);
    c4.collect(p + ".c4", out);
    mu_head.collect(p + ".mu_head", out);
    logvar_head.collect(p + ".logvar_head", out);
    d1.collect(p + ".d1", out);
    d2.collect(p + ".d2", out);
    d3.collect(p + ".d3", out);
    d4.collect(p + ".d4", out);
  }
};

// Real-vs-generated CNN: 4 stride-2 conv blocks and a dense head.
template <typename S>
struct Discriminator {
  ArchConfig arch;
  ConvBlock<S> b1, b2, b3, b4;
  nn::Dense<S> head;

  Discriminator() = default;
  Discriminator(const ArchConfig& a, Rng rng) : arch(a) {
    const int b = a.base_width;
    b1 = ConvBlock<S>(1, b, rng, /*with_norm=*/false);
    b2 = ConvBlock<S>(b, 2 * b, rng);
    b3 = ConvBlock<S>(2 * b, 4 * b, rng);
    b4 = ConvBlock<S>(4 * b, 4 * b, rng);
    head = nn::Dense<S>(4 * b * a.latent_extent() * a.latent_extent(), 1, rng);
  }

  // [N,1,H,W] -> [N,1] probability the input is real.
  TensorT<S> operator()(Tape<S>* t, const TensorT<S>& x) const {
    auto h = b4(t, b3(t, b2(t, b1(t, x))));
    const int n = h.dim(0);
    auto flat = ad::reshape(t, h, {n, h.dim(1) * h.dim(2) * h.dim(3)});
    return ad::sigmoid_t(t, head(t, flat));
  }

  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    b1.collect(p + ".b1", out);
    b2.collect(p + ".b2", out);
    b3.collect(p + ".b3", out);
    b4.collect(p + ".b4", out);
    head.collect(p + ".head", out);
  }
};

// Pooled anatomy code + contrast mu: both halves can hide site bias.
template <typename S>
TensorT<S> latent_summary(Tape<S>* t, const LatentCode<S>& code) {
  auto pooled = ad::global_avg_pool(t, code.anatomy);
  return ad::concat(t, pooled, code.mu, 1);
}

// Site-unlearning classifier over the latent summary.
template <typename S>
struct SiteModule {
  ArchConfig arch;
  nn::Dense<S> h1, h2;

  SiteModule() = default;
  SiteModule(const ArchConfig& a, Rng rng) : arch(a) {
    h1 = nn::Dense<S>(a.code_dim(), a.hidden_dim(), rng);
    h2 = nn::Dense<S>(a.hidden_dim(), a.n_sites, rng);
  }

  // [N, code_dim] -> [N, S] softmax site probabilities.
  TensorT<S> operator()(Tape<S>* t, const TensorT<S>& summary) const {
    return ad::softmax(t, h2(t, ad::leaky_relu(t, h1(t, summary), S(0.2))), 1);
  }

  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    h1.collect(p + ".h1", out);
    h2.collect(p + ".h2", out);
  }
};

// Independent sigmoid head per biological feature.
template <typename S>
struct BioModule {
  ArchConfig arch;
  nn::Dense<S> h1, h2;

  BioModule() = default;
  BioModule(const ArchConfig& a, Rng rng) : arch(a) {
    const int f = std::max(1, static_cast<int>(a.bio_features.size()));
    h1 = nn::Dense<S>(a.code_dim(), a.hidden_dim(), rng);
    h2 = nn::Dense<S>(a.hidden_dim(), static_cast<int>(f), rng);
  }

  // [N, code_dim] -> [N, F] per-feature probabilities.
  TensorT<S> operator()(Tape<S>* t, const TensorT<S>& summary) const {
    return ad::sigmoid_t(t, h2(t, ad::leaky_relu(t, h1(t, summary), S(0.2))));
  }

  void collect(const std::string& p, nn::NamedParams<S>& out) const {
    h1.collect(p + ".h1", out);
    h2.collect(p + ".h2", out);
  }
};

// ---------------------------------------------------------------------------
// The assembled model (training precision)
// ---------------------------------------------------------------------------

using F = float;

struct EpochLosses {
  std::int64_t epoch = 0;
  double l_disc = 0, l_site = 0, l_conf = 0, l_bio = 0, l_1 = 0, l_kl = 0, l_gen = 0;
};

struct TrainConfig {
  int epochs = 200;
  int batch = 16;
  double lr = 3e-4;
  double gamma_lo = 0.5, gamma_hi = 1.5;
  int slices_per_subject = 8;  // (s1,s2) draws per subject per epoch
  LossWeights weights;
  bool bio_enabled = true;  // when false, lambda3 is forced to 0
  std::uint64_t seed = 1;
  std::string log_path;  // per-epoch loss CSV; empty disables
};

class ImUnityModel {
 public:
  ImUnityModel(const ArchConfig& a, std::uint64_t init_seed);

  // Tensors are reference-like (copies alias storage), so a copied model
  // would silently share weights; moves are safe and sufficient.
  ImUnityModel(const ImUnityModel&) = delete;
  ImUnityModel& operator=(const ImUnityModel&) = delete;
  ImUnityModel(ImUnityModel&&) = default;
  ImUnityModel& operator=(ImUnityModel&&) = default;

  ArchConfig arch;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::int64_t epochs_trained = 0;

  Generator<F> gen;
  Discriminator<F> disc;
  SiteModule<F> site;
  BioModule<F> bio;

  nn::NamedParams<F> named_params() const;  // checkpoint order
  // Pointers alias the module parameters; valid while the model is alive.
  std::vector<TensorT<F>*> gen_params();   // generator + bio module (phase c)
  std::vector<TensorT<F>*> disc_params();  // phase a
  std::vector<TensorT<F>*> site_params();  // phase b

 private:
  // Aliased handles built once so the pointer lists have a stable home.
  nn::NamedParams<F> cache_gen_, cache_disc_, cache_site_;
};

// Three-phase adversarial training over preprocessed volumes. Appends to the
// model's epoch counter; per-epoch mean losses are returned and optionally
// logged as CSV (epoch,l_disc,l_site,l_conf,l_bio,l_1,l_kl,l_gen).
std::vector<EpochLosses> train_model(ImUnityModel& m,
                                     const std::vector<synth::SubjectVolume>& volumes,
                                     const TrainConfig& cfg);

// Encode (source anatomy, reference contrast at the nearest kept slice),
// decode with the contrast mean (no sampling). Slices failing the brain
// fraction rule pass through unchanged.
synth::SubjectVolume harmonize(const ImUnityModel& m, const synth::SubjectVolume& source,
                               const synth::SubjectVolume& reference);

// IMUC checkpoint format.
struct CheckpointData {
  nlohmann::json descriptor;
  std::vector<std::pair<std::string, std::vector<float>>> blobs;
};

void save_checkpoint(const std::string& path, const ImUnityModel& m);
CheckpointData read_checkpoint(const std::string& path);
void apply_checkpoint(ImUnityModel& m, const CheckpointData& data);  // throws on arch mismatch
ImUnityModel load_checkpoint(const std::string& path);

}  // namespace imunity::model
