#include "imunity/evalkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "imunity/preprocess.hpp"

namespace imunity::eval {

namespace {

// ---------------------------------------------------------------------------
// SSIM internals
// ---------------------------------------------------------------------------

std::vector<double> gaussian_kernel(int win, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(win));
  const double c = (win - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < win; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Separable valid-mode filter: output is (h-win+1) x (w-win+1).
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w,
                                 const std::vector<double>& g) {
  const int win = static_cast<int>(g.size());
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < win; ++k) s += g[static_cast<std::size_t>(k)] * img[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < win; ++k) s += g[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

struct SsimMaps {
  int oh = 0, ow = 0;
  std::vector<double> full;      // complete SSIM index per window
  std::vector<double> cs;        // contrast/structure term per window
  std::vector<double> lum;       // luminance term per window
  std::vector<char> brain;       // window contains brain
  bool any_brain = false;

  double mean_of(const std::vector<double>& map) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      if (any_brain && !brain[i]) continue;
      sum += map[i];
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

int effective_window(int window, int h, int w) {
  int win = std::min({window, h, w});
  if (win % 2 == 0) --win;
  require(win >= 1, "ssim: window collapsed below 1 pixel");
  return win;
}

SsimMaps ssim_maps(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                   const SsimParams& p, const std::vector<char>& brain_px) {
  const int win = effective_window(p.window, h, w);
  const auto g = gaussian_kernel(win, p.sigma);
  const std::size_t n = static_cast<std::size_t>(h) * w;

  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, h, w, g);
  const auto mu_b = filter_valid(b, h, w, g);
  const auto e_aa = filter_valid(aa, h, w, g);
  const auto e_bb = filter_valid(bb, h, w, g);
  const auto e_ab = filter_valid(ab, h, w, g);

  SsimMaps m;
  m.oh = h - win + 1;
  m.ow = w - win + 1;
  const std::size_t wn = static_cast<std::size_t>(m.oh) * m.ow;
  m.full.resize(wn);
  m.cs.resize(wn);
  m.lum.resize(wn);
  m.brain.assign(wn, 0);

  // Integral image of the brain indicator decides window membership in O(1).
  std::vector<std::int64_t> integ(static_cast<std::size_t>(h + 1) * (w + 1), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      integ[static_cast<std::size_t>(y + 1) * (w + 1) + (x + 1)] =
          integ[static_cast<std::size_t>(y) * (w + 1) + (x + 1)] +
          integ[static_cast<std::size_t>(y + 1) * (w + 1) + x] -
          integ[static_cast<std::size_t>(y) * (w + 1) + x] +
          (brain_px[static_cast<std::size_t>(y) * w + x] ? 1 : 0);

  const double c1 = (p.k1 * p.L) * (p.k1 * p.L);
  const double c2 = (p.k2 * p.L) * (p.k2 * p.L);
  for (int y = 0; y < m.oh; ++y)
    for (int x = 0; x < m.ow; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * m.ow + x;
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma;
      const double vb = e_bb[i] - mb * mb;
      const double cov = e_ab[i] - ma * mb;
      const double lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
      const double cs = (2.0 * cov + c2) / (va + vb + c2);
      m.lum[i] = lum;
      m.cs[i] = cs;
      m.full[i] = lum * cs;
      const std::int64_t cnt = integ[static_cast<std::size_t>(y + win) * (w + 1) + (x + win)] -
                               integ[static_cast<std::size_t>(y) * (w + 1) + (x + win)] -
                               integ[static_cast<std::size_t>(y + win) * (w + 1) + x] +
                               integ[static_cast<std::size_t>(y) * (w + 1) + x];
      if (cnt > 0) {
        m.brain[i] = 1;
        m.any_brain = true;
      }
    }
  return m;
}

std::vector<char> brain_pixels(const std::vector<double>& a, const std::vector<double>& b,
                               const std::uint8_t* mask_a, const std::uint8_t* mask_b) {
  std::vector<char> brain(a.size(), 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ba = mask_a ? mask_a[i] != 0 : a[i] > 0.0;
    const bool bb = mask_b ? mask_b[i] != 0 : b[i] > 0.0;
    brain[i] = (ba || bb) ? 1 : 0;
  }
  return brain;
}

std::vector<double> widen(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

// 2x2 mean downsampling (odd trailing row/column dropped).
std::vector<double> downsample2(const std::vector<double>& img, int h, int w, int& nh, int& nw) {
  nh = h / 2;
  nw = w / 2;
  std::vector<double> out(static_cast<std::size_t>(nh) * nw);
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x) {
      const std::size_t base = static_cast<std::size_t>(2 * y) * w + 2 * x;
      out[static_cast<std::size_t>(y) * nw + x] =
          0.25 * (img[base] + img[base + 1] + img[base + w] + img[base + w + 1]);
    }
  return out;
}

double population_std(const std::vector<double>& v, double mean) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(std::max(0.0, s / static_cast<double>(v.size())));
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
            const SsimParams& p, const std::uint8_t* mask_a, const std::uint8_t* mask_b) {
  if (height < 1 || width < 1) throw ShapeError("ssim: empty image");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (a.size() != n || b.size() != n)
    throw ShapeError("ssim: slice sizes disagree with the given shape");
  const auto da = widen(a), db = widen(b);
  const auto brain = brain_pixels(da, db, mask_a, mask_b);
  const auto maps = ssim_maps(da, db, height, width, p, brain);
  return maps.mean_of(maps.full);
}

double ssim_volume(const SubjectVolume& a, const SubjectVolume& b, const SsimParams& p) {
  if (a.height != b.height || a.width != b.width || a.slice_count() != b.slice_count())
    throw ShapeError("ssim_volume: volume shapes disagree");
  if (a.slice_count() == 0) throw ShapeError("ssim_volume: empty volumes");

  const auto ka = prep::filter_slices(a);
  const auto kb = prep::filter_slices(b);
  std::set<int> kept(ka.begin(), ka.end());
  kept.insert(kb.begin(), kb.end());
  std::vector<int> idx(kept.begin(), kept.end());
  if (idx.empty()) {
    idx.resize(static_cast<std::size_t>(a.slice_count()));
    std::iota(idx.begin(), idx.end(), 0);
  }

  double sum = 0.0;
  for (int s : idx) {
    const std::uint8_t* ma = a.has_masks() ? a.masks[static_cast<std::size_t>(s)].data() : nullptr;
    const std::uint8_t* mb = b.has_masks() ? b.masks[static_cast<std::size_t>(s)].data() : nullptr;
    sum += ssim(a.slices[static_cast<std::size_t>(s)], b.slices[static_cast<std::size_t>(s)],
                a.height, a.width, p, ma, mb);
  }
  return sum / static_cast<double>(idx.size());
}

double ms_ssim(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
               int levels, const SsimParams& p) {
  if (height < 1 || width < 1) throw ShapeError("ms_ssim: empty image");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (a.size() != n || b.size() != n)
    throw ShapeError("ms_ssim: slice sizes disagree with the given shape");
  require(levels >= 1, "ms_ssim: levels must be >= 1");

  static const std::array<double, 5> kWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  levels = std::min<int>(levels, static_cast<int>(kWeights.size()));
  while (levels > 1 && std::min(height, width) < p.window * (1 << (levels - 1))) --levels;

  std::vector<double> w(kWeights.begin(), kWeights.begin() + levels);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= wsum;

  std::vector<double> da = widen(a), db = widen(b);
  int h = height, wd = width;
  double result = 1.0;
  for (int lv = 0; lv < levels; ++lv) {
    const auto brain = brain_pixels(da, db, nullptr, nullptr);
    const auto maps = ssim_maps(da, db, h, wd, p, brain);
    const double cs = std::max(0.0, maps.mean_of(maps.cs));
    result *= std::pow(cs, w[static_cast<std::size_t>(lv)]);
    if (lv == levels - 1) {
      const double lum = std::max(0.0, maps.mean_of(maps.lum));
      result *= std::pow(lum, w[static_cast<std::size_t>(lv)]);
    } else {
      int nh = 0, nw = 0;
      da = downsample2(da, h, wd, nh, nw);
      db = downsample2(db, h, wd, nh, nw);
      h = nh;
      wd = nw;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Radiomics-lite features
// ---------------------------------------------------------------------------

namespace {

constexpr int kGlcmLevels = 32;

// Linear-interpolation percentile over a sorted sample, q in [0,1].
double percentile_sorted(const std::vector<double>& sorted, double q) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = q * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= n) return sorted[n - 1];
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

bool is_brain(const SubjectVolume& vol, int s, std::size_t i) {
  if (vol.has_masks()) return vol.masks[static_cast<std::size_t>(s)][i] != 0;
  return vol.slices[static_cast<std::size_t>(s)][i] > 0.0f;
}

struct GlcmFeatures {
  double contrast = 0, correlation = 1, asm_ = 1, homogeneity = 1, entropy = 0, dissimilarity = 0;
};

// One slice: 32 levels quantized on the slice's brain range, distance 1,
// feature values averaged over the four angles that have pairs.
bool glcm_slice(const SubjectVolume& vol, int s, GlcmFeatures& out) {
  const int h = vol.height, w = vol.width;
  const auto& px = vol.slices[static_cast<std::size_t>(s)];

  std::vector<char> brain(px.size(), 0);
  double lo = std::numeric_limits<double>::max(), hi = std::numeric_limits<double>::lowest();
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!is_brain(vol, s, i)) continue;
    brain[i] = 1;
    lo = std::min(lo, static_cast<double>(px[i]));
    hi = std::max(hi, static_cast<double>(px[i]));
  }
  if (lo > hi) return false;  // no brain on this slice

  std::vector<int> level(px.size(), 0);
  if (hi > lo) {
    for (std::size_t i = 0; i < px.size(); ++i)
      if (brain[i])
        level[i] = std::min(kGlcmLevels - 1,
                            static_cast<int>((static_cast<double>(px[i]) - lo) / (hi - lo) * kGlcmLevels));
  }

  static constexpr int kAngles[4][2] = {{1, 0}, {1, 1}, {0, 1}, {-1, 1}};  // (dx, dy)
  GlcmFeatures acc;
  acc = GlcmFeatures{0, 0, 0, 0, 0, 0};
  int used_angles = 0;
  std::vector<double> P(static_cast<std::size_t>(kGlcmLevels) * kGlcmLevels);
  for (const auto& ang : kAngles) {
    const int dx = ang[0], dy = ang[1];
    std::fill(P.begin(), P.end(), 0.0);
    std::int64_t pairs = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!brain[i]) continue;
        const int x2 = x + dx, y2 = y + dy;
        if (x2 < 0 || x2 >= w || y2 >= h) continue;
        const std::size_t j = static_cast<std::size_t>(y2) * w + x2;
        if (!brain[j]) continue;
        P[static_cast<std::size_t>(level[i]) * kGlcmLevels + level[j]] += 1.0;
        P[static_cast<std::size_t>(level[j]) * kGlcmLevels + level[i]] += 1.0;
        ++pairs;
      }
    if (pairs == 0) continue;
    const double norm = 1.0 / (2.0 * static_cast<double>(pairs));
    for (double& v : P) v *= norm;

    double mu = 0.0, m2 = 0.0;
    for (int i = 0; i < kGlcmLevels; ++i) {
      double pi = 0.0;
      for (int j = 0; j < kGlcmLevels; ++j) pi += P[static_cast<std::size_t>(i) * kGlcmLevels + j];
      mu += i * pi;
      m2 += static_cast<double>(i) * i * pi;
    }
    const double var = m2 - mu * mu;

    double contrast = 0, corr_num = 0, asm_v = 0, hom = 0, ent = 0, diss = 0;
    for (int i = 0; i < kGlcmLevels; ++i)
      for (int j = 0; j < kGlcmLevels; ++j) {
        const double pij = P[static_cast<std::size_t>(i) * kGlcmLevels + j];
        if (pij == 0.0) continue;
        const double d = static_cast<double>(i - j);
        contrast += d * d * pij;
        corr_num += (i - mu) * (j - mu) * pij;
        asm_v += pij * pij;
        hom += pij / (1.0 + d * d);
        ent -= pij * std::log2(pij);
        diss += std::abs(d) * pij;
      }
    acc.contrast += contrast;
    acc.correlation += var < 1e-12 ? 1.0 : corr_num / var;  // single gray level: perfectly correlated
    acc.asm_ += asm_v;
    acc.homogeneity += hom;
    acc.entropy += ent;
    acc.dissimilarity += diss;
    ++used_angles;
  }
  if (used_angles == 0) return false;
  const double inv = 1.0 / used_angles;
  out.contrast = acc.contrast * inv;
  out.correlation = acc.correlation * inv;
  out.asm_ = acc.asm_ * inv;
  out.homogeneity = acc.homogeneity * inv;
  out.entropy = acc.entropy * inv;
  out.dissimilarity = acc.dissimilarity * inv;
  return true;
}

}  // namespace

const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> kNames = {
      "mean",          "variance",         "skewness", "kurtosis",         "entropy",
      "energy",        "min",              "max",      "p10",              "p90",
      "median",        "iqr",              "rms",      "mad",              "glcm_contrast",
      "glcm_correlation", "glcm_asm",      "glcm_homogeneity", "glcm_entropy", "glcm_dissimilarity"};
  return kNames;
}

FeatureVector extract_features(const SubjectVolume& vol) {
  const auto kept = prep::filter_slices(vol);
  require(!kept.empty(), "extract_features: no slice passes the brain-fraction filter");

  std::vector<double> px;
  for (int s : kept) {
    const auto& slice = vol.slices[static_cast<std::size_t>(s)];
    for (std::size_t i = 0; i < slice.size(); ++i)
      if (is_brain(vol, s, i)) px.push_back(static_cast<double>(slice[i]));
  }
  require(!px.empty(), "extract_features: the kept slices hold no brain pixels");

  const double n = static_cast<double>(px.size());
  const double mean = mean_of(px);
  double m2 = 0, m3 = 0, m4 = 0, sq = 0, ad = 0;
  for (double x : px) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
    sq += x * x;
    ad += std::abs(d);
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  const double sd = std::sqrt(m2);
  const double skew = sd > 0 ? m3 / (sd * sd * sd) : 0.0;
  const double kurt = sd > 0 ? m4 / (m2 * m2) : 0.0;

  std::vector<double> sorted = px;
  std::sort(sorted.begin(), sorted.end());
  const double vmin = sorted.front(), vmax = sorted.back();

  // First-order entropy over a 32-bin histogram of the brain range (bits).
  double entropy = 0.0;
  if (vmax > vmin) {
    std::array<std::int64_t, kGlcmLevels> counts{};
    for (double x : px) {
      const int b = std::min(kGlcmLevels - 1,
                             static_cast<int>((x - vmin) / (vmax - vmin) * kGlcmLevels));
      ++counts[static_cast<std::size_t>(b)];
    }
    for (std::int64_t c : counts) {
      if (c == 0) continue;
      const double pr = static_cast<double>(c) / n;
      entropy -= pr * std::log2(pr);
    }
  }

  GlcmFeatures g;
  GlcmFeatures sum{0, 0, 0, 0, 0, 0};
  int gl_slices = 0;
  for (int s : kept) {
    GlcmFeatures one;
    if (!glcm_slice(vol, s, one)) continue;
    sum.contrast += one.contrast;
    sum.correlation += one.correlation;
    sum.asm_ += one.asm_;
    sum.homogeneity += one.homogeneity;
    sum.entropy += one.entropy;
    sum.dissimilarity += one.dissimilarity;
    ++gl_slices;
  }
  if (gl_slices > 0) {
    const double inv = 1.0 / gl_slices;
    g = GlcmFeatures{sum.contrast * inv, sum.correlation * inv,   sum.asm_ * inv,
                     sum.homogeneity * inv, sum.entropy * inv, sum.dissimilarity * inv};
  }  // else: the degenerate single-level defaults

  FeatureVector f;
  f.subject_id = vol.meta.subject_id;
  f.names = feature_names();
  f.values = {mean,
              m2,
              skew,
              kurt,
              entropy,
              sq,
              vmin,
              vmax,
              percentile_sorted(sorted, 0.10),
              percentile_sorted(sorted, 0.90),
              percentile_sorted(sorted, 0.50),
              percentile_sorted(sorted, 0.75) - percentile_sorted(sorted, 0.25),
              std::sqrt(sq / n),
              ad / n,
              g.contrast,
              g.correlation,
              g.asm_,
              g.homogeneity,
              g.entropy,
              g.dissimilarity};
  check_finite(f.values.data(), f.values.size(), "extract_features");
  return f;
}

std::vector<FeatureVector> subset_features(const std::vector<FeatureVector>& features,
                                           const std::vector<int>& keep) {
  std::vector<FeatureVector> out;
  out.reserve(features.size());
  for (const auto& f : features) {
    FeatureVector s;
    s.subject_id = f.subject_id;
    for (int j : keep) {
      require(j >= 0 && j < static_cast<int>(f.values.size()), "subset_features: index out of range");
      s.values.push_back(f.values[static_cast<std::size_t>(j)]);
      s.names.push_back(f.names.empty() ? std::to_string(j) : f.names[static_cast<std::size_t>(j)]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pearson selection
// ---------------------------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double betainc(double a, double b, double x) {
  require(a > 0.0 && b > 0.0, "betainc: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), "pearson_r: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double pearson_p(double r, int n) {
  if (n <= 2) return 1.0;
  const double r2 = std::min(r * r, 1.0);
  const double nu = static_cast<double>(n - 2);
  if (1.0 - r2 <= 0.0) return 0.0;
  const double t2 = r2 * nu / (1.0 - r2);
  return std::clamp(betainc(nu / 2.0, 0.5, nu / (nu + t2)), 0.0, 1.0);
}

std::vector<int> pearson_select(const std::vector<FeatureVector>& features,
                                const std::vector<int>& site_labels, double p_threshold) {
  require(features.size() == site_labels.size(), "pearson_select: label count mismatch");
  require(!features.empty(), "pearson_select: empty feature set");
  const std::size_t d = features[0].values.size();
  for (const auto& f : features)
    require(f.values.size() == d, "pearson_select: ragged feature vectors");
  const int n = static_cast<int>(features.size());

  std::vector<int> sites(site_labels.begin(), site_labels.end());
  std::sort(sites.begin(), sites.end());
  sites.erase(std::unique(sites.begin(), sites.end()), sites.end());

  std::vector<int> selected;
  std::vector<double> col(static_cast<std::size_t>(n)), ind(static_cast<std::size_t>(n));
  for (std::size_t j = 0; j < d; ++j) {
    for (int i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = features[static_cast<std::size_t>(i)].values[j];
    for (int s : sites) {
      for (int i = 0; i < n; ++i)
        ind[static_cast<std::size_t>(i)] = site_labels[static_cast<std::size_t>(i)] == s ? 1.0 : 0.0;
      if (pearson_p(pearson_r(col, ind), n) < p_threshold) {
        selected.push_back(static_cast<int>(j));
        break;
      }
    }
  }
  return selected;
}

// ---------------------------------------------------------------------------
// SVM (SMO)
// ---------------------------------------------------------------------------

namespace {

// Midpoint-split pairwise sum. Concatenating a sequence with itself splits
// into two bitwise-equal halves, so the sum doubles exactly; together with the
// exactly-halved gamma heuristic this keeps the RBF kernel bit-identical when
// the feature columns of a dataset are duplicated.
double pairwise_sum(const double* v, std::size_t n) {
  if (n == 0) return 0.0;
  if (n == 1) return v[0];
  const std::size_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

double rbf(const std::vector<double>& a, const std::vector<double>& b, double gamma) {
  std::vector<double> sq(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    sq[k] = d * d;
  }
  const double d2 = pairwise_sum(sq.data(), sq.size());
  return std::exp(-gamma * d2);
}

struct BinarySolution {
  std::vector<double> alpha;
  double b = 0.0;
};

// Simplified SMO over a precomputed kernel. Stops at the first full pass with
// no update (every point satisfies KKT within tol) or after 10n passes.
BinarySolution smo_solve(const std::vector<std::vector<double>>& K, const std::vector<int>& y,
                         double C, double tol, Rng rng) {
  const int n = static_cast<int>(y.size());
  BinarySolution sol;
  sol.alpha.assign(static_cast<std::size_t>(n), 0.0);
  auto& alpha = sol.alpha;
  double& b = sol.b;

  auto decision = [&](int i) {
    double s = b;
    for (int j = 0; j < n; ++j)
      if (alpha[static_cast<std::size_t>(j)] != 0.0)
        s += alpha[static_cast<std::size_t>(j)] * y[static_cast<std::size_t>(j)] *
             K[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return s;
  };

  const long max_passes = 10L * n;
  for (long pass = 0; pass < max_passes; ++pass) {
    int changed = 0;
    for (int i = 0; i < n; ++i) {
      const double ai_old = alpha[static_cast<std::size_t>(i)];
      const double ei = decision(i) - y[static_cast<std::size_t>(i)];
      const double ri = y[static_cast<std::size_t>(i)] * ei;
      if (!((ri < -tol && ai_old < C) || (ri > tol && ai_old > 0.0))) continue;

      int j = rng.uniform_int(0, n - 2);
      if (j >= i) ++j;
      const double aj_old = alpha[static_cast<std::size_t>(j)];
      const double ej = decision(j) - y[static_cast<std::size_t>(j)];

      double lo, hi;
      if (y[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(j)]) {
        lo = std::max(0.0, aj_old - ai_old);
        hi = std::min(C, C + aj_old - ai_old);
      } else {
        lo = std::max(0.0, ai_old + aj_old - C);
        hi = std::min(C, ai_old + aj_old);
      }
      if (lo >= hi) continue;
      const double kii = K[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
      const double kjj = K[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)];
      const double kij = K[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const double eta = 2.0 * kij - kii - kjj;
      if (eta >= 0.0) continue;

      double aj = aj_old - y[static_cast<std::size_t>(j)] * (ei - ej) / eta;
      aj = std::clamp(aj, lo, hi);
      if (std::fabs(aj - aj_old) < 1e-7) continue;
      const double ai =
          ai_old + y[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(j)] * (aj_old - aj);
      alpha[static_cast<std::size_t>(i)] = ai;
      alpha[static_cast<std::size_t>(j)] = aj;

      const double di = y[static_cast<std::size_t>(i)] * (ai - ai_old);
      const double dj = y[static_cast<std::size_t>(j)] * (aj - aj_old);
      const double b1 = b - ei - di * kii - dj * kij;
      const double b2 = b - ej - di * kij - dj * kjj;
      if (ai > 0.0 && ai < C)
        b = b1;
      else if (aj > 0.0 && aj < C)
        b = b2;
      else
        b = 0.5 * (b1 + b2);
      ++changed;
    }
    if (changed == 0) break;
  }
  return sol;
}

}  // namespace

SvmModel svm_train(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                   const SvmParams& params) {
  const int n = static_cast<int>(X.size());
  require(n >= 2, "svm_train: need at least two samples");
  require(y.size() == X.size(), "svm_train: label count mismatch");
  const std::size_t d = X[0].size();
  require(d >= 1, "svm_train: empty feature vectors");
  for (const auto& row : X) require(row.size() == d, "svm_train: ragged feature matrix");

  std::vector<int> classes(y.begin(), y.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw Error("svm_train: training labels hold a single class");

  double gamma = params.gamma_rbf;
  if (gamma <= 0.0) {
    // Scale heuristic: 1 / (d * var) over all matrix entries. Rows are reduced
    // with pairwise sums so duplicated feature columns double s, s2, and d
    // exactly, leaving var bitwise unchanged and halving gamma exactly.
    double s = 0.0, s2 = 0.0;
    std::vector<double> sq(d);
    for (const auto& row : X) {
      s += pairwise_sum(row.data(), d);
      for (std::size_t k = 0; k < d; ++k) sq[k] = row[k] * row[k];
      s2 += pairwise_sum(sq.data(), d);
    }
    const double cnt = static_cast<double>(n) * static_cast<double>(d);
    const double var = std::max(0.0, s2 / cnt - (s / cnt) * (s / cnt));
    gamma = var > 0.0 ? 1.0 / (static_cast<double>(d) * var) : 1.0 / static_cast<double>(d);
  }

  std::vector<std::vector<double>> K(static_cast<std::size_t>(n),
                                     std::vector<double>(static_cast<std::size_t>(n)));
  for (int i = 0; i < n; ++i) {
    K[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    for (int j = i + 1; j < n; ++j) {
      const double v = rbf(X[static_cast<std::size_t>(i)], X[static_cast<std::size_t>(j)], gamma);
      K[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
      K[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = v;
    }
  }

  const int n_cls = classes.size() == 2 ? 1 : static_cast<int>(classes.size());
  std::vector<std::vector<double>> coefs(static_cast<std::size_t>(n_cls),
                                         std::vector<double>(static_cast<std::size_t>(n), 0.0));
  std::vector<double> biases(static_cast<std::size_t>(n_cls), 0.0);
  std::vector<int> yb(static_cast<std::size_t>(n));
  for (int c = 0; c < n_cls; ++c) {
    const int positive = classes.size() == 2 ? classes[1] : classes[static_cast<std::size_t>(c)];
    for (int i = 0; i < n; ++i)
      yb[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] == positive ? 1 : -1;
    auto sol = smo_solve(K, yb, params.C, params.tol,
                         Rng(params.seed).split("smo").split(static_cast<std::uint64_t>(c)));
    for (int i = 0; i < n; ++i)
      coefs[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] =
          sol.alpha[static_cast<std::size_t>(i)] * yb[static_cast<std::size_t>(i)];
    biases[static_cast<std::size_t>(c)] = sol.b;
  }

  SvmModel m;
  m.gamma_rbf = gamma;
  m.C = params.C;
  m.classes = classes;
  m.biases = biases;
  for (int i = 0; i < n; ++i) {
    bool used = false;
    for (int c = 0; c < n_cls; ++c)
      if (coefs[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] != 0.0) used = true;
    if (!used) continue;
    m.support_vectors.push_back(X[static_cast<std::size_t>(i)]);
    for (int c = 0; c < n_cls; ++c) {
      if (m.dual_coefs.size() <= static_cast<std::size_t>(c)) m.dual_coefs.emplace_back();
    }
    for (int c = 0; c < n_cls; ++c)
      m.dual_coefs[static_cast<std::size_t>(c)].push_back(
          coefs[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)]);
  }
  if (m.dual_coefs.empty()) m.dual_coefs.resize(static_cast<std::size_t>(n_cls));
  return m;
}

std::vector<std::vector<double>> svm_predict(const SvmModel& m,
                                             const std::vector<std::vector<double>>& X) {
  const int n_cls = m.n_classifiers();
  std::vector<std::vector<double>> out(X.size(),
                                       std::vector<double>(static_cast<std::size_t>(n_cls)));
  for (std::size_t i = 0; i < X.size(); ++i) {
    require(m.support_vectors.empty() || X[i].size() == m.support_vectors[0].size(),
            "svm_predict: feature dimension mismatch");
    for (int c = 0; c < n_cls; ++c) {
      double s = m.biases[static_cast<std::size_t>(c)];
      for (std::size_t v = 0; v < m.support_vectors.size(); ++v)
        s += m.dual_coefs[static_cast<std::size_t>(c)][v] *
             rbf(X[i], m.support_vectors[v], m.gamma_rbf);
      out[i][static_cast<std::size_t>(c)] = s;
    }
  }
  return out;
}

std::vector<int> svm_classify(const SvmModel& m, const std::vector<std::vector<double>>& X) {
  const auto dec = svm_predict(m, X);
  std::vector<int> labels(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (m.classes.size() == 2) {
      labels[i] = dec[i][0] > 0.0 ? m.classes[1] : m.classes[0];
    } else {
      const auto it = std::max_element(dec[i].begin(), dec[i].end());
      labels[i] = m.classes[static_cast<std::size_t>(it - dec[i].begin())];
    }
  }
  return labels;
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::int64_t n_pos = 0;
  for (int l : labels) n_pos += l != 0 ? 1 : 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("roc_auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney with tie-averaged ranks.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) pos_rank_sum += avg_rank;
    i = j;
  }
  const double auc = (pos_rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
                     (static_cast<double>(n_pos) * static_cast<double>(n_neg));

  RocCurve curve;
  curve.auc = auc;
  curve.thresholds.push_back(std::numeric_limits<double>::infinity());
  curve.tpr.push_back(0.0);
  curve.fpr.push_back(0.0);
  std::int64_t tp = 0, fp = 0;
  std::size_t k = n;
  while (k > 0) {  // descending score groups
    const double s = scores[order[k - 1]];
    while (k > 0 && scores[order[k - 1]] == s) {
      if (labels[order[k - 1]] != 0)
        ++tp;
      else
        ++fp;
      --k;
    }
    curve.thresholds.push_back(s);
    curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
    curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_neg));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Grouped stratified k-fold
// ---------------------------------------------------------------------------

std::vector<int> make_folds(const std::vector<std::string>& groups, const std::vector<int>& labels,
                            int k, std::uint64_t seed) {
  require(groups.size() == labels.size(), "make_folds: length mismatch");
  require(!groups.empty(), "make_folds: empty input");
  if (k < 2) throw ConfigError("make_folds: k must be >= 2");

  std::vector<std::string> group_order;            // first-appearance order
  std::map<std::string, int> group_index;
  std::vector<int> group_label;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (group_index.emplace(groups[i], static_cast<int>(group_order.size())).second) {
      group_order.push_back(groups[i]);
      group_label.push_back(labels[i]);
    }
  }
  const int n_groups = static_cast<int>(group_order.size());
  if (k > n_groups)
    throw ConfigError("make_folds: k = " + std::to_string(k) + " exceeds the " +
                      std::to_string(n_groups) + " distinct groups");

  std::vector<int> classes(group_label.begin(), group_label.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  std::vector<int> fold_of_group(static_cast<std::size_t>(n_groups), 0);
  Rng master(seed);
  int cursor = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<int> members;
    for (int g = 0; g < n_groups; ++g)
      if (group_label[static_cast<std::size_t>(g)] == classes[c]) members.push_back(g);
    Rng rng = master.split("fold").split(static_cast<std::uint64_t>(c));
    rng.shuffle(members);
    for (int g : members) fold_of_group[static_cast<std::size_t>(g)] = cursor++ % k;
  }

  std::vector<int> folds(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i)
    folds[i] = fold_of_group[static_cast<std::size_t>(group_index[groups[i]])];
  return folds;
}

KFoldResult kfold_cv(const std::vector<FeatureVector>& features, const std::vector<int>& labels,
                     int k, std::uint64_t seed, const SvmParams& svm) {
  const std::size_t n = features.size();
  require(labels.size() == n, "kfold_cv: label count mismatch");
  require(n >= 2, "kfold_cv: need at least two samples");
  const std::size_t d = features[0].values.size();
  for (const auto& f : features) require(f.values.size() == d, "kfold_cv: ragged feature vectors");

  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw Error("kfold_cv: labels hold a single class");
  const bool binary = classes.size() == 2;

  std::vector<std::string> groups(n);
  for (std::size_t i = 0; i < n; ++i) groups[i] = features[i].subject_id;
  const auto folds = make_folds(groups, labels, k, seed);

  KFoldResult res;
  res.predictions.assign(n, 0);
  if (binary) res.scores.assign(n, 0.0);

  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (folds[i] == f ? test : train).push_back(i);
    if (test.empty()) continue;

    // z-score with training-fold statistics
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i : train)
      for (std::size_t j = 0; j < d; ++j) mu[j] += features[i].values[j];
    for (std::size_t j = 0; j < d; ++j) mu[j] /= static_cast<double>(train.size());
    for (std::size_t i : train)
      for (std::size_t j = 0; j < d; ++j) {
        const double dd = features[i].values[j] - mu[j];
        sd[j] += dd * dd;
      }
    for (std::size_t j = 0; j < d; ++j) {
      sd[j] = std::sqrt(sd[j] / static_cast<double>(train.size()));
      if (sd[j] < 1e-12) sd[j] = 1.0;
    }
    auto zrow = [&](std::size_t i) {
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = (features[i].values[j] - mu[j]) / sd[j];
      return row;
    };
    std::vector<std::vector<double>> xtr, xte;
    std::vector<int> ytr, yte;
    for (std::size_t i : train) {
      xtr.push_back(zrow(i));
      ytr.push_back(labels[i]);
    }
    for (std::size_t i : test) {
      xte.push_back(zrow(i));
      yte.push_back(labels[i]);
    }

    KFoldResult::Fold fold;
    fold.test_size = static_cast<int>(test.size());

    std::vector<int> ytr_unique = ytr;
    std::sort(ytr_unique.begin(), ytr_unique.end());
    ytr_unique.erase(std::unique(ytr_unique.begin(), ytr_unique.end()), ytr_unique.end());
    if (ytr_unique.size() < 2) {
      // Degenerate training fold: predict its single class.
      int correct = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        res.predictions[test[i]] = ytr_unique[0];
        if (yte[i] == ytr_unique[0]) ++correct;
      }
      fold.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
      res.folds.push_back(fold);
      continue;
    }

    const auto model = svm_train(xtr, ytr, svm);
    const auto dec = svm_predict(model, xte);
    const auto pred = svm_classify(model, xte);

    int correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      res.predictions[test[i]] = pred[i];
      if (binary) res.scores[test[i]] = dec[i][0];
      if (pred[i] == yte[i]) ++correct;
    }
    fold.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());

    // AUC: positive-class decision when binary, macro one-vs-rest otherwise.
    std::vector<double> aucs;
    const int cols = model.n_classifiers();
    for (int c = 0; c < cols; ++c) {
      const int positive = model.classes.size() == 2 ? model.classes[1]
                                                     : model.classes[static_cast<std::size_t>(c)];
      std::vector<int> bin(yte.size());
      int pos = 0;
      for (std::size_t i = 0; i < yte.size(); ++i) {
        bin[i] = yte[i] == positive ? 1 : 0;
        pos += bin[i];
      }
      if (pos == 0 || pos == static_cast<int>(yte.size())) continue;
      std::vector<double> col(yte.size());
      for (std::size_t i = 0; i < yte.size(); ++i) col[i] = dec[i][static_cast<std::size_t>(c)];
      aucs.push_back(roc_auc(col, bin).auc);
    }
    if (!aucs.empty()) fold.auc = mean_of(aucs);
    res.folds.push_back(fold);
  }

  std::vector<double> accs, aucs;
  for (const auto& fold : res.folds) {
    accs.push_back(fold.accuracy);
    if (fold.auc) aucs.push_back(*fold.auc);
  }
  res.mean_accuracy = mean_of(accs);
  res.std_accuracy = population_std(accs, res.mean_accuracy);
  res.auc_folds = static_cast<int>(aucs.size());
  if (!aucs.empty()) {
    res.mean_auc = mean_of(aucs);
    res.std_auc = population_std(aucs, res.mean_auc);
  }
  return res;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

PcaResult pca_project(const std::vector<std::vector<double>>& X, int dims) {
  const int n = static_cast<int>(X.size());
  require(n >= 2, "pca_project: need at least two samples");
  const int d = static_cast<int>(X[0].size());
  require(d >= 1, "pca_project: empty feature vectors");
  for (const auto& row : X)
    require(static_cast<int>(row.size()) == d, "pca_project: ragged matrix");
  require(dims >= 1, "pca_project: dims must be >= 1");
  const int m = std::min(dims, d);

  Eigen::MatrixXd mat(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mat(i, j) = X[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const Eigen::RowVectorXd mean = mat.colwise().mean();
  mat.rowwise() -= mean;
  const Eigen::MatrixXd cov = mat.transpose() * mat / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  require(es.info() == Eigen::Success, "pca_project: eigendecomposition failed");

  PcaResult res;
  const double total = std::max(0.0, cov.trace());
  Eigen::MatrixXd axes(d, m);
  for (int c = 0; c < m; ++c) {
    const int src = d - 1 - c;  // eigenvalues come back ascending
    Eigen::VectorXd v = es.eigenvectors().col(src);
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::fabs(v(j)) > std::fabs(v(arg))) arg = j;
    if (v(arg) < 0.0) v = -v;
    axes.col(c) = v;
    const double ev = std::max(0.0, es.eigenvalues()(src));
    res.explained_variance.push_back(ev);
    res.explained_variance_ratio.push_back(total > 0.0 ? ev / total : 0.0);
  }
  const Eigen::MatrixXd coords = mat * axes;
  res.coords.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m)));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < m; ++c) res.coords[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = coords(i, c);
  return res;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace {

std::string available_sites(const synth::Cohort& cohort) {
  std::set<int> sites;
  for (const auto& row : cohort.manifest) sites.insert(row.site_id);
  std::string s;
  for (int v : sites) {
    if (!s.empty()) s += ", ";
    s += std::to_string(v);
  }
  return s;
}

int donor_index(const synth::Cohort& cohort, int reference_site) {
  for (std::size_t i = 0; i < cohort.manifest.size(); ++i)
    if (cohort.manifest[i].site_id == reference_site) return static_cast<int>(i);
  throw Error("reference site " + std::to_string(reference_site) +
              " has no volume in the cohort; available sites: " + available_sites(cohort));
}

std::vector<FeatureVector> extract_all(const std::vector<SubjectVolume>& volumes, int threads) {
  std::vector<FeatureVector> out(volumes.size());
  parallel_for(volumes.size(), threads,
               [&](std::size_t i) { out[i] = extract_features(volumes[i]); });
  return out;
}

std::vector<PcaRow> pca_scatter(const std::vector<FeatureVector>& features,
                                const std::vector<int>& site_labels,
                                const std::vector<std::string>& subject_ids) {
  // Columns are z-scored first so no single feature scale dominates the axes.
  const std::size_t n = features.size(), d = features.empty() ? 0 : features[0].values.size();
  std::vector<std::vector<double>> X(n, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = features[i].values[j];
    const double mu = mean_of(col);
    double sd = population_std(col, mu);
    if (sd < 1e-12) sd = 1.0;
    for (std::size_t i = 0; i < n; ++i) X[i][j] = (col[i] - mu) / sd;
  }
  const auto pca = pca_project(X, 2);
  std::vector<PcaRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].subject_id = subject_ids[i];
    rows[i].site_id = site_labels[i];
    rows[i].pc1 = pca.coords[i][0];
    rows[i].pc2 = pca.coords[i].size() > 1 ? pca.coords[i][1] : 0.0;
  }
  return rows;
}

std::vector<std::vector<int>> site_combinations(const std::vector<int>& sites) {
  std::vector<std::vector<int>> out;
  const int s = static_cast<int>(sites.size());
  for (int size = 2; size <= s; ++size) {
    std::vector<int> pick(static_cast<std::size_t>(size));
    std::function<void(int, int)> rec = [&](int start, int depth) {
      if (depth == size) {
        out.push_back(pick);
        return;
      }
      for (int i = start; i < s; ++i) {
        pick[static_cast<std::size_t>(depth)] = sites[static_cast<std::size_t>(i)];
        rec(i + 1, depth + 1);
      }
    };
    rec(0, 0);
  }
  return out;
}

}  // namespace

std::vector<SubjectVolume> harmonize_cohort(const model::ImUnityModel& m,
                                            const synth::Cohort& cohort, int reference_site,
                                            int threads) {
  const int donor = donor_index(cohort, reference_site);
  const SubjectVolume& ref = cohort.volumes[static_cast<std::size_t>(donor)];
  std::vector<SubjectVolume> out(cohort.volumes.size());
  parallel_for(cohort.volumes.size(), threads,
               [&](std::size_t i) { out[i] = model::harmonize(m, cohort.volumes[i], ref); });
  return out;
}

std::vector<std::vector<double>> latent_summaries(const model::ImUnityModel& m,
                                                  const synth::Cohort& cohort) {
  using model::F;
  std::vector<std::vector<double>> out;
  out.reserve(cohort.volumes.size());
  for (const auto& vol : cohort.volumes) {
    require(vol.height == m.arch.image_size && vol.width == m.arch.image_size,
            "latent_summaries: volume shape does not match the model");
    auto kept = prep::filter_slices(vol);
    if (kept.empty()) {
      kept.resize(static_cast<std::size_t>(vol.slice_count()));
      std::iota(kept.begin(), kept.end(), 0);
    }
    const int k = static_cast<int>(kept.size());
    const int h = vol.height, w = vol.width;
    auto x = model::TensorT<F>::zeros({k, 1, h, w});
    for (int i = 0; i < k; ++i)
      std::copy(vol.slices[static_cast<std::size_t>(kept[static_cast<std::size_t>(i)])].begin(),
                vol.slices[static_cast<std::size_t>(kept[static_cast<std::size_t>(i)])].end(),
                x.data() + static_cast<std::int64_t>(i) * h * w);
    const auto eps = model::TensorT<F>::zeros({k, m.arch.d_c});
    const auto code = m.gen.encode(nullptr, x, x, eps);
    const auto summary = model::latent_summary<F>(nullptr, code);
    const int dim = summary.dim(1);
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < dim; ++j)
        mean[static_cast<std::size_t>(j)] +=
            static_cast<double>(summary.data()[static_cast<std::int64_t>(i) * dim + j]);
    for (double& v : mean) v /= static_cast<double>(k);
    out.push_back(std::move(mean));
  }
  return out;
}

SiteReport experiment_site_classification(const synth::Cohort& cohort,
                                          const model::ImUnityModel* m,
                                          const ExperimentConfig& cfg) {
  require(!cohort.volumes.empty(), "site experiment: empty cohort");
  SiteReport rep;
  for (const auto& row : cohort.manifest) {
    rep.site_labels.push_back(row.site_id);
    rep.subject_ids.push_back(row.subject_id);
  }

  const auto raw = extract_all(cohort.volumes, cfg.threads);
  rep.selected = pearson_select(raw, rep.site_labels, cfg.p_threshold);
  if (rep.selected.empty()) {  // nothing separates the sites: keep all features
    rep.selection_fallback = true;
    rep.selected.resize(raw[0].values.size());
    std::iota(rep.selected.begin(), rep.selected.end(), 0);
  }

  const auto raw_sel = subset_features(raw, rep.selected);
  rep.raw_cv = kfold_cv(raw_sel, rep.site_labels, cfg.k_folds, cfg.seed, cfg.svm);
  rep.raw_scatter = pca_scatter(raw_sel, rep.site_labels, rep.subject_ids);

  if (m != nullptr) {
    rep.has_harmonized = true;
    const auto hv = harmonize_cohort(*m, cohort, cfg.reference_site, cfg.threads);
    const auto hf = subset_features(extract_all(hv, cfg.threads), rep.selected);
    rep.harmonized_cv = kfold_cv(hf, rep.site_labels, cfg.k_folds, cfg.seed, cfg.svm);
    rep.harmonized_scatter = pca_scatter(hf, rep.site_labels, rep.subject_ids);
  }
  return rep;
}

PatientReport experiment_patient_classification(const synth::Cohort& cohort,
                                                const model::ImUnityModel* m,
                                                std::vector<std::vector<int>> site_subsets,
                                                const ExperimentConfig& cfg) {
  require(!cohort.volumes.empty(), "patient experiment: empty cohort");
  PatientReport rep;
  rep.has_harmonized = m != nullptr;

  std::set<int> site_set;
  for (const auto& row : cohort.manifest) site_set.insert(row.site_id);
  if (site_subsets.empty())
    site_subsets = site_combinations(std::vector<int>(site_set.begin(), site_set.end()));

  const auto raw = extract_all(cohort.volumes, cfg.threads);
  std::vector<FeatureVector> harm;
  if (m != nullptr)
    harm = extract_all(harmonize_cohort(*m, cohort, cfg.reference_site, cfg.threads), cfg.threads);

  for (const auto& subset : site_subsets) {
    const std::set<int> wanted(subset.begin(), subset.end());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cohort.manifest.size(); ++i)
      if (wanted.count(cohort.manifest[i].site_id)) idx.push_back(i);

    std::vector<int> status;
    std::vector<FeatureVector> fr, fh;
    std::set<std::string> subjects;
    for (std::size_t i : idx) {
      status.push_back(cohort.manifest[i].status);
      fr.push_back(raw[i]);
      if (m != nullptr) fh.push_back(harm[i]);
      subjects.insert(cohort.manifest[i].subject_id);
    }
    const std::set<int> classes(status.begin(), status.end());
    if (classes.size() < 2 || subjects.size() < 2) continue;  // nothing to classify

    PatientReport::Subset s;
    s.sites = subset;
    s.n_samples = static_cast<int>(idx.size());

    auto selected = pearson_select(fr, status, cfg.p_threshold);
    if (selected.empty()) {
      selected.resize(fr[0].values.size());
      std::iota(selected.begin(), selected.end(), 0);
    }
    const int k = std::min(cfg.k_folds, static_cast<int>(subjects.size()));

    const auto raw_cv = kfold_cv(subset_features(fr, selected), status, k, cfg.seed, cfg.svm);
    s.raw_accuracy = raw_cv.mean_accuracy;
    if (raw_cv.auc_folds > 0) s.raw_auc = raw_cv.mean_auc;
    if (m != nullptr) {
      const auto harm_cv = kfold_cv(subset_features(fh, selected), status, k, cfg.seed, cfg.svm);
      s.harmonized_accuracy = harm_cv.mean_accuracy;
      if (harm_cv.auc_folds > 0) s.harmonized_auc = harm_cv.mean_auc;
    }
    rep.subsets.push_back(std::move(s));
  }

  std::map<int, std::vector<const PatientReport::Subset*>> by_size;
  for (const auto& s : rep.subsets) by_size[static_cast<int>(s.sites.size())].push_back(&s);
  for (const auto& [size, members] : by_size) {
    PatientReport::SizeAgg agg;
    agg.size = size;
    std::vector<double> r, h;
    for (const auto* s : members) {
      if (s->raw_auc) r.push_back(*s->raw_auc);
      if (s->harmonized_auc) h.push_back(*s->harmonized_auc);
    }
    agg.count = static_cast<int>(members.size());
    agg.raw_mean = mean_of(r);
    agg.raw_std = population_std(r, agg.raw_mean);
    agg.harm_mean = mean_of(h);
    agg.harm_std = population_std(h, agg.harm_mean);
    rep.by_size.push_back(agg);
  }
  return rep;
}

TravelingReport experiment_traveling_ssim(const synth::Cohort& cohort,
                                          const model::ImUnityModel& m, int reference_site,
                                          const SsimParams& p) {
  // travel_group -> site -> volume index
  std::map<std::string, std::map<int, std::size_t>> groups;
  for (std::size_t i = 0; i < cohort.manifest.size(); ++i) {
    const auto& row = cohort.manifest[i];
    if (!row.travel_group.empty()) groups[row.travel_group][row.site_id] = i;
  }
  require(!groups.empty(), "traveling experiment: the cohort has no traveling subjects");

  TravelingReport rep;
  rep.reference_site = reference_site;
  std::vector<double> before, after;
  for (const auto& [group, sites] : groups) {
    const auto ref_it = sites.find(reference_site);
    if (ref_it == sites.end())
      throw Error("traveling experiment: group " + group + " has no scan at reference site " +
                  std::to_string(reference_site) + "; available sites: " +
                  available_sites(cohort));
    const SubjectVolume& gt = cohort.volumes[ref_it->second];
    for (const auto& [site, vi] : sites) {
      if (site == reference_site) continue;
      const SubjectVolume& src = cohort.volumes[vi];
      TravelingReport::Row row;
      row.subject_id = cohort.manifest[vi].subject_id;
      row.source_site = site;
      row.before = ssim_volume(src, gt, p);
      row.after = ssim_volume(model::harmonize(m, src, gt), gt, p);
      before.push_back(row.before);
      after.push_back(row.after);
      rep.rows.push_back(std::move(row));
    }
  }
  require(!rep.rows.empty(), "traveling experiment: no non-reference scans to evaluate");
  rep.before_mean = mean_of(before);
  rep.before_std = population_std(before, rep.before_mean);
  rep.after_mean = mean_of(after);
  rep.after_std = population_std(after, rep.after_mean);
  return rep;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::ofstream open_out(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path path = fs::path(dir) / name;
  std::ofstream f(path);
  require(f.good(), "cannot open report file " + path.string());
  return f;
}

nlohmann::json cv_json(const KFoldResult& cv) {
  nlohmann::json j;
  j["mean_accuracy"] = cv.mean_accuracy;
  j["std_accuracy"] = cv.std_accuracy;
  j["mean_auc"] = cv.mean_auc;
  j["std_auc"] = cv.std_auc;
  j["auc_folds"] = cv.auc_folds;
  j["folds"] = cv.folds.size();
  return j;
}

void write_scatter(const std::string& dir, const std::string& name,
                   const std::vector<PcaRow>& rows) {
  auto f = open_out(dir, name);
  f << "subject_id,site_id,pc1,pc2\n";
  for (const auto& r : rows)
    f << r.subject_id << ',' << r.site_id << ',' << fmt(r.pc1) << ',' << fmt(r.pc2) << '\n';
}

}  // namespace

void write_site_report(const SiteReport& r, const std::string& dir) {
  auto csv = open_out(dir, "site_classification.csv");
  csv << "subject_id,site_id,predicted_raw,predicted_harmonized\n";
  for (std::size_t i = 0; i < r.subject_ids.size(); ++i) {
    csv << r.subject_ids[i] << ',' << r.site_labels[i] << ',' << r.raw_cv.predictions[i] << ',';
    if (r.has_harmonized) csv << r.harmonized_cv.predictions[i];
    csv << '\n';
  }

  nlohmann::json j;
  j["selected_features"] = r.selected;
  j["selection_fallback"] = r.selection_fallback;
  j["raw"] = cv_json(r.raw_cv);
  if (r.has_harmonized) {
    j["harmonized"] = cv_json(r.harmonized_cv);
    j["delta"] = {{"accuracy", r.harmonized_cv.mean_accuracy - r.raw_cv.mean_accuracy},
                  {"auc", r.harmonized_cv.mean_auc - r.raw_cv.mean_auc}};
  }
  open_out(dir, "site_classification.json") << j.dump(2) << '\n';

  write_scatter(dir, "pca_raw.csv", r.raw_scatter);
  if (r.has_harmonized) write_scatter(dir, "pca_harmonized.csv", r.harmonized_scatter);
}

void write_patient_report(const PatientReport& r, const std::string& dir) {
  auto csv = open_out(dir, "patient_classification.csv");
  csv << "sites,n_sites,n_samples,raw_accuracy,raw_auc,harmonized_accuracy,harmonized_auc\n";
  for (const auto& s : r.subsets) {
    std::string sites;
    for (int v : s.sites) {
      if (!sites.empty()) sites += '|';
      sites += std::to_string(v);
    }
    csv << sites << ',' << s.sites.size() << ',' << s.n_samples << ',' << fmt(s.raw_accuracy)
        << ',' << (s.raw_auc ? fmt(*s.raw_auc) : "") << ','
        << (r.has_harmonized ? fmt(s.harmonized_accuracy) : "") << ','
        << (s.harmonized_auc ? fmt(*s.harmonized_auc) : "") << '\n';
  }

  nlohmann::json j;
  j["has_harmonized"] = r.has_harmonized;
  j["by_size"] = nlohmann::json::array();
  for (const auto& a : r.by_size) {
    nlohmann::json e;
    e["size"] = a.size;
    e["count"] = a.count;
    e["raw"] = {{"mean_auc", a.raw_mean}, {"std_auc", a.raw_std}};
    if (r.has_harmonized) {
      e["harmonized"] = {{"mean_auc", a.harm_mean}, {"std_auc", a.harm_std}};
      e["delta_mean_auc"] = a.harm_mean - a.raw_mean;
    }
    j["by_size"].push_back(e);
  }
  open_out(dir, "patient_classification.json") << j.dump(2) << '\n';
}

void write_traveling_report(const TravelingReport& r, const std::string& dir) {
  auto csv = open_out(dir, "traveling_ssim.csv");
  csv << "subject_id,source_site,ssim_before,ssim_after\n";
  for (const auto& row : r.rows)
    csv << row.subject_id << ',' << row.source_site << ',' << fmt(row.before) << ','
        << fmt(row.after) << '\n';

  nlohmann::json j;
  j["reference_site"] = r.reference_site;
  j["n_pairs"] = r.rows.size();
  j["before"] = {{"mean", r.before_mean}, {"std", r.before_std}};
  j["after"] = {{"mean", r.after_mean}, {"std", r.after_std}};
  j["delta_mean"] = r.after_mean - r.before_mean;
  open_out(dir, "traveling_ssim.json") << j.dump(2) << '\n';
}

}  // namespace imunity::eval
