#pragma once

// Intensity preprocessing: [0,1] rescaling, White-Stripe WM-peak alignment
// to 0.7, gamma contrast transformation, histogram utilities, and the 1%
// brain-fraction slice filter. Brain pixels are the strictly positive ones;
// background is exactly 0 throughout the pipeline.

#include <cstdint>
#include <string>
#include <vector>

#include "imunity/rng.hpp"
#include "imunity/synthdata.hpp"

namespace imunity::prep {

using synth::SubjectVolume;

struct Histogram {
  int bin_count = 256;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::int64_t> counts;
  std::vector<double> smoothed;  // centered moving average, window 5

  double bin_width() const { return (hi - lo) / bin_count; }
  double bin_lo(int i) const { return lo + i * bin_width(); }
  double bin_hi(int i) const { return lo + (i + 1) * bin_width(); }
  double bin_center(int i) const { return lo + (i + 0.5) * bin_width(); }
};

// Out-of-range values are clamped into the edge bins, so counts always sum
// to the number of pixels supplied.
Histogram histogram(const std::vector<float>& pixels, int bin_count = 256, double lo = 0.0,
                    double hi = 1.0);

// CSV columns: bin_lo,bin_hi,count,smoothed
void save_histogram_csv(const std::string& path, const Histogram& h);

// Linear min->0, max->1 map over brain (>0) pixels of one slice; background
// stays 0. Throws on a constant brain region.
std::vector<float> rescale_unit(const std::vector<float>& pixels);

// Same map with min/max pooled over all slices, keeping the volume's slices
// on a common scale.
SubjectVolume rescale_volume(const SubjectVolume& vol);

struct WhiteStripeResult {
  SubjectVolume vol;
  double peak = 0.0;   // detected WM peak (bin center)
  double scale = 0.0;  // multiplier applied (0.7 / peak)
};

// WM peak = argmax of the smoothed intensity histogram restricted to bins
// above the brain median, refined to sub-bin precision by parabolic
// interpolation of the neighboring smoothed counts; every intensity is
// scaled by 0.7/peak and clipped to [0, 1.4]. Expects a volume already
// rescaled to [0,1].
WhiteStripeResult white_stripe(const SubjectVolume& vol, int bin_count = 256);

// out = max * (in/max)^gamma over one slice; fixed points at 0 and max.
std::vector<float> gamma_transform(const std::vector<float>& pixels, double gamma);

// Uniform gamma in [lo, hi]; training default [0.5, 1.5].
double sample_gamma(Rng& rng, double lo = 0.5, double hi = 1.5);

// Fraction of brain pixels; uses the tissue mask when given, else the >0 rule.
double brain_fraction(const std::vector<float>& pixels,
                      const std::vector<std::uint8_t>* mask = nullptr);

// Indices of slices with brain_fraction >= min_fraction (inclusive).
std::vector<int> filter_slices(const SubjectVolume& vol, double min_fraction = 0.01);

}  // namespace imunity::prep
