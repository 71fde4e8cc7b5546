#include "imunity/synthdata.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace imunity::synth {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Site effect
// ---------------------------------------------------------------------------

double SiteEffect::transfer(double v) const {
  const double lo = 1.0 / (1.0 + std::exp(slope * midpoint));
  const double hi = 1.0 / (1.0 + std::exp(-slope * (1.0 - midpoint)));
  const double sig = 1.0 / (1.0 + std::exp(-slope * (v - midpoint)));
  const double logistic = (sig - lo) / (hi - lo);  // normalized to fix 0 and 1
  return (1.0 - mix) * std::pow(v, gamma) + mix * logistic;
}

double SiteEffect::bias_field(double x, double y) const {
  double norm = 0.0;
  for (double c : bias_coef) norm += std::abs(c);
  if (norm == 0.0) return 1.0;
  const double p =
      (bias_coef[0] * x + bias_coef[1] * y + bias_coef[2] * x * x + bias_coef[3] * y * y +
       bias_coef[4] * x * y) /
      norm;  // |p| <= 1 on [-1,1]^2
  return 1.0 + bias_amp * p;
}

// ---------------------------------------------------------------------------
// Phantom generation
// ---------------------------------------------------------------------------

namespace {

constexpr float kCsfIntensity = 0.20f;
constexpr float kGmIntensity = 0.45f;
constexpr float kWmIntensity = 0.75f;
constexpr float kLesionIntensity = 0.55f;

struct LesionBlob {
  double cx, cy;      // center in rotated-normalized brain coordinates
  double ax, ay, az;  // semi-axes (normalized in-plane, slices in z)
  double cz;          // center slice index
};

}  // namespace

SubjectVolume make_phantom(const SubjectMeta& meta, std::uint64_t subject_seed, int slice_count,
                           int size) {
  if (size < 32) throw ConfigError("make_phantom: size must be >= 32, got " + std::to_string(size));
  if (slice_count < 4)
    throw ConfigError("make_phantom: slice_count must be >= 4, got " + std::to_string(slice_count));

  Rng master(subject_seed);
  Rng geom = master.split("geom");
  const double cx = 0.5 * size + geom.uniform(-2.0, 2.0);
  const double cy = 0.5 * size + geom.uniform(-2.0, 2.0);
  const double ax = 0.42 * size * (1.0 + geom.uniform(-0.08, 0.08));
  const double ay = 0.34 * size * (1.0 + geom.uniform(-0.08, 0.08));
  const double theta = geom.uniform(-0.3, 0.3);
  // WM must hold a majority of brain pixels so the intensity median falls
  // inside the WM distribution: the White-Stripe "modal bin above the median"
  // rule then always lands on WM regardless of scanner transfer or lesions.
  const double csf_r = 0.30 * (1.0 + geom.uniform(-0.10, 0.10));
  const double wm_r = 0.84 * (1.0 + geom.uniform(-0.03, 0.03));

  Rng tex = master.split("texture");
  const double ph1 = tex.uniform(0.0, 6.2831853);
  const double ph2 = tex.uniform(0.0, 6.2831853);
  const double f1 = tex.uniform(1.0, 2.5);
  const double f2 = tex.uniform(1.0, 2.5);

  std::vector<LesionBlob> lesions;
  if (meta.label("status") == 1) {
    Rng lrng = master.split("lesions");
    const int n_lesions = lrng.uniform_int(2, 4);
    for (int l = 0; l < n_lesions; ++l) {
      LesionBlob blob;
      const double rad = lrng.uniform(0.40, 0.62);
      const double phi = lrng.uniform(0.0, 6.2831853);
      blob.cx = rad * std::cos(phi);
      blob.cy = rad * std::sin(phi);
      blob.ax = lrng.uniform(0.10, 0.18);
      blob.ay = lrng.uniform(0.10, 0.18);
      blob.cz = lrng.uniform(1.0, slice_count - 2.0);
      blob.az = lrng.uniform(1.5, 3.5);
      lesions.push_back(blob);
    }
  }

  SubjectVolume vol;
  vol.meta = meta;
  vol.height = size;
  vol.width = size;
  vol.slices.resize(static_cast<std::size_t>(slice_count));
  vol.masks.resize(static_cast<std::size_t>(slice_count));

  const double ct = std::cos(theta), st = std::sin(theta);
  for (int k = 0; k < slice_count; ++k) {
    auto& pix = vol.slices[static_cast<std::size_t>(k)];
    auto& msk = vol.masks[static_cast<std::size_t>(k)];
    pix.assign(static_cast<std::size_t>(size) * size, 0.0f);
    msk.assign(static_cast<std::size_t>(size) * size, 0);

    // Head-shape modulation of the in-plane extent along the stack.
    const double z = slice_count > 1 ? -0.9 + 1.8 * k / (slice_count - 1.0) : 0.0;
    const double mz = std::sqrt(1.0 - z * z);

    Rng noise = master.split("noise").split(static_cast<std::uint64_t>(k));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = (x - cx) / ax, dy = (y - cy) / ay;
        const double xr = (ct * dx + st * dy) / mz;
        const double yr = (-st * dx + ct * dy) / mz;
        const double r = std::sqrt(xr * xr + yr * yr);
        const std::size_t at = static_cast<std::size_t>(y) * size + x;
        const double nval = noise.normal(0.0, 0.008);  // drawn for every pixel
        if (r > 1.0) continue;                         // background stays exactly 0

        Tissue tissue;
        float base;
        if (r <= csf_r) {
          tissue = Tissue::CSF;
          base = kCsfIntensity;
        } else if (r <= wm_r) {
          tissue = Tissue::WM;
          base = kWmIntensity;
        } else {
          tissue = Tissue::GM;
          base = kGmIntensity;
        }
        if (tissue == Tissue::WM) {
          for (const auto& b : lesions) {
            const double lx = (xr - b.cx) / b.ax, ly = (yr - b.cy) / b.ay,
                         lz = (k - b.cz) / b.az;
            if (lx * lx + ly * ly + lz * lz <= 1.0) {
              tissue = Tissue::Lesion;
              base = kLesionIntensity;
              break;
            }
          }
        }
        const double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
        const double texture =
            1.0 + 0.02 * std::sin(6.2831853 * (f1 * u) + ph1) * std::sin(6.2831853 * (f2 * v) + ph2);
        const double value = std::max(0.0, base * texture + nval);
        pix[at] = static_cast<float>(value);
        msk[at] = static_cast<std::uint8_t>(tissue);
      }
    }
  }
  return vol;
}

SubjectVolume apply_site_effect(const SubjectVolume& vol, const SiteEffect& effect,
                                std::uint64_t scan_seed) {
  SubjectVolume out = vol;
  out.meta.site_id = effect.site_id;
  Rng master(scan_seed);
  for (int k = 0; k < vol.slice_count(); ++k) {
    Rng noise = master.split(static_cast<std::uint64_t>(k));
    auto& pix = out.slices[static_cast<std::size_t>(k)];
    const auto* msk = vol.has_masks() ? vol.masks[static_cast<std::size_t>(k)].data() : nullptr;
    for (int y = 0; y < vol.height; ++y) {
      for (int x = 0; x < vol.width; ++x) {
        const std::size_t at = static_cast<std::size_t>(y) * vol.width + x;
        const double nval = noise.normal(0.0, effect.noise_sigma);
        const bool brain = msk ? msk[at] != 0 : pix[at] > 0.0f;
        if (!brain) continue;
        const double xn = 2.0 * x / (vol.width - 1.0) - 1.0;
        const double yn = 2.0 * y / (vol.height - 1.0) - 1.0;
        const double v = effect.transfer(static_cast<double>(pix[at])) * effect.bias_field(xn, yn) +
                         nval;
        pix[at] = static_cast<float>(std::max(0.0, v));
      }
    }
  }
  return out;
}

std::vector<SiteEffect> make_site_effects(int n_sites, std::uint64_t seed) {
  if (n_sites < 1) throw ConfigError("make_site_effects: need at least one site");
  Rng master(seed);
  std::vector<SiteEffect> effects;
  effects.reserve(static_cast<std::size_t>(n_sites));
  for (int s = 0; s < n_sites; ++s) {
    Rng rng = master.split(static_cast<std::uint64_t>(s));
    // Deterministic per-site spread plus jitter keeps sites distinct at any S.
    const double t = n_sites == 1 ? 0.5 : static_cast<double>(s) / (n_sites - 1);
    SiteEffect e;
    e.site_id = s;
    e.gamma = 0.62 + 0.85 * t + rng.uniform(-0.02, 0.02);
    e.mix = 0.38 - 0.28 * t + rng.uniform(-0.02, 0.02);
    e.midpoint = 0.42 + 0.23 * t + rng.uniform(-0.02, 0.02);
    e.slope = rng.uniform(7.0, 10.0);
    for (double& c : e.bias_coef) c = rng.uniform(-1.0, 1.0);
    e.bias_amp = rng.uniform(0.10, 0.16);
    e.noise_sigma = rng.uniform(0.034, 0.046);
    effects.push_back(e);
  }
  return effects;
}

Cohort make_cohort(const CohortConfig& cfg) {
  if (cfg.n_sites < 1) throw ConfigError("cohort: site count must be >= 1");
  if (cfg.n_subjects < 0 || cfg.n_traveling < 0)
    throw ConfigError("cohort: subject counts must be non-negative");

  Rng master(cfg.seed);
  Cohort cohort;
  cohort.effects = make_site_effects(cfg.n_sites, master.split("sites").seed());

  auto render = [&](const SubjectMeta& meta, std::uint64_t subject_seed, int site,
                    std::uint64_t scan_seed, const std::string& travel_group) {
    SubjectVolume anat = make_phantom(meta, subject_seed, cfg.slice_count, cfg.size);
    SubjectVolume scanned =
        apply_site_effect(anat, cohort.effects[static_cast<std::size_t>(site)], scan_seed);
    ManifestRow row;
    row.subject_id = meta.subject_id;
    row.site_id = site;
    row.status = meta.label("status");
    row.sex = meta.label("sex");
    row.path = meta.subject_id + "_site-" + std::to_string(site) + ".imuv";
    row.travel_group = travel_group;
    cohort.volumes.push_back(std::move(scanned));
    cohort.manifest.push_back(std::move(row));
  };

  for (int i = 0; i < cfg.n_subjects; ++i) {
    const int site = i % cfg.n_sites;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sub-%03d", i);
    SubjectMeta meta;
    meta.subject_id = buf;
    meta.site_id = site;
    meta.bio_labels["status"] = (i / cfg.n_sites) % 2;  // balanced within each site
    meta.bio_labels["sex"] = master.split("sex").split(static_cast<std::uint64_t>(i)).uniform_int(0, 1);
    meta.age_years = master.split("age").split(static_cast<std::uint64_t>(i)).uniform(20.0, 70.0);
    const std::uint64_t subject_seed =
        master.split("subject").split(static_cast<std::uint64_t>(i)).seed();
    const std::uint64_t scan_seed =
        master.split("scan").split(static_cast<std::uint64_t>(i)).seed();
    render(meta, subject_seed, site, scan_seed, "");
  }

  for (int t = 0; t < cfg.n_traveling; ++t) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "trav-%02d", t);
    SubjectMeta meta;
    meta.subject_id = buf;
    meta.bio_labels["status"] = t % 2;
    meta.bio_labels["sex"] =
        master.split("trav-sex").split(static_cast<std::uint64_t>(t)).uniform_int(0, 1);
    meta.age_years = master.split("trav-age").split(static_cast<std::uint64_t>(t)).uniform(20.0, 70.0);
    const std::uint64_t subject_seed =
        master.split("traveler").split(static_cast<std::uint64_t>(t)).seed();
    for (int s = 0; s < cfg.n_sites; ++s) {
      meta.site_id = s;
      const std::uint64_t scan_seed = master.split("trav-scan")
                                          .split(static_cast<std::uint64_t>(t))
                                          .split(static_cast<std::uint64_t>(s))
                                          .seed();
      render(meta, subject_seed, s, scan_seed, buf);
    }
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// IMUV volume format
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint16_t kImuvVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(FormatError::Kind::Truncated,
                        std::string("volume file truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

}  // namespace

void save_volume(const std::string& path, const SubjectVolume& vol) {
  if (vol.height < 1 || vol.height > 0xffff || vol.width < 1 || vol.width > 0xffff ||
      vol.slice_count() < 1 || vol.slice_count() > 0xffff)
    throw FormatError(FormatError::Kind::Overflow,
                      "volume dimensions out of range for IMUV: " + std::to_string(vol.height) +
                          "x" + std::to_string(vol.width) + "x" + std::to_string(vol.slice_count()));
  const std::size_t px = static_cast<std::size_t>(vol.height) * static_cast<std::size_t>(vol.width);
  for (const auto& s : vol.slices) {
    if (s.size() != px) throw ShapeError("save_volume: slice size mismatch");
    check_finite(s.data(), s.size(), "volume intensities");
  }
  if (vol.has_masks()) {
    if (vol.masks.size() != vol.slices.size())
      throw ShapeError("save_volume: mask count != slice count");
    for (const auto& m : vol.masks)
      if (m.size() != px) throw ShapeError("save_volume: mask size mismatch");
  }

  json meta;
  meta["subject_id"] = vol.meta.subject_id;
  meta["site_id"] = vol.meta.site_id;
  meta["bio_labels"] = vol.meta.bio_labels;
  meta["age"] = vol.meta.age_years;
  const std::string meta_str = meta.dump();

  std::string out;
  out.reserve(64 + meta_str.size() + vol.slices.size() * px * 4);
  out += "IMUV";
  put_u16(out, kImuvVersion);
  put_u16(out, static_cast<std::uint16_t>(vol.height));
  put_u16(out, static_cast<std::uint16_t>(vol.width));
  put_u16(out, static_cast<std::uint16_t>(vol.slice_count()));
  out.push_back(vol.has_masks() ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
  out += meta_str;
  for (const auto& s : vol.slices)
    for (float f : s) put_f32(out, f);
  for (const auto& m : vol.masks)
    for (std::uint8_t b : m) out.push_back(static_cast<char>(b));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write failed: " + path);
}

SubjectVolume load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open volume file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  Reader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "IMUV") != 0)
    throw FormatError(FormatError::Kind::BadMagic, "not an IMUV file: " + path);
  r.pos = 4;
  const std::uint16_t version = r.u16("version");
  if (version != kImuvVersion)
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported IMUV version " + std::to_string(version));
  const int h = r.u16("height");
  const int w = r.u16("width");
  const int n = r.u16("slice_count");
  if (h < 1 || w < 1 || n < 1)
    throw FormatError(FormatError::Kind::Overflow, "IMUV dimensions out of range");
  const std::uint8_t mask_present = r.u8("mask flag");
  if (mask_present > 1)
    throw FormatError(FormatError::Kind::Other, "bad mask-present flag");
  const std::uint32_t mlen = r.u32("metadata length");
  r.need(mlen, "metadata");
  const std::string meta_str = buf.substr(r.pos, mlen);
  r.pos += mlen;

  const json meta = json::parse(meta_str, nullptr, false);
  if (meta.is_discarded() || !meta.is_object() || !meta.contains("subject_id") ||
      !meta.contains("site_id") || !meta.contains("bio_labels") || !meta.contains("age"))
    throw FormatError(FormatError::Kind::Other, "bad IMUV metadata block");

  SubjectVolume vol;
  vol.height = h;
  vol.width = w;
  vol.meta.subject_id = meta["subject_id"].get<std::string>();
  vol.meta.site_id = meta["site_id"].get<int>();
  vol.meta.age_years = meta["age"].get<double>();
  for (auto it = meta["bio_labels"].begin(); it != meta["bio_labels"].end(); ++it)
    vol.meta.bio_labels[it.key()] = it.value().get<int>();

  const std::size_t px = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  vol.slices.resize(static_cast<std::size_t>(n));
  for (auto& s : vol.slices) {
    r.need(px * 4, "slice payload");
    s.resize(px);
    for (std::size_t i = 0; i < px; ++i) s[i] = r.f32("slice payload");
  }
  if (mask_present) {
    vol.masks.resize(static_cast<std::size_t>(n));
    for (auto& m : vol.masks) {
      r.need(px, "mask payload");
      m.resize(px);
      for (std::size_t i = 0; i < px; ++i) m[i] = r.u8("mask payload");
    }
  }
  return vol;
}

// ---------------------------------------------------------------------------
// Manifest CSV
// ---------------------------------------------------------------------------

static const char* kManifestHeader = "subject_id,site_id,status,sex,path,travel_group,preprocessed";

void save_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f << kManifestHeader << '\n';
  for (const auto& r : rows)
    f << r.subject_id << ',' << r.site_id << ',' << r.status << ',' << r.sex << ',' << r.path
      << ',' << r.travel_group << ',' << r.preprocessed << '\n';
  if (!f) throw Error("write failed: " + path);
}

std::vector<ManifestRow> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw FormatError(FormatError::Kind::Truncated, "empty manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw FormatError(FormatError::Kind::Other, "bad manifest header: " + line);

  std::vector<ManifestRow> rows;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 7)
      throw FormatError(FormatError::Kind::Other, "manifest row has " +
                                                      std::to_string(fields.size()) +
                                                      " fields, expected 7");
    ManifestRow row;
    row.subject_id = fields[0];
    try {
      row.site_id = std::stoi(fields[1]);
      row.status = std::stoi(fields[2]);
      row.sex = std::stoi(fields[3]);
      row.preprocessed = std::stoi(fields[6]);
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::Other, "bad numeric field in manifest row");
    }
    row.path = fields[4];
    row.travel_group = fields[5];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace imunity::synth
