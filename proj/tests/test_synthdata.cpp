#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "imunity/synthdata.hpp"

using namespace imunity;
using namespace imunity::synth;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

SubjectMeta demo_meta(int status) {
  SubjectMeta m;
  m.subject_id = "sub-000";
  m.site_id = 0;
  m.bio_labels["status"] = status;
  m.bio_labels["sex"] = 1;
  m.age_years = 41.5;
  return m;
}

double mask_mean(const SubjectVolume& v, Tissue t) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < v.slice_count(); ++k) {
    const auto& pix = v.slices[static_cast<std::size_t>(k)];
    const auto& msk = v.masks[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < pix.size(); ++i) {
      if (msk[i] == static_cast<std::uint8_t>(t)) {
        sum += pix[i];
        ++n;
      }
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::size_t count_label(const SubjectVolume& v, Tissue t) {
  std::size_t n = 0;
  for (const auto& m : v.masks)
    for (auto b : m)
      if (b == static_cast<std::uint8_t>(t)) ++n;
  return n;
}

}  // namespace

TEST_CASE("phantom determinism and anatomy") {
  auto v1 = make_phantom(demo_meta(1), 42, 8, 64);
  auto v2 = make_phantom(demo_meta(1), 42, 8, 64);
  REQUIRE(v1.slice_count() == 8);
  CHECK(v1.height == 64);
  CHECK(v1.width == 64);
  for (int k = 0; k < 8; ++k) {
    CHECK(v1.slices[k] == v2.slices[k]);
    CHECK(v1.masks[k] == v2.masks[k]);
  }

  auto v3 = make_phantom(demo_meta(1), 43, 8, 64);
  CHECK(v1.slices[4] != v3.slices[4]);

  CHECK(count_label(v1, Tissue::Lesion) > 0);
  CHECK(count_label(make_phantom(demo_meta(0), 42, 8, 64), Tissue::Lesion) == 0);

  // mask-restricted mean oracle: WM intensity near its 0.75 base
  const double wm = mask_mean(v1, Tissue::WM);
  CHECK(wm >= 0.70);
  CHECK(wm <= 0.80);

  // background pixels are exactly zero
  for (std::size_t i = 0; i < v1.slices[0].size(); ++i)
    if (v1.masks[0][i] == 0) CHECK(v1.slices[0][i] == 0.0f);

  CHECK_THROWS_AS(make_phantom(demo_meta(0), 1, 8, 16), ConfigError);
  CHECK_THROWS_AS(make_phantom(demo_meta(0), 1, 2, 64), ConfigError);
}

TEST_CASE("site effect identity and monotonicity") {
  auto v = make_phantom(demo_meta(0), 7, 6, 64);

  SiteEffect identity;  // gamma 1, mix 0, amp 0, sigma 0
  auto w = apply_site_effect(v, identity, 1);
  for (int k = 0; k < v.slice_count(); ++k) CHECK(w.slices[k] == v.slices[k]);

  auto effects = make_site_effects(3, 99);
  REQUIRE(effects.size() == 3);
  for (const auto& e : effects) {
    // strictly increasing transfer over a dense grid
    double prev = e.transfer(0.0);
    CHECK(prev == doctest::Approx(0.0).epsilon(1e-12));
    for (int i = 1; i <= 200; ++i) {
      const double t = e.transfer(i / 200.0);
      CHECK(t > prev);
      prev = t;
    }
    CHECK(e.transfer(1.0) == doctest::Approx(1.0));
  }

  // noise-free effect preserves WM > GM > CSF ordering of mask means
  SiteEffect quiet = effects[1];
  quiet.noise_sigma = 0.0;
  auto q = apply_site_effect(v, quiet, 5);
  CHECK(mask_mean(q, Tissue::WM) > mask_mean(q, Tissue::GM));
  CHECK(mask_mean(q, Tissue::GM) > mask_mean(q, Tissue::CSF));

  auto a = apply_site_effect(v, effects[0], 11);
  auto b = apply_site_effect(v, effects[0], 11);
  auto c = apply_site_effect(v, effects[0], 12);
  for (int k = 0; k < v.slice_count(); ++k) CHECK(a.slices[k] == b.slices[k]);
  CHECK(a.slices[0] != c.slices[0]);
  CHECK(a.masks == v.masks);  // masks are carried through unchanged
}

TEST_CASE("cohort assembly") {
  CohortConfig cfg;
  cfg.n_subjects = 40;
  cfg.n_sites = 4;
  cfg.n_traveling = 0;
  cfg.slice_count = 4;
  cfg.size = 32;
  cfg.seed = 3;
  auto cohort = make_cohort(cfg);
  REQUIRE(cohort.manifest.size() == 40);
  REQUIRE(cohort.volumes.size() == 40);
  std::vector<int> per_site(4, 0);
  for (const auto& row : cohort.manifest) {
    per_site[static_cast<std::size_t>(row.site_id)]++;
    CHECK(row.travel_group.empty());
  }
  for (int s = 0; s < 4; ++s) CHECK(per_site[s] == 10);

  auto again = make_cohort(cfg);
  for (std::size_t i = 0; i < cohort.manifest.size(); ++i) {
    CHECK(cohort.manifest[i].subject_id == again.manifest[i].subject_id);
    CHECK(cohort.manifest[i].site_id == again.manifest[i].site_id);
    CHECK(cohort.manifest[i].status == again.manifest[i].status);
    CHECK(cohort.manifest[i].sex == again.manifest[i].sex);
    CHECK(cohort.manifest[i].path == again.manifest[i].path);
    CHECK(cohort.volumes[i].slices == again.volumes[i].slices);
  }

  // traveling subjects: same anatomy (masks) under every site's effect
  cfg.n_subjects = 2;
  cfg.n_traveling = 1;
  cfg.n_sites = 3;
  auto trav = make_cohort(cfg);
  REQUIRE(trav.manifest.size() == 2 + 3);
  std::vector<std::size_t> renders;
  for (std::size_t i = 0; i < trav.manifest.size(); ++i)
    if (!trav.manifest[i].travel_group.empty()) renders.push_back(i);
  REQUIRE(renders.size() == 3);
  for (std::size_t i = 1; i < renders.size(); ++i) {
    CHECK(trav.volumes[renders[i]].masks == trav.volumes[renders[0]].masks);
    CHECK(trav.volumes[renders[i]].slices != trav.volumes[renders[0]].slices);
    CHECK(trav.manifest[renders[i]].subject_id == trav.manifest[renders[0]].subject_id);
  }

  CohortConfig bad = cfg;
  bad.n_sites = 0;
  CHECK_THROWS_AS(make_cohort(bad), ConfigError);
}

TEST_CASE("volume round-trip and format errors") {
  auto v = make_phantom(demo_meta(1), 21, 4, 32);
  const std::string path = tmp_path("imunity_test_vol.imuv");
  save_volume(path, v);
  auto r = load_volume(path);

  CHECK(r.height == v.height);
  CHECK(r.width == v.width);
  CHECK(r.slice_count() == v.slice_count());
  CHECK(r.slices == v.slices);  // bit-exact
  CHECK(r.masks == v.masks);
  CHECK(r.meta.subject_id == v.meta.subject_id);
  CHECK(r.meta.site_id == v.meta.site_id);
  CHECK(r.meta.bio_labels == v.meta.bio_labels);
  CHECK(r.meta.age_years == doctest::Approx(v.meta.age_years));

  // corrupted magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  try {
    load_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind == FormatError::Kind::BadMagic);
  }

  // bad version
  save_volume(path, v);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char v9[2] = {9, 0};
    f.write(v9, 2);
  }
  try {
    load_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind == FormatError::Kind::BadVersion);
  }

  // declared slices but missing payload -> truncation
  save_volume(path, v);
  {
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full - v.slices[0].size());  // drop part of the masks
  }
  try {
    load_volume(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind == FormatError::Kind::Truncated);
  }

  // dimension overflow on save
  SubjectVolume huge = v;
  huge.height = 70000;
  try {
    save_volume(path, huge);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.kind == FormatError::Kind::Overflow);
  }
  std::filesystem::remove(path);
}

TEST_CASE("manifest round-trip") {
  std::vector<ManifestRow> rows;
  rows.push_back({"sub-000", 0, 1, 0, "sub-000_site-0.imuv", "", 0});
  rows.push_back({"trav-00", 2, 0, 1, "trav-00_site-2.imuv", "trav-00", 1});
  const std::string path = tmp_path("imunity_test_manifest.csv");
  save_manifest(path, rows);

  {
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "subject_id,site_id,status,sex,path,travel_group,preprocessed");
  }

  auto r = load_manifest(path);
  REQUIRE(r.size() == 2);
  CHECK(r[0].subject_id == "sub-000");
  CHECK(r[0].site_id == 0);
  CHECK(r[0].status == 1);
  CHECK(r[0].travel_group.empty());
  CHECK(r[0].preprocessed == 0);
  CHECK(r[1].subject_id == "trav-00");
  CHECK(r[1].site_id == 2);
  CHECK(r[1].sex == 1);
  CHECK(r[1].travel_group == "trav-00");
  CHECK(r[1].preprocessed == 1);

  {
    std::ofstream f(path, std::ios::trunc);
    f << "wrong,header\n";
  }
  CHECK_THROWS_AS(load_manifest(path), FormatError);
  std::filesystem::remove(path);
}
