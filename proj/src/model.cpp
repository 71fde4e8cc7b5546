#include "imunity/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>

#include "imunity/preprocess.hpp"

namespace imunity::model {

using json = nlohmann::json;
using synth::SubjectVolume;

// ---------------------------------------------------------------------------
// ArchConfig JSON
// ---------------------------------------------------------------------------

json ArchConfig::to_json() const {
  return json{{"image_size", image_size},   {"base_width", base_width},
              {"d_c", d_c},                 {"n_sites", n_sites},
              {"bio_features", bio_features}, {"non_saturating", non_saturating}};
}

ArchConfig ArchConfig::from_json(const json& j) {
  ArchConfig a;
  a.image_size = j.at("image_size").get<int>();
  a.base_width = j.at("base_width").get<int>();
  a.d_c = j.at("d_c").get<int>();
  a.n_sites = j.at("n_sites").get<int>();
  a.bio_features = j.at("bio_features").get<std::vector<std::string>>();
  a.non_saturating = j.at("non_saturating").get<bool>();
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

ImUnityModel::ImUnityModel(const ArchConfig& a, std::uint64_t init_seed) : arch(a), seed(init_seed) {
  arch.validate();
  Rng root(init_seed);
  Rng rg = root.split("gen"), rd = root.split("disc"), rs = root.split("site"),
      rb = root.split("bio");
  gen = Generator<F>(arch, rg);
  disc = Discriminator<F>(arch, rd);
  site = SiteModule<F>(arch, rs);
  bio = BioModule<F>(arch, rb);

  // Aliased handles: entries share storage with the module parameters.
  gen.collect("gen", cache_gen_);
  bio.collect("bio", cache_gen_);  // bio head trains with the generator
  disc.collect("disc", cache_disc_);
  site.collect("site", cache_site_);
  for (auto* list : {&cache_gen_, &cache_disc_, &cache_site_})
    for (auto& kv : *list) kv.second.set_tracked(true);
}

nn::NamedParams<F> ImUnityModel::named_params() const {
  nn::NamedParams<F> out;
  gen.collect("gen", out);
  disc.collect("disc", out);
  site.collect("site", out);
  bio.collect("bio", out);
  return out;
}

namespace {

std::vector<TensorT<F>*> pointers_of(nn::NamedParams<F>& named) {
  std::vector<TensorT<F>*> out;
  out.reserve(named.size());
  for (auto& kv : named) out.push_back(&kv.second);
  return out;
}

}  // namespace

std::vector<TensorT<F>*> ImUnityModel::gen_params() { return pointers_of(cache_gen_); }
std::vector<TensorT<F>*> ImUnityModel::disc_params() { return pointers_of(cache_disc_); }
std::vector<TensorT<F>*> ImUnityModel::site_params() { return pointers_of(cache_site_); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct Draw {
  int vol = 0;
  int s1 = 0, s2 = 0;
  float gamma = 1.f;
};

TensorT<F> slice_tensor(const std::vector<const std::vector<float>*>& slices, int h, int w) {
  const int n = static_cast<int>(slices.size());
  TensorT<F> t = TensorT<F>::zeros({n, 1, h, w});
  for (int i = 0; i < n; ++i)
    std::copy(slices[i]->begin(), slices[i]->end(), t.data() + static_cast<std::int64_t>(i) * h * w);
  return t;
}

TensorT<F> from_rows(const std::vector<std::vector<float>>& rows, int h, int w) {
  const int n = static_cast<int>(rows.size());
  TensorT<F> t = TensorT<F>::zeros({n, 1, h, w});
  for (int i = 0; i < n; ++i)
    std::copy(rows[i].begin(), rows[i].end(), t.data() + static_cast<std::int64_t>(i) * h * w);
  return t;
}

TensorT<F> noise_like(int n, int d, Rng& rng) {
  TensorT<F> t = TensorT<F>::zeros({n, d});
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<F>(rng.normal());
  return t;
}

double finite_item(const TensorT<F>& t, const char* what) {
  const double v = static_cast<double>(t.item());
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite; training diverged");
  return v;
}

}  // namespace

std::vector<EpochLosses> train_model(ImUnityModel& m, const std::vector<SubjectVolume>& volumes,
                                     const TrainConfig& cfg) {
  const ArchConfig& arch = m.arch;
  if (volumes.empty()) throw ConfigError("train: no volumes given");
  if (cfg.epochs < 0) throw ConfigError("train: negative epoch count");
  if (cfg.batch < 1) throw ConfigError("train: batch must be >= 1");
  if (cfg.slices_per_subject < 1) throw ConfigError("train: slices_per_subject must be >= 1");

  // Usable volumes: matching geometry, valid site, at least two kept slices
  // (a pair needs distinct s1/s2 from the same subject).
  struct Entry {
    int vol;
    std::vector<int> kept;
  };
  std::vector<Entry> usable;
  std::vector<bool> site_seen(static_cast<std::size_t>(arch.n_sites), false);
  for (int v = 0; v < static_cast<int>(volumes.size()); ++v) {
    const SubjectVolume& sv = volumes[v];
    if (sv.height != arch.image_size || sv.width != arch.image_size)
      throw ConfigError("train: volume " + sv.meta.subject_id + " is " + std::to_string(sv.height) +
                        "x" + std::to_string(sv.width) + ", model expects " +
                        std::to_string(arch.image_size));
    if (sv.meta.site_id < 0 || sv.meta.site_id >= arch.n_sites)
      throw ConfigError("train: volume " + sv.meta.subject_id + " has site_id " +
                        std::to_string(sv.meta.site_id) + " outside [0," +
                        std::to_string(arch.n_sites) + ")");
    site_seen[static_cast<std::size_t>(sv.meta.site_id)] = true;
    auto kept = prep::filter_slices(sv);
    if (kept.size() >= 2) usable.push_back({v, std::move(kept)});
  }
  if (usable.empty()) throw ConfigError("train: no volume has two or more usable slices");

  const int n_sites_present =
      static_cast<int>(std::count(site_seen.begin(), site_seen.end(), true));
  if (n_sites_present == 1 && cfg.weights.lambda2 != 0.0)
    std::cerr << "warning: single-site cohort; the confusion loss is constant and "
                 "site unlearning has no effect\n";

  const bool bio_on = cfg.bio_enabled && !arch.bio_features.empty();
  LossWeights w = cfg.weights;
  if (!bio_on) w.lambda3 = 0.0;
  m.weights = w;

  const int h = arch.image_size, wd = arch.image_size;
  const int n_feat = static_cast<int>(arch.bio_features.size());

  nn::Adam<F> opt_disc(static_cast<F>(cfg.lr)), opt_site(static_cast<F>(cfg.lr)),
      opt_gen(static_cast<F>(cfg.lr));
  auto p_gen = m.gen_params();
  auto p_disc = m.disc_params();
  auto p_site = m.site_params();

  // The log resumes alongside the model: append (without a header) when the
  // model has already been trained into this file's epoch range.
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    const bool append = m.epochs_trained > 0;
    log.open(cfg.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw Error("cannot open training log " + cfg.log_path);
    if (!append || log.tellp() == std::ofstream::pos_type(0))
      log << "epoch,l_disc,l_site,l_conf,l_bio,l_1,l_kl,l_gen\n";
  }

  std::vector<EpochLosses> history;
  history.reserve(static_cast<std::size_t>(cfg.epochs));

  for (int e = 1; e <= cfg.epochs; ++e) {
    const std::int64_t epoch_no = m.epochs_trained + e;
    Rng er = Rng(cfg.seed).split("epoch").split(static_cast<std::uint64_t>(epoch_no));

    // Pair draws: slices_per_subject (s1, s2) pairs per usable volume.
    std::vector<Draw> draws;
    draws.reserve(usable.size() * static_cast<std::size_t>(cfg.slices_per_subject));
    for (const Entry& en : usable) {
      const int k = static_cast<int>(en.kept.size());
      for (int r = 0; r < cfg.slices_per_subject; ++r) {
        Draw d;
        d.vol = en.vol;
        const int i1 = er.uniform_int(0, k - 1);
        int i2 = er.uniform_int(0, k - 2);
        if (i2 >= i1) ++i2;  // distinct second slice
        d.s1 = en.kept[static_cast<std::size_t>(i1)];
        d.s2 = en.kept[static_cast<std::size_t>(i2)];
        d.gamma = static_cast<float>(prep::sample_gamma(er, cfg.gamma_lo, cfg.gamma_hi));
        draws.push_back(d);
      }
    }
    er.shuffle(draws);

    EpochLosses acc;
    acc.epoch = epoch_no;
    int steps = 0;

    for (std::size_t start = 0; start < draws.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const int n = static_cast<int>(
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), draws.size() - start));

      // Assemble the minibatch.
      std::vector<const std::vector<float>*> s1_rows(static_cast<std::size_t>(n));
      std::vector<std::vector<float>> s2g_rows(static_cast<std::size_t>(n)),
          tgt_rows(static_cast<std::size_t>(n));
      std::vector<int> sites(static_cast<std::size_t>(n));
      TensorT<F> bio_targets =
          bio_on ? TensorT<F>::zeros({n, n_feat}) : TensorT<F>::zeros({1});
      for (int i = 0; i < n; ++i) {
        const Draw& d = draws[start + static_cast<std::size_t>(i)];
        const SubjectVolume& sv = volumes[static_cast<std::size_t>(d.vol)];
        s1_rows[static_cast<std::size_t>(i)] = &sv.slices[static_cast<std::size_t>(d.s1)];
        tgt_rows[static_cast<std::size_t>(i)] =
            prep::gamma_transform(sv.slices[static_cast<std::size_t>(d.s1)], d.gamma);
        s2g_rows[static_cast<std::size_t>(i)] =
            prep::gamma_transform(sv.slices[static_cast<std::size_t>(d.s2)], d.gamma);
        sites[static_cast<std::size_t>(i)] = sv.meta.site_id;
        if (bio_on)
          for (int f = 0; f < n_feat; ++f)
            bio_targets.data()[i * n_feat + f] =
                static_cast<F>(sv.meta.label(arch.bio_features[static_cast<std::size_t>(f)]));
      }
      TensorT<F> s1_t = slice_tensor(s1_rows, h, wd);
      TensorT<F> s2g_t = from_rows(s2g_rows, h, wd);
      TensorT<F> tgt_t = from_rows(tgt_rows, h, wd);
      TensorT<F> ones = TensorT<F>::full({n, 1}, F(1));
      TensorT<F> zeros = TensorT<F>::zeros({n, 1});

      // Shared no-grad generator pass: fake images for phase (a), detached
      // latent code for phase (b).
      TensorT<F> eps_a = noise_like(n, arch.d_c, er);
      LatentCode<F> code_ng = m.gen.encode(nullptr, s1_t, s2g_t, eps_a);
      TensorT<F> fake = m.gen.decode(nullptr, code_ng);

      // Phase (a): discriminator on real targets vs generated images.
      {
        Tape<F> tape;
        auto p_real = m.disc(&tape, tgt_t);
        auto p_fake = m.disc(&tape, fake);
        auto l_d = ad::scale(&tape,
                             ad::add(&tape, bce_loss(&tape, p_real, ones),
                                     bce_loss(&tape, p_fake, zeros)),
                             F(0.5));
        acc.l_disc += finite_item(l_d, "discriminator loss");
        tape.backward(l_d);
        opt_disc.step(p_disc);
        nn::zero_grads(p_disc);
      }

      // Phase (b): site module on the detached latent code.
      {
        Tape<F> tape;
        auto summary = latent_summary(&tape, code_ng);
        auto probs = m.site(&tape, summary);
        auto l_s = site_loss(&tape, probs, sites);
        acc.l_site += finite_item(l_s, "site loss");
        tape.backward(l_s);
        opt_site.step(p_site);
        nn::zero_grads(p_site);
      }

      // Phase (c): generator (+ bio head) against frozen discriminator and
      // site module; gradients flow through them into the generator only.
      {
        nn::set_tracked(p_disc, false);
        nn::set_tracked(p_site, false);
        Tape<F> tape;
        TensorT<F> eps_c = noise_like(n, arch.d_c, er);
        LatentCode<F> code = m.gen.encode(&tape, s1_t, s2g_t, eps_c);
        auto out = m.gen.decode(&tape, code);

        auto p_fake = m.disc(&tape, out);
        // Eq 4 uses -lambda1 * (discriminator loss on fakes labeled fake);
        // the non-saturating variant feeds the equivalent flipped-label term.
        auto l_dterm = arch.non_saturating
                           ? ad::scale(&tape, bce_loss(&tape, p_fake, ones), F(-1))
                           : bce_loss(&tape, p_fake, zeros);

        auto summary = latent_summary(&tape, code);
        auto l_conf = confusion_loss(&tape, m.site(&tape, summary));
        auto l_b = bio_on ? bio_loss(&tape, m.bio(&tape, summary), bio_targets)
                          : TensorT<F>::scalar(F(0));
        auto l_1 = l1_loss_bbox(&tape, out, tgt_t);
        auto l_k = kl_loss(&tape, code.mu, code.logvar);
        auto l_g = generator_loss(&tape, l_dterm, l_conf, l_b, l_1, l_k, w);

        acc.l_conf += finite_item(l_conf, "confusion loss");
        acc.l_bio += bio_on ? finite_item(l_b, "bio loss") : 0.0;
        acc.l_1 += finite_item(l_1, "reconstruction loss");
        acc.l_kl += finite_item(l_k, "KL loss");
        acc.l_gen += finite_item(l_g, "generator loss");

        tape.backward(l_g);
        opt_gen.step(p_gen);
        nn::zero_grads(p_gen);
        nn::set_tracked(p_disc, true);
        nn::set_tracked(p_site, true);
      }
      ++steps;
    }

    if (steps > 0) {
      acc.l_disc /= steps;
      acc.l_site /= steps;
      acc.l_conf /= steps;
      acc.l_bio /= steps;
      acc.l_1 /= steps;
      acc.l_kl /= steps;
      acc.l_gen /= steps;
    }
    history.push_back(acc);
    if (log.is_open()) {
      log << acc.epoch << ',' << acc.l_disc << ',' << acc.l_site << ',' << acc.l_conf << ','
          << acc.l_bio << ',' << acc.l_1 << ',' << acc.l_kl << ',' << acc.l_gen << '\n';
      log.flush();
    }
  }

  m.epochs_trained += cfg.epochs;
  return history;
}

// ---------------------------------------------------------------------------
// Harmonization
// ---------------------------------------------------------------------------

SubjectVolume harmonize(const ImUnityModel& m, const SubjectVolume& source,
                        const SubjectVolume& reference) {
  const ArchConfig& arch = m.arch;
  if (source.height != arch.image_size || source.width != arch.image_size ||
      reference.height != arch.image_size || reference.width != arch.image_size)
    throw ConfigError("harmonize: volume geometry does not match the model");

  const auto kept_src = prep::filter_slices(source);
  const auto kept_ref = prep::filter_slices(reference);
  if (kept_ref.empty())
    throw Error("harmonize: reference volume " + reference.meta.subject_id +
                " has no usable slices");
  std::vector<bool> is_kept(static_cast<std::size_t>(source.slice_count()), false);
  for (int k : kept_src) is_kept[static_cast<std::size_t>(k)] = true;

  const int h = arch.image_size, w = arch.image_size;
  SubjectVolume out = source;  // meta, masks, and pass-through slices
  TensorT<F> eps = TensorT<F>::zeros({1, arch.d_c});

  for (int i = 0; i < source.slice_count(); ++i) {
    if (!is_kept[static_cast<std::size_t>(i)]) continue;  // pass through unchanged
    // Contrast comes from the reference slice at the matched index, or the
    // nearest usable one (ties resolve to the lower index).
    int best = kept_ref[0];
    for (int k : kept_ref)
      if (std::abs(k - i) < std::abs(best - i)) best = k;

    std::vector<const std::vector<float>*> s1{&source.slices[static_cast<std::size_t>(i)]};
    std::vector<const std::vector<float>*> s2{&reference.slices[static_cast<std::size_t>(best)]};
    auto code = m.gen.encode(nullptr, slice_tensor(s1, h, w), slice_tensor(s2, h, w), eps);
    auto img = m.gen.decode(nullptr, code);
    std::copy(img.data(), img.data() + static_cast<std::int64_t>(h) * w,
              out.slices[static_cast<std::size_t>(i)].begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// IMUC checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

struct ByteReader {
  std::vector<unsigned char> bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size())
      throw FormatError(FormatError::Kind::Truncated,
                        std::string("checkpoint truncated while reading ") + what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
};

constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const ImUnityModel& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);

  json desc = m.arch.to_json();
  desc["loss_weights"] = {{"lambda1", m.weights.lambda1}, {"lambda2", m.weights.lambda2},
                          {"lambda3", m.weights.lambda3}, {"lambda4", m.weights.lambda4},
                          {"lambda5", m.weights.lambda5}};
  desc["seed"] = m.seed;
  desc["epochs_trained"] = m.epochs_trained;
  const std::string js = desc.dump();

  os.write("IMUC", 4);
  put_u16(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(js.size()));
  os.write(js.data(), static_cast<std::streamsize>(js.size()));

  auto named = m.named_params();
  for (auto& kv : named) {
    put_u16(os, static_cast<std::uint16_t>(kv.first.size()));
    os.write(kv.first.data(), static_cast<std::streamsize>(kv.first.size()));
    put_u64(os, static_cast<std::uint64_t>(kv.second.size()));
    for (std::int64_t i = 0; i < kv.second.size(); ++i) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(kv.second.data()[i]);
      put_u32(os, bits);
    }
  }
  if (!os) throw Error("failed writing checkpoint " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  ByteReader r;
  r.bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());

  r.need(4, "magic");
  if (!std::equal(r.bytes.begin(), r.bytes.begin() + 4, "IMUC"))
    throw FormatError(FormatError::Kind::BadMagic, "not an IMUC checkpoint: " + path);
  r.pos = 4;
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t jlen = r.u32("descriptor length");
  r.need(jlen, "descriptor");
  CheckpointData data;
  try {
    data.descriptor = json::parse(r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                                  r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + jlen));
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Other,
                      std::string("checkpoint descriptor is not valid JSON: ") + e.what());
  }
  r.pos += jlen;

  while (r.pos < r.bytes.size()) {
    const std::uint16_t nlen = r.u16("blob name length");
    r.need(nlen, "blob name");
    std::string name(r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                     r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + nlen));
    r.pos += nlen;
    const std::uint64_t count = r.u64("blob element count");
    if (count > (std::size_t(1) << 32))
      throw FormatError(FormatError::Kind::Overflow,
                        "checkpoint blob " + name + " is implausibly large");
    std::vector<float> vals(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i)
      vals[static_cast<std::size_t>(i)] = std::bit_cast<float>(r.u32("blob data"));
    data.blobs.emplace_back(std::move(name), std::move(vals));
  }
  return data;
}

void apply_checkpoint(ImUnityModel& m, const CheckpointData& data) {
  auto named = m.named_params();
  if (named.size() != data.blobs.size())
    throw Error("architecture descriptor mismatch: model has " + std::to_string(named.size()) +
                " parameter blobs, checkpoint has " + std::to_string(data.blobs.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, vals] = data.blobs[i];
    if (named[i].first != name)
      throw Error("architecture descriptor mismatch: expected blob '" + named[i].first +
                  "', checkpoint has '" + name + "'");
    if (static_cast<std::int64_t>(vals.size()) != named[i].second.size())
      throw Error("architecture descriptor mismatch: blob '" + name + "' has " +
                  std::to_string(vals.size()) + " values, model expects " +
                  std::to_string(named[i].second.size()));
    std::copy(vals.begin(), vals.end(), named[i].second.data());
  }
}

ImUnityModel load_checkpoint(const std::string& path) {
  CheckpointData data = read_checkpoint(path);
  ArchConfig arch;
  std::uint64_t seed = 0;
  try {
    arch = ArchConfig::from_json(data.descriptor);
    seed = data.descriptor.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Other,
                      std::string("checkpoint descriptor is missing fields: ") + e.what());
  }
  ImUnityModel m(arch, seed);
  if (data.descriptor.contains("loss_weights")) {
    const json& lw = data.descriptor["loss_weights"];
    m.weights.lambda1 = lw.value("lambda1", m.weights.lambda1);
    m.weights.lambda2 = lw.value("lambda2", m.weights.lambda2);
    m.weights.lambda3 = lw.value("lambda3", m.weights.lambda3);
    m.weights.lambda4 = lw.value("lambda4", m.weights.lambda4);
    m.weights.lambda5 = lw.value("lambda5", m.weights.lambda5);
  }
  m.epochs_trained = data.descriptor.value("epochs_trained", std::int64_t(0));
  apply_checkpoint(m, data);
  return m;
}

}  // namespace imunity::model
