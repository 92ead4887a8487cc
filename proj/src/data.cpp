#include "fnse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "fnse/dsp.hpp"
#include "fnse/errors.hpp"
#include "fnse/hash.hpp"
#include "fnse/rng.hpp"

namespace fnse::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kBandEdge = 0.45;  // fraction of the sample rate kept below

// Amplitude exponent for a slope in dB per octave.
double tilt_exponent(double db_per_octave) { return db_per_octave / (20.0 * std::log10(2.0)); }

std::vector<double> syllable_envelope(std::size_t n, int sr, double depth, double rate, double phase) {
  std::vector<double> env(n);
  const std::size_t fade = std::min<std::size_t>(n / 2, static_cast<std::size_t>(0.01 * sr));
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    double e = 1.0 - depth * 0.5 * (1.0 + std::cos(kTwoPi * rate * t + phase));
    if (i < fade) e *= static_cast<double>(i) / static_cast<double>(fade);
    if (n - 1 - i < fade) e *= static_cast<double>(n - 1 - i) / static_cast<double>(fade);
    env[i] = e;
  }
  return env;
}

void scale_to_peak(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m <= 0.0) return;
  const double g = peak / m;
  for (auto& v : x) v *= g;
}

std::uint64_t clean_stream(std::uint64_t seed) { return mix_seed(seed, 0xC1EA); }

}  // namespace

std::string to_string(CleanKind k) {
  switch (k) {
    case CleanKind::harmonic: return "harmonic";
    case CleanKind::speech_shaped_noise: return "speech_shaped_noise";
    case CleanKind::chirp: return "chirp";
  }
  return "harmonic";
}

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::white: return "white";
    case NoiseKind::pink: return "pink";
    case NoiseKind::babble_proxy: return "babble_proxy";
    case NoiseKind::tonal_hum: return "tonal_hum";
  }
  return "white";
}

CleanKind clean_kind_from_string(const std::string& s) {
  if (s == "harmonic") return CleanKind::harmonic;
  if (s == "speech_shaped_noise") return CleanKind::speech_shaped_noise;
  if (s == "chirp") return CleanKind::chirp;
  throw ConfigError("unknown clean kind '" + s + "'");
}

NoiseKind noise_kind_from_string(const std::string& s) {
  for (auto k : all_noise_kinds())
    if (to_string(k) == s) return k;
  throw ConfigError("unknown noise kind '" + s + "'");
}

const std::vector<NoiseKind>& all_noise_kinds() {
  static const std::vector<NoiseKind> kinds{NoiseKind::white, NoiseKind::pink,
                                            NoiseKind::babble_proxy, NoiseKind::tonal_hum};
  return kinds;
}

// ---- clean synthesis

CleanSpec CleanSpec::random(CleanKind kind, std::uint64_t seed, double duration) {
  Rng rng(clean_stream(seed));
  CleanSpec s;
  s.kind = kind;
  s.seed = seed;
  s.duration = duration;
  s.f0 = rng.uniform(100.0, 280.0);
  s.partials = 8 + rng.below(17);
  s.am_depth = rng.uniform(0.3, 0.9);
  s.am_rate = rng.uniform(2.5, 6.0);
  s.fm_depth = rng.uniform(0.0, 0.08);
  s.fm_rate = rng.uniform(0.5, 3.0);
  s.tilt_db_per_octave = rng.uniform(-9.0, -3.0);
  s.chirp_lo = rng.uniform(150.0, 600.0);
  s.chirp_hi = rng.uniform(1200.0, 3400.0);
  if (rng.uniform() < 0.5) std::swap(s.chirp_lo, s.chirp_hi);
  s.peak = rng.uniform(0.3, 0.9);
  return s;
}

std::size_t CleanSpec::samples() const {
  return static_cast<std::size_t>(std::lround(duration * sample_rate));
}

std::vector<double> synth_clean(const CleanSpec& spec) {
  if (!(spec.duration > 0.0) || spec.sample_rate <= 0) throw ValidationError("synth_clean: bad duration");
  const std::size_t n = spec.samples();
  const int sr = spec.sample_rate;
  const double fmax = kBandEdge * sr;
  // Independent of the parameter stream so that explicit specs stay deterministic.
  Rng rng(mix_seed(spec.seed, 0x5EED));
  std::vector<double> x(n, 0.0);
  const double a = tilt_exponent(spec.tilt_db_per_octave);

  switch (spec.kind) {
    case CleanKind::harmonic: {
      const double f1 = rng.uniform(300.0, 900.0), f2 = rng.uniform(900.0, 2500.0);
      const double fm_phase = rng.uniform(0.0, kTwoPi);
      std::vector<double> phase(spec.partials);
      for (auto& p : phase) p = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double f0 = spec.f0 * (1.0 + spec.fm_depth * std::sin(kTwoPi * spec.fm_rate * t + fm_phase));
        double v = 0.0;
        for (std::size_t h = 1; h <= spec.partials; ++h) {
          const double f = static_cast<double>(h) * f0;
          phase[h - 1] += kTwoPi * f / sr;
          if (f >= fmax) continue;
          const double formant = 1.0 + 2.0 * std::exp(-0.5 * std::pow((f - f1) / 150.0, 2)) +
                                 1.5 * std::exp(-0.5 * std::pow((f - f2) / 250.0, 2));
          v += std::pow(static_cast<double>(h), a) * formant * std::sin(phase[h - 1]);
        }
        x[i] = v;
      }
      break;
    }
    case CleanKind::speech_shaped_noise: {
      constexpr std::size_t kComponents = 96;
      for (std::size_t c = 0; c < kComponents; ++c) {
        const double f = 80.0 * std::pow(fmax / 80.0, rng.uniform());
        const double amp = std::pow(f / 100.0, a);
        const double ph = rng.uniform(0.0, kTwoPi);
        const double w = kTwoPi * f / sr;
        for (std::size_t i = 0; i < n; ++i) x[i] += amp * std::sin(w * static_cast<double>(i) + ph);
      }
      break;
    }
    case CleanKind::chirp: {
      const double lo = std::min(spec.chirp_lo, fmax), hi = std::min(spec.chirp_hi, fmax);
      const double ratio = hi / lo;
      double ph = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < n; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(n);
        const double f = lo * std::pow(ratio, u);
        ph += kTwoPi * f / sr;
        double v = 0.0;
        for (int h = 1; h <= 3; ++h)
          if (h * f < fmax) v += std::pow(static_cast<double>(h), a) * std::sin(h * ph);
        x[i] = v;
      }
      break;
    }
  }
  const auto env = syllable_envelope(n, sr, spec.am_depth, spec.am_rate, rng.uniform(0.0, kTwoPi));
  for (std::size_t i = 0; i < n; ++i) x[i] *= env[i];
  scale_to_peak(x, std::clamp(spec.peak, 0.0, 0.9));
  return x;
}

// ---- noise synthesis

std::vector<double> synth_noise(const NoiseSpec& spec, std::size_t n, int sample_rate) {
  Rng rng(mix_seed(spec.seed, 0x4015E));
  std::vector<double> x(n, 0.0);
  switch (spec.kind) {
    case NoiseKind::white:
      for (auto& v : x) v = rng.normal();
      break;
    case NoiseKind::pink: {
      // Kellet's filter bank; the first second is discarded as warm-up.
      double b[7] = {0, 0, 0, 0, 0, 0, 0};
      const std::size_t warm = static_cast<std::size_t>(sample_rate);
      for (std::size_t i = 0; i < n + warm; ++i) {
        const double w = rng.normal();
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        const double p = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
        b[6] = w * 0.115926;
        if (i >= warm) x[i - warm] = p;
      }
      break;
    }
    case NoiseKind::babble_proxy: {
      const double duration = static_cast<double>(n) / sample_rate;
      for (int talker = 0; talker < 6; ++talker) {
        CleanSpec s = CleanSpec::random(CleanKind::harmonic, mix_seed(spec.seed, 100 + talker), duration);
        s.sample_rate = sample_rate;
        s.peak = 0.5;
        const auto v = synth_clean(s);
        for (std::size_t i = 0; i < n && i < v.size(); ++i) x[i] += v[i];
      }
      break;
    }
    case NoiseKind::tonal_hum: {
      const double base = rng.uniform() < 0.5 ? 50.0 : 60.0;
      std::vector<double> ph(15);
      for (auto& p : ph) p = rng.uniform(0.0, kTwoPi);
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t h = 1; h <= ph.size(); ++h) {
          v += std::sin(kTwoPi * base * static_cast<double>(h) * static_cast<double>(i) / sample_rate +
                        ph[h - 1]) /
               static_cast<double>(h);
        }
        x[i] = v + 0.03 * rng.normal();
      }
      break;
    }
  }
  const double p = power(x);
  if (p > 0.0) {
    const double g = 1.0 / std::sqrt(p);
    for (auto& v : x) v *= g;
  }
  return x;
}

double power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

double measured_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy) {
  if (clean.size() != noisy.size()) throw ValidationError("measured_snr_db: length mismatch");
  std::vector<double> n(clean.size());
  for (std::size_t i = 0; i < n.size(); ++i) n[i] = noisy[i] - clean[i];
  return 10.0 * std::log10(power(clean) / power(n));
}

PairedExample mix_at_snr(const std::vector<double>& clean, const std::vector<double>& noise,
                         double snr_db) {
  if (clean.size() != noise.size()) throw ValidationError("mix_at_snr: length mismatch");
  const double pc = power(clean), pn = power(noise);
  if (!(pc > 0.0)) throw ValidationError("mix_at_snr: clean signal has zero power");
  if (!(pn > 0.0)) throw ValidationError("mix_at_snr: noise has zero power");
  if (!std::isfinite(snr_db)) throw ValidationError("mix_at_snr: non-finite snr");
  const double g = std::sqrt(pc / (pn * std::pow(10.0, snr_db / 10.0)));
  PairedExample ex;
  ex.clean = clean;
  ex.noisy.resize(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) ex.noisy[i] = clean[i] + g * noise[i];
  ex.snr_db = snr_db;
  return ex;
}

// ---- corpus

void CorpusConfig::validate() const {
  if (!(duration > 0.0)) throw ConfigError("corpus: duration must be positive");
  if (snrs.empty()) throw ConfigError("corpus: snr grid is empty");
  if (n_train == 0 || n_test == 0) throw ConfigError("corpus: train and test sets must be nonempty");
  if (clean_mix.size() != 3) throw ConfigError("corpus: clean_mix needs three weights");
  double total = 0.0;
  for (double w : clean_mix) {
    if (!(w >= 0.0)) throw ConfigError("corpus: clean_mix weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError("corpus: clean_mix weights sum to zero");
  struct Range {
    const char* name;
    std::uint64_t lo, n;
  };
  const Range r[3] = {{"pretrain", pretrain_seed_base, n_pretrain},
                      {"train", train_seed_base, n_train},
                      {"test", test_seed_base, n_test}};
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) {
      if (r[i].n == 0 || r[j].n == 0) continue;
      const bool disjoint = r[i].lo + r[i].n <= r[j].lo || r[j].lo + r[j].n <= r[i].lo;
      if (!disjoint) {
        throw ConfigError(std::string("corpus: seed ranges of ") + r[i].name + " and " + r[j].name +
                          " overlap");
      }
    }
}

nlohmann::json CorpusConfig::to_json() const {
  return {{"n_pretrain", n_pretrain},
          {"n_train", n_train},
          {"n_test", n_test},
          {"duration", duration},
          {"snrs", snrs},
          {"held_out", to_string(held_out)},
          {"seed", seed},
          {"pretrain_seed_base", pretrain_seed_base},
          {"train_seed_base", train_seed_base},
          {"test_seed_base", test_seed_base},
          {"clean_mix", clean_mix}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.n_pretrain = j.at("n_pretrain");
  c.n_train = j.at("n_train");
  c.n_test = j.at("n_test");
  c.duration = j.at("duration");
  c.snrs = j.at("snrs").get<std::vector<double>>();
  c.held_out = noise_kind_from_string(j.at("held_out"));
  c.seed = j.at("seed");
  c.pretrain_seed_base = j.at("pretrain_seed_base");
  c.train_seed_base = j.at("train_seed_base");
  c.test_seed_base = j.at("test_seed_base");
  c.clean_mix = j.at("clean_mix").get<std::vector<double>>();
  c.validate();
  return c;
}

std::string CorpusConfig::hash() const { return json_hash(to_json()); }

namespace {

CleanKind pick_clean_kind(const CorpusConfig& cfg, std::uint64_t clean_seed) {
  Rng rng(mix_seed(clean_seed, 0x6D1C));
  const double total = cfg.clean_mix[0] + cfg.clean_mix[1] + cfg.clean_mix[2];
  const double u = rng.uniform() * total;
  if (u < cfg.clean_mix[0]) return CleanKind::harmonic;
  if (u < cfg.clean_mix[0] + cfg.clean_mix[1]) return CleanKind::speech_shaped_noise;
  return CleanKind::chirp;
}

std::vector<double> make_clean(const CorpusConfig& cfg, std::uint64_t clean_seed, CleanKind kind) {
  return synth_clean(CleanSpec::random(kind, mix_seed(cfg.seed, clean_seed), cfg.duration));
}

PairedExample make_pair(const CorpusConfig& cfg, const std::string& split, std::size_t i,
                        std::uint64_t clean_seed, const std::vector<NoiseKind>& kinds) {
  Rng rng(mix_seed(mix_seed(cfg.seed, clean_seed), 0xA11));
  const CleanKind ck = pick_clean_kind(cfg, clean_seed);
  const auto clean = make_clean(cfg, clean_seed, ck);
  const NoiseKind nk = split == "test" ? kinds[i % kinds.size()] : kinds[rng.below(kinds.size())];
  const double snr = cfg.snrs[rng.below(cfg.snrs.size())];
  const std::uint64_t noise_seed = mix_seed(cfg.seed ^ 0x9A15EULL, clean_seed);
  PairedExample ex = mix_at_snr(clean, synth_noise({nk, noise_seed}, clean.size()), snr);
  // Joint rescale keeps the mixture inside 16-bit range without changing the SNR.
  double peak = 0.0;
  for (double v : ex.noisy) peak = std::max(peak, std::abs(v));
  if (peak > 0.99) {
    const double g = 0.99 / peak;
    for (auto& v : ex.clean) v *= g;
    for (auto& v : ex.noisy) v *= g;
  }
  ex.id = split + "_" + std::to_string(i);
  ex.clean_seed = clean_seed;
  ex.noise_seed = noise_seed;
  ex.clean_kind = ck;
  ex.noise_kind = nk;
  return ex;
}

nlohmann::json entry_json(const PairedExample& ex, const std::string& split) {
  return {{"id", ex.id},
          {"split", split},
          {"clean_seed", ex.clean_seed},
          {"noise_seed", ex.noise_seed},
          {"snr_db", ex.snr_db},
          {"clean_kind", to_string(ex.clean_kind)},
          {"noise_kind", to_string(ex.noise_kind)},
          {"clean_path", split + "/" + ex.id + "_clean.wav"},
          {"noisy_path", split + "/" + ex.id + "_noisy.wav"}};
}

}  // namespace

Corpus build_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus c;
  c.config = cfg;
  for (std::size_t i = 0; i < cfg.n_pretrain; ++i) {
    const std::uint64_t seed = cfg.pretrain_seed_base + i;
    const CleanKind kind = pick_clean_kind(cfg, seed);
    c.pretrain.push_back({"pretrain_" + std::to_string(i), make_clean(cfg, seed, kind), seed, kind});
  }
  std::vector<NoiseKind> train_kinds;
  for (auto k : all_noise_kinds())
    if (k != cfg.held_out) train_kinds.push_back(k);
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    c.train.push_back(make_pair(cfg, "train", i, cfg.train_seed_base + i, train_kinds));
  }
  // Test cycles through every kind, the held-out one included.
  std::vector<NoiseKind> test_kinds{cfg.held_out};
  for (auto k : train_kinds) test_kinds.push_back(k);
  for (std::size_t i = 0; i < cfg.n_test; ++i) {
    c.test.push_back(make_pair(cfg, "test", i, cfg.test_seed_base + i, test_kinds));
  }
  return c;
}

nlohmann::json Corpus::manifest() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& u : pretrain) {
    entries.push_back({{"id", u.id},
                       {"split", "pretrain"},
                       {"clean_seed", u.seed},
                       {"clean_kind", to_string(u.kind)},
                       {"clean_path", "pretrain/" + u.id + ".wav"}});
  }
  for (const auto& ex : train) entries.push_back(entry_json(ex, "train"));
  for (const auto& ex : test) entries.push_back(entry_json(ex, "test"));
  return {{"config", config.to_json()},
          {"config_hash", config.hash()},
          {"sample_rate", dsp::kSampleRate},
          {"entries", entries}};
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const char* s : {"pretrain", "train", "test"}) fs::create_directories(dir / s);
  for (const auto& u : corpus.pretrain) dsp::write_wav(dir / "pretrain" / (u.id + ".wav"), u.samples);
  for (const auto* split : {&corpus.train, &corpus.test}) {
    const std::string name = split == &corpus.train ? "train" : "test";
    for (const auto& ex : *split) {
      dsp::write_wav(dir / name / (ex.id + "_clean.wav"), ex.clean);
      dsp::write_wav(dir / name / (ex.id + "_noisy.wav"), ex.noisy);
    }
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << corpus.manifest().dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no corpus manifest at " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus manifest: ") + e.what());
  }
  Corpus c;
  c.config = CorpusConfig::from_json(m.at("config"));
  for (const auto& e : m.at("entries")) {
    const std::string split = e.at("split");
    if (split == "pretrain") {
      c.pretrain.push_back({e.at("id"), dsp::read_wav(dir / e.at("clean_path").get<std::string>()),
                            e.at("clean_seed"), clean_kind_from_string(e.at("clean_kind"))});
      continue;
    }
    PairedExample ex;
    ex.id = e.at("id");
    ex.clean = dsp::read_wav(dir / e.at("clean_path").get<std::string>());
    ex.noisy = dsp::read_wav(dir / e.at("noisy_path").get<std::string>());
    ex.snr_db = e.at("snr_db");
    ex.clean_seed = e.at("clean_seed");
    ex.noise_seed = e.at("noise_seed");
    ex.clean_kind = clean_kind_from_string(e.at("clean_kind"));
    ex.noise_kind = noise_kind_from_string(e.at("noise_kind"));
    (split == "train" ? c.train : c.test).push_back(std::move(ex));
  }
  return c;
}

}  // namespace fnse::data
