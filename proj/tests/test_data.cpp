#include <doctest.h>

#include <complex>
#include <filesystem>
#include <numbers>
#include <set>

#include "fnse/data.hpp"
#include "fnse/errors.hpp"

using namespace fnse;
using namespace fnse::data;

namespace {

CorpusConfig tiny() {
  CorpusConfig c;
  c.n_pretrain = 4;
  c.n_train = 8;
  c.n_test = 8;
  c.duration = 0.5;
  return c;
}

double tone_power(const std::vector<double>& x, double freq, int sr) {
  std::complex<double> acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * freq * static_cast<double>(i) / sr);
  }
  return std::norm(acc);
}

}  // namespace

TEST_CASE("mixing hits the requested snr") {
  CleanSpec spec;
  const auto clean = synth_clean(spec);
  for (auto kind : all_noise_kinds()) {
    const auto noise = synth_noise({kind, 3}, clean.size());
    for (double snr : {-5.0, 0.0, 7.5, 20.0}) {
      const auto ex = mix_at_snr(clean, noise, snr);
      CHECK(measured_snr_db(ex.clean, ex.noisy) == doctest::Approx(snr).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(mix_at_snr(clean, std::vector<double>(clean.size(), 0.0), 0.0), ValidationError);
  CHECK_THROWS_AS(mix_at_snr(clean, std::vector<double>(3, 1.0), 0.0), ValidationError);
}

TEST_CASE("harmonic source puts its energy on multiples of f0") {
  CleanSpec spec;
  spec.f0 = 200.0;
  spec.fm_depth = 0.0;
  spec.am_depth = 0.0;
  const auto x = synth_clean(spec);
  CHECK(x.size() == 8000);
  const double off = tone_power(x, 300.0, 8000);
  for (int h = 1; h <= 3; ++h) CHECK(tone_power(x, 200.0 * h, 8000) > 100.0 * off);
}

TEST_CASE("sources respect the peak bound") {
  for (auto kind : {CleanKind::harmonic, CleanKind::speech_shaped_noise, CleanKind::chirp}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto x = synth_clean(CleanSpec::random(kind, seed, 0.5));
      double peak = 0.0;
      for (double v : x) peak = std::max(peak, std::abs(v));
      CHECK(peak <= 0.9 + 1e-12);
      CHECK(peak > 0.0);
    }
  }
}

TEST_CASE("corpus is deterministic and seeds are disjoint") {
  const auto a = build_corpus(tiny());
  const auto b = build_corpus(tiny());
  CHECK(a.manifest() == b.manifest());
  CHECK(a.train[3].noisy == b.train[3].noisy);
  std::set<std::uint64_t> seeds;
  for (const auto& u : a.pretrain) seeds.insert(u.seed);
  for (const auto& p : a.train) seeds.insert(p.clean_seed);
  for (const auto& p : a.test) seeds.insert(p.clean_seed);
  CHECK(seeds.size() == 4 + 8 + 8);

  auto other = tiny();
  other.seed = 1;
  CHECK(build_corpus(other).train[0].clean != a.train[0].clean);

  auto clash = tiny();
  clash.train_seed_base = clash.pretrain_seed_base + 2;
  CHECK_THROWS_AS(clash.validate(), ConfigError);
}

TEST_CASE("held-out noise only appears in the test split") {
  const auto c = build_corpus(tiny());
  for (const auto& p : c.train) CHECK(p.noise_kind != c.config.held_out);
  bool seen = false;
  for (const auto& p : c.test) seen = seen || p.noise_kind == c.config.held_out;
  CHECK(seen);
  for (const auto& p : c.train) {
    CHECK(std::find(c.config.snrs.begin(), c.config.snrs.end(), p.snr_db) != c.config.snrs.end());
    CHECK(measured_snr_db(p.clean, p.noisy) == doctest::Approx(p.snr_db).epsilon(1e-9));
  }
}

TEST_CASE("write and load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "fnse_corpus_rt";
  std::filesystem::remove_all(dir);
  const auto c = build_corpus(tiny());
  write_corpus(c, dir);
  const auto back = load_corpus(dir);
  CHECK(back.config.to_json() == c.config.to_json());
  REQUIRE(back.train.size() == c.train.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < c.train.size(); ++i)
    for (std::size_t t = 0; t < c.train[i].noisy.size(); ++t)
      worst = std::max(worst, std::abs(back.train[i].noisy[t] - c.train[i].noisy[t]));
  // 16-bit quantization
  CHECK(worst <= 1.0 / 32768.0);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_corpus(dir), ConfigError);
}

TEST_CASE("corpus config json round trip and validation") {
  auto c = tiny();
  CHECK(CorpusConfig::from_json(c.to_json()).hash() == c.hash());
  c.snrs.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(noise_kind_from_string("rain"), ConfigError);
}
