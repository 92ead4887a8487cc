#include <doctest.h>

#include <complex>
#include <filesystem>
#include <numbers>

#include "fnse/dsp.hpp"
#include "fnse/errors.hpp"
#include "test_util.hpp"

using namespace fnse;
using namespace fnse::dsp;
using fnse::testing::random_vector;
using fnse::testing::rel_l2;

namespace {

// Direct DFT of the windowed single frame, independent of the FFT path.
std::vector<std::complex<double>> direct_dft(const std::vector<double>& x, std::size_t bins) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i) /
                                        static_cast<double>(n));
    }
    out[k] = acc;
  }
  return out;
}

ComplexSpectrogram random_spec(std::size_t frames, std::size_t bins, Rng& rng) {
  ComplexSpectrogram s;
  s.real = Matrix::NullaryExpr(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins),
                               [&] { return rng.uniform(-1, 1); });
  s.imag = Matrix::NullaryExpr(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins),
                               [&] { return rng.uniform(-1, 1); });
  return s;
}

}  // namespace

TEST_CASE("stft config validation") {
  CHECK_NOTHROW(feature_preset());
  CHECK(feature_preset().bins() == 257);
  CHECK_THROWS_AS(StftConfig::make(128, 256, 64), ConfigError);
  CHECK_THROWS_AS(StftConfig::make(256, 200, 200), ConfigError);
  CHECK_THROWS_AS(StftConfig::make(256, 200, 30), ConfigError);
  CHECK_THROWS_AS(StftConfig::make(16, 10, 3, Window::rect), ConfigError);
  CHECK_NOTHROW(StftConfig::make(16, 10, 5, Window::rect));
}

TEST_CASE("stft frame count and errors") {
  const auto cfg = feature_preset();
  const std::vector<double> x(8000, 0.0);
  const auto s = stft(x, cfg);
  // 8000 + 2*100 = 8200; (8200 - 200) / 40 + 1
  CHECK(s.frames() == 201);
  CHECK(s.bins() == 257);
  CHECK(s.real.cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.imag.cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(stft(std::vector<double>(150, 0.0), cfg), ValidationError);
  std::vector<double> bad(1000, 0.0);
  bad[10] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(stft(bad, cfg), ValidationError);
}

TEST_CASE("stft is linear: scaling by two is exact") {
  Rng rng(1);
  const auto x = random_vector(2000, rng);
  std::vector<double> x2(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) x2[i] = 2.0 * x[i];
  const auto a = stft(x, feature_preset());
  const auto b = stft(x2, feature_preset());
  CHECK((b.real - 2.0 * a.real).cwiseAbs().maxCoeff() == 0.0);
  CHECK((b.imag - 2.0 * a.imag).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cosine on a bin centre concentrates in that bin") {
  const std::size_t n = 64, k0 = 5;
  const auto cfg = StftConfig::make(n, n, n / 2, Window::rect, false);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::cos(2.0 * std::numbers::pi * static_cast<double>(k0 * i) / static_cast<double>(n));
  }
  const auto s = stft(x, cfg);
  REQUIRE(s.frames() == 1);
  const auto oracle = direct_dft(x, cfg.bins());
  double peak = std::hypot(s.real(0, k0), s.imag(0, k0));
  CHECK(peak == doctest::Approx(n / 2.0).epsilon(1e-12));
  for (std::size_t k = 0; k < cfg.bins(); ++k) {
    CHECK(std::abs(s.real(0, k) - oracle[k].real()) <= 1e-9);
    CHECK(std::abs(s.imag(0, k) - oracle[k].imag()) <= 1e-9);
    if (k != k0) CHECK(std::hypot(s.real(0, k), s.imag(0, k)) <= 1e-8 * peak);
  }
}

TEST_CASE("istft reconstructs for every shipped preset") {
  Rng rng(2);
  const auto cfgs = mstft_presets();
  for (const auto& cfg : cfgs) {
    for (std::size_t len : {std::size_t{4096}, 4 * cfg.win_size + 7}) {
      const auto x = random_vector(len, rng);
      const auto y = istft(stft(x, cfg));
      REQUIRE(y.size() == x.size());
      CHECK(rel_l2(y, x) <= 1e-6);
    }
  }
}

TEST_CASE("istft of zero and impulse") {
  const auto cfg = feature_preset();
  ComplexSpectrogram z;
  z.config = cfg;
  z.source_length = 1000;
  z.real = Matrix::Zero(static_cast<Eigen::Index>(cfg.frames(1000)), 257);
  z.imag = z.real;
  for (double v : istft(z)) CHECK(v == 0.0);

  std::vector<double> imp(1000, 0.0);
  imp[437] = 1.0;
  const auto y = istft(stft(imp, cfg));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - imp[i]) <= 1e-6);

  z.real.resize(3, 257);
  z.imag.resize(3, 257);
  CHECK_THROWS_AS(istft(z), ValidationError);
}

TEST_CASE("Parseval with window-power correction") {
  // Tone burst with silent edges so the reflect padding carries no energy.
  const auto cfg = feature_preset();
  const std::size_t n = 4000;
  std::vector<double> x(n, 0.0);
  for (std::size_t i = 600; i < 3400; ++i) {
    const double env = std::sin(std::numbers::pi * static_cast<double>(i - 600) / 2800.0);
    x[i] = env * (std::sin(0.3 * static_cast<double>(i)) + 0.4 * std::cos(1.1 * static_cast<double>(i)));
  }
  double energy = 0.0;
  for (double v : x) energy += v * v;
  const auto s = stft(x, cfg);
  double spec = 0.0;
  for (Eigen::Index t = 0; t < s.real.rows(); ++t) {
    for (Eigen::Index k = 0; k < s.real.cols(); ++k) {
      const double c = (k == 0 || k == s.real.cols() - 1) ? 1.0 : 2.0;
      spec += c * (s.real(t, k) * s.real(t, k) + s.imag(t, k) * s.imag(t, k));
    }
  }
  double wpow = 0.0;
  for (double w : cfg.window_values()) wpow += w * w;
  const double estimate = spec / static_cast<double>(cfg.fft_size) / (wpow / static_cast<double>(cfg.hop));
  CHECK(std::abs(estimate - energy) / energy <= 1e-4);
}

TEST_CASE("cIRM computation") {
  CirmConfig cc;
  Rng rng(3);
  auto y = random_spec(4, 4, rng);
  SUBCASE("identical spectrograms give a unit mask") {
    const auto m = compute_cirm(y, y, cc);
    CHECK((m.real.array() - 1.0).abs().maxCoeff() <= 1e-10);
    CHECK(m.imag.cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("rotation by i gives mask i") {
    auto s = y;
    s.real = -y.imag;
    s.imag = y.real;
    const auto m = compute_cirm(y, s, cc);
    CHECK(m.real.cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((m.imag.array() - 1.0).abs().maxCoeff() <= 1e-10);
  }
  SUBCASE("mask times noisy equals clean (per-bin division oracle)") {
    const auto s = random_spec(4, 4, rng);
    const auto m = compute_cirm(y, s, cc);
    for (int t = 0; t < 4; ++t) {
      for (int k = 0; k < 4; ++k) {
        const std::complex<double> yy(y.real(t, k), y.imag(t, k));
        const std::complex<double> ss(s.real(t, k), s.imag(t, k));
        const std::complex<double> mm(m.real(t, k), m.imag(t, k));
        CHECK(std::abs(mm * yy - ss) <= 1e-10);
        CHECK(std::abs(mm - ss / yy) <= 1e-10);
      }
    }
    const auto back = apply_mask(y, m);
    CHECK((back.real - s.real).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((back.imag - s.imag).cwiseAbs().maxCoeff() <= 1e-9);
  }
  SUBCASE("shape mismatch") {
    const auto s = random_spec(3, 4, rng);
    CHECK_THROWS_AS(compute_cirm(y, s, cc), ValidationError);
    CHECK_THROWS_AS(apply_mask(y, ComplexMask{s.real, s.imag}), ValidationError);
  }
}

TEST_CASE("mask compression") {
  CirmConfig cc;  // K = 10, C = 0.1
  CHECK(compress_value(0.0, cc) == 0.0);
  CHECK(compress_value(1e6, cc) == doctest::Approx(10.0));
  CHECK(compress_value(1e6, cc) <= 10.0);
  // 10 (1 - e^-0.1) / (1 + e^-0.1), 40-digit reference
  CHECK(std::abs(compress_value(1.0, cc) - 0.4995837495787997219838636) <= 1e-15);

  SUBCASE("odd, bounded, strictly increasing on a grid") {
    double prev = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 10000; ++i) {
      const double m = -100.0 + 200.0 * i / 9999.0;
      const double c = compress_value(m, cc);
      CHECK(c == -compress_value(-m, cc));
      CHECK(std::abs(c) < cc.K);
      CHECK(c > prev);
      prev = c;
    }
  }
  SUBCASE("decompression inverts compression") {
    CHECK(decompress_value(0.0, cc) == 0.0);
    CHECK(std::abs(decompress_value(compress_value(5.0, cc), cc) - 5.0) <= 1e-8);
    CHECK(std::abs(decompress_value(0.49958, cc) - 1.0) <= 1e-4);
    double worst = 0.0;
    for (int i = 0; i <= 10000; ++i) {
      const double m = -50.0 + 100.0 * i / 10000.0;
      worst = std::max(worst, std::abs(decompress_value(compress_value(m, cc), cc) - m));
    }
    CHECK(worst <= 1e-8);
  }
  SUBCASE("out-of-range components") {
    CHECK(std::isfinite(decompress_value(10.0, cc)));
    CHECK(std::isfinite(decompress_value(-25.0, cc)));
    CirmConfig strict = cc;
    strict.clamp = false;
    CHECK_THROWS_AS(decompress_value(10.0, strict), NumericError);
    CHECK_NOTHROW(decompress_value(9.99, strict));
  }
}

TEST_CASE("apply_mask identity and zero") {
  Rng rng(4);
  const auto y = random_spec(5, 3, rng);
  ComplexMask one{Matrix::Ones(5, 3), Matrix::Zero(5, 3)};
  const auto same = apply_mask(y, one);
  CHECK(same.real == y.real);
  CHECK(same.imag == y.imag);
  ComplexMask zero{Matrix::Zero(5, 3), Matrix::Zero(5, 3)};
  CHECK(apply_mask(y, zero).real.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("oracle enhancement on real spectrograms") {
  Rng rng(5);
  const auto clean = random_vector(3000, rng, -0.5, 0.5);
  auto noisy = clean;
  for (auto& v : noisy) v += rng.uniform(-0.3, 0.3);
  const auto Y = stft(noisy, feature_preset());
  const auto S = stft(clean, feature_preset());
  const auto est = apply_mask(Y, compute_cirm(Y, S, CirmConfig{}));
  double worst = 0.0;
  for (Eigen::Index t = 0; t < Y.real.rows(); ++t) {
    for (Eigen::Index k = 0; k < Y.real.cols(); ++k) {
      const double p = Y.real(t, k) * Y.real(t, k) + Y.imag(t, k) * Y.imag(t, k);
      // the mask's denominator guard shifts bins by about eps/|Y|^2 relative
      const double allow = 1e-9 + 2e-12 / p * std::hypot(S.real(t, k), S.imag(t, k));
      const double err = std::max(std::abs(est.real(t, k) - S.real(t, k)),
                                  std::abs(est.imag(t, k) - S.imag(t, k)));
      worst = std::max(worst, err / allow);
    }
  }
  CHECK(worst <= 1.0);
}

TEST_CASE("wav round trip") {
  Rng rng(6);
  const auto x = random_vector(800, rng, -0.9, 0.9);
  const auto path = std::filesystem::temp_directory_path() / "fnse_test.wav";
  write_wav(path, x);
  int sr = 0;
  const auto y = read_wav(path, &sr);
  CHECK(sr == 8000);
  REQUIRE(y.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) <= 1.0 / 32767.0);
  std::filesystem::remove(path);
}
