#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fnse/errors.hpp"
#include "fnse/losses.hpp"
#include "fnse/spectral_ops.hpp"
#include "test_util.hpp"

using namespace fnse;
using namespace fnse::losses;
using ad::Tensor;
using fnse::testing::random_tensor;
using fnse::testing::random_vector;

namespace {

// Batch-pooled SC + mean |log| difference, from the Eigen STFT.
double mstft_oracle(const std::vector<std::vector<double>>& pred,
                    const std::vector<std::vector<double>>& target, const MstftConfig& cfg) {
  double total = 0.0;
  for (std::size_t c = 0; c < cfg.sub_configs.size(); ++c) {
    double num = 0.0, den = 0.0, logsum = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < pred.size(); ++b) {
      const auto sp = dsp::stft(pred[b], cfg.sub_configs[c]);
      const auto st = dsp::stft(target[b], cfg.sub_configs[c]);
      for (std::size_t t = 0; t < sp.frames(); ++t) {
        for (std::size_t k = 0; k < sp.bins(); ++k) {
          const double mp = std::sqrt(sp.real(t, k) * sp.real(t, k) + sp.imag(t, k) * sp.imag(t, k) + cfg.mag_guard);
          const double mt = std::sqrt(st.real(t, k) * st.real(t, k) + st.imag(t, k) * st.imag(t, k) + cfg.mag_guard);
          num += (mt - mp) * (mt - mp);
          den += mt * mt;
          logsum += std::abs(std::log(mt + cfg.eps_log) - std::log(mp + cfg.eps_log));
          ++count;
        }
      }
    }
    total += cfg.weights[c] * (std::sqrt(num) / std::max(std::sqrt(den), cfg.sc_floor) +
                               logsum / static_cast<double>(count));
  }
  return total;
}

}  // namespace

TEST_CASE("time mse against a loop") {
  Rng rng(1);
  const Tensor a = random_tensor({2, 50}, rng), b = random_tensor({2, 50}, rng);
  double s = 0.0;
  for (std::size_t i = 0; i < 100; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(time_mse(a, b).item() == doctest::Approx(s / 100.0).epsilon(1e-14));
  CHECK_THROWS_AS(time_mse(a, random_tensor({2, 49}, rng)), ValidationError);
}

TEST_CASE("cirm target against the eigen reference") {
  Rng rng(2);
  const auto stft = dsp::feature_preset();
  const dsp::CirmConfig cirm;
  const auto noisy = random_vector(900, rng, -0.5, 0.5);
  const auto clean = random_vector(900, rng, -0.5, 0.5);
  const Tensor t = cirm_target(ad::stft(Tensor::from({1, 900}, noisy), stft),
                               ad::stft(Tensor::from({1, 900}, clean), stft), cirm);
  const auto ref = dsp::compress_mask(dsp::compute_cirm(dsp::stft(noisy, stft), dsp::stft(clean, stft), cirm), cirm);
  double worst = 0.0;
  for (std::size_t f = 0; f < t.dim(1); ++f)
    for (std::size_t k = 0; k < t.dim(2); ++k) {
      const std::size_t i = (f * t.dim(2) + k) * 2;
      worst = std::max(worst, std::abs(t[i] - ref.real(f, k)));
      worst = std::max(worst, std::abs(t[i + 1] - ref.imag(f, k)));
    }
  CHECK(worst <= 1e-9);
}

TEST_CASE("mstft against the recomputed reference") {
  Rng rng(3);
  std::vector<std::vector<double>> p{random_vector(1200, rng), random_vector(1200, rng)};
  std::vector<std::vector<double>> t{random_vector(1200, rng), random_vector(1200, rng)};
  auto flat = [](const std::vector<std::vector<double>>& v) {
    std::vector<double> out;
    for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
    return Tensor::from({v.size(), v[0].size()}, out);
  };
  auto cfg = MstftConfig::preset();
  cfg.weights = {1.0, 0.5, 2.0};
  CHECK(mstft_loss(flat(p), flat(t), cfg).item() == doctest::Approx(mstft_oracle(p, t, cfg)).epsilon(1e-10));
}

TEST_CASE("doubling the target gives unit convergence and log 2") {
  Rng rng(4);
  const auto x = random_vector(1600, rng);
  std::vector<double> x2(x);
  for (auto& v : x2) v *= 2.0;
  MstftConfig cfg = MstftConfig::preset();
  cfg.sub_configs = {cfg.sub_configs[0]};
  cfg.weights = {1.0};
  const double l = mstft_loss(Tensor::from({1600}, x2), Tensor::from({1600}, x), cfg).item();
  CHECK(l == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-4));
}

TEST_CASE("mstft ignores sign and is zero on a match") {
  Rng rng(5);
  const auto x = random_vector(1600, rng);
  std::vector<double> neg(x);
  for (auto& v : neg) v = -v;
  const auto cfg = MstftConfig::preset();
  CHECK(mstft_loss(Tensor::from({1600}, neg), Tensor::from({1600}, x), cfg).item() <= 1e-9);
  CHECK_THROWS_AS(mstft_loss(Tensor::from({100}, std::vector<double>(100)),
                             Tensor::from({100}, std::vector<double>(100)), cfg),
                  ValidationError);
}

TEST_CASE("composite loss weights") {
  Rng rng(6);
  const auto stft = dsp::feature_preset();
  const Tensor enhanced = random_tensor({1, 1200}, rng), clean = random_tensor({1, 1200}, rng);
  const Tensor np = ad::stft(enhanced, stft), cp = ad::stft(clean, stft);
  const Tensor pred = random_tensor({1, np.dim(1), stft.bins(), 2}, rng);
  const CompositeInputs in{enhanced, clean, pred, np, cp};
  const auto cfg = MstftConfig::preset();
  const dsp::CirmConfig cirm;

  const auto all = composite_loss(in, {2.0, 3.0, 0.5}, upstream::Family::generative, cfg, cirm);
  const double want = 2.0 * cirm_loss(pred, np, cp, cirm).item() + 3.0 * time_mse(enhanced, clean).item() +
                      0.5 * mstft_loss(enhanced, clean, cfg).item();
  CHECK(all.total.item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(all.breakdown.mstft.size() == 3);

  // cIRM is not applicable to the contrastive family.
  const auto con = composite_loss(in, {5.0, 1.0, 0.0}, upstream::Family::contrastive, cfg, cirm);
  CHECK(con.total.item() == doctest::Approx(time_mse(enhanced, clean).item()).epsilon(1e-14));
  CHECK_THROWS_AS(composite_loss(in, {1.0, 0.0, 0.0}, upstream::Family::contrastive, cfg, cirm), ConfigError);
  CHECK_THROWS_AS(composite_loss(in, {-1.0, 1.0, 1.0}, upstream::Family::generative, cfg, cirm), ConfigError);
}

TEST_CASE("loss log rows") {
  const auto dir = std::filesystem::temp_directory_path() / "fnse_loss_log";
  std::filesystem::create_directories(dir);
  {
    LossLog log(dir / "log.csv");
    LossBreakdown b{1.5, 0.5, 0.25, {0.1, 0.2, 0.3}};
    log.append(7, b, 0.5);
  }
  std::ifstream in(dir / "log.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == LossLog::header());
  CHECK(row.rfind("7,", 0) == 0);
  std::filesystem::remove_all(dir);
}
