#include <doctest.h>

#include <cmath>

#include "fnse/errors.hpp"
#include "fnse/featnorm.hpp"
#include "test_util.hpp"

using namespace fnse;
using namespace fnse::featnorm;
using ad::Tensor;
using fnse::testing::max_abs_diff;
using fnse::testing::random_tensor;

namespace {

upstream::EncoderConfig small(upstream::Family f) {
  upstream::EncoderConfig c;
  c.family = f;
  c.d = 16;
  c.heads = 2;
  c.layers = 3;
  c.ff = 32;
  c.conv_channels = {4, 4, 8, 8};
  return c;
}

BatchStats constant_stats(double mu, double sigma, double mu_n, double sigma_n, std::size_t d = 2) {
  return {std::vector<double>(d, mu), std::vector<double>(d, sigma), std::vector<double>(d, mu_n),
          std::vector<double>(d, sigma_n)};
}

}  // namespace

TEST_CASE("batch stats worked example") {
  // Rows (1, 10), (3, 10), (5, 10): mean (3, 10), population std (sqrt(8/3), floor).
  const Tensor x = Tensor::from({3, 2}, {1, 10, 3, 10, 5, 10});
  const auto s = batch_stats(x);
  CHECK(s.mean[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(s.mean[1] == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(s.std[0] == doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-15));
  CHECK(s.std[1] == kEpsStd);
  CHECK_THROWS_AS(batch_stats(Tensor::from({1, 2}, {1, 2})), ValidationError);
}

TEST_CASE("batch stats pool every leading axis") {
  Rng rng(1);
  const Tensor x = random_tensor({2, 5, 3}, rng);
  const auto s = batch_stats(x);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 10; ++i) m += x[i * 3 + j];
    m /= 10.0;
    double v = 0.0;
    for (std::size_t i = 0; i < 10; ++i) v += (x[i * 3 + j] - m) * (x[i * 3 + j] - m);
    CHECK(std::abs(s.mean[j] - m) <= 1e-14);
    CHECK(std::abs(s.std[j] - std::sqrt(v / 10.0)) <= 1e-14);
  }
}

TEST_CASE("ema: first batch initializes, later ones blend") {
  NormState s;
  s = ema_update(s, constant_stats(1.0, 2.0, 3.0, 4.0));
  CHECK(s.initialized);
  CHECK(s.mu[0] == 1.0);
  CHECK(s.mu_n[0] == 3.0);
  CHECK(s.r[0] == 2.0);
  s = ema_update(s, constant_stats(2.0, 1.0, 5.0, 1.0));
  CHECK(s.mu[0] == doctest::Approx(0.99 * 1.0 + 0.01 * 2.0).epsilon(1e-15));
  CHECK(s.mu_n[0] == doctest::Approx(0.99 * 3.0 + 0.01 * 5.0).epsilon(1e-15));
  CHECK(s.r[0] == doctest::Approx(0.999 * 2.0 + 0.001 * 1.0).epsilon(1e-15));
  CHECK(s.updates == 2);

  auto bad = constant_stats(1.0, 1.0, 1.0, 1.0);
  bad.mu_hat[0] = std::nan("");
  CHECK_THROWS_AS(ema_update(s, bad), NumericError);
  CHECK_THROWS_AS(ema_update(s, constant_stats(1, 1, 1, 1, 3)), ValidationError);
}

TEST_CASE("renormalize worked example and k = 0 identity") {
  NormState s;
  s.mu = {1.0};
  s.mu_n = {3.0};
  s.r = {2.0};
  s.initialized = true;
  const Tensor x = Tensor::from({2, 1}, {1.0, 2.0});
  // k = 1: 2x + (3 - 2) = (3, 5)
  const Tensor y = renormalize(x, s, 1.0);
  CHECK(y[0] == 3.0);
  CHECK(y[1] == 5.0);
  // k = 0.5: midpoint of x and the k = 1 output
  const Tensor h = renormalize(x, s, 0.5);
  CHECK(h[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(h[1] == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(renormalize(x, NormState{}, 0.0).vec() == x.vec());
  CHECK_THROWS_AS(renormalize(x, NormState{}, 0.5), StateError);
  CHECK_THROWS_AS(renormalize(x, s, 1.5), ValidationError);
}

TEST_CASE("renormalize passes gradient through the affine map only") {
  NormState s;
  s.mu = {0.5, -1.0};
  s.mu_n = {0.0, 2.0};
  s.r = {3.0, 0.5};
  s.initialized = true;
  Rng rng(2);
  Tensor x = random_tensor({4, 2}, rng, -1, 1, true);
  ad::sum(renormalize(x, s, 0.25)).backward();
  const auto g = x.grad();
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(g[i * 2] == doctest::Approx(1.0 + 0.25 * 2.0).epsilon(1e-15));
    CHECK(g[i * 2 + 1] == doctest::Approx(1.0 - 0.25 * 0.5).epsilon(1e-15));
  }
}

TEST_CASE("linear k schedule") {
  KSchedule ks{1.0, 100};
  CHECK(k_at(ks, 0) == 1.0);
  CHECK(k_at(ks, 50) == doctest::Approx(0.5));
  CHECK(k_at(ks, 100) == 0.0);
  CHECK(k_at(ks, 250) == 0.0);
  KSchedule half{0.5, 10};
  CHECK(k_at(half, 5) == doctest::Approx(0.25));
  CHECK_THROWS_AS((KSchedule{1.5, 10}.validate()), ConfigError);
  CHECK_THROWS_AS((KSchedule{1.0, 0}.validate()), ConfigError);
  CHECK(default_k0(KPreset::mockingjay) == 1.0);
  CHECK(default_k0(KPreset::tera) == 0.8);
  CHECK(default_k0(KPreset::contrastive) == 0.5);
  CHECK_THROWS_AS(kpreset_from_string("nope"), ConfigError);
}

TEST_CASE("empty plan has no depth") {
  NormPlan p;
  CHECK_THROWS_AS(p.depth(), StateError);
  p.layers = {0, 2};
  CHECK(p.depth() == 2);
}

TEST_CASE("dual forward") {
  for (auto f : {upstream::Family::generative, upstream::Family::contrastive}) {
    CAPTURE(upstream::to_string(f));
    Rng rng(3);
    auto enc = upstream::make_encoder(small(f), rng);
    upstream::FrozenPrefix frozen(*enc, 2);
    Rng data(4);
    const Tensor noisy = enc->prepare(random_tensor({2, 800}, data, -0.5, 0.5));
    const Tensor clean = enc->prepare(random_tensor({2, 800}, data, -0.5, 0.5));
    const auto plain = enc->forward_with_taps(noisy);

    SUBCASE("empty plan matches the plain forward") {
      NormPlan plan;
      const auto out = normed_dual_forward(*enc, frozen, noisy, clean, plan, 0);
      CHECK(out.final.vec() == plain.final.vec());
    }
    SUBCASE("k pinned to zero matches the plain forward bitwise") {
      NormPlan plan;
      plan.layers = {0, 1};
      plan.k_override = 0.0;
      const auto out = normed_dual_forward(*enc, frozen, noisy, clean, plan, 0);
      CHECK(out.final.vec() == plain.final.vec());
      CHECK(plan.states.at(0).initialized);
    }
    SUBCASE("momentum zero, k = 1 reproduces clean batch stats") {
      for (std::size_t layer : {0u, 1u}) {
        NormPlan plan;
        plan.layers = {layer};
        plan.beta_m = 0.0;
        plan.beta_r = 0.0;
        plan.k_override = 1.0;
        const auto out = normed_dual_forward(*enc, frozen, noisy, clean, plan, 0);
        const auto got = batch_stats(out.taps[layer]);
        const auto want = batch_stats(frozen.taps(clean)[layer]);
        CHECK(max_abs_diff(got.mean, want.mean) <= 1e-10);
        CHECK(max_abs_diff(got.std, want.std) <= 1e-10);
      }
    }
    SUBCASE("plan deeper than the prefix is rejected") {
      NormPlan plan;
      plan.layers = {3};
      CHECK_THROWS_AS(normed_dual_forward(*enc, frozen, noisy, clean, plan, 0), ConfigError);
    }
    SUBCASE("statistics carry no gradient") {
      NormPlan plan;
      plan.layers = {1};
      const auto out = normed_dual_forward(*enc, frozen, noisy, clean, plan, 0);
      ad::sum(out.final).backward();
      for (auto* p : frozen.encoder().parameters()) CHECK_FALSE(p->tensor.has_grad());
    }
  }
}
