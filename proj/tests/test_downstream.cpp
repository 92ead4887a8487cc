#include <doctest.h>

#include <complex>

#include "fnse/downstream.hpp"
#include "fnse/errors.hpp"
#include "fnse/losses.hpp"
#include "fnse/model.hpp"
#include "fnse/optim.hpp"
#include "fnse/spectral_ops.hpp"
#include "test_util.hpp"

using namespace fnse;
using namespace fnse::downstream;
using ad::Tensor;
using fnse::testing::max_abs_diff;
using fnse::testing::random_tensor;

namespace {

upstream::EncoderConfig small(upstream::Family f) {
  upstream::EncoderConfig c;
  c.family = f;
  c.d = 16;
  c.heads = 2;
  c.layers = 2;
  c.ff = 32;
  c.conv_channels = {4, 4, 8, 8};
  return c;
}

void zero(nn::Parameter& p) {
  for (auto& v : p.tensor.mutable_values()) v = 0.0;
}

}  // namespace

TEST_CASE("cirm head shape and frame check") {
  Rng rng(1);
  CirmHead head(16, 257, rng);
  const Tensor f = random_tensor({2, 21, 16}, rng);
  CHECK(head.forward(f).shape() == ad::Shape{2, 21, 257, 2});
  CHECK_THROWS_AS(head.forward(f, 22), ValidationError);
}

TEST_CASE("identity-initialized head on zero weights passes the noisy signal through") {
  Rng rng(2);
  const dsp::CirmConfig cirm;
  const auto stft = dsp::feature_preset();
  CirmHead head(16, stft.bins(), rng);
  head.init_identity(cirm);
  zero(head.conv.weight);
  const Tensor noisy = random_tensor({1, 1000}, rng, -0.5, 0.5);
  const Tensor planar = ad::stft(noisy, stft);
  const Tensor mask = head.forward(random_tensor({1, planar.dim(1), 16}, rng));
  for (std::size_t j = 0; j < stft.bins(); ++j) {
    CHECK(mask[2 * j] == doctest::Approx(dsp::compress_value(1.0, cirm)));
    CHECK(mask[2 * j + 1] == 0.0);
  }
  const Tensor out = apply_compressed_mask(mask, planar, stft, 1000, cirm);
  CHECK(max_abs_diff(out.vec(), noisy.vec()) <= 1e-6);
}

TEST_CASE("interleaved to planar layout") {
  // [1, 1, 2 bins, 2]: (re0, im0, re1, im1) -> (re0, re1 | im0, im1)
  const Tensor m = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor p = interleaved_to_planar(m);
  CHECK(p.shape() == ad::Shape{1, 1, 4});
  CHECK(p.vec() == std::vector<double>{1, 3, 2, 4});
}

TEST_CASE("planar complex product matches std::complex") {
  Rng rng(3);
  const Tensor a = random_tensor({2, 3, 8}, rng);
  const Tensor b = random_tensor({2, 3, 8}, rng);
  const Tensor c = planar_complex_mul(a, b);
  for (std::size_t row = 0; row < 6; ++row) {
    for (std::size_t j = 0; j < 4; ++j) {
      const std::complex<double> x(a[row * 8 + j], a[row * 8 + 4 + j]);
      const std::complex<double> y(b[row * 8 + j], b[row * 8 + 4 + j]);
      const auto z = x * y;
      CHECK(std::abs(c[row * 8 + j] - z.real()) <= 1e-15);
      CHECK(std::abs(c[row * 8 + 4 + j] - z.imag()) <= 1e-15);
    }
  }
}

TEST_CASE("unet decoder restores the waveform length") {
  const auto cfg = small(upstream::Family::contrastive);
  Rng rng(4);
  auto enc = upstream::make_encoder(cfg, rng);
  UnetDecoder dec(cfg, rng, 1);
  CHECK(dec.depth() == 4);
  const Tensor w = random_tensor({2, 1600}, rng, -0.5, 0.5);
  const auto out = enc->forward_with_taps(enc->prepare(w), 1);
  const Tensor y = dec.forward(out.final, out.skips);
  CHECK(y.shape() == ad::Shape{2, 1600});
  CHECK_THROWS_AS(dec.forward(out.final, {out.skips.begin(), out.skips.end() - 1}), ValidationError);

  SUBCASE("zeroed reducers cut the skip path") {
    for (auto& r : dec.reducers) {
      zero(r.weight);
      zero(r.bias);
    }
    auto other = out.skips;
    for (auto& s : other) s = random_tensor(s.shape(), rng);
    CHECK(dec.forward(out.final, other).vec() == dec.forward(out.final, out.skips).vec());
  }
}

TEST_CASE("pad to multiple") {
  const Tensor w = Tensor::from({1, 5}, {1, 2, 3, 4, 5});
  const Tensor p = pad_to_multiple(w, 4);
  CHECK(p.vec() == std::vector<double>{1, 2, 3, 4, 5, 0, 0, 0});
  CHECK(pad_to_multiple(w, 5).vec() == w.vec());
}

TEST_CASE("both models overfit a single pair") {
  for (auto f : {upstream::Family::generative, upstream::Family::contrastive}) {
    CAPTURE(upstream::to_string(f));
    model::ModelConfig mc = model::ModelConfig::for_family(f);
    mc.encoder = small(f);
    model::SeModel m(mc, 5);
    Rng rng(6);
    std::vector<double> clean(1600), noisy(1600);
    for (std::size_t t = 0; t < clean.size(); ++t) {
      clean[t] = 0.4 * std::sin(0.07 * static_cast<double>(t));
      noisy[t] = clean[t] + 0.2 * rng.uniform(-1, 1);
    }
    const Tensor x = Tensor::from({1, 1600}, noisy);
    const Tensor y = Tensor::from({1, 1600}, clean);
    const auto mstft = losses::MstftConfig::preset();
    auto loss_of = [&] {
      const auto out = m.forward(x);
      losses::CompositeInputs in{out.enhanced, y, out.pred_mask, out.noisy_planar, {}};
      if (f == upstream::Family::generative) in.clean_planar = ad::stft(y, mc.encoder.features);
      return losses::composite_loss(in, {}, f, mstft, mc.cirm).total;
    };
    nn::Adam opt(m.parameters(), nn::AdamConfig{2e-3});
    const double first = loss_of().item();
    for (int step = 0; step < 40; ++step) {
      opt.zero_grad();
      loss_of().backward();
      opt.step();
    }
    CHECK(loss_of().item() < 0.8 * first);
  }
}
