#include <doctest.h>

#include <filesystem>

#include "fnse/checkpoint.hpp"
#include "fnse/errors.hpp"
#include "fnse/grad_check.hpp"
#include "fnse/nn.hpp"
#include "fnse/optim.hpp"
#include "fnse/spectral_ops.hpp"
#include "test_util.hpp"

using namespace fnse;
using ad::Tensor;
using fnse::testing::random_tensor;
using fnse::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

// Runs grad_check of weighted_sum(op(x)) at five random points.
template <class Op>
double worst_of_five(ad::Shape shape, Op op, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor(shape, rng, lo, hi);
    worst = std::max(worst, ad::grad_check([&](const Tensor& t) { return weighted_sum(op(t)); }, x));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul with identity returns the operand") {
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  CHECK(ad::matmul(Tensor::from({3, 3}, eye), a).vec() == a.vec());
}

TEST_CASE("layer_norm of a constant row is zero") {
  const Tensor y = ad::layer_norm(Tensor::full({2, 5}, 3.25), 1e-5);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("gradient of sum(x*x) is 2x") {
  Tensor x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  ad::sum(ad::mul(x, x)).backward();
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(x.grad()[2] == 6.0);
}

TEST_CASE("gradient accumulation is additive across backward passes") {
  Rng rng(2);
  Tensor x = random_tensor({4, 3}, rng, -1, 1, true);
  Tensor w = random_tensor({3, 2}, rng, -1, 1, true);
  auto f = [&] { return ad::sum(ad::tanh(ad::matmul(x, w))); };
  f().backward();
  const std::vector<double> once(x.grad().begin(), x.grad().end());
  f().backward();
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("stop_gradient blocks upstream gradient") {
  Tensor x = Tensor::from({2}, {0.5, -1.5}, true);
  Tensor y = Tensor::from({2}, {2.0, 3.0}, true);
  ad::sum(ad::mul(ad::stop_gradient(ad::square(x)), y)).backward();
  CHECK_FALSE(x.has_grad());
  CHECK(y.grad()[0] == 0.25);
}

TEST_CASE("no-grad guard records no graph") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  ad::NoGradGuard g;
  const Tensor y = ad::square(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("domain and shape errors") {
  CHECK_THROWS_AS(ad::log(Tensor::from({2}, {1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(ad::sqrt(Tensor::from({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(ad::div(Tensor::full({2}, 1.0), Tensor::from({2}, {1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ValidationError);
  CHECK_THROWS_AS(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ValidationError);
  CHECK_THROWS_AS(ad::scaled_dot_attention(Tensor::zeros({1, 2, 6}), Tensor::zeros({1, 2, 6}),
                                           Tensor::zeros({1, 2, 6}), 4),
                  ValidationError);
}

TEST_CASE("grad_check of sum of squares is essentially exact") {
  Rng rng(3);
  const Tensor x = random_tensor({6}, rng);
  CHECK(ad::grad_check([](const Tensor& t) { return ad::sum(ad::square(t)); }, x, 1e-5) <= 1e-8);
  CHECK_THROWS_AS(ad::grad_check([](const Tensor& t) { return ad::sum(t); }, x, 1e-2),
                  ValidationError);
}

TEST_CASE("every differentiable op passes a central-difference check") {
  Rng prng(4);
  const Tensor other = random_tensor({3, 4}, prng, 0.5, 1.5);
  const Tensor row = random_tensor({4}, prng, 0.5, 1.5);
  const Tensor wmat = random_tensor({4, 5}, prng);

  SUBCASE("elementwise binary") {
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::add(x, other); }, 10) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::sub(other, x); }, 11) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::mul(x, x); }, 12) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::div(other, x); }, 13, 0.5, 2.0) <= kTol);
    CHECK(worst_of_five({4}, [&](const Tensor& r) { return ad::mul(other, r); }, 14) <= kTol);
    CHECK(worst_of_five({4}, [&](const Tensor& r) { return ad::div(other, r); }, 15, 0.5, 2.0) <= kTol);
    CHECK(worst_of_five({1}, [&](const Tensor& s) { return ad::add(other, s); }, 16) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::mul(x, row); }, 17) <= kTol);
  }
  SUBCASE("elementwise unary") {
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::gelu(x); }, 20, -2, 2) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::tanh(x); }, 21, -2, 2) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::exp(x); }, 22) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::log(x); }, 23, 0.2, 3) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::sqrt(x); }, 24, 0.2, 3) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::square(x); }, 25) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::relu(x); }, 26, 0.1, 1) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::relu(x); }, 27, -1, -0.1) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::abs(x); }, 28, 0.1, 1) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::mul_scalar(ad::add_scalar(x, 2), -3); }, 29) <= kTol);
  }
  SUBCASE("reductions") {
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::sum(x); }, 30) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::mean(x); }, 31) <= kTol);
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::var(x); }, 32) <= kTol);
  }
  SUBCASE("linear algebra") {
    CHECK(worst_of_five({2, 3, 4}, [&](const Tensor& x) { return ad::matmul(x, wmat); }, 40) <= kTol);
    CHECK(worst_of_five({4, 5}, [&](const Tensor& w) { return ad::matmul(other, w); }, 41) <= kTol);
    Rng r(42);
    const Tensor cw = random_tensor({3, 4, 5}, r);
    const Tensor cx = random_tensor({2, 9, 4}, r);
    CHECK(worst_of_five({2, 9, 4}, [&](const Tensor& x) { return ad::conv1d(x, cw, 2, 1); }, 43) <= kTol);
    CHECK(worst_of_five({3, 4, 5}, [&](const Tensor& w) { return ad::conv1d(cx, w, 1, 1); }, 44) <= kTol);
    const Tensor tw = random_tensor({4, 4, 3}, r);
    const Tensor tx = random_tensor({2, 5, 4}, r);
    CHECK(worst_of_five({2, 5, 4}, [&](const Tensor& x) { return ad::conv_transpose1d(x, tw, 2, 1); }, 45) <= kTol);
    CHECK(worst_of_five({4, 4, 3}, [&](const Tensor& w) { return ad::conv_transpose1d(tx, w, 2, 1); }, 46) <= kTol);
  }
  SUBCASE("normalization and attention") {
    CHECK(worst_of_five({3, 6}, [](const Tensor& x) { return ad::layer_norm(x, 1e-5); }, 50) <= kTol);
    CHECK(worst_of_five({3, 6}, [](const Tensor& x) { return ad::softmax(x); }, 51, -2, 2) <= kTol);
    Rng r(52);
    const Tensor k = random_tensor({2, 5, 8}, r);
    const Tensor v = random_tensor({2, 5, 8}, r);
    CHECK(worst_of_five({2, 5, 8}, [&](const Tensor& q) { return ad::scaled_dot_attention(q, k, v, 2); }, 53) <= kTol);
    CHECK(worst_of_five({2, 5, 8}, [&](const Tensor& kk) { return ad::scaled_dot_attention(v, kk, k, 2); }, 54) <= kTol);
    CHECK(worst_of_five({2, 5, 8}, [&](const Tensor& vv) { return ad::scaled_dot_attention(k, v, vv, 4); }, 55) <= kTol);
  }
  SUBCASE("structure") {
    CHECK(worst_of_five({3, 4}, [](const Tensor& x) { return ad::reshape(x, {2, 6}); }, 60) <= kTol);
    CHECK(worst_of_five({3, 8}, [](const Tensor& x) { return ad::slice(x, 1, 1, 8, 2); }, 61) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::concat({x, other, x}, 1); }, 62) <= kTol);
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::concat({other, x}, 0); }, 63) <= kTol);
  }
  SUBCASE("spectral") {
    const auto cfg = dsp::StftConfig::make(32, 16, 4);
    CHECK(worst_of_five({2, 64}, [&](const Tensor& x) { return ad::stft(x, cfg); }, 70) <= kTol);
    Rng r(71);
    const Tensor spec = ad::stft(random_tensor({2, 64}, r), cfg);
    CHECK(worst_of_five(spec.shape(), [&](const Tensor& s) { return ad::istft(s, cfg, 64); }, 72) <= kTol);
    dsp::CirmConfig cc;
    CHECK(worst_of_five({3, 4}, [&](const Tensor& x) { return ad::decompress(x, cc); }, 73, -9, 9) <= kTol);
    CHECK(worst_of_five({3, 8}, [](const Tensor& x) { return ad::planar_magnitude(x); }, 74) <= kTol);
  }
}

TEST_CASE("adam") {
  Rng rng(5);
  SUBCASE("zero gradient leaves parameters unchanged") {
    nn::Parameter p("w", random_tensor({4}, rng));
    const auto before = p.tensor.vec();
    ad::sum(ad::mul_scalar(p.tensor, 0.0)).backward();
    nn::Adam opt({&p}, {1e-3});
    opt.step();
    CHECK(p.tensor.vec() == before);
  }
  SUBCASE("frozen parameter is untouched") {
    nn::Parameter p("w", random_tensor({4}, rng));
    p.set_frozen(true);
    nn::Parameter q("q", random_tensor({4}, rng));
    const auto before = p.tensor.vec();
    ad::sum(ad::mul(p.tensor, q.tensor)).backward();
    CHECK_FALSE(p.tensor.has_grad());
    nn::Adam opt({&p, &q}, {1e-3});
    opt.step();
    CHECK(p.tensor.vec() == before);
  }
  SUBCASE("first step with unit gradient moves by lr") {
    nn::Parameter p("w", Tensor::from({1}, {0.5}));
    ad::sum(p.tensor).backward();
    nn::Adam opt({&p}, {1e-3});
    opt.step();
    // m_hat = g, v_hat = g^2  =>  delta = lr * 1 / (1 + eps)
    CHECK(p.tensor[0] == doctest::Approx(0.5 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("transformer layer forward is deterministic and gradient-correct") {
  Rng r1(7), r2(7);
  nn::TransformerLayer a(8, 2, 16, r1), b(8, 2, 16, r2);
  Rng rx(8);
  const Tensor x = random_tensor({2, 5, 8}, rx);
  CHECK(a.forward(x).vec() == b.forward(x).vec());
  CHECK(ad::grad_check([&](const Tensor& t) { return weighted_sum(a.forward(t)); }, x) <= kTol);
  nn::ParamRefs ps;
  a.collect(ps, "layer");
  std::vector<Tensor> leaves;
  // The key bias shifts every score of a query equally, so its gradient is
  // identically zero and the relative error is meaningless there.
  for (auto* p : ps) {
    if (p->name != "layer.attn.k.bias") leaves.push_back(p->tensor);
  }
  const auto res = ad::grad_check_leaves([&] { return weighted_sum(a.forward(x)); }, leaves);
  CHECK(res.max_rel_error <= kTol);
}

TEST_CASE("checkpoint round trip preserves names, shapes, values and meta") {
  Rng rng(9);
  nn::Linear lin(3, 5, rng);
  nn::ParamRefs ps;
  lin.collect(ps, "head");
  const auto path = std::filesystem::temp_directory_path() / "fnse_test_ckpt.bin";
  ckpt::save(path, ps, {{"family", "generative"}, {"d", 64}});
  const auto c = ckpt::load(path);
  CHECK(c.meta.at("family") == "generative");
  CHECK(c.tensors.at("head.weight").shape == ad::Shape{3, 5});
  CHECK(c.tensors.at("head.weight").values == lin.weight.tensor.vec());

  Rng other(10);
  nn::Linear lin2(3, 5, other);
  nn::ParamRefs ps2;
  lin2.collect(ps2, "head");
  ckpt::restore(c, ps2);
  CHECK(lin2.weight.tensor.vec() == lin.weight.tensor.vec());

  nn::Linear wrong(4, 5, other);
  nn::ParamRefs ps3;
  wrong.collect(ps3, "head");
  CHECK_THROWS_AS(ckpt::restore(c, ps3), ValidationError);
  std::filesystem::remove(path);
}
