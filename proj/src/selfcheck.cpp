#include "fnse/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "fnse/downstream.hpp"
#include "fnse/dsp.hpp"
#include "fnse/featnorm.hpp"
#include "fnse/grad_check.hpp"
#include "fnse/losses.hpp"
#include "fnse/nn.hpp"
#include "fnse/rng.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::selfcheck {

namespace {

using ad::Tensor;

Tensor random_tensor(const ad::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = false) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

Tensor weighted_sum(const Tensor& y) {
  Rng rng(99);
  return ad::sum(ad::mul(y, random_tensor(y.shape(), rng)));
}

Check make(std::string name, double value, double tol, std::string detail = {}) {
  return Check{std::move(name), value, tol, value <= tol, std::move(detail)};
}

using Op = std::function<Tensor(const Tensor&)>;

struct OpCase {
  std::string name;
  ad::Shape shape;
  Op op;
  double lo = -1.0;
  double hi = 1.0;
};

double worst_over_points(const OpCase& c, std::size_t points, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    const Tensor x = random_tensor(c.shape, rng, c.lo, c.hi);
    worst = std::max(worst, ad::grad_check([&](const Tensor& t) { return weighted_sum(c.op(t)); }, x));
  }
  return worst;
}

// Checks the gradient with respect to every leaf at once; `draw` refreshes
// the leaves for each point.
double worst_over_leaves(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                         const std::function<void(Rng&)>& draw, std::size_t points, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    draw(rng);
    worst = std::max(worst, ad::grad_check_leaves(f, leaves).max_rel_error);
  }
  return worst;
}

void fill(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.mutable_values()) v = rng.uniform(lo, hi);
}

std::vector<Tensor> leaves_of(nn::ParamRefs ps) {
  std::vector<Tensor> out;
  for (auto* p : ps) out.push_back(p->tensor);
  return out;
}

}  // namespace

std::vector<Check> gradient_checks(std::size_t points, double tol) {
  Rng prng(4);
  const Tensor other = random_tensor({3, 4}, prng, 0.5, 1.5);
  const Tensor row = random_tensor({4}, prng, 0.5, 1.5);
  const Tensor wmat = random_tensor({4, 5}, prng);
  const Tensor cw = random_tensor({3, 4, 5}, prng);
  const Tensor cx = random_tensor({2, 9, 4}, prng);
  const Tensor tw = random_tensor({4, 4, 3}, prng);
  const Tensor tx = random_tensor({2, 5, 4}, prng);
  const Tensor ak = random_tensor({2, 5, 8}, prng);
  const Tensor av = random_tensor({2, 5, 8}, prng);
  const auto scfg = dsp::StftConfig::make(32, 16, 4);
  const Tensor spec = ad::stft(random_tensor({2, 64}, prng), scfg);
  const dsp::CirmConfig cc;

  const std::vector<OpCase> ops = {
      {"add", {3, 4}, [&](const Tensor& x) { return ad::add(x, other); }},
      {"add_broadcast_scalar", {1}, [&](const Tensor& s) { return ad::add(other, s); }},
      {"sub", {3, 4}, [&](const Tensor& x) { return ad::sub(other, x); }},
      {"mul", {3, 4}, [&](const Tensor& x) { return ad::mul(x, x); }},
      {"mul_broadcast_row", {4}, [&](const Tensor& r) { return ad::mul(other, r); }},
      {"mul_row_operand", {3, 4}, [&](const Tensor& x) { return ad::mul(x, row); }},
      {"div", {3, 4}, [&](const Tensor& x) { return ad::div(other, x); }, 0.5, 2.0},
      {"div_broadcast_row", {4}, [&](const Tensor& r) { return ad::div(other, r); }, 0.5, 2.0},
      {"add_scalar_mul_scalar", {3, 4}, [](const Tensor& x) { return ad::mul_scalar(ad::add_scalar(x, 2), -3); }},
      {"neg", {3, 4}, [](const Tensor& x) { return ad::neg(x); }},
      {"relu_positive", {3, 4}, [](const Tensor& x) { return ad::relu(x); }, 0.1, 1.0},
      {"relu_negative", {3, 4}, [](const Tensor& x) { return ad::relu(x); }, -1.0, -0.1},
      {"gelu", {3, 4}, [](const Tensor& x) { return ad::gelu(x); }, -2.0, 2.0},
      {"tanh", {3, 4}, [](const Tensor& x) { return ad::tanh(x); }, -2.0, 2.0},
      {"exp", {3, 4}, [](const Tensor& x) { return ad::exp(x); }},
      {"log", {3, 4}, [](const Tensor& x) { return ad::log(x); }, 0.2, 3.0},
      {"sqrt", {3, 4}, [](const Tensor& x) { return ad::sqrt(x); }, 0.2, 3.0},
      {"square", {3, 4}, [](const Tensor& x) { return ad::square(x); }},
      {"abs", {3, 4}, [](const Tensor& x) { return ad::abs(x); }, 0.1, 1.0},
      {"sum", {3, 4}, [](const Tensor& x) { return ad::sum(x); }},
      {"mean", {3, 4}, [](const Tensor& x) { return ad::mean(x); }},
      {"var", {3, 4}, [](const Tensor& x) { return ad::var(x); }},
      {"matmul_lhs", {2, 3, 4}, [&](const Tensor& x) { return ad::matmul(x, wmat); }},
      {"matmul_rhs", {4, 5}, [&](const Tensor& w) { return ad::matmul(other, w); }},
      {"conv1d_input", {2, 9, 4}, [&](const Tensor& x) { return ad::conv1d(x, cw, 2, 1); }},
      {"conv1d_weight", {3, 4, 5}, [&](const Tensor& w) { return ad::conv1d(cx, w, 1, 1); }},
      {"conv_transpose1d_input", {2, 5, 4}, [&](const Tensor& x) { return ad::conv_transpose1d(x, tw, 2, 1); }},
      {"conv_transpose1d_weight", {4, 4, 3}, [&](const Tensor& w) { return ad::conv_transpose1d(tx, w, 2, 1); }},
      {"layer_norm", {3, 6}, [](const Tensor& x) { return ad::layer_norm(x, 1e-5); }},
      {"softmax", {3, 6}, [](const Tensor& x) { return ad::softmax(x); }, -2.0, 2.0},
      {"attention_q", {2, 5, 8}, [&](const Tensor& q) { return ad::scaled_dot_attention(q, ak, av, 2); }},
      {"attention_k", {2, 5, 8}, [&](const Tensor& k) { return ad::scaled_dot_attention(av, k, ak, 2); }},
      {"attention_v", {2, 5, 8}, [&](const Tensor& v) { return ad::scaled_dot_attention(ak, av, v, 4); }},
      {"reshape", {3, 4}, [](const Tensor& x) { return ad::reshape(x, {2, 6}); }},
      {"slice_strided", {3, 8}, [](const Tensor& x) { return ad::slice(x, 1, 1, 8, 2); }},
      {"concat", {3, 4}, [&](const Tensor& x) { return ad::concat({x, other, x}, 1); }},
      {"stft", {2, 64}, [&](const Tensor& x) { return ad::stft(x, scfg); }},
      {"istft", spec.shape(), [&](const Tensor& s) { return ad::istft(s, scfg, 64); }},
      {"decompress", {3, 4}, [&](const Tensor& x) { return ad::decompress(x, cc); }, -9.0, 9.0},
      {"planar_magnitude", {3, 8}, [](const Tensor& x) { return ad::planar_magnitude(x); }},
  };

  std::vector<Check> out;
  std::uint64_t seed = 100;
  for (const auto& c : ops) out.push_back(make("grad:" + c.name, worst_over_points(c, points, seed++), tol));

  {
    Rng r(7);
    nn::TransformerLayer layer(8, 2, 16, r);
    Tensor x = random_tensor({2, 5, 8}, r, -1, 1, true);
    nn::ParamRefs ps;
    layer.collect(ps, "layer");
    // The key bias shifts every score of a query equally; its gradient is
    // identically zero.
    std::vector<Tensor> leaves{x};
    for (auto* p : ps)
      if (p->name != "layer.attn.k.bias") leaves.push_back(p->tensor);
    const double w = worst_over_leaves([&] { return weighted_sum(layer.forward(x)); }, leaves,
                                       [&](Rng& g) { fill(x, g); }, points, seed++);
    out.push_back(make("grad:transformer_layer", w, tol));
  }
  {
    Rng r(8);
    downstream::CirmHead head(6, 5, r);
    Tensor f = random_tensor({2, 4, 6}, r, -1, 1, true);
    nn::ParamRefs ps;
    head.collect(ps);
    auto leaves = leaves_of(ps);
    leaves.push_back(f);
    const double w = worst_over_leaves([&] { return weighted_sum(head.forward(f)); }, leaves,
                                       [&](Rng& g) { fill(f, g); }, points, seed++);
    out.push_back(make("grad:cirm_head", w, tol));

    // Mask path: compressed mask times the noisy spectrogram, back to samples.
    const auto small = dsp::StftConfig::make(8, 8, 2);
    Tensor noisy = random_tensor({2, 24}, r);
    const Tensor planar = ad::stft(noisy, small);
    Tensor mask = random_tensor({2, planar.dim(1), small.bins(), 2}, r, -3, 3, true);
    const double wm = worst_over_leaves(
        [&] { return weighted_sum(downstream::apply_compressed_mask(mask, planar, small, 24, cc)); }, {mask},
        [&](Rng& g) { fill(mask, g, -3, 3); }, points, seed++);
    out.push_back(make("grad:apply_compressed_mask", wm, tol));
  }
  {
    Rng r(9);
    upstream::EncoderConfig ec;
    ec.family = upstream::Family::contrastive;
    ec.d = 4;
    ec.heads = 2;
    ec.layers = 1;
    ec.ff = 8;
    ec.conv_channels = {2, 4};
    downstream::UnetDecoder dec(ec, r, 1);
    Tensor b = random_tensor({2, 3, 4}, r, -1, 1, true);
    Tensor s0 = random_tensor({2, 6, 2}, r, -1, 1, true);
    Tensor s1 = random_tensor({2, 3, 4}, r, -1, 1, true);
    nn::ParamRefs ps;
    dec.collect(ps);
    auto leaves = leaves_of(ps);
    leaves.insert(leaves.end(), {b, s0, s1});
    const double w = worst_over_leaves([&] { return weighted_sum(dec.forward(b, {s0, s1})); }, leaves,
                                       [&](Rng& g) { fill(b, g); fill(s0, g); fill(s1, g); }, points, seed++);
    out.push_back(make("grad:unet_decoder", w, tol));
  }
  {
    Rng r(10);
    const auto small = dsp::StftConfig::make(16, 8, 2);
    const Tensor noisy = ad::stft(random_tensor({2, 32}, r), small);
    Tensor pred = random_tensor({2, noisy.dim(1), small.bins(), 2}, r, -3, 3, true);
    const Tensor clean = ad::stft(random_tensor({2, 32}, r), small);
    const double wc = worst_over_leaves([&] { return losses::cirm_loss(pred, noisy, clean, cc); }, {pred},
                                        [&](Rng& g) { fill(pred, g, -3, 3); }, points, seed++);
    out.push_back(make("grad:cirm_loss", wc, tol));

    Tensor est = random_tensor({2, 64}, r, -1, 1, true);
    const Tensor target = random_tensor({2, 64}, r);
    const double wt = worst_over_leaves([&] { return losses::time_mse(est, target); }, {est},
                                        [&](Rng& g) { fill(est, g); }, points, seed++);
    out.push_back(make("grad:time_mse", wt, tol));

    losses::MstftConfig mc;
    mc.sub_configs = {dsp::StftConfig::make(16, 8, 2), dsp::StftConfig::make(32, 16, 4), dsp::StftConfig::make(8, 4, 1)};
    mc.weights = {1.0, 1.0, 1.0};
    const double wl = worst_over_leaves([&] { return losses::mstft_loss(est, target, mc); }, {est},
                                        [&](Rng& g) { fill(est, g); }, points, seed++);
    out.push_back(make("grad:mstft_loss", wl, tol));
  }
  return out;
}

std::vector<Check> cola_checks(double tol) {
  Rng rng(2);
  std::vector<Check> out;
  for (const auto& cfg : dsp::mstft_presets()) {
    double worst = 0.0;
    for (std::size_t len : {std::size_t{8000}, 4 * cfg.win_size + 7}) {
      std::vector<double> x(len);
      for (auto& v : x) v = rng.uniform(-1.0, 1.0);
      const auto y = dsp::istft(dsp::stft(x, cfg));
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        num += (y[i] - x[i]) * (y[i] - x[i]);
        den += x[i] * x[i];
      }
      worst = std::max(worst, y.size() == len ? std::sqrt(num / den) : INFINITY);
    }
    std::ostringstream name;
    name << "cola:" << cfg.fft_size << "," << cfg.win_size << "," << cfg.hop;
    out.push_back(make(name.str(), worst, tol));
  }
  return out;
}

Check cirm_oracle_check(double tol) {
  Rng rng(5);
  std::vector<double> clean(8000), noisy(8000);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    clean[i] = 0.5 * std::sin(0.03 * static_cast<double>(i)) + rng.uniform(-0.2, 0.2);
    noisy[i] = clean[i] + rng.uniform(-0.3, 0.3);
  }
  const auto cfg = dsp::feature_preset();
  const auto Y = dsp::stft(noisy, cfg);
  const auto S = dsp::stft(clean, cfg);
  const auto est = dsp::apply_mask(Y, dsp::compute_cirm(Y, S, dsp::CirmConfig{}));
  const dsp::Matrix power = Y.real.array().square() + Y.imag.array().square();
  const double floor = power.maxCoeff() * 1e-3;
  double worst = 0.0;
  std::size_t counted = 0;
  for (Eigen::Index t = 0; t < power.rows(); ++t) {
    for (Eigen::Index k = 0; k < power.cols(); ++k) {
      if (power(t, k) < floor) continue;
      ++counted;
      worst = std::max({worst, std::abs(est.real(t, k) - S.real(t, k)), std::abs(est.imag(t, k) - S.imag(t, k))});
    }
  }
  return make("cirm:oracle_reconstruction", worst, tol, std::to_string(counted) + " bins");
}

Check cirm_roundtrip_check(double tol) {
  dsp::CirmConfig cc;
  cc.K = 10.0;
  cc.C = 0.1;
  double worst = 0.0;
  for (int i = 0; i <= 100000; ++i) {
    const double m = -50.0 + 100.0 * i / 100000.0;
    worst = std::max(worst, std::abs(dsp::decompress_value(dsp::compress_value(m, cc), cc) - m));
  }
  return make("cirm:compress_roundtrip", worst, tol);
}

std::vector<Check> normalization_algebra(std::size_t cases, double tol) {
  Rng rng(11);
  std::vector<double> x(cases), mu(cases), sd(cases), mu_n(cases), sd_n(cases);
  for (std::size_t i = 0; i < cases; ++i) {
    x[i] = rng.uniform(-5, 5);
    mu[i] = rng.uniform(-5, 5);
    sd[i] = rng.uniform(0.2, 5);
    mu_n[i] = rng.uniform(-5, 5);
    sd_n[i] = rng.uniform(0.2, 5);
  }
  featnorm::NormState st;
  st.mu = mu;
  st.mu_n = mu_n;
  st.r.resize(cases);
  for (std::size_t i = 0; i < cases; ++i) st.r[i] = sd_n[i] / sd[i];
  st.initialized = true;
  const Tensor X = Tensor::from({1, cases}, x);
  const auto k1 = featnorm::renormalize(X, st, 1.0).vec();

  double two_step_vs_affine = 0.0, affine_vs_k1 = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const double two_step = (x[i] - mu[i]) / sd[i] * sd_n[i] + mu_n[i];
    const double affine = st.r[i] * x[i] + (mu_n[i] - st.r[i] * mu[i]);
    two_step_vs_affine = std::max(two_step_vs_affine, std::abs(two_step - affine));
    affine_vs_k1 = std::max(affine_vs_k1, std::abs(affine - k1[i]));
  }

  // X_hat(k) = (1 - k) X + k X_n on [B, T, d] tensors with per-dimension stats.
  double interp = 0.0;
  const std::size_t d = 16;
  for (int trial = 0; trial < 20; ++trial) {
    featnorm::NormState s;
    s.initialized = true;
    for (std::size_t j = 0; j < d; ++j) {
      s.mu.push_back(rng.uniform(-2, 2));
      s.mu_n.push_back(rng.uniform(-2, 2));
      s.r.push_back(rng.uniform(0.2, 5));
    }
    const Tensor t = random_tensor({3, 7, d}, rng, -3, 3);
    const double k = rng.uniform();
    const auto got = featnorm::renormalize(t, s, k).vec();
    const auto tv = t.vec();
    for (std::size_t i = 0; i < tv.size(); ++i) {
      const std::size_t j = i % d;
      const double xn = s.r[j] * tv[i] + (s.mu_n[j] - s.r[j] * s.mu[j]);
      interp = std::max(interp, std::abs(got[i] - ((1.0 - k) * tv[i] + k * xn)));
    }
  }
  return {make("norm:two_step_vs_affine", two_step_vs_affine, tol),
          make("norm:affine_vs_interpolated_k1", affine_vs_k1, tol),
          make("norm:interpolation_identity", interp, tol)};
}

Check ema_closed_form(double tol) {
  double worst = 0.0;
  const std::size_t d = 4;
  const std::vector<double> s0{0.0, 1.0, -2.0, 3.5};
  const std::vector<double> v{1.0, -0.5, 2.0, 0.25};
  for (double beta : {0.99, 0.999}) {
    for (std::size_t n : {1, 10, 100}) {
      featnorm::NormState st;
      st.mu = st.mu_n = s0;
      st.r.resize(d);
      for (std::size_t j = 0; j < d; ++j) st.r[j] = 1.0 + std::abs(s0[j]);
      st.beta_m = st.beta_r = beta;
      st.initialized = true;
      const auto r0 = st.r;
      featnorm::BatchStats b;
      b.mu_hat = b.mu_n_hat = v;
      b.sigma_hat.assign(d, 2.0);
      b.sigma_n_hat.assign(d, 3.0);  // ratio observation 1.5
      for (std::size_t i = 0; i < n; ++i) st = featnorm::ema_update(std::move(st), b);
      const double bn = std::pow(beta, static_cast<double>(n));
      for (std::size_t j = 0; j < d; ++j) {
        const double m = bn * s0[j] + (1.0 - bn) * v[j];
        const double r = bn * r0[j] + (1.0 - bn) * 1.5;
        worst = std::max({worst, std::abs(st.mu[j] - m), std::abs(st.mu_n[j] - m), std::abs(st.r[j] - r)});
      }
    }
  }
  return make("ema:closed_form", worst, tol);
}

std::vector<Check> run_all() {
  std::vector<Check> out = gradient_checks();
  for (auto& c : cola_checks()) out.push_back(c);
  out.push_back(cirm_oracle_check());
  out.push_back(cirm_roundtrip_check());
  for (auto& c : normalization_algebra()) out.push_back(c);
  out.push_back(ema_closed_form());
  return out;
}

bool all_pass(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

std::string format(const Check& c) {
  std::ostringstream os;
  os << (c.pass ? "ok   " : "FAIL ") << c.name << "  " << std::scientific << c.value << " <= " << c.tolerance;
  if (!c.detail.empty()) os << "  (" << c.detail << ")";
  return os.str();
}

}  // namespace fnse::selfcheck
