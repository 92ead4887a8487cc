#include "fnse/nn.hpp"

#include <cmath>

#include "fnse/errors.hpp"

namespace fnse::nn {

void Parameter::set_frozen(bool f) {
  frozen = f;
  tensor.set_requires_grad(!f);
}

Parameter Parameter::clone() const {
  Parameter p;
  p.name = name;
  p.tensor = tensor.clone(!frozen);
  p.frozen = frozen;
  return p;
}

Tensor glorot(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight("weight", glorot({in, out}, in, out, rng)),
      bias("bias", Tensor::zeros({out}, true)) {}

Tensor Linear::forward(const Tensor& x) const {
  return ad::add(ad::matmul(x, weight.tensor), bias.tensor);
}

void Linear::collect(ParamRefs& out, const std::string& prefix) {
  weight.name = prefix + ".weight";
  bias.name = prefix + ".bias";
  out.push_back(&weight);
  out.push_back(&bias);
}

Conv1d::Conv1d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride_,
               std::size_t padding_, Rng& rng)
    : weight("weight", glorot({kernel, cin, cout}, kernel * cin, kernel * cout, rng)),
      bias("bias", Tensor::zeros({cout}, true)),
      stride(stride_),
      padding(padding_) {}

Tensor Conv1d::forward(const Tensor& x) const {
  return ad::add(ad::conv1d(x, weight.tensor, stride, padding), bias.tensor);
}

void Conv1d::collect(ParamRefs& out, const std::string& prefix) {
  weight.name = prefix + ".weight";
  bias.name = prefix + ".bias";
  out.push_back(&weight);
  out.push_back(&bias);
}

ConvTranspose1d::ConvTranspose1d(std::size_t cin, std::size_t cout, std::size_t kernel,
                                 std::size_t stride_, std::size_t padding_, Rng& rng)
    : weight("weight", glorot({cin, kernel, cout}, kernel * cin / stride_,
                              kernel * cout / stride_, rng)),
      bias("bias", Tensor::zeros({cout}, true)),
      stride(stride_),
      padding(padding_) {}

Tensor ConvTranspose1d::forward(const Tensor& x) const {
  return ad::add(ad::conv_transpose1d(x, weight.tensor, stride, padding), bias.tensor);
}

void ConvTranspose1d::collect(ParamRefs& out, const std::string& prefix) {
  weight.name = prefix + ".weight";
  bias.name = prefix + ".bias";
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(std::size_t d, double eps_)
    : gamma("gamma", Tensor::full({d}, 1.0, true)),
      beta("beta", Tensor::zeros({d}, true)),
      eps(eps_) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return ad::add(ad::mul(ad::layer_norm(x, eps), gamma.tensor), beta.tensor);
}

void LayerNorm::collect(ParamRefs& out, const std::string& prefix) {
  gamma.name = prefix + ".gamma";
  beta.name = prefix + ".beta";
  out.push_back(&gamma);
  out.push_back(&beta);
}

TransformerLayer::TransformerLayer(std::size_t d, std::size_t heads_, std::size_t ff, Rng& rng)
    : wq(d, d, rng),
      wk(d, d, rng),
      wv(d, d, rng),
      wo(d, d, rng),
      ln1(d),
      ff1(d, ff, rng),
      ff2(ff, d, rng),
      ln2(d),
      heads(heads_) {
  if (d % heads_ != 0) throw ConfigError("transformer width must be divisible by heads");
}

Tensor TransformerLayer::forward(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(2) != width()) {
    throw ValidationError("TransformerLayer: expected [B, T, " + std::to_string(width()) +
                          "], got " + ad::shape_str(x.shape()));
  }
  const Tensor attn =
      ad::scaled_dot_attention(wq.forward(x), wk.forward(x), wv.forward(x), heads);
  const Tensor h = ln1.forward(ad::add(x, wo.forward(attn)));
  const Tensor f = ff2.forward(ad::gelu(ff1.forward(h)));
  return ln2.forward(ad::add(h, f));
}

void TransformerLayer::collect(ParamRefs& out, const std::string& prefix) {
  wq.collect(out, prefix + ".attn.q");
  wk.collect(out, prefix + ".attn.k");
  wv.collect(out, prefix + ".attn.v");
  wo.collect(out, prefix + ".attn.out");
  ln1.collect(out, prefix + ".ln1");
  ff1.collect(out, prefix + ".ff1");
  ff2.collect(out, prefix + ".ff2");
  ln2.collect(out, prefix + ".ln2");
}

Tensor sinusoidal_positions(std::size_t frames, std::size_t d) {
  std::vector<double> v(frames * d);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      v[t * d + i] = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < d) v[t * d + i + 1] = std::cos(static_cast<double>(t) * freq);
    }
  }
  return Tensor::from({frames, d}, std::move(v));
}

void copy_values(const ParamRefs& src, const ParamRefs& dst) {
  if (src.size() != dst.size()) throw ValidationError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]->tensor.shape() != dst[i]->tensor.shape()) {
      throw ValidationError("copy_values: shape mismatch for " + src[i]->name);
    }
    auto d = dst[i]->tensor.mutable_values();
    auto s = src[i]->tensor.values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

std::size_t count_values(const ParamRefs& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->tensor.size();
  return n;
}

}  // namespace fnse::nn
