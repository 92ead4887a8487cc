#pragma once

#include <string>
#include <vector>

#include "fnse/rng.hpp"
#include "fnse/tensor.hpp"

namespace fnse::nn {

using ad::Tensor;

// A named trainable array. Frozen parameters never require grad, so they
// receive no gradient and optimizers skip them.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
  }

  void set_frozen(bool f);
  // Deep copy with fresh storage; keeps the frozen flag.
  Parameter clone() const;
};

using ParamRefs = std::vector<Parameter*>;

// Glorot-uniform fill with the given fan sizes.
Tensor glorot(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  // x: [..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);
  std::size_t in_features() const { return weight.tensor.dim(0); }
  std::size_t out_features() const { return weight.tensor.dim(1); }

  Parameter weight;  // [in, out]
  Parameter bias;    // [out]
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
         std::size_t padding, Rng& rng);

  // x: [B, T, cin] -> [B, Tout, cout]
  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);

  Parameter weight;  // [K, cin, cout]
  Parameter bias;    // [cout]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  ConvTranspose1d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                  std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);

  Parameter weight;  // [cin, K, cout]
  Parameter bias;    // [cout]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t d, double eps = 1e-5);

  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);

  Parameter gamma;
  Parameter beta;
  double eps = 1e-5;
};

// Post-LN transformer encoder layer (BERT layout):
//   h = LN(x + Wo·Attn(Wq x, Wk x, Wv x)),  out = LN(h + W2·gelu(W1 h)).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::size_t d, std::size_t heads, std::size_t ff, Rng& rng);

  // x: [B, T, d]
  Tensor forward(const Tensor& x) const;
  void collect(ParamRefs& out, const std::string& prefix);
  std::size_t width() const { return wq.in_features(); }

  Linear wq, wk, wv, wo;
  LayerNorm ln1;
  Linear ff1, ff2;
  LayerNorm ln2;
  std::size_t heads = 1;
};

// Fixed sinusoidal position table [T, d].
Tensor sinusoidal_positions(std::size_t frames, std::size_t d);

// Deep-copies `src` values into `dst` (same names and shapes required).
void copy_values(const ParamRefs& src, const ParamRefs& dst);

std::size_t count_values(const ParamRefs& params);

}  // namespace fnse::nn
