#include "fnse/spectral_ops.hpp"

#include <algorithm>
#include <cmath>

#include "fnse/errors.hpp"

namespace fnse::ad {

Tensor stft(const Tensor& signal, const dsp::StftConfig& cfg) {
  if (signal.rank() != 2) {
    throw ValidationError("stft: expected [B, N] signal, got " + shape_str(signal.shape()));
  }
  const std::size_t B = signal.dim(0), N = signal.dim(1);
  const std::size_t frames = cfg.frames(N);
  const std::size_t row = frames * 2 * cfg.bins();
  std::vector<double> out(B * row);
  const auto& x = signal.vec();
  for (std::size_t b = 0; b < B; ++b) {
    dsp::stft_kernel(std::span<const double>(x.data() + b * N, N), cfg,
                     std::span<double>(out.data() + b * row, row));
  }
  return make_result({B, frames, 2 * cfg.bins()}, std::move(out), {signal},
                     [cfg, B, N, row](Node& self) {
                       auto& gx = self.parents[0]->ensure_grad();
                       for (std::size_t b = 0; b < B; ++b) {
                         dsp::stft_adjoint(std::span<const double>(self.grad.data() + b * row, row),
                                           cfg, std::span<double>(gx.data() + b * N, N));
                       }
                     });
}

Tensor istft(const Tensor& frames, const dsp::StftConfig& cfg, std::size_t length) {
  const std::size_t nf = cfg.frames(length);
  if (frames.rank() != 3 || frames.dim(1) != nf || frames.dim(2) != 2 * cfg.bins()) {
    throw ValidationError("istft: expected [B, " + std::to_string(nf) + ", " +
                          std::to_string(2 * cfg.bins()) + "], got " + shape_str(frames.shape()));
  }
  const std::size_t B = frames.dim(0);
  const std::size_t row = nf * 2 * cfg.bins();
  std::vector<double> out(B * length);
  const auto& x = frames.vec();
  for (std::size_t b = 0; b < B; ++b) {
    dsp::istft_kernel(std::span<const double>(x.data() + b * row, row), cfg, length,
                      std::span<double>(out.data() + b * length, length));
  }
  return make_result({B, length}, std::move(out), {frames}, [cfg, B, length, row](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < B; ++b) {
      dsp::istft_adjoint(std::span<const double>(self.grad.data() + b * length, length), cfg,
                         length, std::span<double>(gx.data() + b * row, row));
    }
  });
}

Tensor decompress(const Tensor& x, const dsp::CirmConfig& cfg) {
  cfg.validate();
  std::vector<double> out(x.size());
  const double lim = cfg.K * (1.0 - cfg.clamp_margin);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dsp::decompress_value(x[i], cfg);
  return make_result(x.shape(), std::move(out), {x}, [cfg, lim](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const double v = p.value[i];
      if (cfg.clamp && std::abs(v) > lim) continue;
      // d/dx [-(1/C) ln((K-x)/(K+x))] = 2K / (C (K^2 - x^2))
      gp[i] += self.grad[i] * 2.0 * cfg.K / (cfg.C * (cfg.K * cfg.K - v * v));
    }
  });
}

Tensor planar_magnitude(const Tensor& planar, double guard) {
  const std::size_t two_bins = planar.shape().back();
  if (two_bins % 2 != 0) throw ValidationError("planar_magnitude: odd last dimension");
  const std::size_t bins = two_bins / 2;
  const std::size_t axis = planar.rank() - 1;
  const Tensor re = slice(planar, axis, 0, bins);
  const Tensor im = slice(planar, axis, bins, two_bins);
  return sqrt(add_scalar(add(square(re), square(im)), guard));
}

}  // namespace fnse::ad
