#include "fnse/downstream.hpp"

#include "fnse/errors.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::downstream {

CirmHead::CirmHead(std::size_t d, std::size_t bins, Rng& rng, std::size_t kernel)
    : conv(d, 2 * bins, kernel, 1, kernel / 2, rng), bins_(bins) {
  if (kernel % 2 == 0) throw ConfigError("CirmHead: kernel must be odd for same padding");
}

void CirmHead::init_identity(const dsp::CirmConfig& cirm) {
  auto b = conv.bias.tensor.mutable_values();
  const double re = dsp::compress_value(1.0, cirm);
  for (std::size_t j = 0; j < bins_; ++j) {
    b[2 * j] = re;
    b[2 * j + 1] = 0.0;
  }
}

Tensor CirmHead::forward(const Tensor& features) const {
  if (features.rank() != 3) {
    throw ValidationError("CirmHead: expected [B, frames, d], got " + ad::shape_str(features.shape()));
  }
  const Tensor y = conv.forward(features);
  return ad::reshape(y, {y.dim(0), y.dim(1), bins_, 2});
}

Tensor CirmHead::forward(const Tensor& features, std::size_t expected_frames) const {
  if (features.rank() != 3 || features.dim(1) != expected_frames) {
    throw ValidationError("CirmHead: feature frames " +
                          (features.rank() == 3 ? std::to_string(features.dim(1)) : std::string("?")) +
                          " do not match spectrogram frames " + std::to_string(expected_frames));
  }
  return forward(features);
}

void CirmHead::collect(nn::ParamRefs& out, const std::string& prefix) {
  conv.collect(out, prefix + ".conv");
}

Tensor interleaved_to_planar(const Tensor& mask) {
  if (mask.rank() != 4 || mask.dim(3) != 2) {
    throw ValidationError("interleaved_to_planar: expected [B, T, bins, 2], got " +
                          ad::shape_str(mask.shape()));
  }
  const std::size_t B = mask.dim(0), T = mask.dim(1), bins = mask.dim(2);
  const Tensor flat = ad::reshape(mask, {B, T, 2 * bins});
  return ad::concat({ad::slice(flat, 2, 0, 2 * bins, 2), ad::slice(flat, 2, 1, 2 * bins, 2)}, 2);
}

Tensor planar_complex_mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.shape().back() % 2 != 0) {
    throw ValidationError("planar_complex_mul: shape mismatch " + ad::shape_str(a.shape()) +
                          " vs " + ad::shape_str(b.shape()));
  }
  const std::size_t axis = a.rank() - 1, n = a.shape().back(), h = n / 2;
  const Tensor ar = ad::slice(a, axis, 0, h), ai = ad::slice(a, axis, h, n);
  const Tensor br = ad::slice(b, axis, 0, h), bi = ad::slice(b, axis, h, n);
  return ad::concat({ad::sub(ad::mul(ar, br), ad::mul(ai, bi)),
                     ad::add(ad::mul(ar, bi), ad::mul(ai, br))},
                    axis);
}

Tensor apply_compressed_mask(const Tensor& compressed, const Tensor& noisy_planar,
                             const dsp::StftConfig& stft, std::size_t length,
                             const dsp::CirmConfig& cirm) {
  const Tensor mask = ad::decompress(interleaved_to_planar(compressed), cirm);
  return ad::istft(planar_complex_mul(mask, noisy_planar), stft, length);
}

// ---- U-Net

UnetDecoder::UnetDecoder(const upstream::EncoderConfig& enc, Rng& rng, std::size_t bottleneck_tap)
    : bottleneck_tap_(bottleneck_tap) {
  if (enc.family != upstream::Family::contrastive) {
    throw ConfigError("UnetDecoder: requires the contrastive encoder family");
  }
  enc.validate();
  if (bottleneck_tap > enc.layers) throw ConfigError("UnetDecoder: bottleneck tap above the transformer");
  const std::size_t F = enc.conv_channels.size();
  const std::size_t pad = (enc.conv_kernel - enc.conv_stride) / 2;
  for (std::size_t i = 0; i < F; ++i) {
    reducers.emplace_back(enc.conv_channels[i], enc.conv_channels[i] / 2, 1, 1, 0, rng);
  }
  // Deconv i mirrors conv i: it consumes the running features plus reduced
  // skip i and emits conv i's input width.
  std::size_t running = enc.d;
  for (std::size_t k = 0; k < F; ++k) {
    const std::size_t i = F - 1 - k;
    const std::size_t out = i == 0 ? 1 : enc.conv_channels[i - 1];
    deconvs.emplace_back(running + enc.conv_channels[i] / 2, out, enc.conv_kernel, enc.conv_stride,
                         pad, rng);
    running = out;
  }
}

Tensor UnetDecoder::forward(const Tensor& bottleneck, const std::vector<Tensor>& skips) const {
  const std::size_t F = deconvs.size();
  if (skips.size() != F) {
    throw ValidationError("UnetDecoder: expected " + std::to_string(F) + " skips, got " +
                          std::to_string(skips.size()));
  }
  Tensor h = bottleneck;
  for (std::size_t k = 0; k < F; ++k) {
    const std::size_t i = F - 1 - k;
    const Tensor& s = skips[i];
    if (s.rank() != 3 || h.rank() != 3 || s.dim(0) != h.dim(0) || s.dim(1) != h.dim(1)) {
      throw ValidationError("UnetDecoder: skip " + std::to_string(i) + " shape " +
                            ad::shape_str(s.shape()) + " does not align with " +
                            ad::shape_str(h.shape()));
    }
    h = deconvs[k].forward(ad::concat({h, reducers[i].forward(s)}, 2));
    if (i != 0) h = ad::gelu(h);
  }
  return ad::reshape(h, {h.dim(0), h.dim(1)});
}

void UnetDecoder::collect(nn::ParamRefs& out, const std::string& prefix) {
  for (std::size_t k = 0; k < deconvs.size(); ++k) {
    deconvs[k].collect(out, prefix + ".deconvs." + std::to_string(k));
  }
  for (std::size_t i = 0; i < reducers.size(); ++i) {
    reducers[i].collect(out, prefix + ".reducers." + std::to_string(i));
  }
}

Tensor pad_to_multiple(const Tensor& waveform, std::size_t factor) {
  if (waveform.rank() != 2) throw ValidationError("pad_to_multiple: expected [B, N]");
  const std::size_t n = waveform.dim(1);
  const std::size_t rem = n % factor;
  if (rem == 0) return waveform;
  return ad::concat({waveform, Tensor::zeros({waveform.dim(0), factor - rem})}, 1);
}

}  // namespace fnse::downstream
