#pragma once
// Enhancement heads: a single-conv compressed-cIRM head for the generative
// family and a U-Net style waveform decoder for the contrastive family.
#include <vector>

#include "fnse/dsp.hpp"
#include "fnse/nn.hpp"
#include "fnse/upstream.hpp"

namespace fnse::downstream {

using ad::Tensor;

class CirmHead {
 public:
  CirmHead() = default;
  CirmHead(std::size_t d, std::size_t bins, Rng& rng, std::size_t kernel = 3);
  // Sets the bias so an all-zero feature map decodes to the identity mask.
  void init_identity(const dsp::CirmConfig& cirm);

  // features [B, frames, d] -> compressed mask [B, frames, bins, 2] (re, im).
  Tensor forward(const Tensor& features) const;
  // Checks the frame count against a noisy spectrogram before running.
  Tensor forward(const Tensor& features, std::size_t expected_frames) const;
  void collect(nn::ParamRefs& out, const std::string& prefix = "head");
  std::size_t bins() const { return bins_; }

  nn::Conv1d conv;  // d -> 2*bins, channel 2j is the real part of bin j

 private:
  std::size_t bins_ = 0;
};

// [B, frames, bins, 2] -> planar [B, frames, 2*bins] ([re | im] per frame).
Tensor interleaved_to_planar(const Tensor& mask);

// Complex product of two planar [B, frames, 2*bins] tensors.
Tensor planar_complex_mul(const Tensor& a, const Tensor& b);

// Decompresses a predicted compressed mask, applies it to the planar noisy
// spectrogram and resynthesizes [B, length].
Tensor apply_compressed_mask(const Tensor& compressed, const Tensor& noisy_planar,
                             const dsp::StftConfig& stft, std::size_t length,
                             const dsp::CirmConfig& cirm);

class UnetDecoder {
 public:
  UnetDecoder() = default;
  UnetDecoder(const upstream::EncoderConfig& enc, Rng& rng, std::size_t bottleneck_tap = 1);

  // bottleneck [B, N/F, d]; skips are the encoder conv outputs, shallowest
  // first. Returns [B, N].
  Tensor forward(const Tensor& bottleneck, const std::vector<Tensor>& skips) const;
  void collect(nn::ParamRefs& out, const std::string& prefix = "decoder");
  std::size_t bottleneck_tap() const { return bottleneck_tap_; }
  std::size_t depth() const { return deconvs.size(); }

  std::vector<nn::ConvTranspose1d> deconvs;  // deepest first
  std::vector<nn::Conv1d> reducers;          // pointwise, indexed like the encoder convs

 private:
  std::size_t bottleneck_tap_ = 1;
};

// Zero-pads [B, N] on the right to a multiple of `factor`.
Tensor pad_to_multiple(const Tensor& waveform, std::size_t factor);

}  // namespace fnse::downstream
