#pragma once

// Differentiable bridges between the tensor core and the DSP kernels.

#include "fnse/dsp.hpp"
#include "fnse/tensor.hpp"

namespace fnse::ad {

// signal: [B, N] -> [B, frames, 2*bins]; each frame row is [re | im].
Tensor stft(const Tensor& signal, const dsp::StftConfig& cfg);

// frames: [B, frames, 2*bins] -> [B, length]
Tensor istft(const Tensor& frames, const dsp::StftConfig& cfg, std::size_t length);

// Elementwise inverse of the cIRM compression. Clamped inputs get zero gradient.
Tensor decompress(const Tensor& x, const dsp::CirmConfig& cfg);

// Magnitude sqrt(re^2 + im^2 + guard) of a planar [.., 2*bins] tensor -> [.., bins].
Tensor planar_magnitude(const Tensor& planar, double guard = 1e-12);

}  // namespace fnse::ad
