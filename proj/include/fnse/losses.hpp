#pragma once
// Training objectives: compressed-cIRM MSE, time-domain MSE and the
// multi-resolution STFT loss.
#include <array>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fnse/dsp.hpp"
#include "fnse/tensor.hpp"
#include "fnse/upstream.hpp"

namespace fnse::losses {

using ad::Tensor;

struct MstftConfig {
  std::vector<dsp::StftConfig> sub_configs;
  std::vector<double> weights;
  double eps_log = 1e-7;
  double sc_floor = 1e-8;   // floor on the spectral-convergence denominator
  double mag_guard = 1e-12;  // sqrt(re^2 + im^2 + guard)

  static MstftConfig preset();
  void validate() const;
};

struct LossWeights {
  double cirm = 1.0;
  double time = 1.0;
  double mstft = 1.0;
};

// Target compressed cIRM for paired planar spectrograms, as [B, T, bins, 2].
Tensor cirm_target(const Tensor& noisy_planar, const Tensor& clean_planar,
                   const dsp::CirmConfig& cfg);

// MSE between a predicted compressed mask and the oracle compressed mask.
Tensor cirm_loss(const Tensor& pred, const Tensor& noisy_planar, const Tensor& clean_planar,
                 const dsp::CirmConfig& cfg);

Tensor time_mse(const Tensor& pred, const Tensor& target);

struct MstftTerms {
  Tensor total;
  std::vector<Tensor> per_config;  // sc + weighted log term per resolution
};

// pred, target: [B, N] or [N].
MstftTerms mstft_terms(const Tensor& pred, const Tensor& target, const MstftConfig& cfg);
Tensor mstft_loss(const Tensor& pred, const Tensor& target, const MstftConfig& cfg);

struct LossBreakdown {
  double total = 0.0;
  double cirm = 0.0;
  double time = 0.0;
  std::vector<double> mstft;  // one per resolution
};

struct CompositeInputs {
  Tensor enhanced;      // [B, N]
  Tensor clean;         // [B, N]
  Tensor pred_mask;     // generative only, [B, T, bins, 2]
  Tensor noisy_planar;  // generative only
  Tensor clean_planar;  // generative only
};

struct CompositeLoss {
  Tensor total;
  LossBreakdown breakdown;
};

CompositeLoss composite_loss(const CompositeInputs& in, const LossWeights& w,
                             upstream::Family family, const MstftConfig& mstft,
                             const dsp::CirmConfig& cirm);

// Appends rows of step,total,cirm,time,mstft1..3,k to a CSV file.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(std::size_t step, const LossBreakdown& b, double k);
  static std::string header();
  static std::string row(std::size_t step, const LossBreakdown& b, double k);

 private:
  std::ofstream out_;
};

}  // namespace fnse::losses
