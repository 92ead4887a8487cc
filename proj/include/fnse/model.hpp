#pragma once
// Enhancement model: an upstream encoder plus the family's head.
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/checkpoint.hpp"
#include "fnse/downstream.hpp"
#include "fnse/featnorm.hpp"
#include "fnse/upstream.hpp"

namespace fnse::model {

using ad::Tensor;

struct ModelConfig {
  upstream::EncoderConfig encoder;
  std::size_t bottleneck_tap = 1;  // contrastive only
  dsp::CirmConfig cirm;

  static ModelConfig for_family(upstream::Family f);
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ForwardOutput {
  Tensor enhanced;      // [B, N]
  Tensor pred_mask;     // generative: [B, frames, bins, 2]
  Tensor noisy_planar;  // generative: [B, frames, 2*bins]
  Tensor features;      // encoder output fed to the head
  double k = 0.0;
};

class SeModel {
 public:
  SeModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  upstream::Family family() const { return cfg_.encoder.family; }
  upstream::Encoder& encoder() { return *encoder_; }
  const upstream::Encoder& encoder() const { return *encoder_; }
  // Transformer layers the enhancement path runs.
  std::size_t encoder_depth() const;
  // Tap the head reads.
  std::size_t output_tap() const { return encoder_depth(); }

  // Copies encoder weights from a pretraining checkpoint.
  void load_encoder(const ckpt::Checkpoint& ck);

  // Plain forward when plan is null or empty; otherwise the normalized dual
  // forward, which needs `clean` and `frozen`.
  ForwardOutput forward(const Tensor& noisy, const Tensor* clean = nullptr,
                        featnorm::NormPlan* plan = nullptr,
                        const upstream::FrozenPrefix* frozen = nullptr, std::size_t step = 0) const;

  // Single-utterance inference without normalization.
  std::vector<double> enhance(const std::vector<double>& noisy) const;

  nn::ParamRefs parameters();       // encoder + head
  nn::ParamRefs head_parameters();

  ckpt::Checkpoint snapshot();
  void restore(const ckpt::Checkpoint& ck);

  downstream::CirmHead cirm_head;
  downstream::UnetDecoder decoder;

 private:
  ModelConfig cfg_;
  std::unique_ptr<upstream::Encoder> encoder_;
};

}  // namespace fnse::model
