#pragma once
// Toy upstream encoders with per-layer taps.
//
// Both families share the same shape: an input stage that produces tap x_0,
// followed by transformer layers where layer l maps x_l to x_{l+1}. The
// generative family reads log-magnitude frames; the contrastive family reads
// raw waveform through a strided conv feature encoder whose per-conv outputs
// are kept for decoder skips.
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/dsp.hpp"
#include "fnse/nn.hpp"
#include "fnse/rng.hpp"

namespace fnse::upstream {

using ad::Tensor;

enum class Family { generative, contrastive };
std::string to_string(Family f);
Family family_from_string(const std::string& s);

struct EncoderConfig {
  Family family = Family::generative;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t ff = 128;
  dsp::StftConfig features = dsp::feature_preset();  // generative input frames
  std::vector<std::size_t> conv_channels{32, 32, 64, 64};
  std::size_t conv_kernel = 4;
  std::size_t conv_stride = 2;

  void validate() const;
  // Product of the conv strides (contrastive); 1 for generative.
  std::size_t downsample() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

struct TapForward {
  Tensor final;                // x_L for the layers that ran
  std::vector<Tensor> taps;    // x_0 .. x_L
  std::vector<Tensor> skips;   // contrastive conv outputs, shallowest first
};

class Encoder {
 public:
  virtual ~Encoder() = default;

  const EncoderConfig& config() const { return cfg_; }
  Family family() const { return cfg_.family; }
  std::size_t layer_count() const { return layers_.size(); }
  nn::TransformerLayer& layer(std::size_t l) { return layers_.at(l); }
  const nn::TransformerLayer& layer(std::size_t l) const { return layers_.at(l); }

  // Waveform [B, N] -> family input ([B, frames, bins] or [B, N, 1]). Never tracks grad.
  virtual Tensor prepare(const Tensor& waveform) const = 0;
  // Family input -> x_0; appends conv outputs to skips when non-null.
  virtual Tensor embed(const Tensor& input, std::vector<Tensor>* skips) const = 0;

  // Runs the input stage and the first `depth` layers (all when depth exceeds
  // the layer count).
  TapForward forward_with_taps(const Tensor& input, std::size_t depth = SIZE_MAX) const;

  nn::ParamRefs parameters();
  nn::ParamRefs input_parameters();
  nn::ParamRefs layer_parameters(std::size_t l);
  void set_frozen(bool frozen);

  // Deep copy with fresh parameter storage, optionally keeping only the
  // first `keep_layers` transformer layers.
  virtual std::unique_ptr<Encoder> clone(std::size_t keep_layers = SIZE_MAX) const = 0;

 protected:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {}
  Tensor add_positions(const Tensor& x) const;
  void copy_layers_from(const Encoder& src, std::size_t keep);
  virtual void collect_input(nn::ParamRefs& out) = 0;

  EncoderConfig cfg_;
  std::vector<nn::TransformerLayer> layers_;
};

class GenerativeEncoder final : public Encoder {
 public:
  GenerativeEncoder(const EncoderConfig& cfg, Rng& rng);
  Tensor prepare(const Tensor& waveform) const override;
  Tensor embed(const Tensor& input, std::vector<Tensor>* skips) const override;
  std::unique_ptr<Encoder> clone(std::size_t keep_layers = SIZE_MAX) const override;

  nn::Linear input_proj;

 private:
  explicit GenerativeEncoder(const EncoderConfig& cfg) : Encoder(cfg) {}
  void collect_input(nn::ParamRefs& out) override;
};

class ContrastiveEncoder final : public Encoder {
 public:
  ContrastiveEncoder(const EncoderConfig& cfg, Rng& rng);
  Tensor prepare(const Tensor& waveform) const override;
  Tensor embed(const Tensor& input, std::vector<Tensor>* skips) const override;
  std::unique_ptr<Encoder> clone(std::size_t keep_layers = SIZE_MAX) const override;

  std::vector<nn::Conv1d> convs;
  nn::Linear feature_proj;

 private:
  explicit ContrastiveEncoder(const EncoderConfig& cfg) : Encoder(cfg) {}
  void collect_input(nn::ParamRefs& out) override;
};

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& cfg, Rng& rng);

// log(1 + |STFT|) of each row of a [B, N] waveform -> [B, frames, bins].
Tensor log_magnitude(const Tensor& waveform, const dsp::StftConfig& cfg);

// Untrainable copy of an encoder's input stage and layers 0..l_norm.
class FrozenPrefix {
 public:
  FrozenPrefix(const Encoder& encoder, std::size_t l_norm);
  std::size_t depth() const { return l_norm_; }
  const Encoder& encoder() const { return *enc_; }
  Encoder& encoder() { return *enc_; }
  // Taps y_0 .. y_{l_norm} under no-grad.
  std::vector<Tensor> taps(const Tensor& input) const;

 private:
  std::unique_ptr<Encoder> enc_;
  std::size_t l_norm_;
};

FrozenPrefix clone_frozen_prefix(const Encoder& encoder, std::size_t l_norm);

// ---- masked-reconstruction pretraining

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double mask_ratio = 0.15;
  std::size_t span = 3;
  std::size_t crop = 2000;      // samples per training crop
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;   // 0: only at start and end
  // Small STFT that the contrastive head reconstructs, aligned to the
  // downsampled frame rate.
  dsp::StftConfig contrastive_target = dsp::StftConfig::make(64, 64, 16);

  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  double initial_heldout = 0.0;
  double final_heldout = 0.0;
  std::vector<std::pair<std::size_t, double>> train_curve;
  std::vector<std::pair<std::size_t, double>> heldout_curve;
};

// Reconstruction head that is discarded after pretraining.
struct PretrainHead {
  nn::Linear proj;
  void collect(nn::ParamRefs& out) { proj.collect(out, "pretrain_head"); }
};

PretrainHead make_pretrain_head(const Encoder& encoder, const PretrainConfig& cfg, Rng& rng);

// Frame-level mask of contiguous spans covering about ratio*frames frames.
std::vector<bool> sample_span_mask(std::size_t frames, double ratio, std::size_t span, Rng& rng);

// L1 between the head's reconstruction and the target on masked frames. Masked
// positions of x_0 (generative: of the input frames) are zeroed before the
// transformer. Returns exactly 0 with no gradient path when nothing is masked.
Tensor masked_reconstruction_loss(const Encoder& encoder, const PretrainHead& head,
                                  const Tensor& waveform, const std::vector<std::vector<bool>>& masks,
                                  const PretrainConfig& cfg);

// Frame count the reconstruction target and masks use for a crop of n samples.
std::size_t pretrain_frames(const Encoder& encoder, std::size_t n, const PretrainConfig& cfg);

PretrainResult pretrain_masked_reconstruction(Encoder& encoder,
                                              const std::vector<std::vector<double>>& train,
                                              const std::vector<std::vector<double>>& heldout,
                                              const PretrainConfig& cfg);

}  // namespace fnse::upstream
