#pragma once
// Waveform quality metrics and the clean/noisy feature cosine diagnostic.
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/data.hpp"
#include "fnse/dsp.hpp"
#include "fnse/tensor.hpp"
#include "fnse/upstream.hpp"

namespace fnse::metrics {

inline constexpr double kSiSdrCap = 100.0;

// Scale-invariant SDR in dB, capped at kSiSdrCap.
double si_sdr(std::span<const double> estimate, std::span<const double> reference);

struct SegSnrConfig {
  std::size_t frame = 256;
  std::size_t hop = 128;
  double floor_db = -10.0;
  double ceil_db = 35.0;
};

double seg_snr(std::span<const double> estimate, std::span<const double> reference,
               const SegSnrConfig& cfg = {});

// RMS over frames of the per-frame RMS difference of 20 log10 magnitudes.
double log_spectral_distance(std::span<const double> estimate, std::span<const double> reference,
                             const dsp::StftConfig& cfg = dsp::feature_preset());

struct UtteranceMetrics {
  std::string id;
  double si_sdr_db = 0.0;
  double seg_snr_db = 0.0;
  double lsd = 0.0;
};

struct MetricReport {
  double si_sdr_db = 0.0;
  double seg_snr_db = 0.0;
  double lsd = 0.0;
  std::vector<UtteranceMetrics> per_utterance;

  nlohmann::json to_json() const;
};

// Aggregates are plain means, summed in the given order.
MetricReport aggregate(std::vector<UtteranceMetrics> per_utterance);

struct CosineResult {
  double mean = 0.0;
  std::size_t counted = 0;
  std::size_t skipped = 0;  // frames where either vector has zero norm
};

// Per-frame cosine of two [.., d] tensors of equal shape.
CosineResult frame_cosine(const ad::Tensor& a, const ad::Tensor& b);

enum class ReferenceMode { frozen_pretrained, live_clean };
std::string to_string(ReferenceMode m);
ReferenceMode reference_mode_from_string(const std::string& s);

// Mean cosine, over utterances and frames, between `encoder` on noisy input and
// the reference on clean input, at tap `layer`. With live_clean the reference
// is `encoder` itself.
CosineResult layer_cosine_similarity(const upstream::Encoder& encoder,
                                     const upstream::Encoder& reference,
                                     const std::vector<data::PairedExample>& pairs,
                                     std::size_t layer,
                                     ReferenceMode mode = ReferenceMode::frozen_pretrained);

struct SimilarityCurve {
  std::size_t layer_tag = 0;
  std::vector<std::size_t> steps;
  std::vector<double> cos_sim;
};

// step,layer,cos_sim rows.
std::string similarity_csv(const std::vector<SimilarityCurve>& curves);

}  // namespace fnse::metrics
