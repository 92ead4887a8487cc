#include "fnse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "fnse/errors.hpp"

namespace fnse::metrics {

namespace {

void require_equal_length(std::span<const double> a, std::span<const double> b, const char* who) {
  if (a.size() != b.size()) {
    throw ValidationError(std::string(who) + ": length mismatch " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw ValidationError(std::string(who) + ": empty signal");
}

double db_ratio(double num, double den) {
  if (den <= 0.0) return std::numeric_limits<double>::infinity();
  if (num <= 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(num / den);
}

}  // namespace

double si_sdr(std::span<const double> estimate, std::span<const double> reference) {
  require_equal_length(estimate, reference, "si_sdr");
  double rr = 0.0, er = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    rr += reference[i] * reference[i];
    er += estimate[i] * reference[i];
  }
  if (!(rr > 0.0)) throw ValidationError("si_sdr: reference is all zero");
  const double alpha = er / rr;
  double tt = 0.0, ee = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference[i];
    const double e = estimate[i] - t;
    tt += t * t;
    ee += e * e;
  }
  return std::clamp(db_ratio(tt, ee), -kSiSdrCap, kSiSdrCap);
}

double seg_snr(std::span<const double> estimate, std::span<const double> reference,
               const SegSnrConfig& cfg) {
  require_equal_length(estimate, reference, "seg_snr");
  if (cfg.frame == 0 || cfg.hop == 0) throw ValidationError("seg_snr: frame and hop must be positive");
  const std::size_t n = reference.size();
  const std::size_t frames = n <= cfg.frame ? 1 : (n - cfg.frame) / cfg.hop + 1;
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t lo = f * cfg.hop, hi = std::min(n, lo + cfg.frame);
    double s = 0.0, e = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      s += reference[i] * reference[i];
      const double d = reference[i] - estimate[i];
      e += d * d;
    }
    double v;
    if (e <= 0.0) v = cfg.ceil_db;
    else if (s <= 0.0) v = cfg.floor_db;
    else v = 10.0 * std::log10(s / e);
    total += std::clamp(v, cfg.floor_db, cfg.ceil_db);
  }
  return total / static_cast<double>(frames);
}

double log_spectral_distance(std::span<const double> estimate, std::span<const double> reference,
                             const dsp::StftConfig& cfg) {
  require_equal_length(estimate, reference, "log_spectral_distance");
  constexpr double kPowerGuard = 1e-20;
  const auto E = dsp::stft(estimate, cfg);
  const auto R = dsp::stft(reference, cfg);
  double acc = 0.0;
  for (Eigen::Index t = 0; t < R.real.rows(); ++t) {
    double frame = 0.0;
    for (Eigen::Index k = 0; k < R.real.cols(); ++k) {
      const double pe = E.real(t, k) * E.real(t, k) + E.imag(t, k) * E.imag(t, k);
      const double pr = R.real(t, k) * R.real(t, k) + R.imag(t, k) * R.imag(t, k);
      const double d = 10.0 * std::log10(pe + kPowerGuard) - 10.0 * std::log10(pr + kPowerGuard);
      frame += d * d;
    }
    acc += frame / static_cast<double>(R.real.cols());
  }
  return std::sqrt(acc / static_cast<double>(R.real.rows()));
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& u : per_utterance) {
    per.push_back({{"id", u.id}, {"si_sdr_db", u.si_sdr_db}, {"seg_snr_db", u.seg_snr_db}, {"lsd", u.lsd}});
  }
  return {{"si_sdr_db", si_sdr_db}, {"seg_snr_db", seg_snr_db}, {"lsd", lsd}, {"per_utterance", per}};
}

MetricReport aggregate(std::vector<UtteranceMetrics> per_utterance) {
  MetricReport r;
  r.per_utterance = std::move(per_utterance);
  if (r.per_utterance.empty()) return r;
  for (const auto& u : r.per_utterance) {
    r.si_sdr_db += u.si_sdr_db;
    r.seg_snr_db += u.seg_snr_db;
    r.lsd += u.lsd;
  }
  const double n = static_cast<double>(r.per_utterance.size());
  r.si_sdr_db /= n;
  r.seg_snr_db /= n;
  r.lsd /= n;
  return r;
}

CosineResult frame_cosine(const ad::Tensor& a, const ad::Tensor& b) {
  if (a.shape() != b.shape() || a.rank() < 1) {
    throw ValidationError("frame_cosine: shape mismatch " + ad::shape_str(a.shape()) + " vs " +
                          ad::shape_str(b.shape()));
  }
  const std::size_t d = a.shape().back();
  const std::size_t n = a.size() / d;
  const auto av = a.values(), bv = b.values();
  CosineResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ab += av[i * d + j] * bv[i * d + j];
      aa += av[i * d + j] * av[i * d + j];
      bb += bv[i * d + j] * bv[i * d + j];
    }
    if (aa <= 0.0 || bb <= 0.0) {
      ++r.skipped;
      continue;
    }
    sum += std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
    ++r.counted;
  }
  r.mean = r.counted ? sum / static_cast<double>(r.counted) : 0.0;
  return r;
}

std::string to_string(ReferenceMode m) {
  return m == ReferenceMode::frozen_pretrained ? "frozen_pretrained" : "live_clean";
}

ReferenceMode reference_mode_from_string(const std::string& s) {
  if (s == "frozen_pretrained") return ReferenceMode::frozen_pretrained;
  if (s == "live_clean") return ReferenceMode::live_clean;
  throw ConfigError("unknown similarity reference '" + s + "'");
}

CosineResult layer_cosine_similarity(const upstream::Encoder& encoder,
                                     const upstream::Encoder& reference,
                                     const std::vector<data::PairedExample>& pairs,
                                     std::size_t layer, ReferenceMode mode) {
  if (layer > encoder.layer_count()) throw ValidationError("layer_cosine_similarity: layer out of range");
  if (mode == ReferenceMode::frozen_pretrained && layer > reference.layer_count()) {
    throw ValidationError("layer_cosine_similarity: reference is shallower than the layer");
  }
  const upstream::Encoder& ref = mode == ReferenceMode::live_clean ? encoder : reference;
  ad::NoGradGuard ng;
  CosineResult total;
  double sum = 0.0;
  for (const auto& p : pairs) {
    const auto n = p.noisy.size();
    const ad::Tensor noisy = ad::Tensor::from({1, n}, p.noisy);
    const ad::Tensor clean = ad::Tensor::from({1, n}, p.clean);
    const auto a = encoder.forward_with_taps(encoder.prepare(noisy), layer).taps.at(layer);
    const auto b = ref.forward_with_taps(ref.prepare(clean), layer).taps.at(layer);
    const CosineResult r = frame_cosine(a, b);
    sum += r.mean * static_cast<double>(r.counted);
    total.counted += r.counted;
    total.skipped += r.skipped;
  }
  total.mean = total.counted ? sum / static_cast<double>(total.counted) : 0.0;
  return total;
}

std::string similarity_csv(const std::vector<SimilarityCurve>& curves) {
  std::ostringstream os;
  os << "step,layer,cos_sim\n" << std::setprecision(17);
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.steps.size(); ++i) os << c.steps[i] << ',' << c.layer_tag << ',' << c.cos_sim[i] << '\n';
  return os.str();
}

}  // namespace fnse::metrics
