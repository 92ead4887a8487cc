#include "fnse/losses.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "fnse/errors.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::losses {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(who) + ": shape mismatch " + ad::shape_str(a.shape()) +
                          " vs " + ad::shape_str(b.shape()));
  }
}

Tensor as_batch(const Tensor& x) {
  if (x.rank() == 1) return ad::reshape(x, {1, x.dim(0)});
  if (x.rank() != 2) throw ValidationError("mstft_loss: expected [N] or [B, N]");
  return x;
}

}  // namespace

MstftConfig MstftConfig::preset() {
  MstftConfig c;
  const auto p = dsp::mstft_presets();
  c.sub_configs.assign(p.begin(), p.end());
  c.weights.assign(p.size(), 1.0);
  return c;
}

void MstftConfig::validate() const {
  if (sub_configs.empty()) throw ConfigError("mstft: no sub-configs");
  if (weights.size() != sub_configs.size()) throw ConfigError("mstft: one weight per sub-config required");
  for (double w : weights)
    if (!(w >= 0.0)) throw ConfigError("mstft: weights must be nonnegative");
  if (!(eps_log > 0.0) || !(sc_floor > 0.0) || !(mag_guard >= 0.0)) throw ConfigError("mstft: bad guards");
  for (const auto& c : sub_configs) c.validate();
}

Tensor cirm_target(const Tensor& noisy_planar, const Tensor& clean_planar,
                   const dsp::CirmConfig& cfg) {
  cfg.validate();
  require_same(noisy_planar, clean_planar, "cirm_target");
  if (noisy_planar.rank() != 3 || noisy_planar.dim(2) % 2 != 0) {
    throw ValidationError("cirm_target: expected planar [B, T, 2*bins]");
  }
  const std::size_t B = noisy_planar.dim(0), T = noisy_planar.dim(1), bins = noisy_planar.dim(2) / 2;
  const auto y = noisy_planar.values();
  const auto s = clean_planar.values();
  std::vector<double> out(B * T * bins * 2);
  for (std::size_t row = 0; row < B * T; ++row) {
    const double* yr = y.data() + row * 2 * bins;
    const double* yi = yr + bins;
    const double* sr = s.data() + row * 2 * bins;
    const double* si = sr + bins;
    for (std::size_t k = 0; k < bins; ++k) {
      const double den = yr[k] * yr[k] + yi[k] * yi[k] + cfg.eps;
      const double mr = (yr[k] * sr[k] + yi[k] * si[k]) / den;
      const double mi = (yr[k] * si[k] - yi[k] * sr[k]) / den;
      out[(row * bins + k) * 2] = dsp::compress_value(mr, cfg);
      out[(row * bins + k) * 2 + 1] = dsp::compress_value(mi, cfg);
    }
  }
  return Tensor::from({B, T, bins, 2}, std::move(out));
}

Tensor cirm_loss(const Tensor& pred, const Tensor& noisy_planar, const Tensor& clean_planar,
                 const dsp::CirmConfig& cfg) {
  const Tensor target = cirm_target(noisy_planar, clean_planar, cfg);
  require_same(pred, target, "cirm_loss");
  return ad::mean(ad::square(ad::sub(pred, target)));
}

Tensor time_mse(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "time_mse");
  return ad::mean(ad::square(ad::sub(pred, target)));
}

MstftTerms mstft_terms(const Tensor& pred, const Tensor& target, const MstftConfig& cfg) {
  cfg.validate();
  require_same(pred, target, "mstft_loss");
  const Tensor p = as_batch(pred), t = as_batch(target);
  MstftTerms out;
  Tensor total;
  for (std::size_t i = 0; i < cfg.sub_configs.size(); ++i) {
    const auto& sc = cfg.sub_configs[i];
    if (p.dim(1) < sc.win_size) {
      throw ValidationError("mstft_loss: signal shorter than window " + std::to_string(sc.win_size));
    }
    const Tensor mp = ad::planar_magnitude(ad::stft(p, sc), cfg.mag_guard);
    const Tensor mt = ad::planar_magnitude(ad::stft(t, sc), cfg.mag_guard);
    const Tensor num = ad::sqrt(ad::sum(ad::square(ad::sub(mt, mp))));
    double den_v = 0.0;
    for (double v : mt.values()) den_v += v * v;
    Tensor den = ad::sqrt(ad::sum(ad::square(mt)));
    if (std::sqrt(den_v) < cfg.sc_floor) den = Tensor::scalar(cfg.sc_floor);
    const Tensor sc_term = ad::div(num, den);
    const Tensor log_term = ad::mean(ad::abs(ad::sub(ad::log(ad::add_scalar(mt, cfg.eps_log)),
                                                     ad::log(ad::add_scalar(mp, cfg.eps_log)))));
    const Tensor term = ad::mul_scalar(ad::add(sc_term, log_term), cfg.weights[i]);
    out.per_config.push_back(term);
    total = total.defined() ? ad::add(total, term) : term;
  }
  out.total = total;
  return out;
}

Tensor mstft_loss(const Tensor& pred, const Tensor& target, const MstftConfig& cfg) {
  return mstft_terms(pred, target, cfg).total;
}

CompositeLoss composite_loss(const CompositeInputs& in, const LossWeights& w,
                             upstream::Family family, const MstftConfig& mstft,
                             const dsp::CirmConfig& cirm) {
  const bool gen = family == upstream::Family::generative;
  const double wc = gen ? w.cirm : 0.0;
  if (w.cirm < 0.0 || w.time < 0.0 || w.mstft < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (wc == 0.0 && w.time == 0.0 && w.mstft == 0.0) {
    throw ConfigError("composite_loss: every applicable loss weight is zero");
  }
  CompositeLoss out;
  Tensor total;
  auto accumulate = [&](const Tensor& term, double weight) {
    const Tensor t = ad::mul_scalar(term, weight);
    total = total.defined() ? ad::add(total, t) : t;
  };
  if (wc > 0.0) {
    const Tensor c = cirm_loss(in.pred_mask, in.noisy_planar, in.clean_planar, cirm);
    out.breakdown.cirm = c.item();
    accumulate(c, wc);
  }
  if (w.time > 0.0) {
    const Tensor t = time_mse(in.enhanced, in.clean);
    out.breakdown.time = t.item();
    accumulate(t, w.time);
  }
  if (w.mstft > 0.0) {
    const MstftTerms m = mstft_terms(in.enhanced, in.clean, mstft);
    for (const auto& term : m.per_config) out.breakdown.mstft.push_back(term.item());
    accumulate(m.total, w.mstft);
  } else {
    out.breakdown.mstft.assign(mstft.sub_configs.size(), 0.0);
  }
  out.total = total;
  out.breakdown.total = total.item();
  return out;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw Error("cannot open loss log " + path.string());
  out_ << header() << '\n';
}

void LossLog::append(std::size_t step, const LossBreakdown& b, double k) {
  out_ << row(step, b, k) << '\n';
}

std::string LossLog::header() { return "step,total,cirm,time,mstft1,mstft2,mstft3,k"; }

std::string LossLog::row(std::size_t step, const LossBreakdown& b, double k) {
  std::ostringstream os;
  os << std::setprecision(17) << step << ',' << b.total << ',' << b.cirm << ',' << b.time;
  for (std::size_t i = 0; i < 3; ++i) os << ',' << (i < b.mstft.size() ? b.mstft[i] : 0.0);
  os << ',' << k;
  return os.str();
}

}  // namespace fnse::losses
