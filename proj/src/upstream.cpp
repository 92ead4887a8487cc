#include "fnse/upstream.hpp"

#include <algorithm>
#include <cmath>

#include "fnse/errors.hpp"
#include "fnse/optim.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::upstream {

namespace {

// Copy of a module whose parameters own fresh storage.
template <class M>
M deep_copy(const M& m) {
  M c = m;
  nn::ParamRefs refs;
  c.collect(refs, "tmp");
  for (auto* p : refs) *p = p->clone();
  return c;
}

std::vector<nn::TransformerLayer> make_layers(const EncoderConfig& cfg, Rng& rng) {
  std::vector<nn::TransformerLayer> layers;
  layers.reserve(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) layers.emplace_back(cfg.d, cfg.heads, cfg.ff, rng);
  return layers;
}

void require_waveform(const Tensor& w, const char* who) {
  if (w.rank() != 2 || w.dim(1) == 0) {
    throw ValidationError(std::string(who) + ": expected waveform [B, N], got " +
                          ad::shape_str(w.shape()));
  }
}

}  // namespace

std::string to_string(Family f) {
  return f == Family::generative ? "generative" : "contrastive";
}

Family family_from_string(const std::string& s) {
  if (s == "generative") return Family::generative;
  if (s == "contrastive") return Family::contrastive;
  throw ConfigError("unknown encoder family '" + s + "'");
}

void EncoderConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) throw ConfigError("encoder: d must be a positive multiple of heads");
  if (ff == 0) throw ConfigError("encoder: ff must be positive");
  features.validate();
  if (family == Family::contrastive) {
    if (conv_channels.empty()) throw ConfigError("encoder: contrastive family needs conv layers");
    if (conv_stride < 1 || conv_kernel < conv_stride) throw ConfigError("encoder: bad conv geometry");
    if ((conv_kernel - conv_stride) % 2 != 0) {
      throw ConfigError("encoder: conv kernel minus stride must be even for length-exact downsampling");
    }
    for (auto c : conv_channels) {
      if (c < 2 || c % 2 != 0) throw ConfigError("encoder: conv channels must be even and >= 2");
    }
  }
}

std::size_t EncoderConfig::downsample() const {
  if (family == Family::generative) return 1;
  std::size_t f = 1;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) f *= conv_stride;
  return f;
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"family", to_string(family)},
          {"d", d},
          {"heads", heads},
          {"layers", layers},
          {"ff", ff},
          {"features",
           {{"fft", features.fft_size}, {"win", features.win_size}, {"hop", features.hop}}},
          {"conv_channels", conv_channels},
          {"conv_kernel", conv_kernel},
          {"conv_stride", conv_stride}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.family = family_from_string(j.at("family").get<std::string>());
  c.d = j.at("d");
  c.heads = j.at("heads");
  c.layers = j.at("layers");
  c.ff = j.at("ff");
  const auto& f = j.at("features");
  c.features = dsp::StftConfig::make(f.at("fft"), f.at("win"), f.at("hop"));
  c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  c.conv_kernel = j.at("conv_kernel");
  c.conv_stride = j.at("conv_stride");
  c.validate();
  return c;
}

// ---- Encoder

TapForward Encoder::forward_with_taps(const Tensor& input, std::size_t depth) const {
  TapForward out;
  Tensor x = embed(input, &out.skips);
  out.taps.push_back(x);
  const std::size_t n = std::min(depth, layers_.size());
  for (std::size_t l = 0; l < n; ++l) {
    x = layers_[l].forward(x);
    out.taps.push_back(x);
  }
  out.final = x;
  return out;
}

nn::ParamRefs Encoder::parameters() {
  nn::ParamRefs out = input_parameters();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto p = layer_parameters(l);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

nn::ParamRefs Encoder::input_parameters() {
  nn::ParamRefs out;
  collect_input(out);
  return out;
}

nn::ParamRefs Encoder::layer_parameters(std::size_t l) {
  nn::ParamRefs out;
  layers_.at(l).collect(out, "encoder.layers." + std::to_string(l));
  return out;
}

void Encoder::set_frozen(bool frozen) {
  for (auto* p : parameters()) p->set_frozen(frozen);
}

Tensor Encoder::add_positions(const Tensor& x) const {
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  const Tensor pos = nn::sinusoidal_positions(T, d);
  std::vector<double> tiled;
  tiled.reserve(B * T * d);
  for (std::size_t b = 0; b < B; ++b) tiled.insert(tiled.end(), pos.vec().begin(), pos.vec().end());
  return ad::add(x, Tensor::from({B, T, d}, std::move(tiled)));
}

void Encoder::copy_layers_from(const Encoder& src, std::size_t keep) {
  const std::size_t n = std::min(keep, src.layers_.size());
  layers_.clear();
  for (std::size_t l = 0; l < n; ++l) layers_.push_back(deep_copy(src.layers_[l]));
  cfg_.layers = n;
}

Tensor log_magnitude(const Tensor& waveform, const dsp::StftConfig& cfg) {
  require_waveform(waveform, "log_magnitude");
  ad::NoGradGuard ng;
  return ad::log(ad::add_scalar(ad::planar_magnitude(ad::stft(waveform, cfg), 0.0), 1.0));
}

// ---- generative

GenerativeEncoder::GenerativeEncoder(const EncoderConfig& cfg, Rng& rng) : Encoder(cfg) {
  cfg_.family = Family::generative;
  cfg_.validate();
  input_proj = nn::Linear(cfg_.features.bins(), cfg_.d, rng);
  layers_ = make_layers(cfg_, rng);
}

Tensor GenerativeEncoder::prepare(const Tensor& waveform) const {
  return log_magnitude(waveform, cfg_.features);
}

Tensor GenerativeEncoder::embed(const Tensor& input, std::vector<Tensor>*) const {
  if (input.rank() != 3 || input.dim(2) != cfg_.features.bins()) {
    throw ValidationError("GenerativeEncoder: expected [B, frames, " +
                          std::to_string(cfg_.features.bins()) + "], got " +
                          ad::shape_str(input.shape()));
  }
  return add_positions(input_proj.forward(input));
}

std::unique_ptr<Encoder> GenerativeEncoder::clone(std::size_t keep_layers) const {
  std::unique_ptr<GenerativeEncoder> c(new GenerativeEncoder(cfg_));
  c->input_proj = deep_copy(input_proj);
  c->copy_layers_from(*this, keep_layers);
  return c;
}

void GenerativeEncoder::collect_input(nn::ParamRefs& out) {
  input_proj.collect(out, "encoder.input_proj");
}

// ---- contrastive

ContrastiveEncoder::ContrastiveEncoder(const EncoderConfig& cfg, Rng& rng) : Encoder(cfg) {
  cfg_.family = Family::contrastive;
  cfg_.validate();
  const std::size_t pad = (cfg_.conv_kernel - cfg_.conv_stride) / 2;
  std::size_t cin = 1;
  for (auto c : cfg_.conv_channels) {
    convs.emplace_back(cin, c, cfg_.conv_kernel, cfg_.conv_stride, pad, rng);
    cin = c;
  }
  feature_proj = nn::Linear(cin, cfg_.d, rng);
  layers_ = make_layers(cfg_, rng);
}

Tensor ContrastiveEncoder::prepare(const Tensor& waveform) const {
  require_waveform(waveform, "ContrastiveEncoder");
  ad::NoGradGuard ng;
  return ad::reshape(waveform, {waveform.dim(0), waveform.dim(1), 1});
}

Tensor ContrastiveEncoder::embed(const Tensor& input, std::vector<Tensor>* skips) const {
  if (input.rank() != 3 || input.dim(2) != 1) {
    throw ValidationError("ContrastiveEncoder: expected [B, N, 1], got " +
                          ad::shape_str(input.shape()));
  }
  if (input.dim(1) % cfg_.downsample() != 0) {
    throw ValidationError("ContrastiveEncoder: length " + std::to_string(input.dim(1)) +
                          " not divisible by " + std::to_string(cfg_.downsample()));
  }
  Tensor h = input;
  for (const auto& conv : convs) {
    h = ad::gelu(conv.forward(h));
    if (skips) skips->push_back(h);
  }
  return add_positions(feature_proj.forward(h));
}

std::unique_ptr<Encoder> ContrastiveEncoder::clone(std::size_t keep_layers) const {
  std::unique_ptr<ContrastiveEncoder> c(new ContrastiveEncoder(cfg_));
  for (const auto& conv : convs) c->convs.push_back(deep_copy(conv));
  c->feature_proj = deep_copy(feature_proj);
  c->copy_layers_from(*this, keep_layers);
  return c;
}

void ContrastiveEncoder::collect_input(nn::ParamRefs& out) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(out, "encoder.convs." + std::to_string(i));
  }
  feature_proj.collect(out, "encoder.feature_proj");
}

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& cfg, Rng& rng) {
  if (cfg.family == Family::generative) return std::make_unique<GenerativeEncoder>(cfg, rng);
  return std::make_unique<ContrastiveEncoder>(cfg, rng);
}

// ---- frozen prefix

FrozenPrefix::FrozenPrefix(const Encoder& encoder, std::size_t l_norm) : l_norm_(l_norm) {
  if (l_norm >= encoder.layer_count()) {
    throw ValidationError("clone_frozen_prefix: l_norm " + std::to_string(l_norm) +
                          " out of range for " + std::to_string(encoder.layer_count()) +
                          " layers");
  }
  enc_ = encoder.clone(l_norm + 1);
  enc_->set_frozen(true);
}

std::vector<Tensor> FrozenPrefix::taps(const Tensor& input) const {
  ad::NoGradGuard ng;
  return enc_->forward_with_taps(input, l_norm_).taps;
}

FrozenPrefix clone_frozen_prefix(const Encoder& encoder, std::size_t l_norm) {
  return FrozenPrefix(encoder, l_norm);
}

// ---- pretraining

void PretrainConfig::validate() const {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("pretrain: mask_ratio must lie in (0, 1)");
  if (span == 0) throw ConfigError("pretrain: span must be positive");
  if (batch == 0) throw ConfigError("pretrain: batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretrain: lr must be positive");
  contrastive_target.validate();
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"steps", steps},           {"batch", batch}, {"lr", lr},     {"mask_ratio", mask_ratio},
          {"span", span},             {"crop", crop},   {"seed", seed}, {"eval_every", eval_every},
          {"contrastive_target",
           {{"fft", contrastive_target.fft_size},
            {"win", contrastive_target.win_size},
            {"hop", contrastive_target.hop}}}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.lr = j.at("lr");
  c.mask_ratio = j.at("mask_ratio");
  c.span = j.at("span");
  c.crop = j.at("crop");
  c.seed = j.at("seed");
  c.eval_every = j.at("eval_every");
  const auto& t = j.at("contrastive_target");
  c.contrastive_target = dsp::StftConfig::make(t.at("fft"), t.at("win"), t.at("hop"));
  c.validate();
  return c;
}

PretrainHead make_pretrain_head(const Encoder& encoder, const PretrainConfig& cfg, Rng& rng) {
  const std::size_t bins = encoder.family() == Family::generative
                               ? encoder.config().features.bins()
                               : cfg.contrastive_target.bins();
  return PretrainHead{nn::Linear(encoder.config().d, bins, rng)};
}

std::vector<bool> sample_span_mask(std::size_t frames, double ratio, std::size_t span, Rng& rng) {
  std::vector<bool> mask(frames, false);
  if (frames == 0 || ratio <= 0.0) return mask;
  const auto target = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(frames)));
  std::size_t covered = 0;
  for (std::size_t guard = 0; covered < target && guard < 100 * frames; ++guard) {
    const std::size_t start = rng.below(frames);
    for (std::size_t t = start; t < std::min(frames, start + span); ++t) {
      if (!mask[t]) {
        mask[t] = true;
        ++covered;
      }
    }
  }
  return mask;
}

std::size_t pretrain_frames(const Encoder& encoder, std::size_t n, const PretrainConfig&) {
  if (encoder.family() == Family::generative) return encoder.config().features.frames(n);
  return n / encoder.config().downsample();
}

Tensor masked_reconstruction_loss(const Encoder& encoder, const PretrainHead& head,
                                  const Tensor& waveform, const std::vector<std::vector<bool>>& masks,
                                  const PretrainConfig& cfg) {
  require_waveform(waveform, "masked_reconstruction_loss");
  const std::size_t B = waveform.dim(0);
  const std::size_t T = pretrain_frames(encoder, waveform.dim(1), cfg);
  if (masks.size() != B) throw ValidationError("masked_reconstruction_loss: one mask per row required");
  std::size_t masked = 0;
  for (const auto& m : masks) {
    if (m.size() != T) throw ValidationError("masked_reconstruction_loss: mask length mismatch");
    masked += static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
  }
  if (masked == 0) return Tensor::scalar(0.0);

  auto keep_tensor = [&](std::size_t width) {
    std::vector<double> v(B * T * width);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        std::fill_n(v.begin() + static_cast<std::ptrdiff_t>((b * T + t) * width), width,
                    masks[b][t] ? 0.0 : 1.0);
    return Tensor::from({B, T, width}, std::move(v));
  };

  Tensor target;
  Tensor x0;
  if (encoder.family() == Family::generative) {
    target = encoder.prepare(waveform);
    x0 = encoder.embed(ad::mul(target, keep_tensor(target.dim(2))), nullptr);
  } else {
    const Tensor full = log_magnitude(waveform, cfg.contrastive_target);
    target = ad::slice(full, 1, 0, T);
    x0 = ad::mul(encoder.embed(encoder.prepare(waveform), nullptr), keep_tensor(encoder.config().d));
  }
  Tensor h = x0;
  for (std::size_t l = 0; l < encoder.layer_count(); ++l) h = encoder.layer(l).forward(h);
  const Tensor pred = head.proj.forward(h);

  const std::size_t bins = target.dim(2);
  std::vector<double> w(B * T * bins, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      if (masks[b][t])
        std::fill_n(w.begin() + static_cast<std::ptrdiff_t>((b * T + t) * bins), bins,
                    1.0 / static_cast<double>(masked * bins));
  return ad::sum(ad::mul(ad::abs(ad::sub(pred, target)), Tensor::from({B, T, bins}, std::move(w))));
}

namespace {

Tensor crop_batch(const std::vector<std::vector<double>>& utts, std::size_t batch, std::size_t crop,
                  Rng& rng) {
  std::vector<double> v;
  v.reserve(batch * crop);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& u = utts[rng.below(utts.size())];
    if (u.size() < crop) throw ValidationError("pretrain: utterance shorter than crop");
    const std::size_t off = rng.below(u.size() - crop + 1);
    v.insert(v.end(), u.begin() + static_cast<std::ptrdiff_t>(off),
             u.begin() + static_cast<std::ptrdiff_t>(off + crop));
  }
  return Tensor::from({batch, crop}, std::move(v));
}

std::vector<std::vector<bool>> batch_masks(std::size_t batch, std::size_t frames,
                                           const PretrainConfig& cfg, Rng& rng) {
  std::vector<std::vector<bool>> m;
  for (std::size_t b = 0; b < batch; ++b) m.push_back(sample_span_mask(frames, cfg.mask_ratio, cfg.span, rng));
  return m;
}

}  // namespace

PretrainResult pretrain_masked_reconstruction(Encoder& encoder,
                                              const std::vector<std::vector<double>>& train,
                                              const std::vector<std::vector<double>>& heldout,
                                              const PretrainConfig& cfg) {
  cfg.validate();
  if (train.empty() || heldout.empty()) throw ValidationError("pretrain: empty corpus");
  if (encoder.family() == Family::contrastive && cfg.crop % encoder.config().downsample() != 0) {
    throw ConfigError("pretrain: crop must be a multiple of the encoder downsample factor");
  }
  Rng init_rng(mix_seed(cfg.seed, 1));
  PretrainHead head = make_pretrain_head(encoder, cfg, init_rng);

  // Held-out crops and masks are fixed so that the evaluations are comparable.
  Rng eval_rng(mix_seed(cfg.seed, 2));
  const std::size_t frames = pretrain_frames(encoder, cfg.crop, cfg);
  const Tensor eval_wave = crop_batch(heldout, std::max<std::size_t>(heldout.size(), cfg.batch), cfg.crop, eval_rng);
  const auto eval_masks = batch_masks(eval_wave.dim(0), frames, cfg, eval_rng);
  auto evaluate = [&] {
    ad::NoGradGuard ng;
    return masked_reconstruction_loss(encoder, head, eval_wave, eval_masks, cfg).item();
  };

  nn::ParamRefs params = encoder.parameters();
  head.collect(params);
  nn::Adam opt(params, nn::AdamConfig{cfg.lr});

  PretrainResult res;
  res.initial_heldout = evaluate();
  res.heldout_curve.emplace_back(0, res.initial_heldout);
  Rng rng(mix_seed(cfg.seed, 3));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Tensor wave = crop_batch(train, cfg.batch, cfg.crop, rng);
    const auto masks = batch_masks(cfg.batch, frames, cfg, rng);
    const Tensor loss = masked_reconstruction_loss(encoder, head, wave, masks, cfg);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw TrainingError("pretrain: non-finite loss", static_cast<long>(step));
    opt.zero_grad();
    if (loss.requires_grad()) loss.backward();
    opt.step();
    res.train_curve.emplace_back(step, lv);
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
      res.heldout_curve.emplace_back(step + 1, evaluate());
    }
  }
  res.final_heldout = evaluate();
  res.heldout_curve.emplace_back(cfg.steps, res.final_heldout);
  return res;
}

}  // namespace fnse::upstream
