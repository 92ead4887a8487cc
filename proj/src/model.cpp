#include "fnse/model.hpp"

#include "fnse/errors.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::model {

ModelConfig ModelConfig::for_family(upstream::Family f) {
  ModelConfig c;
  c.encoder.family = f;
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  cirm.validate();
  if (encoder.family == upstream::Family::contrastive &&
      (bottleneck_tap == 0 || bottleneck_tap > encoder.layers)) {
    throw ConfigError("model: bottleneck tap must lie in [1, layers]");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"encoder", encoder.to_json()},
          {"bottleneck_tap", bottleneck_tap},
          {"cirm", {{"K", cirm.K}, {"C", cirm.C}, {"eps", cirm.eps}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.encoder = upstream::EncoderConfig::from_json(j.at("encoder"));
  c.bottleneck_tap = j.at("bottleneck_tap");
  const auto& m = j.at("cirm");
  c.cirm.K = m.at("K");
  c.cirm.C = m.at("C");
  c.cirm.eps = m.at("eps");
  c.validate();
  return c;
}

SeModel::SeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng enc_rng(mix_seed(seed, 0xE0C));
  encoder_ = upstream::make_encoder(cfg_.encoder, enc_rng);
  Rng head_rng(mix_seed(seed, 0x4EAD));
  if (family() == upstream::Family::generative) {
    cirm_head = downstream::CirmHead(cfg_.encoder.d, cfg_.encoder.features.bins(), head_rng);
    cirm_head.init_identity(cfg_.cirm);
  } else {
    decoder = downstream::UnetDecoder(cfg_.encoder, head_rng, cfg_.bottleneck_tap);
  }
}

std::size_t SeModel::encoder_depth() const {
  return family() == upstream::Family::generative ? encoder_->layer_count() : cfg_.bottleneck_tap;
}

void SeModel::load_encoder(const ckpt::Checkpoint& ck) {
  ckpt::restore(ck, encoder_->parameters());
}

ForwardOutput SeModel::forward(const Tensor& noisy, const Tensor* clean, featnorm::NormPlan* plan,
                               const upstream::FrozenPrefix* frozen, std::size_t step) const {
  if (noisy.rank() != 2) throw ValidationError("SeModel: expected noisy [B, N]");
  const bool normed = plan && !plan->layers.empty();
  if (normed && (!clean || !frozen)) throw StateError("SeModel: normalized forward needs clean input and a frozen prefix");
  if (clean && clean->shape() != noisy.shape()) throw ValidationError("SeModel: clean/noisy shape mismatch");

  ForwardOutput out;
  const std::size_t n = noisy.dim(1);
  const bool gen = family() == upstream::Family::generative;
  const Tensor noisy_in = gen ? noisy : downstream::pad_to_multiple(noisy, cfg_.encoder.downsample());
  const Tensor input = encoder_->prepare(noisy_in);

  std::vector<Tensor> skips;
  if (normed) {
    const Tensor clean_in = gen ? *clean : downstream::pad_to_multiple(*clean, cfg_.encoder.downsample());
    auto r = featnorm::normed_dual_forward(*encoder_, *frozen, input, encoder_->prepare(clean_in), *plan,
                                           step, encoder_depth());
    out.features = r.final;
    out.k = r.k;
    skips = std::move(r.skips);
  } else {
    auto r = encoder_->forward_with_taps(input, encoder_depth());
    out.features = r.final;
    skips = std::move(r.skips);
  }

  if (gen) {
    {
      ad::NoGradGuard ng;
      out.noisy_planar = ad::stft(noisy, cfg_.encoder.features);
    }
    out.pred_mask = cirm_head.forward(out.features, out.noisy_planar.dim(1));
    out.enhanced = downstream::apply_compressed_mask(out.pred_mask, out.noisy_planar,
                                                     cfg_.encoder.features, n, cfg_.cirm);
  } else {
    const Tensor y = decoder.forward(out.features, skips);
    out.enhanced = y.dim(1) == n ? y : ad::slice(y, 1, 0, n);
  }
  return out;
}

std::vector<double> SeModel::enhance(const std::vector<double>& noisy) const {
  ad::NoGradGuard ng;
  const auto out = forward(Tensor::from({1, noisy.size()}, noisy));
  return out.enhanced.vec();
}

nn::ParamRefs SeModel::head_parameters() {
  nn::ParamRefs out;
  if (family() == upstream::Family::generative) cirm_head.collect(out);
  else decoder.collect(out);
  return out;
}

nn::ParamRefs SeModel::parameters() {
  nn::ParamRefs out = encoder_->parameters();
  for (auto* p : head_parameters()) out.push_back(p);
  return out;
}

ckpt::Checkpoint SeModel::snapshot() {
  return ckpt::snapshot(parameters(), {{"kind", "se_model"}, {"model", cfg_.to_json()}});
}

void SeModel::restore(const ckpt::Checkpoint& ck) { ckpt::restore(ck, parameters()); }

}  // namespace fnse::model
