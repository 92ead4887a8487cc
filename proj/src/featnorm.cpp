#include "fnse/featnorm.hpp"

#include <algorithm>
#include <cmath>

#include "fnse/errors.hpp"

namespace fnse::featnorm {

namespace {

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string layer_label(long layer) {
  return layer < 0 ? std::string("featnorm") : "featnorm layer " + std::to_string(layer);
}

}  // namespace

nlohmann::json NormState::to_json() const {
  return {{"mu", mu},         {"mu_n", mu_n},
          {"r", r},           {"beta_m", beta_m},
          {"beta_r", beta_r}, {"initialized", initialized},
          {"updates", updates}};
}

MeanStd batch_stats(const Tensor& features, double eps_std) {
  if (features.rank() < 1) throw ValidationError("batch_stats: scalar input");
  const std::size_t d = features.shape().back();
  const std::size_t n = d ? features.size() / d : 0;
  if (n < 2) throw ValidationError("batch_stats: need at least 2 positions, got " + std::to_string(n));
  const auto v = features.values();
  MeanStd out{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += v[i * d + j];
  for (auto& m : out.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = v[i * d + j] - out.mean[j];
      out.std[j] += c * c;
    }
  for (auto& s : out.std) s = std::max(std::sqrt(s / static_cast<double>(n)), eps_std);
  return out;
}

BatchStats make_batch_stats(const Tensor& noisy, const Tensor& clean, double eps_std) {
  if (noisy.shape().back() != clean.shape().back()) {
    throw ValidationError("make_batch_stats: feature width mismatch");
  }
  auto a = batch_stats(noisy, eps_std);
  auto b = batch_stats(clean, eps_std);
  return {std::move(a.mean), std::move(a.std), std::move(b.mean), std::move(b.std)};
}

NormState ema_update(NormState state, const BatchStats& batch, long layer) {
  const std::size_t d = batch.mu_hat.size();
  if (batch.sigma_hat.size() != d || batch.mu_n_hat.size() != d || batch.sigma_n_hat.size() != d) {
    throw ValidationError(layer_label(layer) + ": inconsistent batch stat sizes");
  }
  if (!all_finite(batch.mu_hat) || !all_finite(batch.sigma_hat) || !all_finite(batch.mu_n_hat) ||
      !all_finite(batch.sigma_n_hat)) {
    throw NumericError(layer_label(layer) + ": non-finite batch statistics");
  }
  std::vector<double> r_hat(d);
  for (std::size_t j = 0; j < d; ++j) {
    if (!(batch.sigma_hat[j] > 0.0)) throw NumericError(layer_label(layer) + ": non-positive sigma");
    r_hat[j] = batch.sigma_n_hat[j] / batch.sigma_hat[j];
  }
  if (!state.initialized) {
    state.mu = batch.mu_hat;
    state.mu_n = batch.mu_n_hat;
    state.r = std::move(r_hat);
    state.initialized = true;
    state.updates = 1;
    return state;
  }
  if (state.mu.size() != d) throw ValidationError(layer_label(layer) + ": state width mismatch");
  const double bm = state.beta_m, br = state.beta_r;
  for (std::size_t j = 0; j < d; ++j) {
    state.mu[j] = bm * state.mu[j] + (1.0 - bm) * batch.mu_hat[j];
    state.mu_n[j] = bm * state.mu_n[j] + (1.0 - bm) * batch.mu_n_hat[j];
    state.r[j] = br * state.r[j] + (1.0 - br) * r_hat[j];
  }
  ++state.updates;
  return state;
}

Tensor renormalize(const Tensor& x, const NormState& state, double k) {
  if (!(k >= 0.0 && k <= 1.0)) throw ValidationError("renormalize: k must lie in [0, 1]");
  if (k == 0.0) return x;
  if (!state.initialized) throw StateError("renormalize: state not initialized");
  const std::size_t d = x.shape().back();
  if (state.r.size() != d) throw ValidationError("renormalize: state width mismatch");
  // X + k(rX + (mu_n - r mu) - X) = a*X + b with a = 1 + k(r - 1), b = k(mu_n - r mu)
  std::vector<double> a(d), b(d);
  for (std::size_t j = 0; j < d; ++j) {
    a[j] = 1.0 + k * (state.r[j] - 1.0);
    b[j] = k * (state.mu_n[j] - state.r[j] * state.mu[j]);
  }
  return ad::add(ad::mul(x, Tensor::from({d}, std::move(a))), Tensor::from({d}, std::move(b)));
}

void KSchedule::validate() const {
  if (!(k0 >= 0.0 && k0 <= 1.0)) throw ConfigError("k schedule: k0 must lie in [0, 1]");
  if (total_steps == 0) throw ConfigError("k schedule: total_steps must be positive");
}

double k_at(const KSchedule& schedule, std::size_t step) {
  const double frac = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return std::max(0.0, schedule.k0 * (1.0 - frac));
}

double default_k0(KPreset preset) {
  switch (preset) {
    case KPreset::mockingjay: return 1.0;
    case KPreset::tera: return 0.8;
    case KPreset::contrastive: return 0.5;
  }
  return 1.0;
}

KPreset kpreset_from_string(const std::string& s) {
  if (s == "mockingjay") return KPreset::mockingjay;
  if (s == "tera") return KPreset::tera;
  if (s == "contrastive") return KPreset::contrastive;
  throw ConfigError("unknown k preset '" + s + "'");
}

std::string to_string(KPreset p) {
  switch (p) {
    case KPreset::mockingjay: return "mockingjay";
    case KPreset::tera: return "tera";
    case KPreset::contrastive: return "contrastive";
  }
  return "mockingjay";
}

std::size_t NormPlan::depth() const {
  if (layers.empty()) throw StateError("NormPlan: empty layer set has no depth");
  return *layers.rbegin();
}

double NormPlan::k(std::size_t step) const {
  return k_override ? *k_override : k_at(schedule, step);
}

NormState NormPlan::fresh_state(std::size_t layer) const {
  NormState s;
  s.beta_m = beta_m;
  s.beta_r = beta_r;
  if (auto it = layer_betas.find(layer); it != layer_betas.end()) {
    s.beta_m = it->second.first;
    s.beta_r = it->second.second;
  }
  return s;
}

void NormPlan::reset_states() {
  states.clear();
  for (auto l : layers) states[l] = fresh_state(l);
}

nlohmann::json NormPlan::to_json() const {
  nlohmann::json st = nlohmann::json::object();
  for (const auto& [l, s] : states) st[std::to_string(l)] = s.to_json();
  return {{"layers", std::vector<std::size_t>(layers.begin(), layers.end())},
          {"k0", schedule.k0},
          {"total_steps", schedule.total_steps},
          {"states", st}};
}

DualForwardResult normed_dual_forward(const upstream::Encoder& live,
                                      const upstream::FrozenPrefix& frozen,
                                      const Tensor& noisy_input, const Tensor& clean_input,
                                      NormPlan& plan, std::size_t step, std::size_t depth) {
  DualForwardResult out;
  depth = std::min(depth, live.layer_count());
  out.k = plan.k(step);

  std::vector<Tensor> clean_taps;
  if (!plan.layers.empty()) {
    if (plan.depth() > frozen.depth()) {
      throw ConfigError("normed_dual_forward: plan depth " + std::to_string(plan.depth()) +
                        " exceeds frozen prefix depth " + std::to_string(frozen.depth()));
    }
    if (plan.depth() > depth) {
      throw ConfigError("normed_dual_forward: normalized layer " + std::to_string(plan.depth()) +
                        " is above the forward depth " + std::to_string(depth));
    }
    clean_taps = frozen.taps(clean_input);
  }

  Tensor x = live.embed(noisy_input, &out.skips);
  for (std::size_t l = 0; l <= depth; ++l) {
    if (plan.layers.count(l)) {
      auto it = plan.states.find(l);
      if (it == plan.states.end()) it = plan.states.emplace(l, plan.fresh_state(l)).first;
      BatchStats bs = make_batch_stats(x, clean_taps.at(l), plan.eps_std);
      it->second = ema_update(std::move(it->second), bs, static_cast<long>(l));
      out.stats.emplace(l, std::move(bs));
      x = renormalize(x, it->second, out.k);
    }
    out.taps.push_back(x);
    if (l < depth) x = live.layer(l).forward(x);
  }
  out.final = x;
  return out;
}

}  // namespace fnse::featnorm
