#pragma once
// Feature normalization of noisy-input latents toward clean-reference
// statistics.
//
// For a tapped layer input X the transform is
//   X_hat = X + k * (r*X + (mu_n - r*mu) - X),   r = sigma_n / sigma,
// with mu, mu_n, r tracked by EMA across training steps and k decaying to 0.
// The statistics are constants in the backward pass.
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/tensor.hpp"
#include "fnse/upstream.hpp"

namespace fnse::featnorm {

using ad::Tensor;

inline constexpr double kEpsStd = 1e-5;
inline constexpr double kBetaMean = 0.99;
inline constexpr double kBetaRatio = 0.999;

struct NormState {
  std::vector<double> mu;    // EMA of the noisy feature mean
  std::vector<double> mu_n;  // EMA of the clean feature mean
  std::vector<double> r;     // EMA of sigma_n / sigma
  double beta_m = kBetaMean;
  double beta_r = kBetaRatio;
  bool initialized = false;
  std::size_t updates = 0;

  nlohmann::json to_json() const;
};

struct BatchStats {
  std::vector<double> mu_hat;
  std::vector<double> sigma_hat;
  std::vector<double> mu_n_hat;
  std::vector<double> sigma_n_hat;
};

struct MeanStd {
  std::vector<double> mean;
  std::vector<double> std;
};

// Per-dimension mean and population std of [..., d] pooled over all leading
// positions; std is floored at eps_std.
MeanStd batch_stats(const Tensor& features, double eps_std = kEpsStd);

BatchStats make_batch_stats(const Tensor& noisy, const Tensor& clean, double eps_std = kEpsStd);

// One EMA step. An uninitialized state is set directly to the batch values.
// `layer` only labels error messages.
NormState ema_update(NormState state, const BatchStats& batch, long layer = -1);

// k == 0 returns x itself, regardless of the state.
Tensor renormalize(const Tensor& x, const NormState& state, double k);

enum class ScheduleMode { linear };

struct KSchedule {
  double k0 = 1.0;
  std::size_t total_steps = 1;
  ScheduleMode mode = ScheduleMode::linear;
  void validate() const;
};

double k_at(const KSchedule& schedule, std::size_t step);

// Initial k for the three model styles.
enum class KPreset { mockingjay, tera, contrastive };
double default_k0(KPreset preset);
KPreset kpreset_from_string(const std::string& s);
std::string to_string(KPreset p);

struct NormPlan {
  std::set<std::size_t> layers;  // tap indices whose inputs are normalized
  KSchedule schedule;
  std::map<std::size_t, NormState> states;
  double beta_m = kBetaMean;
  double beta_r = kBetaRatio;
  std::map<std::size_t, std::pair<double, double>> layer_betas;  // per-layer (beta_m, beta_r)
  std::optional<double> k_override;                             // pins k when set
  double eps_std = kEpsStd;

  // Deepest normalized tap; throws StateError on an empty plan.
  std::size_t depth() const;
  double k(std::size_t step) const;
  NormState fresh_state(std::size_t layer) const;
  // Replaces every state with a fresh one using the configured momentums.
  void reset_states();
  nlohmann::json to_json() const;
};

struct DualForwardResult {
  Tensor final;                          // live output after `depth` layers
  std::vector<Tensor> taps;              // live taps, normalized where planned
  std::vector<Tensor> skips;             // live conv outputs (contrastive)
  double k = 0.0;
  std::map<std::size_t, BatchStats> stats;
};

// One step of the live/frozen dual forward. The live encoder runs `depth`
// layers; the frozen prefix runs under no-grad and stops at plan.depth().
// A tap equal to `depth` (no consuming layer) is still normalized before it
// is returned as the output.
DualForwardResult normed_dual_forward(const upstream::Encoder& live,
                                      const upstream::FrozenPrefix& frozen,
                                      const Tensor& noisy_input, const Tensor& clean_input,
                                      NormPlan& plan, std::size_t step,
                                      std::size_t depth = SIZE_MAX);

}  // namespace fnse::featnorm
