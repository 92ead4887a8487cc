#pragma once
// Experiment orchestration: pretraining, fine-tuning in the base /
// pretrained / normed regimes, layer sweeps and similarity studies.
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/checkpoint.hpp"
#include "fnse/data.hpp"
#include "fnse/featnorm.hpp"
#include "fnse/losses.hpp"
#include "fnse/metrics.hpp"
#include "fnse/model.hpp"

namespace fnse::trainer {

enum class Regime { base, pretrained, normed };
std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct ExperimentConfig {
  model::ModelConfig model;
  Regime regime = Regime::pretrained;
  // Layer n normalizes the input of transformer layer n,
  // which is tap n - 1.
  std::set<std::size_t> norm_layers;
  double k0 = 1.0;
  std::optional<double> k_pin;  // overrides the schedule at every step
  double beta_m = featnorm::kBetaMean;
  double beta_r = featnorm::kBetaRatio;

  std::size_t total_steps = 3000;
  std::size_t batch = 8;
  std::size_t crop = 8000;  // samples
  double lr = 5e-4;
  std::uint64_t seed = 0;
  losses::LossWeights weights;

  std::size_t eval_every = 0;     // 0: final evaluation only
  std::size_t eval_subset = 8;    // test pairs used at cadence
  std::size_t test_limit = 0;     // 0: whole test split at the end
  std::size_t sim_every = 0;      // 0: no similarity probes
  std::size_t sim_subset = 8;
  metrics::ReferenceMode sim_reference = metrics::ReferenceMode::frozen_pretrained;
  std::size_t norm_dump_every = 0;

  static ExperimentConfig defaults(upstream::Family family);
  upstream::Family family() const { return model.encoder.family; }
  // Tap indices of norm_layers.
  std::set<std::size_t> norm_taps() const;
  void validate(bool has_pretrained) const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct RunResult {
  ExperimentConfig config;
  nlohmann::json report;
  std::string report_hash;
  std::string loss_csv;
  std::vector<losses::LossBreakdown> losses;
  metrics::MetricReport test;
  metrics::SimilarityCurve similarity;
  ckpt::Checkpoint final_model;
  ckpt::Checkpoint frozen_at_clone;
  ckpt::Checkpoint frozen_at_end;
  bool frozen_received_grad = false;
  featnorm::NormPlan plan;
  nlohmann::json norm_dumps = nlohmann::json::array();
  double wall_clock_s = 0.0;
};

// Writes resolved_config.json, report.json, report.md, train_log.csv,
// similarity.csv, norm_state.json and model.ckpt into dir.
void write_run(const RunResult& run, const std::filesystem::path& dir);

metrics::MetricReport evaluate(const model::SeModel& model,
                               const std::vector<data::PairedExample>& pairs,
                               std::size_t limit = 0);

// Fine-tunes one model. When out_dir is given, writes the resolved config,
// report (JSON + Markdown), loss CSV, similarity CSV, norm-state dumps and
// the final checkpoint there. On a non-finite loss, writes last_good.ckpt and
// rethrows a TrainingError.
RunResult finetune(const ExperimentConfig& cfg, const data::Corpus& corpus,
                   const ckpt::Checkpoint* pretrained,
                   const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Runs independent experiments on up to `jobs` threads; results keep input order.
std::vector<RunResult> run_many(const std::vector<ExperimentConfig>& cfgs, const data::Corpus& corpus,
                                const ckpt::Checkpoint* pretrained, std::size_t jobs = 1);

struct SweepRow {
  std::size_t layer = 0;
  RunResult run;
};

std::vector<SweepRow> layer_sweep(const ExperimentConfig& tmpl, const std::vector<std::size_t>& layers,
                                  const data::Corpus& corpus, const ckpt::Checkpoint& pretrained,
                                  std::size_t jobs = 1);
std::string sweep_markdown(const std::vector<SweepRow>& rows);
nlohmann::json sweep_json(const std::vector<SweepRow>& rows);

std::vector<metrics::SimilarityCurve> similarity_study(const ExperimentConfig& tmpl,
                                                       const std::vector<std::size_t>& layers,
                                                       std::size_t cadence,
                                                       const data::Corpus& corpus,
                                                       const ckpt::Checkpoint& pretrained,
                                                       std::size_t jobs = 1);

// Masked-reconstruction pretraining on the corpus's clean split. The last
// tenth of the utterances (at least one) is held out.
struct PretrainOutcome {
  ckpt::Checkpoint checkpoint;
  upstream::PretrainResult result;
};
PretrainOutcome pretrain(const model::ModelConfig& model_cfg, const upstream::PretrainConfig& cfg,
                         const data::Corpus& corpus);

std::string report_markdown(const nlohmann::json& report);

}  // namespace fnse::trainer
