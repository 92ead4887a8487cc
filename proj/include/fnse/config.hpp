#pragma once
// TOML run configuration shared by the CLI subcommands.
//
// Layout (every key optional, unknown keys rejected):
//   [corpus]            corpus generation
//   [model]             model.encoder.*, bottleneck_tap, cirm.*
//   [pretrain]          masked-reconstruction pretraining
//   [finetune]          regime, steps, batch, lr, seed, cadences, ...
//   [finetune.weights]  cirm, time, mstft
//   [norm]              layers, k0, k_pin, beta_m, beta_r, dump_every
//   [paths]             corpus, pretrained (relative to the workdir)
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "fnse/data.hpp"
#include "fnse/trainer.hpp"
#include "fnse/upstream.hpp"

namespace fnse::config {

struct RunConfig {
  data::CorpusConfig corpus;
  upstream::PretrainConfig pretrain;
  trainer::ExperimentConfig experiment;
  std::string corpus_path;
  std::string pretrained_path;

  static RunConfig defaults(upstream::Family family = upstream::Family::generative);
  // Resolved document with every default expanded, in the TOML layout.
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

RunConfig parse_toml(std::string_view text, const std::string& source = "<string>");
// An empty path yields the defaults.
RunConfig load(const std::filesystem::path& file);

// FNSE_SEED replaces the pretrain and finetune seeds when set.
void apply_env(RunConfig& cfg);

}  // namespace fnse::config
