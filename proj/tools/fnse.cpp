// fnse: corpus generation, pretraining, fine-tuning, sweeps and self-checks.
#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fnse/checkpoint.hpp"
#include "fnse/config.hpp"
#include "fnse/data.hpp"
#include "fnse/errors.hpp"
#include "fnse/hash.hpp"
#include "fnse/metrics.hpp"
#include "fnse/model.hpp"
#include "fnse/selfcheck.hpp"
#include "fnse/trainer.hpp"

namespace fs = std::filesystem;
using namespace fnse;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Common {
  std::string workdir = ".";
  std::string config;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<double> k0;
};

fs::path under(const Common& c, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(c.workdir) / path;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

void write_resolved(const fs::path& dir, const config::RunConfig& cfg) {
  write_text(dir / "resolved_config.json",
             nlohmann::json({{"config", cfg.to_json()},
                             {"config_hash", cfg.hash()},
                             {"experiment_config_hash", cfg.experiment.hash()}})
                     .dump(2) +
                 "\n");
}

// Config file, then FNSE_SEED, then flags.
config::RunConfig resolve(const Common& c) {
  auto cfg = config::load(under(c, c.config));
  config::apply_env(cfg);
  if (c.seed) cfg.pretrain.seed = cfg.experiment.seed = *c.seed;
  if (c.steps) cfg.experiment.total_steps = *c.steps;
  if (c.k0) cfg.experiment.k0 = *c.k0;
  return cfg;
}

std::vector<std::size_t> parse_layers(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("bad layer list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty layer list");
  return out;
}

std::vector<std::size_t> default_layers(const config::RunConfig& cfg) {
  if (cfg.experiment.family() == upstream::Family::generative) return {1, 2, 3};
  return {1, 2};
}

data::Corpus corpus_for(const Common& c, const config::RunConfig& cfg, const std::string& flag) {
  const std::string p = !flag.empty() ? flag : cfg.corpus_path;
  if (p.empty()) {
    std::cerr << "building corpus in memory\n";
    return data::build_corpus(cfg.corpus);
  }
  return data::load_corpus(under(c, p));
}

ckpt::Checkpoint load_pretrained(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError("pretrained checkpoint not found: " + p.string());
  auto ck = ckpt::load(p);
  if (ck.meta.value("kind", std::string()) != "pretrained_encoder") {
    throw ConfigError(p.string() + " is not a pretrained encoder checkpoint");
  }
  return ck;
}

ckpt::Checkpoint pretrained_for(const Common& c, const config::RunConfig& cfg, const std::string& flag,
                                const data::Corpus& corpus, const fs::path& out) {
  const std::string p = !flag.empty() ? flag : cfg.pretrained_path;
  if (!p.empty()) return load_pretrained(under(c, p));
  std::cerr << "pretraining (" << cfg.pretrain.steps << " steps)\n";
  auto outcome = trainer::pretrain(cfg.experiment.model, cfg.pretrain, corpus);
  ckpt::save(out / "pretrained.ckpt", outcome.checkpoint);
  return outcome.checkpoint;
}

int cmd_corpus(const Common& c, const std::string& out) {
  const auto cfg = resolve(c);
  const fs::path dir = under(c, out);
  const auto corpus = data::build_corpus(cfg.corpus);
  data::write_corpus(corpus, dir);
  write_resolved(dir, cfg);
  std::cout << "corpus: " << corpus.pretrain.size() << " clean, " << corpus.train.size() << " train, "
            << corpus.test.size() << " test -> " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& corpus_dir, const std::string& out) {
  const auto cfg = resolve(c);
  const auto corpus = data::load_corpus(under(c, corpus_dir));
  const fs::path path = under(c, out);
  auto outcome = trainer::pretrain(cfg.experiment.model, cfg.pretrain, corpus);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto& meta = outcome.checkpoint.meta;
  meta["config_hash"] = cfg.hash();
  ckpt::save(path, outcome.checkpoint);
  write_text(fs::path(path.string() + ".resolved_config.json"),
             nlohmann::json({{"config", cfg.to_json()}, {"config_hash", cfg.hash()}}).dump(2) + "\n");
  std::cout << "pretrain: held-out loss " << outcome.result.initial_heldout << " -> "
            << outcome.result.final_heldout << " -> " << path.string() << "\n";
  return 0;
}

int cmd_finetune(const Common& c, const std::string& corpus_dir, const std::string& pretrained,
                 const std::string& regime, const std::string& layers, const std::string& out) {
  auto cfg = resolve(c);
  if (!regime.empty()) cfg.experiment.regime = trainer::regime_from_string(regime);
  if (!layers.empty()) {
    const auto ls = parse_layers(layers);
    cfg.experiment.norm_layers = {ls.begin(), ls.end()};
  }
  const std::string ckpt_path = !pretrained.empty() ? pretrained : cfg.pretrained_path;
  const bool base = cfg.experiment.regime == trainer::Regime::base;
  if (!base && ckpt_path.empty()) {
    throw ConfigError("regime " + trainer::to_string(cfg.experiment.regime) + " requires --pretrained");
  }
  if (base && !pretrained.empty()) throw ConfigError("regime base forbids --pretrained");
  cfg.experiment.validate(!base);
  const std::string cdir = !corpus_dir.empty() ? corpus_dir : cfg.corpus_path;
  if (cdir.empty()) throw ConfigError("finetune requires --corpus");
  const auto corpus = data::load_corpus(under(c, cdir));
  std::optional<ckpt::Checkpoint> ck;
  if (!base) ck = load_pretrained(under(c, ckpt_path));
  const fs::path dir = under(c, out);
  const auto run = trainer::finetune(cfg.experiment, corpus, ck ? &*ck : nullptr, dir);
  write_resolved(dir, cfg);
  std::cout << "finetune " << trainer::to_string(cfg.experiment.regime) << ": SI-SDR " << run.test.si_sdr_db
            << " dB, seg-SNR " << run.test.seg_snr_db << " dB, report " << run.report_hash << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const std::string& corpus_dir, const std::string& pretrained,
              const std::string& layers, const std::string& out) {
  const auto cfg = resolve(c);
  const fs::path dir = under(c, out);
  fs::create_directories(dir);
  const auto ls = layers.empty() ? default_layers(cfg) : parse_layers(layers);
  const auto corpus = corpus_for(c, cfg, corpus_dir);
  const auto ck = pretrained_for(c, cfg, pretrained, corpus, dir);
  const auto rows = trainer::layer_sweep(cfg.experiment, ls, corpus, ck, c.jobs);
  for (const auto& r : rows) trainer::write_run(r.run, dir / ("layer_" + std::to_string(r.layer)));
  const std::string md = trainer::sweep_markdown(rows);
  write_text(dir / "sweep.md", md);
  write_text(dir / "sweep.json", nlohmann::json({{"config_hash", cfg.hash()}, {"rows", trainer::sweep_json(rows)}}).dump(2) + "\n");
  write_resolved(dir, cfg);
  std::cout << md;
  return 0;
}

int cmd_similarity(const Common& c, const std::string& corpus_dir, const std::string& pretrained,
                   const std::string& layers, std::size_t cadence, const std::string& out) {
  const auto cfg = resolve(c);
  const fs::path dir = under(c, out);
  fs::create_directories(dir);
  const auto ls = layers.empty() ? std::vector<std::size_t>{1, default_layers(cfg).back()} : parse_layers(layers);
  if (cadence == 0) cadence = cfg.experiment.sim_every;
  if (cadence == 0) cadence = std::max<std::size_t>(1, cfg.experiment.total_steps / 10);
  const auto corpus = corpus_for(c, cfg, corpus_dir);
  const auto ck = pretrained_for(c, cfg, pretrained, corpus, dir);
  const auto curves = trainer::similarity_study(cfg.experiment, ls, cadence, corpus, ck, c.jobs);
  write_text(dir / "similarity.csv", metrics::similarity_csv(curves));
  nlohmann::json j = nlohmann::json::array();
  for (const auto& cv : curves) j.push_back({{"layer", cv.layer_tag}, {"steps", cv.steps}, {"cos_sim", cv.cos_sim}});
  write_text(dir / "similarity.json", nlohmann::json({{"config_hash", cfg.hash()}, {"curves", j}}).dump(2) + "\n");
  write_resolved(dir, cfg);
  for (const auto& cv : curves) {
    std::cout << "layer " << cv.layer_tag << ": final cos sim " << (cv.cos_sim.empty() ? 0.0 : cv.cos_sim.back()) << "\n";
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt_arg, const std::string& corpus_dir, const std::string& out) {
  fs::path p = under(c, ckpt_arg);
  if (fs::is_directory(p)) p /= "model.ckpt";
  if (!fs::exists(p)) throw ConfigError("checkpoint not found: " + p.string());
  const auto ck = ckpt::load(p);
  if (ck.meta.value("kind", std::string()) != "se_model") throw ConfigError(p.string() + " is not a fine-tuned model");
  const auto mcfg = model::ModelConfig::from_json(ck.meta.at("model"));
  model::SeModel m(mcfg, 0);
  m.restore(ck);
  const auto corpus = data::load_corpus(under(c, corpus_dir));
  const auto rep = trainer::evaluate(m, corpus.test);
  nlohmann::json j = {{"checkpoint", p.string()},
                      {"corpus_hash", corpus.config.hash()},
                      {"model_config_hash", json_hash(mcfg.to_json())},
                      {"metrics", rep.to_json()}};
  const fs::path outp = under(c, out);
  write_text(outp, j.dump(2) + "\n");
  std::cout << "eval: SI-SDR " << rep.si_sdr_db << " dB, seg-SNR " << rep.seg_snr_db << " dB, LSD " << rep.lsd << "\n";
  return 0;
}

int cmd_selfcheck() {
  const auto checks = selfcheck::run_all();
  for (const auto& ch : checks) std::cout << selfcheck::format(ch) << "\n";
  const bool ok = selfcheck::all_pass(checks);
  std::cout << (ok ? "selfcheck passed" : "selfcheck FAILED") << "\n";
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature normalization for fine-tuning clean-pretrained speech encoders on noisy speech"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--workdir", common.workdir, "Root for relative paths")->capture_default_str();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "TOML config file");
    sub->add_option("--seed", common.seed, "Override the pretrain and finetune seeds");
  };
  auto add_training = [&](CLI::App* sub) {
    sub->add_option("--steps", common.steps, "Override finetune.total_steps");
    sub->add_option("--k0", common.k0, "Override norm.k0");
  };

  std::string out, corpus_dir, pretrained, regime, layers, ckpt_arg;
  std::size_t cadence = 0;

  auto* corpus = app.add_subcommand("corpus", "Build the synthetic corpus and manifest");
  add_common(corpus);
  corpus->add_option("--out", out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pretraining on clean speech");
  add_common(pre);
  pre->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  pre->add_option("--out", out, "Checkpoint path")->required();

  auto* ft = app.add_subcommand("finetune", "Fine-tune an enhancement model");
  add_common(ft);
  add_training(ft);
  ft->add_option("--corpus", corpus_dir, "Corpus directory");
  ft->add_option("--pretrained", pretrained, "Pretrained encoder checkpoint");
  ft->add_option("--regime", regime, "base | pretrained | normed");
  ft->add_option("--layers", layers, "Normalized layers, e.g. 1 or 1,2");
  ft->add_option("--out", out, "Output directory")->required();

  auto* sweep = app.add_subcommand("sweep-layers", "Normed runs over single-layer plans");
  add_common(sweep);
  add_training(sweep);
  sweep->add_option("--layers", layers, "Layer list, default 1,2,3 (generative) or 1,2 (contrastive)");
  sweep->add_option("--corpus", corpus_dir, "Corpus directory; built from the config if absent");
  sweep->add_option("--pretrained", pretrained, "Pretrained checkpoint; pretrained from the config if absent");
  sweep->add_option("--jobs", common.jobs, "Concurrent runs")->capture_default_str();
  sweep->add_option("--out", out, "Output directory")->required();

  auto* sim = app.add_subcommand("similarity", "Clean/noisy cosine similarity curves per normalized layer");
  add_common(sim);
  add_training(sim);
  sim->add_option("--layers", layers, "Layer list, default lowest and highest");
  sim->add_option("--cadence", cadence, "Probe every N steps");
  sim->add_option("--corpus", corpus_dir, "Corpus directory; built from the config if absent");
  sim->add_option("--pretrained", pretrained, "Pretrained checkpoint; pretrained from the config if absent");
  sim->add_option("--jobs", common.jobs, "Concurrent runs")->capture_default_str();
  sim->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Metrics of a fine-tuned model on the test split");
  ev->add_option("--ckpt", ckpt_arg, "Fine-tune output directory or model checkpoint")->required();
  ev->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  ev->add_option("--out", out, "Report path")->required();

  auto* sc = app.add_subcommand("selfcheck", "Gradient, STFT, mask, normalization and EMA checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (common.jobs == 0) throw ConfigError("--jobs must be positive");
    if (*corpus) return cmd_corpus(common, out);
    if (*pre) return cmd_pretrain(common, corpus_dir, out);
    if (*ft) return cmd_finetune(common, corpus_dir, pretrained, regime, layers, out);
    if (*sweep) return cmd_sweep(common, corpus_dir, pretrained, layers, out);
    if (*sim) return cmd_similarity(common, corpus_dir, pretrained, layers, cadence, out);
    if (*ev) return cmd_eval(common, ckpt_arg, corpus_dir, out);
    if (*sc) return cmd_selfcheck();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
