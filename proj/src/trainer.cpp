#include "fnse/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "fnse/errors.hpp"
#include "fnse/hash.hpp"
#include "fnse/optim.hpp"
#include "fnse/spectral_ops.hpp"

namespace fnse::trainer {

namespace fs = std::filesystem;

std::string to_string(Regime r) {
  switch (r) {
    case Regime::base: return "base";
    case Regime::pretrained: return "pretrained";
    case Regime::normed: return "normed";
  }
  return "pretrained";
}

Regime regime_from_string(const std::string& s) {
  if (s == "base") return Regime::base;
  if (s == "pretrained") return Regime::pretrained;
  if (s == "normed") return Regime::normed;
  throw ConfigError("unknown regime '" + s + "' (expected base, pretrained or normed)");
}

// ---- config

ExperimentConfig ExperimentConfig::defaults(upstream::Family family) {
  ExperimentConfig c;
  c.model = model::ModelConfig::for_family(family);
  if (family == upstream::Family::generative) {
    c.norm_layers = {1};
    c.k0 = featnorm::default_k0(featnorm::KPreset::mockingjay);
  } else {
    c.norm_layers = {2};
    c.k0 = featnorm::default_k0(featnorm::KPreset::contrastive);
  }
  return c;
}

std::set<std::size_t> ExperimentConfig::norm_taps() const {
  std::set<std::size_t> taps;
  for (auto n : norm_layers) taps.insert(n - 1);
  return taps;
}

void ExperimentConfig::validate(bool has_pretrained) const {
  model.validate();
  if (total_steps > 0 && batch == 0) throw ConfigError("batch must be positive");
  if (crop == 0) throw ConfigError("crop must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(k0 >= 0.0 && k0 <= 1.0)) throw ConfigError("k0 must lie in [0, 1]");
  if (k_pin && !(*k_pin >= 0.0 && *k_pin <= 1.0)) throw ConfigError("k_pin must lie in [0, 1]");
  if (!(beta_m >= 0.0 && beta_m < 1.0) || !(beta_r >= 0.0 && beta_r < 1.0)) {
    throw ConfigError("momentums must lie in [0, 1)");
  }
  if (weights.cirm < 0 || weights.time < 0 || weights.mstft < 0) throw ConfigError("loss weights must be nonnegative");
  const bool gen = family() == upstream::Family::generative;
  if ((gen ? weights.cirm : 0.0) + weights.time + weights.mstft <= 0.0) {
    throw ConfigError("every applicable loss weight is zero");
  }
  if (regime == Regime::base && has_pretrained) throw ConfigError("regime base forbids a pretrained checkpoint");
  if (regime != Regime::base && !has_pretrained) {
    throw ConfigError("regime " + to_string(regime) + " requires a pretrained checkpoint");
  }
  if (regime == Regime::normed) {
    if (norm_layers.empty()) throw ConfigError("regime normed requires at least one normalization layer");
    const std::size_t max_layer =
        gen ? model.encoder.layers : std::min(model.bottleneck_tap + 1, model.encoder.layers);
    for (auto n : norm_layers) {
      if (n < 1 || n > max_layer) {
        throw ConfigError("normalization layer " + std::to_string(n) + " outside [1, " +
                          std::to_string(max_layer) + "] for the " + upstream::to_string(family()) +
                          " family");
      }
    }
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = {
      {"model", model.to_json()},
      {"regime", to_string(regime)},
      {"norm_layers", std::vector<std::size_t>(norm_layers.begin(), norm_layers.end())},
      {"k0", k0},
      {"beta_m", beta_m},
      {"beta_r", beta_r},
      {"total_steps", total_steps},
      {"batch", batch},
      {"crop", crop},
      {"lr", lr},
      {"seed", seed},
      {"weights", {{"cirm", weights.cirm}, {"time", weights.time}, {"mstft", weights.mstft}}},
      {"eval_every", eval_every},
      {"eval_subset", eval_subset},
      {"test_limit", test_limit},
      {"sim_every", sim_every},
      {"sim_subset", sim_subset},
      {"sim_reference", metrics::to_string(sim_reference)},
      {"norm_dump_every", norm_dump_every}};
  j["k_pin"] = k_pin ? nlohmann::json(*k_pin) : nlohmann::json(nullptr);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.model = model::ModelConfig::from_json(j.at("model"));
  c.regime = regime_from_string(j.at("regime"));
  const auto layers = j.at("norm_layers").get<std::vector<std::size_t>>();
  c.norm_layers = {layers.begin(), layers.end()};
  c.k0 = j.at("k0");
  if (!j.at("k_pin").is_null()) c.k_pin = j.at("k_pin").get<double>();
  c.beta_m = j.at("beta_m");
  c.beta_r = j.at("beta_r");
  c.total_steps = j.at("total_steps");
  c.batch = j.at("batch");
  c.crop = j.at("crop");
  c.lr = j.at("lr");
  c.seed = j.at("seed");
  c.weights.cirm = j.at("weights").at("cirm");
  c.weights.time = j.at("weights").at("time");
  c.weights.mstft = j.at("weights").at("mstft");
  c.eval_every = j.at("eval_every");
  c.eval_subset = j.at("eval_subset");
  c.test_limit = j.at("test_limit");
  c.sim_every = j.at("sim_every");
  c.sim_subset = j.at("sim_subset");
  c.sim_reference = metrics::reference_mode_from_string(j.at("sim_reference"));
  c.norm_dump_every = j.at("norm_dump_every");
  return c;
}

std::string ExperimentConfig::hash() const { return json_hash(to_json()); }

// ---- evaluation

metrics::MetricReport evaluate(const model::SeModel& model, const std::vector<data::PairedExample>& pairs,
                               std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, pairs.size()) : pairs.size();
  std::vector<metrics::UtteranceMetrics> per;
  per.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    const auto est = model.enhance(p.noisy);
    for (double v : est) {
      if (!std::isfinite(v)) throw NumericError("evaluate: non-finite output on " + p.id);
    }
    per.push_back({p.id, metrics::si_sdr(est, p.clean), metrics::seg_snr(est, p.clean),
                   metrics::log_spectral_distance(est, p.clean)});
  }
  return metrics::aggregate(std::move(per));
}

namespace {

struct Batch {
  ad::Tensor noisy;
  ad::Tensor clean;
};

Batch sample_batch(const std::vector<data::PairedExample>& train, std::size_t batch, std::size_t crop,
                   Rng& rng) {
  std::vector<double> nv, cv;
  nv.reserve(batch * crop);
  cv.reserve(batch * crop);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& p = train[rng.below(train.size())];
    if (p.clean.size() < crop) throw ConfigError("crop of " + std::to_string(crop) + " exceeds utterance " + p.id);
    const auto off = static_cast<std::ptrdiff_t>(rng.below(p.clean.size() - crop + 1));
    const auto len = static_cast<std::ptrdiff_t>(crop);
    nv.insert(nv.end(), p.noisy.begin() + off, p.noisy.begin() + off + len);
    cv.insert(cv.end(), p.clean.begin() + off, p.clean.begin() + off + len);
  }
  return {ad::Tensor::from({batch, crop}, std::move(nv)), ad::Tensor::from({batch, crop}, std::move(cv))};
}

std::vector<data::PairedExample> head_of(const std::vector<data::PairedExample>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
}

nlohmann::json breakdown_json(std::size_t step, const losses::LossBreakdown& b, double k) {
  return {{"step", step}, {"total", b.total}, {"cirm", b.cirm}, {"time", b.time}, {"mstft", b.mstft}, {"k", k}};
}

}  // namespace

RunResult finetune(const ExperimentConfig& cfg, const data::Corpus& corpus, const ckpt::Checkpoint* pretrained,
                   const std::optional<fs::path>& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate(pretrained != nullptr);
  if (corpus.train.empty() || corpus.test.empty()) throw ConfigError("finetune: corpus lacks train or test pairs");
  if (out_dir) fs::create_directories(*out_dir);

  RunResult res;
  res.config = cfg;
  model::SeModel model(cfg.model, mix_seed(cfg.seed, 0x5E));
  if (pretrained) {
    const auto& meta = pretrained->meta;
    if (meta.contains("encoder") && meta.at("encoder") != cfg.model.encoder.to_json()) {
      throw ConfigError("pretrained checkpoint encoder config does not match the experiment");
    }
    model.load_encoder(*pretrained);
  }
  // Reference for similarity probes: the encoder as it was before fine-tuning.
  const auto reference = model.encoder().clone();
  reference->set_frozen(true);

  std::optional<upstream::FrozenPrefix> frozen;
  featnorm::NormPlan plan;
  featnorm::NormPlan* plan_ptr = nullptr;
  if (cfg.regime == Regime::normed) {
    plan.layers = cfg.norm_taps();
    plan.schedule = {cfg.k0, std::max<std::size_t>(cfg.total_steps, 1), featnorm::ScheduleMode::linear};
    plan.k_override = cfg.k_pin;
    plan.beta_m = cfg.beta_m;
    plan.beta_r = cfg.beta_r;
    plan.reset_states();
    frozen.emplace(model.encoder(), plan.depth());
    res.frozen_at_clone = ckpt::snapshot(frozen->encoder().parameters());
    plan_ptr = &plan;
  }

  nn::ParamRefs params = model.parameters();
  nn::Adam opt(params, nn::AdamConfig{cfg.lr});
  Rng rng(mix_seed(cfg.seed, 0xDA7A));
  const auto mstft = losses::MstftConfig::preset();

  std::ostringstream csv;
  csv << losses::LossLog::header() << '\n';
  nlohmann::json eval_curve = nlohmann::json::array();
  nlohmann::json norm_dumps = nlohmann::json::array();
  res.similarity.layer_tag = cfg.norm_layers.empty() ? 0 : *cfg.norm_layers.begin();
  const auto probe_set = head_of(corpus.test, cfg.sim_subset);
  auto probe_similarity = [&](std::size_t step) {
    const auto r = metrics::layer_cosine_similarity(model.encoder(), *reference, probe_set, model.output_tap(),
                                                    cfg.sim_reference);
    res.similarity.steps.push_back(step);
    res.similarity.cos_sim.push_back(r.mean);
  };
  ckpt::Checkpoint last_good = model.snapshot();
  if (cfg.sim_every) probe_similarity(0);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const Batch b = sample_batch(corpus.train, cfg.batch, cfg.crop, rng);
    const auto out = model.forward(b.noisy, &b.clean, plan_ptr, frozen ? &*frozen : nullptr, step);
    losses::CompositeInputs in{out.enhanced, b.clean, out.pred_mask, out.noisy_planar, {}};
    if (model.family() == upstream::Family::generative) {
      ad::NoGradGuard ng;
      in.clean_planar = ad::stft(b.clean, cfg.model.encoder.features);
    }
    const auto loss = losses::composite_loss(in, cfg.weights, model.family(), mstft, cfg.model.cirm);
    if (!std::isfinite(loss.breakdown.total)) {
      if (out_dir) ckpt::save(*out_dir / "last_good.ckpt", last_good);
      throw TrainingError("finetune: non-finite loss", static_cast<long>(step));
    }
    opt.zero_grad();
    loss.total.backward();
    opt.step();
    res.losses.push_back(loss.breakdown);
    csv << losses::LossLog::row(step, loss.breakdown, out.k) << '\n';

    const std::size_t done = step + 1;
    if (cfg.eval_every && done % cfg.eval_every == 0) {
      last_good = model.snapshot();
      const auto m = evaluate(model, corpus.test, cfg.eval_subset);
      eval_curve.push_back({{"step", done}, {"si_sdr_db", m.si_sdr_db}, {"seg_snr_db", m.seg_snr_db}, {"lsd", m.lsd}});
    }
    if (cfg.sim_every && done % cfg.sim_every == 0) probe_similarity(done);
    if (cfg.norm_dump_every && plan_ptr && done % cfg.norm_dump_every == 0) {
      norm_dumps.push_back({{"step", done}, {"plan", plan.to_json()}});
    }
  }
  if (cfg.sim_every && (res.similarity.steps.empty() || res.similarity.steps.back() != cfg.total_steps)) {
    probe_similarity(cfg.total_steps);
  }

  res.test = evaluate(model, corpus.test, cfg.test_limit);
  res.final_model = model.snapshot();
  res.loss_csv = csv.str();
  res.plan = plan;
  if (frozen) {
    res.frozen_at_end = ckpt::snapshot(frozen->encoder().parameters());
    for (auto* p : frozen->encoder().parameters()) res.frozen_received_grad |= p->tensor.has_grad();
  }

  nlohmann::json sim = nlohmann::json::object();
  if (!res.similarity.steps.empty()) {
    sim = {{"layer", res.similarity.layer_tag}, {"steps", res.similarity.steps}, {"cos_sim", res.similarity.cos_sim}};
  }
  res.report = {{"config", cfg.to_json()},
                {"config_hash", cfg.hash()},
                {"corpus_hash", corpus.config.hash()},
                {"pretrained_hash", pretrained ? json_hash(pretrained->meta) : ""},
                {"family", upstream::to_string(cfg.family())},
                {"regime", to_string(cfg.regime)},
                {"metrics", res.test.to_json()},
                {"loss_log_hash", sha256_hex(res.loss_csv)},
                {"final_loss", res.losses.empty() ? nlohmann::json(nullptr) : breakdown_json(cfg.total_steps - 1, res.losses.back(), plan.k(cfg.total_steps - 1))},
                {"eval_curve", eval_curve},
                {"similarity", sim}};
  if (plan_ptr) res.report["norm_state"] = plan.to_json();
  // The model weights are part of the identity of a run.
  std::string weights;
  for (const auto& [name, t] : res.final_model.tensors) {
    weights += name;
    weights.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
  }
  res.report["model_hash"] = sha256_hex(weights);
  res.report_hash = json_hash(res.report);
  res.report["report_hash"] = res.report_hash;
  res.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.report["wall_clock_s"] = res.wall_clock_s;

  res.norm_dumps = std::move(norm_dumps);
  if (out_dir) write_run(res, *out_dir);
  return res;
}

void write_run(const RunResult& run, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "resolved_config.json",
             nlohmann::json({{"config", run.config.to_json()}, {"config_hash", run.config.hash()}}).dump(2) + "\n");
  write_text(dir / "report.json", run.report.dump(2) + "\n");
  write_text(dir / "report.md", report_markdown(run.report));
  write_text(dir / "train_log.csv", run.loss_csv);
  if (!run.similarity.steps.empty()) write_text(dir / "similarity.csv", metrics::similarity_csv({run.similarity}));
  if (!run.norm_dumps.empty()) write_text(dir / "norm_state.json", run.norm_dumps.dump(1) + "\n");
  ckpt::save(dir / "model.ckpt", run.final_model);
}

std::vector<RunResult> run_many(const std::vector<ExperimentConfig>& cfgs, const data::Corpus& corpus,
                                const ckpt::Checkpoint* pretrained, std::size_t jobs) {
  std::vector<std::optional<RunResult>> slots(cfgs.size());
  std::vector<std::exception_ptr> errors(cfgs.size());
  jobs = std::max<std::size_t>(1, std::min(jobs, cfgs.size()));
  if (jobs == 1) {
    std::vector<RunResult> out;
    for (const auto& c : cfgs) out.push_back(finetune(c, corpus, pretrained));
    return out;
  }
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= cfgs.size()) return;
        i = next++;
      }
      try {
        slots[i] = finetune(cfgs[i], corpus, pretrained);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  std::vector<RunResult> out;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

std::vector<SweepRow> layer_sweep(const ExperimentConfig& tmpl, const std::vector<std::size_t>& layers,
                                  const data::Corpus& corpus, const ckpt::Checkpoint& pretrained,
                                  std::size_t jobs) {
  if (layers.empty()) throw ConfigError("layer_sweep: empty layer list");
  std::vector<ExperimentConfig> cfgs;
  for (auto l : layers) {
    ExperimentConfig c = tmpl;
    c.regime = Regime::normed;
    c.norm_layers = {l};
    c.validate(true);
    cfgs.push_back(c);
  }
  auto runs = run_many(cfgs, corpus, &pretrained, jobs);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < layers.size(); ++i) rows.push_back({layers[i], std::move(runs[i])});
  return rows;
}

std::string sweep_markdown(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "| layer | SI-SDR (dB) | seg-SNR (dB) | LSD (dB) | report hash |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.layer << " | " << r.run.test.si_sdr_db << " | " << r.run.test.seg_snr_db << " | "
       << r.run.test.lsd << " | " << r.run.report_hash.substr(0, 12) << " |\n";
  }
  return os.str();
}

nlohmann::json sweep_json(const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"layer", r.layer},
                   {"si_sdr_db", r.run.test.si_sdr_db},
                   {"seg_snr_db", r.run.test.seg_snr_db},
                   {"lsd", r.run.test.lsd},
                   {"report_hash", r.run.report_hash},
                   {"config_hash", r.run.config.hash()}});
  }
  return out;
}

std::vector<metrics::SimilarityCurve> similarity_study(const ExperimentConfig& tmpl,
                                                       const std::vector<std::size_t>& layers, std::size_t cadence,
                                                       const data::Corpus& corpus,
                                                       const ckpt::Checkpoint& pretrained, std::size_t jobs) {
  if (cadence == 0) throw ConfigError("similarity_study: cadence must be positive");
  ExperimentConfig t = tmpl;
  t.sim_every = cadence;
  std::vector<metrics::SimilarityCurve> curves;
  for (auto& row : layer_sweep(t, layers, corpus, pretrained, jobs)) curves.push_back(row.run.similarity);
  return curves;
}

PretrainOutcome pretrain(const model::ModelConfig& model_cfg, const upstream::PretrainConfig& cfg,
                         const data::Corpus& corpus) {
  model_cfg.validate();
  if (corpus.pretrain.size() < 2) throw ConfigError("pretrain: need at least two clean utterances");
  const std::size_t held = std::max<std::size_t>(1, corpus.pretrain.size() / 10);
  std::vector<std::vector<double>> train, heldout;
  for (std::size_t i = 0; i < corpus.pretrain.size(); ++i) {
    (i + held < corpus.pretrain.size() ? train : heldout).push_back(corpus.pretrain[i].samples);
  }
  Rng rng(mix_seed(cfg.seed, 0xE0C));
  auto encoder = upstream::make_encoder(model_cfg.encoder, rng);
  PretrainOutcome out;
  out.result = upstream::pretrain_masked_reconstruction(*encoder, train, heldout, cfg);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [s, v] : out.result.heldout_curve) curve.push_back({s, v});
  out.checkpoint = ckpt::snapshot(encoder->parameters(),
                                  {{"kind", "pretrained_encoder"},
                                   {"encoder", model_cfg.encoder.to_json()},
                                   {"pretrain", cfg.to_json()},
                                   {"corpus_hash", corpus.config.hash()},
                                   {"initial_heldout", out.result.initial_heldout},
                                   {"final_heldout", out.result.final_heldout},
                                   {"heldout_curve", curve}});
  return out;
}

std::string report_markdown(const nlohmann::json& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  const auto& m = report.at("metrics");
  os << "# Fine-tuning report\n\n";
  os << "- family: " << report.at("family").get<std::string>() << "\n";
  os << "- regime: " << report.at("regime").get<std::string>() << "\n";
  os << "- config hash: `" << report.at("config_hash").get<std::string>() << "`\n";
  os << "- report hash: `" << report.value("report_hash", std::string()) << "`\n\n";
  os << "| SI-SDR (dB) | seg-SNR (dB) | LSD (dB) | utterances |\n|---|---|---|---|\n";
  os << "| " << m.at("si_sdr_db").get<double>() << " | " << m.at("seg_snr_db").get<double>() << " | "
     << m.at("lsd").get<double>() << " | " << m.at("per_utterance").size() << " |\n";
  return os.str();
}

}  // namespace fnse::trainer
