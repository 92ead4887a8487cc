#include <doctest.h>

#include <filesystem>
#include <map>

#include "fnse/errors.hpp"
#include "fnse/trainer.hpp"

using namespace fnse;
using namespace fnse::trainer;

namespace {

data::CorpusConfig tiny_corpus() {
  data::CorpusConfig c;
  c.n_pretrain = 6;
  c.n_train = 8;
  c.n_test = 3;
  c.duration = 0.25;
  return c;
}

ExperimentConfig small(upstream::Family f, Regime regime) {
  auto c = ExperimentConfig::defaults(f);
  c.model.encoder.d = 16;
  c.model.encoder.heads = 2;
  c.model.encoder.layers = 3;
  c.model.encoder.ff = 32;
  c.model.encoder.conv_channels = {4, 4, 8, 8};
  c.regime = regime;
  c.total_steps = 6;
  c.batch = 2;
  c.crop = 1200;
  c.lr = 1e-3;
  return c;
}

const data::Corpus& corpus() {
  static const data::Corpus c = data::build_corpus(tiny_corpus());
  return c;
}

const ckpt::Checkpoint& pretrained(upstream::Family f) {
  static std::map<upstream::Family, ckpt::Checkpoint> cache;
  auto it = cache.find(f);
  if (it == cache.end()) {
    upstream::PretrainConfig pc;
    pc.steps = 3;
    pc.batch = 2;
    pc.crop = 800;
    it = cache.emplace(f, trainer::pretrain(small(f, Regime::pretrained).model, pc, corpus()).checkpoint).first;
  }
  return it->second;
}

bool same_tensors(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || it->second.shape != t.shape || it->second.values != t.values) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("regime validation") {
  const auto g = upstream::Family::generative;
  CHECK_THROWS_AS(small(g, Regime::base).validate(true), ConfigError);
  CHECK_THROWS_AS(small(g, Regime::pretrained).validate(false), ConfigError);
  auto n = small(g, Regime::normed);
  n.norm_layers = {};
  CHECK_THROWS_AS(n.validate(true), ConfigError);
  n.norm_layers = {4};
  CHECK_THROWS_AS(n.validate(true), ConfigError);
  n.norm_layers = {0};
  CHECK_THROWS_AS(n.validate(true), ConfigError);
  n.norm_layers = {1, 2};
  CHECK_NOTHROW(n.validate(true));
  CHECK(n.norm_taps() == std::set<std::size_t>{0, 1});
  CHECK_THROWS_AS(regime_from_string("fancy"), ConfigError);
  CHECK(ExperimentConfig::from_json(n.to_json()).hash() == n.hash());
}

TEST_CASE("zero-step run evaluates the initial model") {
  auto c = small(upstream::Family::generative, Regime::base);
  c.total_steps = 0;
  const auto r = finetune(c, corpus(), nullptr);
  CHECK(r.losses.empty());
  CHECK(r.test.per_utterance.size() == 3);
}

TEST_CASE("k0 = 0 normed run reproduces the pretrained loss log") {
  for (auto f : {upstream::Family::generative, upstream::Family::contrastive}) {
    CAPTURE(upstream::to_string(f));
    auto n = small(f, Regime::normed);
    n.k0 = 0.0;
    const auto a = finetune(small(f, Regime::pretrained), corpus(), &pretrained(f));
    const auto b = finetune(n, corpus(), &pretrained(f));
    CHECK(a.loss_csv == b.loss_csv);
    CHECK(a.test.si_sdr_db == b.test.si_sdr_db);
  }
}

TEST_CASE("normed run keeps the frozen prefix intact") {
  for (auto f : {upstream::Family::generative, upstream::Family::contrastive}) {
    CAPTURE(upstream::to_string(f));
    const auto r = finetune(small(f, Regime::normed), corpus(), &pretrained(f));
    CHECK(same_tensors(r.frozen_at_end, r.frozen_at_clone));
    CHECK_FALSE(r.frozen_received_grad);
    CHECK(r.report.contains("norm_state"));
  }
}

TEST_CASE("runs are deterministic and write their artifacts") {
  auto c = small(upstream::Family::generative, Regime::normed);
  c.sim_every = 3;
  c.sim_subset = 2;
  c.norm_dump_every = 3;
  const auto dir = std::filesystem::temp_directory_path() / "fnse_trainer_run";
  std::filesystem::remove_all(dir);
  const auto a = finetune(c, corpus(), &pretrained(upstream::Family::generative), dir);
  const auto b = finetune(c, corpus(), &pretrained(upstream::Family::generative));
  CHECK(a.report_hash == b.report_hash);
  CHECK(a.similarity.steps == std::vector<std::size_t>{0, 3, 6});
  for (const char* f : {"resolved_config.json", "report.json", "report.md", "train_log.csv", "similarity.csv",
                        "norm_state.json", "model.ckpt"}) {
    CHECK(std::filesystem::exists(dir / f));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("layer sweep rows follow the requested layers") {
  auto c = small(upstream::Family::generative, Regime::normed);
  c.total_steps = 2;
  const auto rows = layer_sweep(c, {1, 2}, corpus(), pretrained(upstream::Family::generative), 2);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].layer == 1);
  CHECK(rows[1].layer == 2);
  CHECK(rows[1].run.config.norm_layers == std::set<std::size_t>{2});
  CHECK(sweep_json(rows).size() == 2);
  CHECK(sweep_markdown(rows).find("|") != std::string::npos);
  CHECK_THROWS_AS(layer_sweep(c, {}, corpus(), pretrained(upstream::Family::generative)), ConfigError);
}

TEST_CASE("fine-tuning lowers the training loss") {
  auto c = small(upstream::Family::generative, Regime::base);
  c.total_steps = 60;
  const auto r = finetune(c, corpus(), nullptr);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.losses[i].total;
    tail += r.losses[50 + i].total;
  }
  CHECK(tail < head);
}
