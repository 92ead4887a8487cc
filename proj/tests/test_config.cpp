#include <doctest.h>

#include <cstdlib>

#include "fnse/config.hpp"
#include "fnse/errors.hpp"

using namespace fnse;
using namespace fnse::config;

TEST_CASE("empty document gives the defaults") {
  const auto c = parse_toml("");
  CHECK(c.hash() == RunConfig::defaults().hash());
  CHECK(c.experiment.norm_layers == std::set<std::size_t>{1});
}

TEST_CASE("family switches the normalization defaults") {
  const auto c = parse_toml("[model.encoder]\nfamily = \"contrastive\"\n");
  CHECK(c.experiment.family() == upstream::Family::contrastive);
  CHECK(c.experiment.norm_layers == std::set<std::size_t>{2});
  CHECK(c.experiment.k0 == 0.5);
}

TEST_CASE("values overlay the defaults") {
  const auto c = parse_toml(R"(
[corpus]
n_train = 12
snrs = [0.0, 3.0]
[finetune]
regime = "normed"
total_steps = 40
lr = 1e-3
[finetune.weights]
mstft = 0.0
[norm]
layers = [2, 3]
k0 = 0.25
k_pin = 1
)");
  CHECK(c.corpus.n_train == 12);
  CHECK(c.corpus.snrs == std::vector<double>{0.0, 3.0});
  CHECK(c.experiment.regime == trainer::Regime::normed);
  CHECK(c.experiment.total_steps == 40);
  CHECK(c.experiment.lr == 1e-3);
  CHECK(c.experiment.weights.mstft == 0.0);
  CHECK(c.experiment.norm_layers == std::set<std::size_t>{2, 3});
  CHECK(c.experiment.k_pin == 1.0);
  CHECK(RunConfig::from_json(c.to_json()).hash() == c.hash());
}

TEST_CASE("bad documents are config errors") {
  CHECK_THROWS_AS(parse_toml("[corpus]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[finetune]\nlr = \"fast\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[finetune]\nbatch = -4\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[norm]\nlayers = [\"a\"]\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[corpus\n"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[finetune]\nregime = \"fancy\"\n"), ConfigError);
  CHECK_THROWS_AS(load("/nonexistent/run.toml"), ConfigError);
}

TEST_CASE("FNSE_SEED replaces both training seeds") {
  auto c = RunConfig::defaults();
  const auto corpus_seed = c.corpus.seed;
  setenv("FNSE_SEED", "42", 1);
  apply_env(c);
  CHECK(c.pretrain.seed == 42);
  CHECK(c.experiment.seed == 42);
  CHECK(c.corpus.seed == corpus_seed);
  setenv("FNSE_SEED", "-1", 1);
  CHECK_THROWS_AS(apply_env(c), ConfigError);
  setenv("FNSE_SEED", "12x", 1);
  CHECK_THROWS_AS(apply_env(c), ConfigError);
  unsetenv("FNSE_SEED");
}
