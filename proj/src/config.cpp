#include "fnse/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <toml.hpp>

#include "fnse/errors.hpp"
#include "fnse/hash.hpp"

namespace fnse::config {

namespace {

using nlohmann::json;

json from_toml(const toml::node& n, const std::string& path) {
  if (const auto* t = n.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = from_toml(v, path + "." + std::string(k.str()));
    return out;
  }
  if (const auto* a = n.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(from_toml(v, path));
    return out;
  }
  if (const auto* v = n.as_integer()) return v->get();
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_boolean()) return v->get();
  if (const auto* v = n.as_string()) return v->get();
  throw ConfigError("config: unsupported value type at " + path);
}

bool compatible(const json& def, const json& val) {
  if (def.is_null()) return val.is_number();
  if (def.is_number_unsigned()) return val.is_number_unsigned() || (val.is_number_integer() && val.get<long long>() >= 0);
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_array()) return val.is_array();
  return false;
}

// Overlays user values on the defaults. Keys absent from the defaults and
// values of the wrong kind are errors.
void overlay(json& def, const json& user, const std::string& path) {
  for (const auto& [k, v] : user.items()) {
    const std::string where = path.empty() ? k : path + "." + k;
    if (!def.contains(k)) throw ConfigError("config: unknown key '" + where + "'");
    json& d = def[k];
    if (d.is_object()) {
      if (!v.is_object()) throw ConfigError("config: '" + where + "' must be a table");
      overlay(d, v, where);
    } else if (!compatible(d, v)) {
      throw ConfigError("config: '" + where + "' has the wrong type");
    } else if (d.is_array() && !d.empty()) {
      for (const auto& e : v) {
        if (!compatible(d.front(), e)) throw ConfigError("config: '" + where + "' has an element of the wrong type");
      }
      d = v;
    } else {
      d = v;
    }
  }
}

upstream::Family peek_family(const json& user) {
  const auto m = user.find("model");
  if (m == user.end() || !m->is_object()) return upstream::Family::generative;
  const auto e = m->find("encoder");
  if (e == m->end() || !e->is_object() || !e->contains("family")) return upstream::Family::generative;
  const auto& f = e->at("family");
  if (!f.is_string()) throw ConfigError("config: 'model.encoder.family' must be a string");
  return upstream::family_from_string(f.get<std::string>());
}

}  // namespace

RunConfig RunConfig::defaults(upstream::Family family) {
  RunConfig c;
  c.experiment = trainer::ExperimentConfig::defaults(family);
  return c;
}

nlohmann::json RunConfig::to_json() const {
  const auto& e = experiment;
  json ex = e.to_json();
  return {{"corpus", corpus.to_json()},
          {"model", ex.at("model")},
          {"pretrain", pretrain.to_json()},
          {"finetune",
           {{"regime", ex.at("regime")},
            {"total_steps", e.total_steps},
            {"batch", e.batch},
            {"crop", e.crop},
            {"lr", e.lr},
            {"seed", e.seed},
            {"weights", ex.at("weights")},
            {"eval_every", e.eval_every},
            {"eval_subset", e.eval_subset},
            {"test_limit", e.test_limit},
            {"sim_every", e.sim_every},
            {"sim_subset", e.sim_subset},
            {"sim_reference", ex.at("sim_reference")}}},
          {"norm",
           {{"layers", ex.at("norm_layers")},
            {"k0", e.k0},
            {"k_pin", ex.at("k_pin")},
            {"beta_m", e.beta_m},
            {"beta_r", e.beta_r},
            {"dump_every", e.norm_dump_every}}},
          {"paths", {{"corpus", corpus_path}, {"pretrained", pretrained_path}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    RunConfig c;
    c.corpus = data::CorpusConfig::from_json(j.at("corpus"));
    c.pretrain = upstream::PretrainConfig::from_json(j.at("pretrain"));
    const auto& f = j.at("finetune");
    const auto& n = j.at("norm");
    json ex = f;
    ex["model"] = j.at("model");
    ex["norm_layers"] = n.at("layers");
    ex["k0"] = n.at("k0");
    ex["k_pin"] = n.at("k_pin");
    ex["beta_m"] = n.at("beta_m");
    ex["beta_r"] = n.at("beta_r");
    ex["norm_dump_every"] = n.at("dump_every");
    c.experiment = trainer::ExperimentConfig::from_json(ex);
    c.corpus_path = j.at("paths").at("corpus");
    c.pretrained_path = j.at("paths").at("pretrained");
    c.corpus.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string RunConfig::hash() const { return json_hash(to_json()); }

RunConfig parse_toml(std::string_view text, const std::string& source) {
  toml::table tbl;
  try {
    tbl = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << source << ": " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(os.str());
  }
  const json user = from_toml(tbl, "");
  json resolved = RunConfig::defaults(peek_family(user)).to_json();
  overlay(resolved, user, "");
  return RunConfig::from_json(resolved);
}

RunConfig load(const std::filesystem::path& file) {
  if (file.empty()) return RunConfig::defaults();
  std::ifstream in(file);
  if (!in) throw ConfigError("config: cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_toml(ss.str(), file.string());
}

void apply_env(RunConfig& cfg) {
  const char* s = std::getenv("FNSE_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw ConfigError(std::string("FNSE_SEED is not a nonnegative integer: ") + s);
  cfg.pretrain.seed = v;
  cfg.experiment.seed = v;
}

}  // namespace fnse::config
