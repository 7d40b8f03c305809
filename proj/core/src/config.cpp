#include "irs/config.hpp"

#include <cstdio>

#include "irs/checkpoint.hpp"

namespace irs::harness {

using nlohmann::json;

namespace {

json model_to_json(const ModelConfig& m) {
  const auto& n = m.net;
  const auto& t = m.train;
  return {{"d", n.d},
          {"d_user", n.d_user},
          {"layers", n.layers},
          {"heads", n.heads},
          {"w_t", n.w_t},
          {"w_h", n.w_h},
          {"ffn_dim", n.ffn_dim},
          {"dropout", n.dropout},
          {"learned_positional", n.learned_positional},
          {"lr", t.lr},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"min_lr", t.min_lr},
          {"patience", t.patience},
          {"factor", t.factor},
          {"init_from_item2vec", m.init_from_item2vec}};
}

void model_from_json(const json& j, ModelConfig& m) {
  auto& n = m.net;
  auto& t = m.train;
  n.d = j.at("d");
  n.d_user = j.at("d_user");
  n.layers = j.at("layers");
  n.heads = j.at("heads");
  n.w_t = j.at("w_t");
  n.w_h = j.at("w_h");
  n.ffn_dim = j.at("ffn_dim");
  n.dropout = j.at("dropout");
  n.learned_positional = j.at("learned_positional");
  t.lr = j.at("lr");
  t.batch_size = j.at("batch_size");
  t.epochs = j.at("epochs");
  t.min_lr = j.at("min_lr");
  t.patience = j.at("patience");
  t.factor = j.at("factor");
  m.init_from_item2vec = j.at("init_from_item2vec");
}

bool same_kind(const json& want, const json& got) {
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<std::int64_t>() >= 0);
  if (want.is_number_integer()) return got.is_number_integer();
  return want.type() == got.type();
}

// Overlays `patch` on `base`, rejecting keys and types that `base` does not have.
void overlay(json& base, const json& patch, const std::string& where) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it->is_object()) throw ConfigError("config key '" + key + "' must be an object");
      overlay(slot, *it, key);
    } else {
      if (!same_kind(slot, *it)) {
        throw ConfigError("config key '" + key + "' expects " + std::string(slot.type_name()) + ", got " +
                          std::string(it->type_name()));
      }
      slot = *it;
    }
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (version != kConfigVersion) fail("unsupported config version " + std::to_string(version));
  if (split.l_min < 2 || split.l_max < split.l_min) fail("need 2 <= split.l_min <= split.l_max");
  if (split.validation_fraction < 0 || split.validation_fraction >= 1) fail("split.validation_fraction must be in [0, 1)");
  for (const auto* m : {&irn, &evaluator}) {
    try {
      m->net.validate();
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (m->train.lr <= 0) fail("learning rates must be positive");
    if (m->train.batch_size == 0 || m->train.epochs == 0) fail("batch_size and epochs must be positive");
    if (m->init_from_item2vec && m->net.d != embed.dim) {
      fail("init_from_item2vec needs embed.dim (" + std::to_string(embed.dim) + ") == d (" + std::to_string(m->net.d) + ")");
    }
  }
  if (evaluator.net.w_t != 0.0) fail("evaluator.w_t must be 0");
  if (embed.dim == 0 || embed.window == 0 || embed.epochs == 0) fail("embed dim, window and epochs must be positive");
  if (paths.M == 0 || paths.k == 0) fail("paths.M and paths.k must be positive");
  try {
    embed::parse_distance(paths.distance);
  } catch (const std::exception& e) {
    fail(e.what());
  }
  const auto& s = synthetic;
  if (s.chains == 0 || s.users == 0) fail("synthetic world needs chains and users");
  if (s.min_segment < 3 || s.max_segment < s.min_segment) fail("need 3 <= synthetic.min_segment <= max_segment");
  if (s.min_hops < 1 || s.max_hops < s.min_hops) fail("need 1 <= synthetic.min_hops <= max_hops");
  if (s.max_segment + s.max_hops - 1 > s.chain_length) {
    fail("synthetic chains need length >= max_segment + max_hops - 1");
  }
  if (s.noise < 0 || s.noise >= 1) fail("synthetic.noise must be in [0, 1)");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.split.l_min = 20;
  c.split.l_max = 50;
  c.embed.dim = 40;
  c.irn.net.l_max = c.evaluator.net.l_max = c.split.l_max;
  c.evaluator.net.w_t = 0.0;
  return c;
}

void scale_for_synthetic(ExperimentConfig& c) {
  c.split.l_min = 2;
  c.split.l_max = 5;
  c.embed.dim = 16;
  for (auto* m : {&c.irn, &c.evaluator}) {
    m->net.d = 16;
    m->net.d_user = 4;
    m->net.layers = 2;
    m->net.heads = 2;
    m->net.l_max = c.split.l_max;
    m->train.batch_size = 64;
    m->train.epochs = 30;
    m->train.lr = 0.03;
  }
  c.paths.M = 10;
  c.data.min_interactions = 2;
}

json to_json(const ExperimentConfig& c) {
  return {{"version", c.version},
          {"seed", c.seed},
          {"workers", c.workers},
          {"data",
           {{"path", c.data.path},
            {"format", c.data.format},
            {"dedup_consecutive", c.data.dedup_consecutive},
            {"min_interactions", c.data.min_interactions},
            {"planted", c.data.planted}}},
          {"split", {{"l_min", c.split.l_min}, {"l_max", c.split.l_max}, {"validation_fraction", c.split.validation_fraction}}},
          {"embed",
           {{"dim", c.embed.dim},
            {"window", c.embed.window},
            {"negatives", c.embed.negatives},
            {"epochs", c.embed.epochs},
            {"lr", c.embed.lr},
            {"sum_context_vectors", c.embed.sum_context_vectors}}},
          {"irn", model_to_json(c.irn)},
          {"evaluator", model_to_json(c.evaluator)},
          {"paths",
           {{"M", c.paths.M},
            {"methods", c.paths.methods},
            {"k", c.paths.k},
            {"forbid_repeats", c.paths.forbid_repeats},
            {"distance", c.paths.distance},
            {"irn_model", c.paths.irn_model},
            {"backbone_model", c.paths.backbone_model}}},
          {"synthetic",
           {{"chains", c.synthetic.chains},
            {"chain_length", c.synthetic.chain_length},
            {"users", c.synthetic.users},
            {"noise", c.synthetic.noise},
            {"min_segment", c.synthetic.min_segment},
            {"max_segment", c.synthetic.max_segment},
            {"min_hops", c.synthetic.min_hops},
            {"max_hops", c.synthetic.max_hops}}}};
}

ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("version")) throw ConfigError("config is missing 'version'");
  if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kConfigVersion) {
    throw ConfigError("unsupported config version " + j.at("version").dump() + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  }
  json full = to_json(default_config());
  overlay(full, j, "");
  ExperimentConfig c;
  try {
    c.version = full.at("version");
    c.seed = full.at("seed");
    c.workers = full.at("workers");
    const auto& d = full.at("data");
    c.data = {d.at("path"), d.at("format"), d.at("dedup_consecutive"), d.at("min_interactions"), d.at("planted")};
    const auto& s = full.at("split");
    c.split.l_min = s.at("l_min");
    c.split.l_max = s.at("l_max");
    c.split.validation_fraction = s.at("validation_fraction");
    const auto& e = full.at("embed");
    c.embed.dim = e.at("dim");
    c.embed.window = e.at("window");
    c.embed.negatives = e.at("negatives");
    c.embed.epochs = e.at("epochs");
    c.embed.lr = e.at("lr");
    c.embed.sum_context_vectors = e.at("sum_context_vectors");
    model_from_json(full.at("irn"), c.irn);
    model_from_json(full.at("evaluator"), c.evaluator);
    c.irn.net.l_max = c.evaluator.net.l_max = c.split.l_max;
    const auto& p = full.at("paths");
    c.paths.M = p.at("M");
    c.paths.methods = p.at("methods").get<std::vector<std::string>>();
    c.paths.k = p.at("k");
    c.paths.forbid_repeats = p.at("forbid_repeats");
    c.paths.distance = p.at("distance");
    c.paths.irn_model = p.at("irn_model");
    c.paths.backbone_model = p.at("backbone_model");
    const auto& w = full.at("synthetic");
    c.synthetic = {w.at("chains"), w.at("chain_length"), w.at("users"), w.at("noise"),
                   w.at("min_segment"), w.at("max_segment"), w.at("min_hops"), w.at("max_hops")};
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* slot = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*slot)[part] = value;
      return;
    }
    if (!slot->contains(part)) (*slot)[part] = json::object();
    slot = &(*slot)[part];
    if (!slot->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json j;
  if (file.empty()) {
    j = json{{"version", kConfigVersion}};
  } else {
    std::string text;
    try {
      text = read_file(file);
    } catch (const std::exception& e) {
      throw ConfigError("cannot read config " + file.string() + ": " + e.what());
    }
    j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + file.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

void save_config(const std::filesystem::path& file, const ExperimentConfig& config) {
  write_file_atomic(file, to_json(config).dump(2) + "\n");
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(config).dump())));
  return buf;
}

}  // namespace irs::harness
