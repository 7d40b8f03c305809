#include "irs/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <optional>

#include "irs/baselines.hpp"
#include "irs/checkpoint.hpp"
#include "irs/parallel.hpp"
#include "irs/synthetic.hpp"

namespace irs::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void log_line(const std::string& text) { std::cerr << "[irs] " << text << std::endl; }

fs::path require(const fs::path& file, const std::string& stage) {
  if (!fs::exists(file)) {
    throw ArtifactError("missing upstream artifact " + file.string() + " (run `irs " + stage + "` first)");
  }
  return file;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_manifest(const fs::path& file, const std::string& stage, const ExperimentConfig& config,
                    const std::string& fingerprint, const std::vector<fs::path>& outputs, Clock::time_point start,
                    json extra = json::object()) {
  json out = json::object();
  for (const auto& f : outputs) out[f.filename().string()] = file_hash(f);
  json m{{"stage", stage},
         {"format_version", 1},
         {"config_hash", config_hash(config)},
         {"seed", config.seed},
         {"catalog_fingerprint", fingerprint},
         {"outputs", out},
         {"seconds", seconds_since(start)},
         {"config", to_json(config)}};
  m.update(extra);
  write_file_atomic(file, m.dump(2) + "\n");
}

json read_json(const fs::path& file) {
  auto j = json::parse(read_file(file), nullptr, false);
  if (j.is_discarded()) throw ArtifactError(file.string() + " is not valid JSON");
  return j;
}

struct Loaded {
  corpus::Corpus corpus;
  corpus::DatasetSplit split;
  std::string fingerprint;
};

corpus::Corpus load_corpus_checked(const fs::path& root) {
  require(root / "corpus" / "catalog.json", "preprocess");
  return corpus::load_corpus(root / "corpus");
}

Loaded load_split_checked(const fs::path& root) {
  Loaded l;
  l.corpus = load_corpus_checked(root);
  l.fingerprint = l.corpus.catalog.fingerprint();
  require(root / "split" / "split.json", "split");
  std::string split_fp;
  l.split = corpus::load_split(root / "split", &split_fp);
  if (split_fp != l.fingerprint) {
    throw ArtifactError("split was made from a different catalog (" + split_fp + " vs " + l.fingerprint + ")");
  }
  return l;
}

// Per-user histories (sequence minus the held-out item): the interactions every
// method may learn from.
std::vector<std::vector<ItemId>> histories(const corpus::DatasetSplit& split) {
  std::vector<std::vector<ItemId>> out;
  out.reserve(split.test.size());
  for (const auto& t : split.test) out.push_back(t.history);
  return out;
}

std::vector<corpus::InteractionSequence> history_sequences(const corpus::DatasetSplit& split) {
  std::vector<corpus::InteractionSequence> out;
  for (const auto& t : split.test) out.push_back({t.user, t.history, {}});
  return out;
}

irn::IrnModel load_model(const fs::path& root, const std::string& name, const std::string& fingerprint) {
  const auto dir = root / name;
  require(dir / "model.ckpt", name == "evaluator" ? "train-evaluator" : "train-irn --name " + name);
  auto ckpt = load_checkpoint(dir / "model.ckpt");
  if (ckpt.meta.value("catalog_fingerprint", std::string()) != fingerprint) {
    throw ArtifactError(name + " was trained on a different catalog");
  }
  return irn::IrnModel::from_checkpoint(ckpt);
}

std::string level_name(double v) { return eval::format_number(v); }

}  // namespace

std::string file_hash(const fs::path& file) { return hex16(fnv1a(read_file(file))); }

std::string method_stem(const std::string& method) {
  std::string s = method;
  for (auto& c : s)
    if (c == ':') c = '-';
  return s;
}

// ---- stages ----------------------------------------------------------------------

json stage_preprocess(const ExperimentConfig& config, const fs::path& root) {
  const auto start = Clock::now();
  if (config.data.path.empty()) throw ConfigError("data.path is not set");
  if (!fs::exists(config.data.path)) throw ArtifactError("raw data file " + config.data.path + " does not exist");
  corpus::Format format;
  try {
    format = corpus::parse_format(config.data.format);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  corpus::IngestReport report;
  auto events = corpus::ingest(config.data.path, format, &report);
  auto c = corpus::preprocess(events, config.data.dedup_consecutive, config.data.min_interactions);
  const auto dir = root / "corpus";
  corpus::save_corpus(dir, c);
  json stats{{"users", c.catalog.num_users()},
             {"items", c.catalog.num_items()},
             {"interactions", c.num_interactions()},
             {"raw_rows", report.rows},
             {"malformed_rows", report.malformed}};
  write_manifest(dir / "manifest.json", "preprocess", config, c.catalog.fingerprint(),
                 {dir / "catalog.json", dir / "sequences.bin"}, start, {{"stats", stats}});
  log_line("preprocess: " + stats.dump());
  return stats;
}

json stage_split(const ExperimentConfig& config, const fs::path& root) {
  const auto start = Clock::now();
  auto c = load_corpus_checked(root);
  std::map<UserId, ItemId> planted;
  std::size_t dropped = 0;
  if (!config.data.planted.empty()) {
    for (const auto& [user, item] : read_planted(require(config.data.planted, "make-synthetic"))) {
      auto u = c.catalog.find_user(user);
      auto i = c.catalog.find_item(item);
      if (u && i) {
        planted[*u] = *i;
      } else {
        ++dropped;
      }
    }
  }
  auto split_cfg = config.split;
  split_cfg.seed = config.seed;
  auto s = corpus::split(c.sequences, c.item_counts(), split_cfg, planted.empty() ? nullptr : &planted);
  for (const auto& t : s.test) {
    if (std::find(t.history.begin(), t.history.end(), t.objective) != t.history.end()) {
      throw ArtifactError("planted objective for user " + c.catalog.user_names[t.user] + " is already in the history");
    }
  }
  const auto dir = root / "split";
  const auto fp = c.catalog.fingerprint();
  corpus::save_split(dir, s, fp);
  json stats{{"train", s.train.size()},
             {"validation", s.validation.size()},
             {"test", s.test.size()},
             {"skipped_users", s.skipped_users.size()},
             {"planted", planted.size()},
             {"planted_dropped", dropped}};
  write_manifest(dir / "manifest.json", "split", config, fp,
                 {dir / "split.json", dir / "train.bin", dir / "validation.bin", dir / "test.bin"}, start,
                 {{"stats", stats}});
  log_line("split: " + stats.dump());
  return stats;
}

json stage_train_embed(const ExperimentConfig& config, const fs::path& root) {
  const auto start = Clock::now();
  auto l = load_split_checked(root);
  auto embed_cfg = config.embed;
  embed_cfg.seed = config.seed;
  auto emb = embed::train_item2vec(history_sequences(l.split), l.corpus.catalog.num_items(), embed_cfg);
  const auto dir = root / "embed";
  embed::save_embeddings(dir / "item2vec.ckpt", emb);
  embed::export_text(dir / "item2vec.txt", emb, l.corpus.catalog);
  json stats{{"items", emb.num_items()}, {"dim", emb.dim()}, {"cold_items", emb.cold_items.size()}};
  write_manifest(dir / "manifest.json", "train-embed", config, l.fingerprint, {dir / "item2vec.ckpt", dir / "item2vec.txt"},
                 start, {{"stats", stats}});
  log_line("train-embed: " + stats.dump());
  return stats;
}

json stage_train_model(const ExperimentConfig& config, const fs::path& root, ModelRole role, const std::string& name) {
  const auto start = Clock::now();
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("invalid model name '" + name + "'");
  auto l = load_split_checked(root);
  const ModelConfig& mc = role == ModelRole::evaluator ? config.evaluator : config.irn;
  std::optional<embed::ItemEmbeddings> emb;
  if (mc.init_from_item2vec) {
    emb = embed::load_embeddings(require(root / "embed" / "item2vec.ckpt", "train-embed"));
    if (emb->num_items() != l.corpus.catalog.num_items()) throw ArtifactError("item2vec was trained on a different catalog");
  }
  const std::uint64_t model_seed = splitmix64(config.seed ^ fnv1a(role == ModelRole::evaluator ? "evaluator" : "irn"));
  auto net = mc.net;
  net.l_max = l.split.l_max;
  irn::IrnModel model(net, l.corpus.catalog.num_items(), l.corpus.catalog.num_users(), model_seed,
                      emb ? &*emb : nullptr);
  auto train_cfg = mc.train;
  train_cfg.seed = model_seed;
  std::string log_csv = "epoch,train_loss,train_ppl,valid_loss,valid_ppl,lr\n";
  auto logs = irn::train(model, l.split, train_cfg, [&](const irn::EpochLog& e) {
    const auto opt = [](const std::optional<double>& v) { return v ? eval::format_number(*v) : std::string(); };
    log_csv += std::to_string(e.epoch) + ',' + eval::format_number(e.train_loss) + ',' + eval::format_number(e.train_ppl) +
               ',' + opt(e.valid_loss) + ',' + opt(e.valid_ppl) + ',' + eval::format_number(e.lr) + '\n';
    log_line(name + " epoch " + std::to_string(e.epoch) + " train_ppl " + eval::format_number(e.train_ppl));
  });
  const auto dir = root / name;
  auto ckpt = model.to_checkpoint();
  ckpt.meta["catalog_fingerprint"] = l.fingerprint;
  ckpt.meta["role"] = role == ModelRole::evaluator ? "evaluator" : "irn";
  save_checkpoint(dir / "model.ckpt", ckpt);
  write_file_atomic(dir / "train_log.csv", log_csv);
  json stats{{"epochs", logs.size()}, {"final_train_loss", logs.back().train_loss}};
  if (logs.back().valid_loss) stats["final_valid_loss"] = *logs.back().valid_loss;
  if (role == ModelRole::evaluator) {
    eval::IrnEvaluator ev(model);
    auto m = eval::next_item_metrics(ev, l.split.test, config.workers);
    stats["hr20"] = m.hr20;
    stats["mrr"] = m.mrr;
  }
  write_manifest(dir / "manifest.json", role == ModelRole::evaluator ? "train-evaluator" : "train-irn", config,
                 l.fingerprint, {dir / "model.ckpt", dir / "train_log.csv"}, start, {{"stats", stats}, {"name", name}});
  log_line("train " + name + ": " + stats.dump());
  return stats;
}

json stage_gen_paths(const ExperimentConfig& config, const fs::path& root, const std::string& method, fs::path file) {
  const auto start = Clock::now();
  auto l = load_split_checked(root);
  const auto& tests = l.split.test;
  const std::size_t n = l.corpus.catalog.num_items();
  const auto& pc = config.paths;
  if (file.empty()) file = root / "paths" / (method_stem(method) + ".jsonl");

  const auto seqs = histories(l.split);
  std::optional<irn::IrnModel> model;
  std::optional<baselines::ItemGraph> graph;
  std::unique_ptr<baselines::Backbone> backbone;
  std::optional<embed::ItemEmbeddings> emb;
  std::function<InfluencePath(const corpus::TestCase&)> generate;
  json inputs = json::object();

  auto make_backbone = [&](const std::string& name) -> std::unique_ptr<baselines::Backbone> {
    if (name == "pop") return std::make_unique<baselines::PopBackbone>(seqs, n);
    if (name == "markov") return std::make_unique<baselines::MarkovBackbone>(seqs, n);
    if (name == "irn0") {
      model = load_model(root, pc.backbone_model, l.fingerprint);
      if (model->config().w_t != 0.0) throw ConfigError("backbone model " + pc.backbone_model + " must have w_t = 0");
      inputs["model"] = file_hash(root / pc.backbone_model / "model.ckpt");
      return std::make_unique<baselines::IrnBackbone>(*model);
    }
    throw ConfigError("unknown backbone '" + name + "' (pop, markov, irn0)");
  };

  if (method == "irn") {
    model = load_model(root, pc.irn_model, l.fingerprint);
    inputs["model"] = file_hash(root / pc.irn_model / "model.ckpt");
    generate = [&](const corpus::TestCase& t) {
      irn::IrnScorer scorer(*model);
      return generate_path(scorer, t.history, t.objective, t.user, pc.M, pc.forbid_repeats, method);
    };
  } else if (method == "pf2inf-dijkstra" || method == "pf2inf-mst") {
    graph = baselines::ItemGraph::build(seqs, n);
    if (method == "pf2inf-mst") graph = baselines::spanning_forest(*graph);
    const bool mst = method == "pf2inf-mst";
    generate = [&, mst](const corpus::TestCase& t) {
      auto p = mst ? baselines::tree_path(*graph, t.history.back(), t.objective, pc.M)
                   : baselines::dijkstra_path(*graph, t.history.back(), t.objective, pc.M);
      p.user = t.user;
      return p;
    };
  } else if (method.rfind("vanilla:", 0) == 0) {
    backbone = make_backbone(method.substr(8));
    generate = [&](const corpus::TestCase& t) {
      return baselines::vanilla_path(*backbone, t.history, t.objective, t.user, pc.M, pc.forbid_repeats);
    };
  } else if (method.rfind("rec2inf:", 0) == 0) {
    backbone = make_backbone(method.substr(8));
    emb = embed::load_embeddings(require(root / "embed" / "item2vec.ckpt", "train-embed"));
    inputs["embeddings"] = file_hash(root / "embed" / "item2vec.ckpt");
    const auto distance = embed::parse_distance(pc.distance);
    generate = [&, distance](const corpus::TestCase& t) {
      return baselines::rec2inf_path(*backbone, *emb, t.history, t.objective, t.user, pc.M, pc.k, pc.forbid_repeats,
                                     distance);
    };
  } else {
    throw ConfigError("unknown method '" + method +
                      "' (irn, pf2inf-dijkstra, pf2inf-mst, vanilla:<backbone>, rec2inf:<backbone>)");
  }

  std::vector<InfluencePath> paths(tests.size());
  parallel_for(tests.size(), config.workers, [&](std::size_t i) { paths[i] = generate(tests[i]); });
  write_paths(file, paths);
  const double seconds = seconds_since(start);
  json stats{{"method", method},
             {"M", pc.M},
             {"k", pc.k},
             {"paths", paths.size()},
             {"success_rate", eval::success_rate(paths)},
             {"generation_seconds", seconds}};
  fs::path manifest = file;
  manifest += ".manifest.json";
  write_manifest(manifest, "gen-paths", config, l.fingerprint, {file}, start,
                 {{"stats", stats}, {"inputs", inputs}, {"method", method}, {"M", pc.M}});
  log_line("gen-paths " + method + ": " + stats.dump());
  return stats;
}

std::vector<eval::MetricReport> stage_evaluate(const ExperimentConfig& config, const fs::path& root,
                                               const std::vector<fs::path>& path_files, fs::path report_dir) {
  const auto start = Clock::now();
  if (path_files.empty()) throw ConfigError("evaluate needs at least one path file");
  auto l = load_split_checked(root);
  auto evaluator_model = load_model(root, "evaluator", l.fingerprint);
  eval::IrnEvaluator evaluator(evaluator_model);
  if (report_dir.empty()) report_dir = root / "report";

  std::unordered_map<UserId, std::vector<ItemId>> hist;
  for (const auto& t : l.split.test) hist[t.user] = t.history;

  std::vector<eval::MetricReport> reports;
  std::vector<fs::path> outputs;
  for (const auto& file : path_files) {
    fs::path manifest_file = file;
    manifest_file += ".manifest.json";
    require(file, "gen-paths");
    require(manifest_file, "gen-paths");
    const auto manifest = read_json(manifest_file);
    if (manifest.value("catalog_fingerprint", std::string()) != l.fingerprint) {
      throw ArtifactError(file.string() + " was generated under a different catalog");
    }
    if (manifest.at("outputs").value(file.filename().string(), std::string()) != file_hash(file)) {
      throw ArtifactError(file.string() + " does not match its manifest");
    }
    auto paths = read_paths(file);
    const std::string method = manifest.at("method");
    const std::size_t M = manifest.at("M");
    for (const auto& p : paths) {
      if (p.items.size() > M) throw ArtifactError(file.string() + ": path longer than M");
    }
    auto report = eval::evaluate_paths(evaluator, hist, paths, M, method, config.workers);
    const auto stem = method_stem(method);
    write_file_atomic(report_dir / ("stepwise_" + stem + ".csv"), eval::stepwise_csv(report.stepwise));
    write_file_atomic(report_dir / ("users_" + stem + ".jsonl"), eval::user_rows_jsonl(report));
    outputs.push_back(report_dir / ("stepwise_" + stem + ".csv"));
    outputs.push_back(report_dir / ("users_" + stem + ".jsonl"));
    reports.push_back(std::move(report));
  }
  write_file_atomic(report_dir / "report_table.csv", eval::report_table_csv(reports));
  write_file_atomic(report_dir / "report_long.csv", eval::report_long_csv(reports));
  outputs.push_back(report_dir / "report_table.csv");
  outputs.push_back(report_dir / "report_long.csv");

  std::string next = "model,HR@20,MRR,count\n";
  auto ev_metrics = eval::next_item_metrics(evaluator, l.split.test, config.workers);
  next += "evaluator," + eval::format_number(ev_metrics.hr20) + ',' + eval::format_number(ev_metrics.mrr) + ',' +
          std::to_string(ev_metrics.count) + '\n';
  if (fs::exists(root / config.paths.irn_model / "model.ckpt")) {
    auto model = load_model(root, config.paths.irn_model, l.fingerprint);
    irn::IrnScorer scorer(model);
    auto m = eval::next_item_metrics(
        [&](const corpus::TestCase& t) { return scorer.next_log_probs(t.history, t.objective, t.user); }, l.split.test,
        config.workers);
    next += config.paths.irn_model + ',' + eval::format_number(m.hr20) + ',' + eval::format_number(m.mrr) + ',' +
            std::to_string(m.count) + '\n';
  }
  write_file_atomic(report_dir / "next_item.csv", next);
  outputs.push_back(report_dir / "next_item.csv");
  write_manifest(report_dir / "manifest.json", "evaluate", config, l.fingerprint, outputs, start);
  log_line("evaluate:\n" + eval::report_table_csv(reports));
  return reports;
}

fs::path stage_sweep(const ExperimentConfig& config, const fs::path& root, const std::string& axis,
                     const std::vector<double>& levels) {
  const auto start = Clock::now();
  if (levels.empty()) throw ConfigError("sweep needs at least one level");
  const fs::path dir = root / "sweep";
  std::string csv = "level,method,metric,value\n";
  std::vector<fs::path> outputs;
  for (double level : levels) {
    ExperimentConfig c = config;
    std::vector<std::string> methods;
    const std::string tag = axis + "-" + level_name(level);
    if (axis == "M" || axis == "k") {
      if (level < 1 || level != static_cast<double>(static_cast<std::size_t>(level))) {
        throw ConfigError(axis + " levels must be positive integers");
      }
      if (axis == "M") {
        c.paths.M = static_cast<std::size_t>(level);
        methods = config.paths.methods;
      } else {
        c.paths.k = static_cast<std::size_t>(level);
        for (const auto& m : config.paths.methods)
          if (m.rfind("rec2inf:", 0) == 0) methods.push_back(m);
        if (methods.empty()) throw ConfigError("k sweep needs a rec2inf method in paths.methods");
      }
    } else if (axis == "w_t") {
      if (level < 0) throw ConfigError("w_t levels must be non-negative");
      c.irn.net.w_t = level;
      c.paths.irn_model = "irn-wt" + level_name(level);
      stage_train_model(c, root, ModelRole::irn, c.paths.irn_model);
      methods = {"irn"};
    } else {
      throw ConfigError("unknown sweep axis '" + axis + "' (M, k, w_t)");
    }
    std::vector<fs::path> files;
    for (const auto& m : methods) {
      files.push_back(dir / tag / "paths" / (method_stem(m) + ".jsonl"));
      stage_gen_paths(c, root, m, files.back());
    }
    auto reports = stage_evaluate(c, root, files, dir / tag / "report");
    for (const auto& r : reports) {
      const std::string prefix = level_name(level) + ',' + r.method + ',';
      for (auto [name, value] : {std::pair{"SR", r.sr}, {"IoI", r.ioi}, {"IoR", r.ior}, {"logPPL", r.log_ppl}}) {
        csv += prefix + name + ',' + eval::format_number(value) + '\n';
      }
    }
  }
  const fs::path out = dir / (axis + ".csv");
  write_file_atomic(out, csv);
  std::string fp = load_corpus_checked(root).catalog.fingerprint();
  write_manifest(dir / (axis + ".manifest.json"), "sweep", config, fp, {out}, start,
                 {{"axis", axis}, {"levels", levels}});
  return out;
}

std::vector<eval::MetricReport> run_pipeline(const ExperimentConfig& config, const fs::path& root) {
  stage_preprocess(config, root);
  stage_split(config, root);
  stage_train_embed(config, root);
  stage_train_model(config, root, ModelRole::evaluator, "evaluator");
  stage_train_model(config, root, ModelRole::irn, config.paths.irn_model);
  bool needs_backbone = false;
  for (const auto& m : config.paths.methods) needs_backbone |= m.size() > 5 && m.substr(m.size() - 5) == ":irn0";
  if (needs_backbone) {
    ExperimentConfig c = config;
    c.irn.net.w_t = 0.0;
    stage_train_model(c, root, ModelRole::irn, config.paths.backbone_model);
  }
  std::vector<fs::path> files;
  for (const auto& m : config.paths.methods) {
    stage_gen_paths(config, root, m);
    files.push_back(root / "paths" / (method_stem(m) + ".jsonl"));
  }
  return stage_evaluate(config, root, files);
}

}  // namespace irs::harness
