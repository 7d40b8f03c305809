#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "irs/checkpoint.hpp"
#include "irs/corpus.hpp"
#include "irs/pipeline.hpp"
#include "irs/synthetic.hpp"

namespace fs = std::filesystem;
using namespace irs;
using namespace irs::harness;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitArtifact = 3;
constexpr int kExitNumeric = 4;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  int workers = -1;

  ExperimentConfig load() const {
    auto o = overrides;
    if (workers >= 0) o.push_back("workers=" + std::to_string(workers));
    return load_config(config, o);
  }

  fs::path root() const {
    if (!out.empty()) return out;
    if (const char* env = std::getenv("IRS_OUT"); env && *env) return env;
    return "irs-out";
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config,-c", c.config, "Experiment config (JSON)");
  cmd->add_option("--set,-s", c.overrides, "Override a config value, e.g. --set irn.w_t=0")->allow_extra_args(false);
  cmd->add_option("--out,-o", c.out, "Artifact root (default: $IRS_OUT or ./irs-out)");
  cmd->add_option("--workers", c.workers, "Worker threads for per-user stages (0 = all cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Influential recommender toolkit: data preparation, IRN training, influence paths and evaluation"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("make-synthetic", "Write a planted-chain world and a desk-scale config for it");
  add_common(synth, common);

  auto* pre = app.add_subcommand("preprocess", "Ingest raw events, filter and index them");
  add_common(pre, common);
  auto* spl = app.add_subcommand("split", "Slice training windows and build test cases with objectives");
  add_common(spl, common);
  auto* emb = app.add_subcommand("train-embed", "Train item2vec embeddings");
  add_common(emb, common);
  auto* tev = app.add_subcommand("train-evaluator", "Train the independent next-item evaluator (w_t = 0)");
  add_common(tev, common);
  auto* tirn = app.add_subcommand("train-irn", "Train an IRN model");
  add_common(tirn, common);
  std::string model_name = "irn";
  tirn->add_option("--name", model_name, "Model directory under the artifact root");

  auto* gen = app.add_subcommand("gen-paths", "Generate one influence path per test user");
  add_common(gen, common);
  std::string method;
  std::string path_file;
  int M = -1, k = -1;
  gen->add_option("--method,-m", method, "irn | pf2inf-dijkstra | pf2inf-mst | vanilla:<backbone> | rec2inf:<backbone>")
      ->required();
  gen->add_option("--M", M, "Maximum path length");
  gen->add_option("--k", k, "Rec2Inf candidate count");
  gen->add_option("--file", path_file, "Output JSON-lines file");

  auto* ev = app.add_subcommand("evaluate", "Score path files and write report CSVs");
  add_common(ev, common);
  std::vector<std::string> path_files;
  std::string report_dir;
  ev->add_option("--paths,-p", path_files, "Path files (default: paths/<method>.jsonl for paths.methods)");
  ev->add_option("--report", report_dir, "Report directory (default: <root>/report)");

  auto* sweep = app.add_subcommand("sweep", "Regenerate and evaluate paths over levels of M, k or w_t");
  add_common(sweep, common);
  std::string axis;
  std::vector<double> levels;
  sweep->add_option("--axis", axis, "M | k | w_t")->required()->check(CLI::IsMember({"M", "k", "w_t"}));
  sweep->add_option("--levels", levels, "Levels to visit")->required();

  auto* run = app.add_subcommand("run", "Full pipeline: preprocess through evaluate");
  add_common(run, common);

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path root = common.root();
    if (synth->parsed()) {
      // Scale first so that explicit overrides land on top of the scaled settings.
      auto config = load_config(common.config);
      scale_for_synthetic(config);
      config.data.path = fs::absolute(root / "world" / "events.csv").string();
      config.data.format = "generic-csv";
      config.data.planted = fs::absolute(root / "world" / "planted.json").string();
      auto j = to_json(config);
      for (const auto& o : common.overrides) apply_override(j, o);
      if (common.workers >= 0) j["workers"] = common.workers;
      config = from_json(j);
      auto world = make_synthetic(config.synthetic, config.seed);
      write_synthetic(root / "world", world);
      save_config(root / "config.json", config);
      std::cout << "wrote " << world.events.size() << " events for " << config.synthetic.users << " users to "
                << (root / "world").string() << "\nconfig: " << (root / "config.json").string() << "\n";
      return 0;
    }
    auto config = common.load();
    if (pre->parsed()) {
      std::cout << stage_preprocess(config, root).dump() << "\n";
    } else if (spl->parsed()) {
      std::cout << stage_split(config, root).dump() << "\n";
    } else if (emb->parsed()) {
      std::cout << stage_train_embed(config, root).dump() << "\n";
    } else if (tev->parsed()) {
      std::cout << stage_train_model(config, root, ModelRole::evaluator, "evaluator").dump() << "\n";
    } else if (tirn->parsed()) {
      std::cout << stage_train_model(config, root, ModelRole::irn, model_name).dump() << "\n";
    } else if (gen->parsed()) {
      if (M == 0 || k == 0) throw ConfigError("--M and --k must be positive");
      if (M > 0) config.paths.M = static_cast<std::size_t>(M);
      if (k > 0) config.paths.k = static_cast<std::size_t>(k);
      std::cout << stage_gen_paths(config, root, method, path_file).dump() << "\n";
    } else if (ev->parsed()) {
      std::vector<fs::path> files(path_files.begin(), path_files.end());
      if (files.empty()) {
        for (const auto& m : config.paths.methods) files.push_back(root / "paths" / (method_stem(m) + ".jsonl"));
      }
      auto reports = stage_evaluate(config, root, files, report_dir);
      std::cout << eval::report_table_csv(reports);
    } else if (sweep->parsed()) {
      std::cout << "wrote " << stage_sweep(config, root, axis, levels).string() << "\n";
    } else if (run->parsed()) {
      std::cout << eval::report_table_csv(run_pipeline(config, root));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArtifactError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const FormatError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const corpus::IngestError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const nn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
