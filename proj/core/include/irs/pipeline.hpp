#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irs/config.hpp"
#include "irs/eval.hpp"

namespace irs::harness {

// Artifact layout under the output root:
//   corpus/      catalog.json sequences.bin
//   split/       split.json train.bin validation.bin test.bin
//   embed/       item2vec.ckpt item2vec.txt
//   <model>/     model.ckpt train_log.csv          (irn, evaluator, irn-wt<level>, ...)
//   paths/       <method>.jsonl <method>.jsonl.manifest.json
//   report/      report_table.csv report_long.csv stepwise_<method>.csv users_<method>.jsonl next_item.csv
//   sweep/       <axis>.csv and per-level paths and reports
// Every stage directory also holds manifest.json.

std::string file_hash(const std::filesystem::path& file);

// Method tag -> file stem: ':' becomes '-'.
std::string method_stem(const std::string& method);

nlohmann::json stage_preprocess(const ExperimentConfig& config, const std::filesystem::path& root);
nlohmann::json stage_split(const ExperimentConfig& config, const std::filesystem::path& root);
nlohmann::json stage_train_embed(const ExperimentConfig& config, const std::filesystem::path& root);

enum class ModelRole { irn, evaluator };
nlohmann::json stage_train_model(const ExperimentConfig& config, const std::filesystem::path& root, ModelRole role,
                                 const std::string& name);

// Generates one path per test user into `file` (default paths/<stem>.jsonl).
nlohmann::json stage_gen_paths(const ExperimentConfig& config, const std::filesystem::path& root,
                               const std::string& method, std::filesystem::path file = {});

// Scores path files against the trained evaluator and writes report CSVs to `report_dir`.
std::vector<eval::MetricReport> stage_evaluate(const ExperimentConfig& config, const std::filesystem::path& root,
                                               const std::vector<std::filesystem::path>& path_files,
                                               std::filesystem::path report_dir = {});

// axis in {M, k, w_t}; writes sweep/<axis>.csv with rows level,method,metric,value.
std::filesystem::path stage_sweep(const ExperimentConfig& config, const std::filesystem::path& root,
                                  const std::string& axis, const std::vector<double>& levels);

// Runs preprocess through evaluate for config.paths.methods.
std::vector<eval::MetricReport> run_pipeline(const ExperimentConfig& config, const std::filesystem::path& root);

}  // namespace irs::harness
