#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irs/embed.hpp"
#include "irs/irn.hpp"

namespace irs::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kConfigVersion = 1;

struct DataConfig {
  std::string path;
  std::string format = "generic-csv";
  bool dedup_consecutive = true;
  std::size_t min_interactions = 5;
  std::string planted;  // optional JSON map user name -> objective item name
};

struct ModelConfig {
  irn::IrnConfig net;
  irn::TrainConfig train;
  bool init_from_item2vec = true;
};

struct PathConfig {
  std::size_t M = 20;
  std::vector<std::string> methods{"irn", "pf2inf-dijkstra", "pf2inf-mst", "vanilla:pop", "vanilla:markov",
                                   "rec2inf:pop", "rec2inf:markov"};
  std::size_t k = 20;
  bool forbid_repeats = true;
  std::string distance = "cosine";
  std::string irn_model = "irn";
  std::string backbone_model = "irn-wt0";  // model directory behind the irn0 backbone
};

struct SyntheticConfig {
  std::size_t chains = 10;
  std::size_t chain_length = 30;
  std::size_t users = 500;
  double noise = 0.1;
  std::size_t min_segment = 10;
  std::size_t max_segment = 16;
  std::size_t min_hops = 12;
  std::size_t max_hops = 15;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 42;
  std::size_t workers = 1;
  DataConfig data;
  corpus::SplitConfig split;
  embed::Item2VecConfig embed;
  ModelConfig irn;
  ModelConfig evaluator;
  PathConfig paths;
  SyntheticConfig synthetic;

  // Checks cross-field constraints; throws ConfigError.
  void validate() const;
};

// Defaults are the Lastfm-scale settings: l_max 50, lr 8e-3, d 40, d' 10,
// L 5, h 4, w_t 1, batch 128.
ExperimentConfig default_config();

// Desk-scale settings for planted-chain worlds: d 16, d' 4, L 2, h 2,
// l_min 2, l_max 5, lr 0.03, batch 64, 30 epochs, M 10, min_interactions 2;
// item2vec dimension follows d.
void scale_for_synthetic(ExperimentConfig& config);

nlohmann::json to_json(const ExperimentConfig& config);
// Strict: unknown keys, wrong types or a version mismatch raise ConfigError.
ExperimentConfig from_json(const nlohmann::json& j);

// Applies `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});
void save_config(const std::filesystem::path& file, const ExperimentConfig& config);

// 16 hex digits over the canonical JSON form.
std::string config_hash(const ExperimentConfig& config);

}  // namespace irs::harness
