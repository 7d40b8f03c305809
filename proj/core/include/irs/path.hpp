#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irs/corpus.hpp"

namespace irs {

enum class StopReason { reached_objective, max_length };

std::string_view stop_reason_name(StopReason r);
StopReason parse_stop_reason(std::string_view name);

struct InfluencePath {
  UserId user = 0;
  ItemId objective = kPad;
  std::vector<ItemId> items;
  std::vector<double> step_probs;  // empty for methods without a next-item model
  StopReason stop_reason = StopReason::max_length;
  std::string method;

  bool reached() const noexcept { return stop_reason == StopReason::reached_objective; }
};

class GenerationStalled : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Next-item model used by greedy decoding. Returns log-probabilities indexed by
// item id (entry 0 unused) for the item that follows `context`.
class NextItemScorer {
 public:
  virtual ~NextItemScorer() = default;
  virtual std::size_t num_items() const = 0;
  virtual std::vector<double> next_log_probs(const std::vector<ItemId>& context, ItemId objective,
                                             UserId user) const = 0;
};

// Greedy decoding: repeatedly append the argmax item (lowest id on ties),
// skipping the pad and, with forbid_repeats, anything already in history or
// path except the objective. Stops on the objective or after M items.
InfluencePath generate_path(const NextItemScorer& scorer, const std::vector<ItemId>& history, ItemId objective,
                            UserId user, std::size_t M, bool forbid_repeats, std::string method);

nlohmann::json path_to_json(const InfluencePath& p);
InfluencePath path_from_json(const nlohmann::json& j);

void write_paths(const std::filesystem::path& file, const std::vector<InfluencePath>& paths);
std::vector<InfluencePath> read_paths(const std::filesystem::path& file);

}  // namespace irs
