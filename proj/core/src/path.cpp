#include "irs/path.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "irs/checkpoint.hpp"

namespace irs {

std::string_view stop_reason_name(StopReason r) {
  return r == StopReason::reached_objective ? "reached_objective" : "max_length";
}

StopReason parse_stop_reason(std::string_view name) {
  if (name == "reached_objective") return StopReason::reached_objective;
  if (name == "max_length") return StopReason::max_length;
  throw std::invalid_argument("unknown stop reason '" + std::string(name) + "'");
}

InfluencePath generate_path(const NextItemScorer& scorer, const std::vector<ItemId>& history, ItemId objective,
                            UserId user, std::size_t M, bool forbid_repeats, std::string method) {
  const std::size_t n = scorer.num_items();
  if (objective <= 0 || static_cast<std::size_t>(objective) > n) {
    throw std::out_of_range("objective " + std::to_string(objective) + " is not in the catalog");
  }
  if (M == 0) throw std::invalid_argument("path length M must be >= 1");
  InfluencePath path;
  path.user = user;
  path.objective = objective;
  path.method = std::move(method);
  std::unordered_set<ItemId> used(history.begin(), history.end());
  std::vector<ItemId> context = history;
  while (path.items.size() < M) {
    const auto logp = scorer.next_log_probs(context, objective, user);
    ItemId best = kPad;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i <= n; ++i) {
      const auto item = static_cast<ItemId>(i);
      if (forbid_repeats && item != objective && used.count(item)) continue;
      if (best == kPad || logp[i] > best_score) {
        best = item;
        best_score = logp[i];
      }
    }
    if (best == kPad) {
      throw GenerationStalled("no admissible item left for user " + std::to_string(user) + " after " +
                              std::to_string(path.items.size()) + " steps");
    }
    path.items.push_back(best);
    path.step_probs.push_back(std::exp(best_score));
    context.push_back(best);
    used.insert(best);
    if (best == objective) {
      path.stop_reason = StopReason::reached_objective;
      return path;
    }
  }
  path.stop_reason = StopReason::max_length;
  return path;
}

nlohmann::json path_to_json(const InfluencePath& p) {
  return {{"user", p.user},
          {"objective", p.objective},
          {"items", p.items},
          {"step_probs", p.step_probs},
          {"stop_reason", stop_reason_name(p.stop_reason)},
          {"method", p.method}};
}

InfluencePath path_from_json(const nlohmann::json& j) {
  InfluencePath p;
  p.user = j.at("user").get<UserId>();
  p.objective = j.at("objective").get<ItemId>();
  p.items = j.at("items").get<std::vector<ItemId>>();
  p.step_probs = j.at("step_probs").get<std::vector<double>>();
  p.stop_reason = parse_stop_reason(j.at("stop_reason").get<std::string>());
  p.method = j.at("method").get<std::string>();
  if (p.reached() && (p.items.empty() || p.items.back() != p.objective)) {
    throw FormatError("path for user " + std::to_string(p.user) + " claims success but does not end at the objective");
  }
  return p;
}

void write_paths(const std::filesystem::path& file, const std::vector<InfluencePath>& paths) {
  std::string out;
  for (const auto& p : paths) out += path_to_json(p).dump() + "\n";
  write_file_atomic(file, out);
}

std::vector<InfluencePath> read_paths(const std::filesystem::path& file) {
  std::istringstream in(read_file(file));
  std::vector<InfluencePath> paths;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      paths.push_back(path_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return paths;
}

}  // namespace irs
