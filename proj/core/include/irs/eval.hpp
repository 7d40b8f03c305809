#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "irs/corpus.hpp"
#include "irs/irn.hpp"
#include "irs/path.hpp"

namespace irs::eval {

// Next-item probability model E(i, s). log_dist returns log-probabilities
// indexed by item id with entry 0 (the pad) at -inf; they sum to 1 over items.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual std::size_t num_items() const = 0;
  virtual std::vector<double> log_dist(const std::vector<ItemId>& sequence) const = 0;

  double log_prob(ItemId item, const std::vector<ItemId>& sequence) const;
  double prob(ItemId item, const std::vector<ItemId>& sequence) const;
};

// Causal self-attention recommender: an IRN trained with w_t = 0, queried on
// [pads, last l_max-1 items, pad] at slot l_max-2 with no user factor.
class IrnEvaluator : public Evaluator {
 public:
  explicit IrnEvaluator(const irn::IrnModel& model);
  std::size_t num_items() const override { return model_.num_items(); }
  std::vector<double> log_dist(const std::vector<ItemId>& sequence) const override;

 private:
  const irn::IrnModel& model_;
};

// 1-based position of `item` when items are sorted by descending score, ties by
// ascending id. Entry 0 is ignored.
std::size_t rank(const std::vector<double>& log_dist, ItemId item);
std::size_t rank(const Evaluator& evaluator, ItemId item, const std::vector<ItemId>& sequence);

struct UserMetrics {
  UserId user = 0;
  ItemId objective = kPad;
  std::size_t length = 0;
  bool reached = false;
  double log_prob_before = 0;  // log P(objective | history)
  double log_prob_after = 0;   // log P(objective | history + path)
  std::size_t rank_before = 0;
  std::size_t rank_after = 0;
  double ioi = 0;
  double ior = 0;
  std::optional<double> log_ppl;           // absent for empty paths
  std::vector<double> objective_probs;     // P(objective | history + path[<k]) for k = 1..length
  std::vector<double> item_probs;          // P(path[k-1] | history + path[<k])
};

struct StepwiseCurves {
  std::vector<double> objective_prob;
  std::vector<double> item_prob;
  std::size_t count = 0;  // paths of full length M that contributed
};

struct MetricReport {
  std::string method;
  std::size_t M = 0;
  std::size_t users = 0;
  double sr = 0;
  double ioi = 0;
  double ior = 0;
  double log_ppl = 0;
  std::size_t log_ppl_users = 0;  // paths with at least one item
  std::vector<UserMetrics> rows;
  StepwiseCurves stepwise;
};

// Per-user metrics for one path given the user's history.
UserMetrics score_path(const Evaluator& evaluator, const std::vector<ItemId>& history, const InfluencePath& path);

// Aggregates over users. `histories` maps every path's user to their history.
MetricReport evaluate_paths(const Evaluator& evaluator, const std::unordered_map<UserId, std::vector<ItemId>>& histories,
                            const std::vector<InfluencePath>& paths, std::size_t M, std::string method,
                            std::size_t workers = 1);

double success_rate(const std::vector<InfluencePath>& paths);

// Mean over full-length (size M) paths; early successes are excluded.
StepwiseCurves stepwise_curves(const std::vector<UserMetrics>& rows, std::size_t M);

struct NextItemMetrics {
  double hr20 = 0;
  double mrr = 0;
  std::size_t count = 0;
};

// `log_dist` gives the model's next-item log-probabilities for a test case.
NextItemMetrics next_item_metrics(const std::function<std::vector<double>(const corpus::TestCase&)>& log_dist,
                                  const std::vector<corpus::TestCase>& cases, std::size_t workers = 1);
NextItemMetrics next_item_metrics(const Evaluator& evaluator, const std::vector<corpus::TestCase>& cases,
                                  std::size_t workers = 1);

// P(i | s) = C(s + i) / C(s), counting contiguous occurrences in the corpus.
// The empty context occurs once per sequence boundary, len + 1 times per sequence.
class CountingEstimator {
 public:
  explicit CountingEstimator(std::vector<std::vector<ItemId>> sequences);

  struct Estimate {
    double prob = 0;
    std::uint64_t joint = 0;
    std::uint64_t context = 0;
    bool sparse = false;  // context never occurs; prob reported as 0
  };

  Estimate estimate(ItemId item, const std::vector<ItemId>& context) const;
  std::uint64_t occurrences(const std::vector<ItemId>& pattern) const;

 private:
  std::vector<std::vector<ItemId>> sequences_;
  std::unordered_map<ItemId, std::vector<std::pair<std::uint32_t, std::uint32_t>>> positions_;
  std::uint64_t total_ = 0;
};

// ---- output ------------------------------------------------------------------------

// Number formatting shared by all CSV writers: shortest round-trip decimal.
std::string format_number(double v);

// method,M,metric,value
std::string report_long_csv(const std::vector<MetricReport>& reports);
// method,M,users,SR,IoI,IoR,logPPL
std::string report_table_csv(const std::vector<MetricReport>& reports);
// step,objective_prob,item_prob,count
std::string stepwise_csv(const StepwiseCurves& curves);
// One JSON object per user.
std::string user_rows_jsonl(const MetricReport& report);

}  // namespace irs::eval
