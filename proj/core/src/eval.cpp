#include "irs/eval.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "irs/parallel.hpp"

namespace irs::eval {

double Evaluator::log_prob(ItemId item, const std::vector<ItemId>& sequence) const {
  if (item <= 0 || static_cast<std::size_t>(item) > num_items()) {
    throw std::out_of_range("item " + std::to_string(item) + " is not in the catalog");
  }
  return log_dist(sequence)[static_cast<std::size_t>(item)];
}

double Evaluator::prob(ItemId item, const std::vector<ItemId>& sequence) const {
  return std::exp(log_prob(item, sequence));
}

IrnEvaluator::IrnEvaluator(const irn::IrnModel& model) : model_(model) {
  if (model.config().w_t != 0.0) throw std::invalid_argument("the evaluator must be trained with w_t = 0");
}

std::vector<double> IrnEvaluator::log_dist(const std::vector<ItemId>& sequence) const {
  const std::size_t m = model_.config().l_max;
  return irn::item_log_softmax(model_.slot_logits(irn::layout_window(sequence, kPad, m), 0, m - 2));
}

std::size_t rank(const std::vector<double>& log_dist, ItemId item) {
  if (item <= 0 || static_cast<std::size_t>(item) >= log_dist.size()) {
    throw std::out_of_range("cannot rank item " + std::to_string(item));
  }
  const double s = log_dist[static_cast<std::size_t>(item)];
  std::size_t above = 0;
  for (std::size_t j = 1; j < log_dist.size(); ++j) {
    const auto id = static_cast<ItemId>(j);
    if (log_dist[j] > s || (log_dist[j] == s && id < item)) ++above;
  }
  return above + 1;
}

std::size_t rank(const Evaluator& evaluator, ItemId item, const std::vector<ItemId>& sequence) {
  return rank(evaluator.log_dist(sequence), item);
}

UserMetrics score_path(const Evaluator& evaluator, const std::vector<ItemId>& history, const InfluencePath& path) {
  UserMetrics row;
  row.user = path.user;
  row.objective = path.objective;
  row.length = path.items.size();
  row.reached = path.reached();
  std::vector<ItemId> context = history;
  double nll = 0;
  for (std::size_t k = 0; k <= path.items.size(); ++k) {
    const auto lp = evaluator.log_dist(context);
    const double obj = lp.at(static_cast<std::size_t>(path.objective));
    if (k == 0) {
      row.log_prob_before = obj;
      row.rank_before = rank(lp, path.objective);
    }
    if (k == path.items.size()) {
      row.log_prob_after = obj;
      row.rank_after = rank(lp, path.objective);
      break;
    }
    const ItemId item = path.items[k];
    const double step = lp.at(static_cast<std::size_t>(item));
    row.objective_probs.push_back(std::exp(obj));
    row.item_probs.push_back(std::exp(step));
    nll -= step;
    context.push_back(item);
  }
  row.ioi = row.log_prob_after - row.log_prob_before;
  row.ior = static_cast<double>(row.rank_before) - static_cast<double>(row.rank_after);
  if (!path.items.empty()) row.log_ppl = nll / static_cast<double>(path.items.size());
  return row;
}

double success_rate(const std::vector<InfluencePath>& paths) {
  if (paths.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& p : paths) hits += p.reached();
  return static_cast<double>(hits) / static_cast<double>(paths.size());
}

StepwiseCurves stepwise_curves(const std::vector<UserMetrics>& rows, std::size_t M) {
  StepwiseCurves c;
  std::vector<double> obj(M, 0.0), item(M, 0.0);
  for (const auto& r : rows) {
    if (r.length != M || r.objective_probs.size() != M) continue;
    for (std::size_t k = 0; k < M; ++k) {
      obj[k] += r.objective_probs[k];
      item[k] += r.item_probs[k];
    }
    ++c.count;
  }
  if (c.count == 0) return c;
  for (std::size_t k = 0; k < M; ++k) {
    c.objective_prob.push_back(obj[k] / static_cast<double>(c.count));
    c.item_prob.push_back(item[k] / static_cast<double>(c.count));
  }
  return c;
}

MetricReport evaluate_paths(const Evaluator& evaluator, const std::unordered_map<UserId, std::vector<ItemId>>& histories,
                            const std::vector<InfluencePath>& paths, std::size_t M, std::string method,
                            std::size_t workers) {
  MetricReport report;
  report.method = std::move(method);
  report.M = M;
  report.users = paths.size();
  report.rows.resize(paths.size());
  parallel_for(paths.size(), workers, [&](std::size_t i) {
    auto it = histories.find(paths[i].user);
    if (it == histories.end()) throw std::out_of_range("no history for user " + std::to_string(paths[i].user));
    report.rows[i] = score_path(evaluator, it->second, paths[i]);
  });
  report.sr = success_rate(paths);
  if (!paths.empty()) {
    double ioi = 0, ior = 0;
    for (const auto& r : report.rows) {
      ioi += r.ioi;
      ior += r.ior;
    }
    report.ioi = ioi / static_cast<double>(paths.size());
    report.ior = ior / static_cast<double>(paths.size());
  }
  double ppl = 0;
  for (const auto& r : report.rows) {
    if (!r.log_ppl) continue;
    ppl += *r.log_ppl;
    ++report.log_ppl_users;
  }
  report.log_ppl = report.log_ppl_users ? ppl / static_cast<double>(report.log_ppl_users)
                                        : std::numeric_limits<double>::quiet_NaN();
  report.stepwise = stepwise_curves(report.rows, M);
  return report;
}

NextItemMetrics next_item_metrics(const std::function<std::vector<double>(const corpus::TestCase&)>& log_dist,
                                  const std::vector<corpus::TestCase>& cases, std::size_t workers) {
  std::vector<std::size_t> ranks(cases.size());
  parallel_for(cases.size(), workers, [&](std::size_t i) { ranks[i] = rank(log_dist(cases[i]), cases[i].held_out); });
  NextItemMetrics m;
  m.count = cases.size();
  if (cases.empty()) return m;
  double hits = 0, rr = 0;
  for (auto r : ranks) {
    hits += r <= 20;
    rr += 1.0 / static_cast<double>(r);
  }
  m.hr20 = hits / static_cast<double>(cases.size());
  m.mrr = rr / static_cast<double>(cases.size());
  return m;
}

NextItemMetrics next_item_metrics(const Evaluator& evaluator, const std::vector<corpus::TestCase>& cases,
                                  std::size_t workers) {
  return next_item_metrics([&](const corpus::TestCase& c) { return evaluator.log_dist(c.history); }, cases, workers);
}

// ---- counting estimator ----------------------------------------------------------------

CountingEstimator::CountingEstimator(std::vector<std::vector<ItemId>> sequences) : sequences_(std::move(sequences)) {
  for (std::uint32_t s = 0; s < sequences_.size(); ++s) {
    for (std::uint32_t p = 0; p < sequences_[s].size(); ++p) positions_[sequences_[s][p]].emplace_back(s, p);
    total_ += sequences_[s].size() + 1;
  }
}

std::uint64_t CountingEstimator::occurrences(const std::vector<ItemId>& pattern) const {
  if (pattern.empty()) return total_;
  auto it = positions_.find(pattern.front());
  if (it == positions_.end()) return 0;
  std::uint64_t count = 0;
  for (auto [s, p] : it->second) {
    const auto& seq = sequences_[s];
    if (p + pattern.size() > seq.size()) continue;
    if (std::equal(pattern.begin() + 1, pattern.end(), seq.begin() + p + 1)) ++count;
  }
  return count;
}

CountingEstimator::Estimate CountingEstimator::estimate(ItemId item, const std::vector<ItemId>& context) const {
  Estimate e;
  e.context = occurrences(context);
  if (e.context == 0) {
    e.sparse = true;
    return e;
  }
  auto joint = context;
  joint.push_back(item);
  e.joint = occurrences(joint);
  e.prob = static_cast<double>(e.joint) / static_cast<double>(e.context);
  return e;
}

// ---- output ------------------------------------------------------------------------

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string report_long_csv(const std::vector<MetricReport>& reports) {
  std::string out = "method,M,metric,value\n";
  for (const auto& r : reports) {
    const std::string prefix = r.method + ',' + std::to_string(r.M) + ',';
    for (auto [name, value] : {std::pair{"SR", r.sr}, {"IoI", r.ioi}, {"IoR", r.ior}, {"logPPL", r.log_ppl}}) {
      out += prefix + name + ',' + format_number(value) + '\n';
    }
  }
  return out;
}

std::string report_table_csv(const std::vector<MetricReport>& reports) {
  std::string out = "method,M,users,SR,IoI,IoR,logPPL\n";
  for (const auto& r : reports) {
    out += r.method + ',' + std::to_string(r.M) + ',' + std::to_string(r.users) + ',' + format_number(r.sr) + ',' +
           format_number(r.ioi) + ',' + format_number(r.ior) + ',' + format_number(r.log_ppl) + '\n';
  }
  return out;
}

std::string stepwise_csv(const StepwiseCurves& c) {
  std::string out = "step,objective_prob,item_prob,count\n";
  for (std::size_t k = 0; k < c.objective_prob.size(); ++k) {
    out += std::to_string(k + 1) + ',' + format_number(c.objective_prob[k]) + ',' + format_number(c.item_prob[k]) +
           ',' + std::to_string(c.count) + '\n';
  }
  return out;
}

std::string user_rows_jsonl(const MetricReport& report) {
  std::string out;
  for (const auto& r : report.rows) {
    nlohmann::json j{{"method", report.method},
                     {"user", r.user},
                     {"objective", r.objective},
                     {"length", r.length},
                     {"reached", r.reached},
                     {"log_prob_before", r.log_prob_before},
                     {"log_prob_after", r.log_prob_after},
                     {"rank_before", r.rank_before},
                     {"rank_after", r.rank_after},
                     {"ioi", r.ioi},
                     {"ior", r.ior},
                     {"log_ppl", r.log_ppl ? nlohmann::json(*r.log_ppl) : nlohmann::json(nullptr)}};
    out += j.dump() + '\n';
  }
  return out;
}

}  // namespace irs::eval
