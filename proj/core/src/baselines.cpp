#include "irs/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "irs/checkpoint.hpp"

namespace irs::baselines {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_item(const ItemGraph& g, ItemId item, const char* what) {
  if (item <= 0 || static_cast<std::size_t>(item) > g.num_items()) {
    throw std::out_of_range(std::string(what) + " item " + std::to_string(item) + " is not in the graph");
  }
}

struct DisjointSets {
  explicit DisjointSets(std::size_t n) : parent(n), rank(n, 0) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank[a] < rank[b]) std::swap(a, b);
    parent[b] = a;
    if (rank[a] == rank[b]) ++rank[a];
    return true;
  }
  std::vector<std::size_t> parent;
  std::vector<unsigned> rank;
};

std::vector<double> log_normalize(const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin() + 1, weights.end(), 0.0);
  std::vector<double> out(weights.size(), kNegInf);
  for (std::size_t i = 1; i < weights.size(); ++i) {
    out[i] = total > 0 && weights[i] > 0 ? std::log(weights[i] / total) : kNegInf;
  }
  if (total <= 0) {
    for (std::size_t i = 1; i < weights.size(); ++i) out[i] = -std::log(static_cast<double>(weights.size() - 1));
  }
  return out;
}

std::vector<ItemId> real_items(const std::vector<ItemId>& seq) {
  std::vector<ItemId> out;
  for (auto i : seq)
    if (i != kPad) out.push_back(i);
  return out;
}

}  // namespace

// ---- graph -----------------------------------------------------------------------

ItemGraph ItemGraph::build(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items) {
  ItemGraph g(num_items);
  for (const auto& raw : sequences) {
    auto seq = real_items(raw);
    for (std::size_t j = 1; j < seq.size(); ++j) g.add_edge(seq[j - 1], seq[j]);
  }
  return g;
}

bool ItemGraph::add_edge(ItemId a, ItemId b) {
  check_item(*this, a, "edge");
  check_item(*this, b, "edge");
  if (a == b) return false;
  auto& na = adjacency_[static_cast<std::size_t>(a)];
  auto pos = std::lower_bound(na.begin(), na.end(), b);
  if (pos != na.end() && *pos == b) return false;
  na.insert(pos, b);
  auto& nb = adjacency_[static_cast<std::size_t>(b)];
  nb.insert(std::lower_bound(nb.begin(), nb.end(), a), a);
  ++edges_;
  return true;
}

bool ItemGraph::has_edge(ItemId a, ItemId b) const {
  if (a <= 0 || b <= 0 || static_cast<std::size_t>(std::max(a, b)) > num_items()) return false;
  const auto& na = adjacency_[static_cast<std::size_t>(a)];
  return std::binary_search(na.begin(), na.end(), b);
}

std::vector<std::pair<ItemId, ItemId>> ItemGraph::edges() const {
  std::vector<std::pair<ItemId, ItemId>> out;
  out.reserve(edges_);
  for (std::size_t a = 1; a < adjacency_.size(); ++a) {
    for (auto b : adjacency_[a])
      if (b > static_cast<ItemId>(a)) out.emplace_back(static_cast<ItemId>(a), b);
  }
  return out;
}

std::size_t ItemGraph::num_components() const {
  DisjointSets sets(adjacency_.size());
  std::size_t components = num_items();
  for (auto [a, b] : edges())
    if (sets.unite(static_cast<std::size_t>(a), static_cast<std::size_t>(b))) --components;
  return components;
}

void ItemGraph::write_edge_list(const std::filesystem::path& file) const {
  std::string out;
  for (auto [a, b] : edges()) out += std::to_string(a) + ' ' + std::to_string(b) + '\n';
  write_file_atomic(file, out);
}

// ---- path finding ----------------------------------------------------------------

InfluencePath dijkstra_path(const ItemGraph& graph, ItemId source, ItemId target, std::size_t M,
                            std::string method) {
  check_item(graph, source, "source");
  check_item(graph, target, "target");
  if (source == target) throw std::invalid_argument("source and target coincide");
  if (M == 0) throw std::invalid_argument("path length M must be >= 1");
  InfluencePath path;
  path.objective = target;
  path.method = std::move(method);

  // Unit weights: hop distances to the target by breadth-first search, then a
  // greedy walk from the source through the smallest neighbor one hop closer.
  constexpr std::size_t kUnseen = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> dist(graph.num_items() + 1, kUnseen);
  std::deque<ItemId> queue{target};
  dist[static_cast<std::size_t>(target)] = 0;
  while (!queue.empty() && dist[static_cast<std::size_t>(source)] == kUnseen) {
    const ItemId u = queue.front();
    queue.pop_front();
    for (auto v : graph.neighbors(u)) {
      if (dist[static_cast<std::size_t>(v)] != kUnseen) continue;
      dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
      queue.push_back(v);
    }
  }
  if (dist[static_cast<std::size_t>(source)] == kUnseen) return path;

  ItemId at = source;
  while (at != target && path.items.size() < M) {
    const std::size_t want = dist[static_cast<std::size_t>(at)] - 1;
    for (auto v : graph.neighbors(at)) {
      if (dist[static_cast<std::size_t>(v)] == want) {
        at = v;
        break;
      }
    }
    path.items.push_back(at);
  }
  if (at == target) path.stop_reason = StopReason::reached_objective;
  return path;
}

ItemGraph spanning_forest(const ItemGraph& graph) {
  ItemGraph forest(graph.num_items());
  DisjointSets sets(graph.num_items() + 1);
  for (auto [a, b] : graph.edges()) {
    if (sets.unite(static_cast<std::size_t>(a), static_cast<std::size_t>(b))) forest.add_edge(a, b);
  }
  return forest;
}

InfluencePath tree_path(const ItemGraph& forest, ItemId source, ItemId target, std::size_t M) {
  return dijkstra_path(forest, source, target, M, "pf2inf-mst");
}

InfluencePath mst_path(const ItemGraph& graph, ItemId source, ItemId target, std::size_t M) {
  return tree_path(spanning_forest(graph), source, target, M);
}

// ---- backbones -------------------------------------------------------------------

std::vector<std::pair<ItemId, double>> Backbone::top_k(const std::vector<ItemId>& history, std::size_t k,
                                                       const std::unordered_set<ItemId>& exclude) const {
  const auto scores = log_probs(history);
  std::vector<std::pair<ItemId, double>> all;
  all.reserve(scores.size());
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto item = static_cast<ItemId>(i);
    if (!exclude.count(item)) all.emplace_back(item, scores[i]);
  }
  auto better = [](const auto& a, const auto& b) { return a.second > b.second || (a.second == b.second && a.first < b.first); };
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
  all.resize(k);
  return all;
}

PopBackbone::PopBackbone(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items) {
  std::vector<double> counts(num_items + 1, 0.0);
  for (const auto& seq : sequences)
    for (auto i : seq)
      if (i != kPad) counts.at(static_cast<std::size_t>(i)) += 1.0;
  log_probs_ = log_normalize(counts);
}

MarkovBackbone::MarkovBackbone(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items)
    : pop_(sequences, num_items), transitions_(num_items + 1), out_counts_(num_items + 1, 0) {
  for (const auto& raw : sequences) {
    auto seq = real_items(raw);
    for (std::size_t j = 1; j < seq.size(); ++j) {
      auto& row = transitions_.at(static_cast<std::size_t>(seq[j - 1]));
      auto pos = std::lower_bound(row.begin(), row.end(), seq[j],
                                  [](const auto& entry, ItemId id) { return entry.first < id; });
      if (pos != row.end() && pos->first == seq[j]) {
        ++pos->second;
      } else {
        row.insert(pos, {seq[j], 1});
      }
      ++out_counts_[static_cast<std::size_t>(seq[j - 1])];
    }
  }
}

double MarkovBackbone::transition_prob(ItemId from, ItemId to) const {
  const auto& row = transitions_.at(static_cast<std::size_t>(from));
  auto pos = std::lower_bound(row.begin(), row.end(), to, [](const auto& entry, ItemId id) { return entry.first < id; });
  const double c = pos != row.end() && pos->first == to ? static_cast<double>(pos->second) : 0.0;
  return (c + 1.0) / (static_cast<double>(out_counts_[static_cast<std::size_t>(from)]) + static_cast<double>(num_items()));
}

std::vector<double> MarkovBackbone::log_probs(const std::vector<ItemId>& history) const {
  if (history.empty()) return pop_.log_probs(history);
  const ItemId last = history.back();
  if (last <= 0 || static_cast<std::size_t>(last) > num_items()) {
    throw std::out_of_range("history item " + std::to_string(last) + " is not in the catalog");
  }
  const double denom = static_cast<double>(out_counts_[static_cast<std::size_t>(last)] + num_items());
  std::vector<double> out(num_items() + 1, std::log(1.0 / denom));
  out[0] = kNegInf;
  for (auto [item, c] : transitions_[static_cast<std::size_t>(last)]) {
    out[static_cast<std::size_t>(item)] = std::log((static_cast<double>(c) + 1.0) / denom);
  }
  return out;
}

std::vector<double> IrnBackbone::log_probs(const std::vector<ItemId>& history) const {
  return irn::IrnScorer(model_).next_log_probs(history, kPad, 0);
}

// ---- generators ------------------------------------------------------------------

Rec2InfChoice rec2inf_step(const Backbone& backbone, const embed::ItemEmbeddings& emb,
                           const std::vector<ItemId>& context, ItemId objective, std::size_t k,
                           const std::unordered_set<ItemId>& exclude, embed::Distance distance) {
  if (k == 0) throw std::invalid_argument("rec2inf needs k >= 1");
  auto candidates = backbone.top_k(context, k, exclude);
  if (candidates.empty()) throw GenerationStalled("rec2inf found no admissible candidate");
  Rec2InfChoice best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (auto [item, score] : candidates) {
    if (item == objective) return {item, score};
    const double d = embed::distance(item, objective, emb, distance);
    // Candidates arrive by descending score then ascending id, so strict
    // improvement keeps the required tie order.
    if (best.item == kPad || d < best_dist) {
      best = {item, score};
      best_dist = d;
    }
  }
  return best;
}

namespace {

template <class Step>
InfluencePath greedy(const std::vector<ItemId>& history, ItemId objective, UserId user, std::size_t M,
                     std::size_t num_items, bool forbid_repeats, std::string method, Step step) {
  if (objective <= 0 || static_cast<std::size_t>(objective) > num_items) {
    throw std::out_of_range("objective " + std::to_string(objective) + " is not in the catalog");
  }
  if (M == 0) throw std::invalid_argument("path length M must be >= 1");
  InfluencePath path;
  path.user = user;
  path.objective = objective;
  path.method = std::move(method);
  std::unordered_set<ItemId> exclude;
  if (forbid_repeats) {
    exclude.insert(history.begin(), history.end());
    exclude.erase(objective);
  }
  std::vector<ItemId> context = history;
  while (path.items.size() < M) {
    const Rec2InfChoice choice = step(context, exclude);
    path.items.push_back(choice.item);
    path.step_probs.push_back(std::exp(choice.log_prob));
    context.push_back(choice.item);
    if (choice.item == objective) {
      path.stop_reason = StopReason::reached_objective;
      return path;
    }
    if (forbid_repeats) exclude.insert(choice.item);
  }
  return path;
}

}  // namespace

InfluencePath vanilla_path(const Backbone& backbone, const std::vector<ItemId>& history, ItemId objective,
                           UserId user, std::size_t M, bool forbid_repeats) {
  BackboneScorer scorer(backbone);
  return generate_path(scorer, history, objective, user, M, forbid_repeats, "vanilla:" + backbone.name());
}

InfluencePath rec2inf_path(const Backbone& backbone, const embed::ItemEmbeddings& emb,
                           const std::vector<ItemId>& history, ItemId objective, UserId user, std::size_t M,
                           std::size_t k, bool forbid_repeats, embed::Distance distance) {
  return greedy(history, objective, user, M, backbone.num_items(), forbid_repeats, "rec2inf:" + backbone.name(),
                [&](const std::vector<ItemId>& context, const std::unordered_set<ItemId>& exclude) {
                  return rec2inf_step(backbone, emb, context, objective, k, exclude, distance);
                });
}

}  // namespace irs::baselines
