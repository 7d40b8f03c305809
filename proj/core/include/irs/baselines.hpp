#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "irs/embed.hpp"
#include "irs/irn.hpp"
#include "irs/path.hpp"

namespace irs::baselines {

// Undirected item co-occurrence graph with unit edge weights. Neighbor lists
// are kept sorted.
class ItemGraph {
 public:
  explicit ItemGraph(std::size_t num_items = 0) : adjacency_(num_items + 1) {}

  // One edge per pair of items that appear consecutively in some sequence.
  static ItemGraph build(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items);

  // Ignores self-loops and duplicates. Returns whether an edge was added.
  bool add_edge(ItemId a, ItemId b);
  bool has_edge(ItemId a, ItemId b) const;

  std::size_t num_items() const noexcept { return adjacency_.size() - 1; }
  std::size_t num_edges() const noexcept { return edges_; }
  const std::vector<ItemId>& neighbors(ItemId item) const { return adjacency_.at(static_cast<std::size_t>(item)); }

  // (min, max) pairs in ascending order.
  std::vector<std::pair<ItemId, ItemId>> edges() const;
  std::size_t num_components() const;

  // `a b` per line, a < b, ascending.
  void write_edge_list(const std::filesystem::path& file) const;

 private:
  std::vector<std::vector<ItemId>> adjacency_;
  std::size_t edges_ = 0;
};

// Shortest hop path from source to target, source excluded, truncated to M.
// Among equally short paths the lexicographically smallest node sequence wins.
// An unreachable target yields an empty path.
InfluencePath dijkstra_path(const ItemGraph& graph, ItemId source, ItemId target, std::size_t M,
                            std::string method = "pf2inf-dijkstra");

// Kruskal over edges in ascending (min, max) order.
ItemGraph spanning_forest(const ItemGraph& graph);

// The unique path in spanning_forest(graph); pass a precomputed forest to
// tree_path when generating many paths.
InfluencePath mst_path(const ItemGraph& graph, ItemId source, ItemId target, std::size_t M);
InfluencePath tree_path(const ItemGraph& forest, ItemId source, ItemId target, std::size_t M);

// Next-item recommender used by the vanilla and Rec2Inf generators.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::string name() const = 0;
  virtual std::size_t num_items() const = 0;
  // Log-probabilities indexed by item id; entry 0 is -inf.
  virtual std::vector<double> log_probs(const std::vector<ItemId>& history) const = 0;

  // At most k items by descending score, ties by ascending id, skipping `exclude`.
  std::vector<std::pair<ItemId, double>> top_k(const std::vector<ItemId>& history, std::size_t k,
                                               const std::unordered_set<ItemId>& exclude = {}) const;
};

class PopBackbone : public Backbone {
 public:
  PopBackbone(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items);
  std::string name() const override { return "pop"; }
  std::size_t num_items() const override { return log_probs_.size() - 1; }
  std::vector<double> log_probs(const std::vector<ItemId>&) const override { return log_probs_; }

 private:
  std::vector<double> log_probs_;
};

// Add-one smoothed first-order transitions from the last history item; falls
// back to popularity for an empty history.
class MarkovBackbone : public Backbone {
 public:
  MarkovBackbone(const std::vector<std::vector<ItemId>>& sequences, std::size_t num_items);
  std::string name() const override { return "markov"; }
  std::size_t num_items() const override { return pop_.num_items(); }
  std::vector<double> log_probs(const std::vector<ItemId>& history) const override;
  double transition_prob(ItemId from, ItemId to) const;

 private:
  PopBackbone pop_;
  std::vector<std::vector<std::pair<ItemId, std::uint64_t>>> transitions_;
  std::vector<std::uint64_t> out_counts_;
};

// Causal self-attention recommender: an IRN whose objective slot is the pad.
class IrnBackbone : public Backbone {
 public:
  explicit IrnBackbone(const irn::IrnModel& model) : model_(model) {}
  std::string name() const override { return "irn0"; }
  std::size_t num_items() const override { return model_.num_items(); }
  std::vector<double> log_probs(const std::vector<ItemId>& history) const override;

 private:
  const irn::IrnModel& model_;
};

// Greedy recommender decoding as a path generator.
class BackboneScorer : public NextItemScorer {
 public:
  explicit BackboneScorer(const Backbone& backbone) : backbone_(backbone) {}
  std::size_t num_items() const override { return backbone_.num_items(); }
  std::vector<double> next_log_probs(const std::vector<ItemId>& context, ItemId, UserId) const override {
    return backbone_.log_probs(context);
  }

 private:
  const Backbone& backbone_;
};

struct Rec2InfChoice {
  ItemId item = kPad;
  double log_prob = 0.0;
};

// Takes the backbone's top-k admissible candidates and returns the objective if
// present, otherwise the candidate closest to it (ties: higher score, lower id).
Rec2InfChoice rec2inf_step(const Backbone& backbone, const embed::ItemEmbeddings& emb,
                           const std::vector<ItemId>& context, ItemId objective, std::size_t k,
                           const std::unordered_set<ItemId>& exclude = {},
                           embed::Distance distance = embed::Distance::cosine);

InfluencePath vanilla_path(const Backbone& backbone, const std::vector<ItemId>& history, ItemId objective,
                           UserId user, std::size_t M, bool forbid_repeats);

InfluencePath rec2inf_path(const Backbone& backbone, const embed::ItemEmbeddings& emb,
                           const std::vector<ItemId>& history, ItemId objective, UserId user, std::size_t M,
                           std::size_t k, bool forbid_repeats, embed::Distance distance = embed::Distance::cosine);

}  // namespace irs::baselines
