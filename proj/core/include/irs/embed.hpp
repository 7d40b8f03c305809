#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "irs/corpus.hpp"
#include "irs/tensor.hpp"

namespace irs::embed {

struct Item2VecConfig {
  std::size_t dim = 40;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double lr = 0.025;
  std::uint64_t seed = 0;
  // Export input + output vectors (true) or input vectors only.
  bool sum_context_vectors = true;
};

struct ItemEmbeddings {
  nn::Tensor<float> vectors;  // [num_items + 1, dim], row 0 is the pad and stays zero
  Item2VecConfig config;
  std::vector<ItemId> cold_items;  // never appeared with a context item

  std::size_t dim() const { return vectors.cols(); }
  std::size_t num_items() const { return vectors.rows() - 1; }
};

// Called after every epoch with the embeddings as they would be exported then.
using EpochHook = std::function<void(std::size_t epoch, const ItemEmbeddings&)>;

// Skip-gram with negative sampling over item windows; negatives are drawn from
// the unigram^0.75 distribution.
ItemEmbeddings train_item2vec(const std::vector<corpus::InteractionSequence>& sequences, std::size_t num_items,
                              const Item2VecConfig& config, const EpochHook& hook = {});

enum class Distance { cosine, euclidean };

Distance parse_distance(std::string_view name);

// 1 - cos(v_a, v_b), in [0, 2].
double cosine_distance(ItemId a, ItemId b, const ItemEmbeddings& emb);
double euclidean_distance(ItemId a, ItemId b, const ItemEmbeddings& emb);
double distance(ItemId a, ItemId b, const ItemEmbeddings& emb, Distance kind);

// Fixed sinusoidal table: PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(...).
nn::Tensor<float> positional_table(std::size_t l_max, std::size_t d);

void save_embeddings(const std::filesystem::path& path, const ItemEmbeddings& emb);
ItemEmbeddings load_embeddings(const std::filesystem::path& path);

// One line per item: `<item name> v0 v1 ...`.
void export_text(const std::filesystem::path& path, const ItemEmbeddings& emb, const corpus::Catalog& catalog);

}  // namespace irs::embed
