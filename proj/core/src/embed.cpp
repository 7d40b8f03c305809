#include "irs/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "irs/checkpoint.hpp"
#include "irs/rng.hpp"

namespace irs::embed {

namespace {

double sigmoid(double x) {
  if (x > 30) return 1.0;
  if (x < -30) return 0.0;
  return 1.0 / (1.0 + std::exp(-x));
}

class NoiseSampler {
 public:
  explicit NoiseSampler(const std::vector<std::uint64_t>& counts) : cdf_(counts.size(), 0.0) {
    double total = 0;
    for (std::size_t i = 1; i < counts.size(); ++i) {
      total += std::pow(static_cast<double>(counts[i]), 0.75);
      cdf_[i] = total;
    }
    for (auto& c : cdf_) c /= total;
  }

  ItemId draw(Rng& rng) const {
    const double u = uniform_real(rng);
    auto it = std::upper_bound(cdf_.begin() + 1, cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<ItemId>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

ItemEmbeddings snapshot(const std::vector<float>& in, const std::vector<float>& out, std::size_t rows,
                        const Item2VecConfig& config) {
  ItemEmbeddings emb;
  emb.config = config;
  emb.vectors = nn::Tensor<float>({rows, config.dim});
  for (std::size_t i = config.dim; i < in.size(); ++i) {
    emb.vectors[i] = config.sum_context_vectors ? in[i] + out[i] : in[i];
  }
  return emb;
}

}  // namespace

ItemEmbeddings train_item2vec(const std::vector<corpus::InteractionSequence>& sequences, std::size_t num_items,
                              const Item2VecConfig& config, const EpochHook& hook) {
  if (sequences.empty()) throw std::invalid_argument("item2vec needs at least one sequence");
  if (config.dim < 2) throw std::invalid_argument("item2vec dimension must be >= 2");
  if (config.window == 0) throw std::invalid_argument("item2vec window must be >= 1");
  const std::size_t d = config.dim, rows = num_items + 1;

  std::vector<std::uint64_t> counts(rows, 0);
  std::vector<bool> has_context(rows, false);
  std::size_t pairs_per_epoch = 0;
  for (const auto& s : sequences) {
    for (std::size_t p = 0; p < s.items.size(); ++p) {
      const auto i = s.items[p];
      if (i <= 0 || static_cast<std::size_t>(i) > num_items) {
        throw std::out_of_range("item id " + std::to_string(i) + " outside catalog of " + std::to_string(num_items));
      }
      ++counts[static_cast<std::size_t>(i)];
      if (s.items.size() > 1) has_context[static_cast<std::size_t>(i)] = true;
      const std::size_t lo = p >= config.window ? p - config.window : 0;
      const std::size_t hi = std::min(s.items.size() - 1, p + config.window);
      pairs_per_epoch += hi - lo;
    }
  }
  NoiseSampler noise(counts);

  auto rng = derive_stream(config.seed, "item2vec");
  std::vector<float> in(rows * d, 0.0f), out(rows * d, 0.0f);
  for (std::size_t i = d; i < in.size(); ++i) {
    in[i] = static_cast<float>((uniform_real(rng) - 0.5) / static_cast<double>(d));
  }

  const double total_pairs = static_cast<double>(pairs_per_epoch * config.epochs);
  double seen = 0;
  std::vector<double> grad_in(d);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& s : sequences) {
      const std::size_t n = s.items.size();
      for (std::size_t p = 0; p < n; ++p) {
        const std::size_t lo = p >= config.window ? p - config.window : 0;
        const std::size_t hi = std::min(n - 1, p + config.window);
        for (std::size_t q = lo; q <= hi; ++q) {
          if (q == p) continue;
          const double lr = std::max(config.lr * (1.0 - seen / total_pairs), config.lr * 1e-4);
          seen += 1;
          const auto center = static_cast<std::size_t>(s.items[p]);
          float* v = &in[center * d];
          std::fill(grad_in.begin(), grad_in.end(), 0.0);
          auto update = [&](std::size_t target, double label) {
            float* u = &out[target * d];
            double dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(v[c]) * u[c];
            const double g = lr * (label - sigmoid(dot));
            for (std::size_t c = 0; c < d; ++c) {
              grad_in[c] += g * u[c];
              u[c] += static_cast<float>(g * v[c]);
            }
          };
          const auto context = static_cast<std::size_t>(s.items[q]);
          update(context, 1.0);
          for (std::size_t k = 0; k < config.negatives; ++k) {
            const auto neg = static_cast<std::size_t>(noise.draw(rng));
            if (neg == context) continue;
            update(neg, 0.0);
          }
          for (std::size_t c = 0; c < d; ++c) v[c] += static_cast<float>(grad_in[c]);
        }
      }
    }
    if (hook) hook(epoch, snapshot(in, out, rows, config));
  }

  auto emb = snapshot(in, out, rows, config);
  for (std::size_t i = 1; i < rows; ++i) {
    if (!has_context[i]) emb.cold_items.push_back(static_cast<ItemId>(i));
  }
  if (!emb.vectors.all_finite()) throw nn::NumericError("item2vec diverged");
  return emb;
}

Distance parse_distance(std::string_view name) {
  if (name == "cosine") return Distance::cosine;
  if (name == "euclidean") return Distance::euclidean;
  throw std::invalid_argument("unknown distance '" + std::string(name) + "' (expected cosine or euclidean)");
}

namespace {

std::span<const float> vec(ItemId i, const ItemEmbeddings& emb) {
  if (i <= 0 || static_cast<std::size_t>(i) > emb.num_items()) {
    throw std::out_of_range("no embedding for item " + std::to_string(i));
  }
  return emb.vectors.row(static_cast<std::size_t>(i));
}

}  // namespace

double cosine_distance(ItemId a, ItemId b, const ItemEmbeddings& emb) {
  auto va = vec(a, emb), vb = vec(b, emb);
  double dot = 0, na = 0, nb = 0;
  for (std::size_t c = 0; c < va.size(); ++c) {
    dot += static_cast<double>(va[c]) * vb[c];
    na += static_cast<double>(va[c]) * va[c];
    nb += static_cast<double>(vb[c]) * vb[c];
  }
  if (na == 0 || nb == 0) throw std::domain_error("cosine distance of a zero-norm embedding");
  if (a == b) return 0.0;
  return std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
}

double euclidean_distance(ItemId a, ItemId b, const ItemEmbeddings& emb) {
  auto va = vec(a, emb), vb = vec(b, emb);
  double s = 0;
  for (std::size_t c = 0; c < va.size(); ++c) s += (static_cast<double>(va[c]) - vb[c]) * (va[c] - vb[c]);
  return std::sqrt(s);
}

double distance(ItemId a, ItemId b, const ItemEmbeddings& emb, Distance kind) {
  return kind == Distance::cosine ? cosine_distance(a, b, emb) : euclidean_distance(a, b, emb);
}

nn::Tensor<float> positional_table(std::size_t l_max, std::size_t d) {
  if (d % 2 != 0) throw std::invalid_argument("positional encoding needs an even dimension, got " + std::to_string(d));
  nn::Tensor<float> pe({l_max, d});
  for (std::size_t p = 0; p < l_max; ++p) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe.at(p, i) = static_cast<float>(std::sin(angle));
      pe.at(p, i + 1) = static_cast<float>(std::cos(angle));
    }
  }
  return pe;
}

void save_embeddings(const std::filesystem::path& path, const ItemEmbeddings& emb) {
  Checkpoint c;
  c.meta = {{"kind", "item2vec"},
            {"window", emb.config.window},
            {"negatives", emb.config.negatives},
            {"epochs", emb.config.epochs},
            {"lr", emb.config.lr},
            {"seed", emb.config.seed},
            {"sum_context_vectors", emb.config.sum_context_vectors},
            {"cold_items", emb.cold_items}};
  c.tensors.emplace("item_embeddings", emb.vectors);
  save_checkpoint(path, c);
}

ItemEmbeddings load_embeddings(const std::filesystem::path& path) {
  auto c = load_checkpoint(path);
  if (c.meta.value("kind", "") != "item2vec") throw FormatError(path.string() + " does not hold item embeddings");
  ItemEmbeddings emb;
  emb.vectors = c.at("item_embeddings");
  emb.config.dim = emb.vectors.cols();
  emb.config.window = c.meta.at("window");
  emb.config.negatives = c.meta.at("negatives");
  emb.config.epochs = c.meta.at("epochs");
  emb.config.lr = c.meta.at("lr");
  emb.config.seed = c.meta.at("seed");
  emb.config.sum_context_vectors = c.meta.at("sum_context_vectors");
  emb.cold_items = c.meta.at("cold_items").get<std::vector<ItemId>>();
  return emb;
}

void export_text(const std::filesystem::path& path, const ItemEmbeddings& emb, const corpus::Catalog& catalog) {
  std::string out;
  char buf[32];
  for (std::size_t i = 1; i <= emb.num_items(); ++i) {
    out += i < catalog.item_names.size() ? catalog.item_names[i] : std::to_string(i);
    for (auto v : emb.vectors.row(i)) {
      std::snprintf(buf, sizeof(buf), " %.6g", static_cast<double>(v));
      out += buf;
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

}  // namespace irs::embed
