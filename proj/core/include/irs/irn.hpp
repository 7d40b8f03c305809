#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "irs/autograd.hpp"
#include "irs/checkpoint.hpp"
#include "irs/corpus.hpp"
#include "irs/embed.hpp"
#include "irs/path.hpp"

namespace irs::irn {

struct IrnConfig {
  std::size_t d = 40;
  std::size_t d_user = 10;
  std::size_t layers = 5;
  std::size_t heads = 4;
  std::size_t l_max = 50;
  double w_t = 1.0;
  double w_h = 0.0;
  std::size_t ffn_dim = 0;  // 0 means 4 * d
  double dropout = 0.0;
  bool learned_positional = false;

  std::size_t ffn_width() const noexcept { return ffn_dim ? ffn_dim : 4 * d; }
  void validate() const;
};

nlohmann::json to_json(const IrnConfig& c);
IrnConfig irn_config_from_json(const nlohmann::json& j);

// Additive attention logits for one user: 0-based [l_max, l_max].
//   j <= i              -> w_h
//   j >  i              -> -inf
//   j == l_max-1, i < j -> r_u * w_t   (-inf when w_t == 0)
template <class T = float>
nn::Tensor<T> build_pim(const IrnConfig& config, double r_u);

// Per-example PIM over a batch, differentiable in r ([batch, 1]).
template <class T>
nn::Var<T> pim_bias(const nn::Var<T>& r, const IrnConfig& config);

template <class T>
struct LayerParams {
  nn::Parameter<T> wq, wk, wv, wo, bo;
  nn::Parameter<T> ln1_gain, ln1_bias;
  nn::Parameter<T> w1, b1, w2, b2;
  nn::Parameter<T> ln2_gain, ln2_bias;
};

// float for training and inference; double for gradient verification.
template <class T>
class BasicIrnModel {
 public:
  BasicIrnModel(IrnConfig config, std::size_t num_items, std::size_t num_users, std::uint64_t seed,
                const embed::ItemEmbeddings* init = nullptr);

  const IrnConfig& config() const noexcept { return config_; }
  std::size_t num_items() const noexcept { return num_items_; }
  std::size_t num_users() const noexcept { return num_users_; }

  // Override the mask weights at inference time (the trained parameters are untouched).
  void set_mask_weights(double w_t, double w_h);

  // r_u = W_user . e(u). Users outside [1, num_users] share the default row 0.
  double impressionability(UserId user) const;

  // ids: batch * l_max row-major windows; users: one per window. Returns logits
  // for the requested flat rows (all rows when `rows` is empty), shape
  // [rows, num_items + 1]. Gradients flow when the tape has them enabled.
  nn::Var<T> forward(nn::Tape<T>& tape, std::span<const ItemId> ids, std::span<const UserId> users,
                     std::span<const std::int64_t> rows = {}, Rng* dropout_rng = nullptr);

  // Inference on a single window; returns logits at `slot`.
  std::vector<T> slot_logits(std::span<const ItemId> window, UserId user, std::size_t slot) const;

  std::vector<nn::Parameter<T>*> parameters();
  std::vector<const nn::Parameter<T>*> parameters() const;

  // Keep the pad embedding at zero: clear its gradient before each update.
  void mask_pad_gradient();

  // Same weights in another precision.
  template <class U>
  BasicIrnModel<U> cast() const;

  Checkpoint to_checkpoint() const;
  static BasicIrnModel from_checkpoint(const Checkpoint& ckpt);

  nn::Parameter<T> token_embeddings;
  nn::Parameter<T> positional;  // fixed unless learned_positional
  nn::Parameter<T> user_embeddings;
  nn::Parameter<T> w_user;
  std::vector<LayerParams<T>> layer_params;
  nn::Parameter<T> w_proj;

 private:
  nn::Var<T> leaf(nn::Tape<T>& tape, nn::Parameter<T>& p) const;

  IrnConfig config_;
  std::size_t num_items_;
  std::size_t num_users_;
};

using IrnModel = BasicIrnModel<float>;

extern template class BasicIrnModel<float>;
extern template class BasicIrnModel<double>;

template <class T>
template <class U>
BasicIrnModel<U> BasicIrnModel<T>::cast() const {
  BasicIrnModel<U> out(config_, num_items_, num_users_, 0);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->grad = nn::Tensor<U>(dst[i]->value.shape());
  }
  out.positional.value = positional.value.template cast<U>();
  return out;
}

// Window used for generation and evaluation:
//   [pad ... tail(context, l_max-1) ..., last]
// `last` is the objective for IRN decoding and the pad for evaluator queries.
std::vector<ItemId> layout_window(const std::vector<ItemId>& context, ItemId last, std::size_t l_max);

// Next-item targets for one training window: target[j] = items[j+1] when that
// is not the pad, ignore otherwise; the last slot is always ignored.
std::vector<std::int64_t> window_targets(std::span<const ItemId> items, std::int64_t ignore_id = -1);

struct TrainConfig {
  double lr = 8e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  double min_lr = 1e-5;
  int patience = 3;
  double factor = 0.5;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_ppl = 0;
  std::optional<double> valid_loss;
  std::optional<double> valid_ppl;
  double lr = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Mean cross-entropy over every window's non-pad targets.
double mean_loss(IrnModel& model, const std::vector<corpus::TrainingExample>& examples, std::size_t batch_size);

std::vector<EpochLog> train(IrnModel& model, const corpus::DatasetSplit& split, const TrainConfig& config,
                            const EpochCallback& on_epoch = {});

// Greedy decoding scorer: [pads, recent history + path, objective], read at slot l_max-2.
class IrnScorer : public NextItemScorer {
 public:
  explicit IrnScorer(const IrnModel& model) : model_(model) {}
  std::size_t num_items() const override { return model_.num_items(); }
  std::vector<double> next_log_probs(const std::vector<ItemId>& context, ItemId objective,
                                     UserId user) const override;

 private:
  const IrnModel& model_;
};

// Log-softmax over items 1..n of a logit row indexed by item id (pad excluded).
std::vector<double> item_log_softmax(std::span<const float> logits);

}  // namespace irs::irn
