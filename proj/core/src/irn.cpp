#include "irs/irn.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "irs/optim.hpp"
#include "irs/rng.hpp"

namespace irs::irn {

using nn::Parameter;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void IrnConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("d (" + std::to_string(d) + ") must be a positive multiple of heads (" +
                                std::to_string(heads) + ")");
  }
  if (d % 2 != 0 && !learned_positional) throw std::invalid_argument("sinusoidal positions need an even d");
  if (d_user == 0) throw std::invalid_argument("d_user must be positive");
  if (layers == 0) throw std::invalid_argument("layers must be positive");
  if (l_max < 2) throw std::invalid_argument("l_max must be >= 2");
  if (!std::isfinite(w_t) || !std::isfinite(w_h)) throw std::invalid_argument("mask weights must be finite");
  if (w_t != 0.0 && w_t < w_h) throw std::invalid_argument("w_t must be >= w_h when the objective is visible");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
}

nlohmann::json to_json(const IrnConfig& c) {
  return {{"d", c.d},         {"d_user", c.d_user},   {"layers", c.layers},       {"heads", c.heads},
          {"l_max", c.l_max}, {"w_t", c.w_t},         {"w_h", c.w_h},             {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout}, {"learned_positional", c.learned_positional}};
}

IrnConfig irn_config_from_json(const nlohmann::json& j) {
  IrnConfig c;
  c.d = j.at("d");
  c.d_user = j.at("d_user");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.l_max = j.at("l_max");
  c.w_t = j.at("w_t");
  c.w_h = j.at("w_h");
  c.ffn_dim = j.at("ffn_dim");
  c.dropout = j.at("dropout");
  c.learned_positional = j.at("learned_positional");
  c.validate();
  return c;
}

template <class T>
Tensor<T> build_pim(const IrnConfig& config, double r_u) {
  const std::size_t m = config.l_max;
  Tensor<T> bias({m, m}, -std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) bias.at(i, j) = static_cast<T>(config.w_h);
  if (config.w_t != 0.0) {
    for (std::size_t i = 0; i + 1 < m; ++i) bias.at(i, m - 1) = static_cast<T>(r_u * config.w_t);
  }
  return bias;
}

template Tensor<float> build_pim<float>(const IrnConfig&, double);
template Tensor<double> build_pim<double>(const IrnConfig&, double);

template <class T>
Var<T> pim_bias(const Var<T>& r, const IrnConfig& config) {
  const auto& rv = r.value();
  const std::size_t batch = rv.size(), m = config.l_max;
  Tensor<T> out({batch, m, m});
  for (std::size_t b = 0; b < batch; ++b) {
    auto one = build_pim<T>(config, static_cast<double>(rv[b]));
    std::copy(one.storage().begin(), one.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(b * m * m));
  }
  const T w_t = static_cast<T>(config.w_t);
  const nn::NodeId ir = r.id();
  return r.tape()->record(std::move(out), {ir}, [ir, batch, m, w_t](Tape<T>& t, nn::NodeId self) {
    if (!t.requires_grad(ir) || w_t == T(0)) return;
    const auto& g = t.grad(self);
    auto& gr = t.grad(ir);
    for (std::size_t b = 0; b < batch; ++b) {
      T s = 0;
      for (std::size_t i = 0; i + 1 < m; ++i) s += g[(b * m + i) * m + (m - 1)];
      gr[b] += w_t * s;
    }
  });
}

template Var<float> pim_bias(const Var<float>&, const IrnConfig&);
template Var<double> pim_bias(const Var<double>&, const IrnConfig&);

namespace {

template <class T>
Tensor<T> xavier(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor<T> t({rows, cols});
  for (auto& v : t.storage()) v = static_cast<T>(a * (2.0 * uniform_real(rng) - 1.0));
  return t;
}

template <class T>
Tensor<T> gaussian(Shape shape, double mean, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(normal(rng, mean, stddev));
  return t;
}

}  // namespace

template <class T>
BasicIrnModel<T>::BasicIrnModel(IrnConfig config, std::size_t num_items, std::size_t num_users, std::uint64_t seed,
                   const embed::ItemEmbeddings* init)
    : config_(config), num_items_(num_items), num_users_(num_users) {
  config_.validate();
  if (num_items == 0) throw std::invalid_argument("IRN needs a nonempty item catalog");
  const std::size_t d = config_.d, rows = num_items + 1, f = config_.ffn_width();
  auto rng = derive_stream(seed, "irn-init");

  if (init) {
    if (init->vectors.rows() != rows || init->dim() != d) {
      throw std::invalid_argument("item embeddings " + nn::shape_string(init->vectors.shape()) +
                                  " do not match catalog of " + std::to_string(num_items) + " items with d=" +
                                  std::to_string(d));
    }
    token_embeddings = Parameter<T>("token_embeddings", init->vectors.template cast<T>());
  } else {
    token_embeddings = Parameter<T>("token_embeddings", gaussian<T>({rows, d}, 0.0, 0.01, rng));
  }
  for (std::size_t c = 0; c < d; ++c) token_embeddings.value.at(0, c) = T(0);

  if (config_.learned_positional) {
    positional = Parameter<T>("positional", gaussian<T>({config_.l_max, d}, 0.0, 0.01, rng));
  } else {
    positional = Parameter<T>("positional", embed::positional_table(config_.l_max, d).template cast<T>());
  }
  user_embeddings = Parameter<T>("user_embeddings", gaussian<T>({num_users + 1, config_.d_user}, 1.0, 0.1, rng));
  w_user = Parameter<T>("w_user", Tensor<T>({1, config_.d_user}, T(1) / static_cast<T>(config_.d_user)));

  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams<T> lp{
        {p + "wq", xavier<T>(d, d, rng)},
        {p + "wk", xavier<T>(d, d, rng)},
        {p + "wv", xavier<T>(d, d, rng)},
        {p + "wo", xavier<T>(d, d, rng)},
        {p + "bo", Tensor<T>({d})},
        {p + "ln1_gain", Tensor<T>({d}, T(1))},
        {p + "ln1_bias", Tensor<T>({d})},
        {p + "w1", xavier<T>(d, f, rng)},
        {p + "b1", Tensor<T>({f})},
        {p + "w2", xavier<T>(f, d, rng)},
        {p + "b2", Tensor<T>({d})},
        {p + "ln2_gain", Tensor<T>({d}, T(1))},
        {p + "ln2_bias", Tensor<T>({d})},
    };
    layer_params.push_back(std::move(lp));
  }
  w_proj = Parameter<T>("w_proj", xavier<T>(rows, d, rng));
}

template <class T>
void BasicIrnModel<T>::set_mask_weights(double w_t, double w_h) {
  IrnConfig next = config_;
  next.w_t = w_t;
  next.w_h = w_h;
  next.validate();
  config_ = next;
}

template <class T>
double BasicIrnModel<T>::impressionability(UserId user) const {
  const std::size_t row = user >= 1 && static_cast<std::size_t>(user) <= num_users_ ? static_cast<std::size_t>(user) : 0;
  double r = 0;
  auto e = user_embeddings.value.row(row);
  for (std::size_t c = 0; c < e.size(); ++c) r += static_cast<double>(w_user.value[c]) * e[c];
  return r;
}

template <class T>
Var<T> BasicIrnModel<T>::leaf(Tape<T>& tape, Parameter<T>& p) const {
  if (&p == &positional && !config_.learned_positional) return tape.constant(p.value);
  return tape.grad_enabled() ? tape.parameter(p) : tape.constant(p.value);
}

template <class T>
Var<T> BasicIrnModel<T>::forward(Tape<T>& tape, std::span<const ItemId> ids, std::span<const UserId> users,
                             std::span<const std::int64_t> rows, Rng* dropout_rng) {
  const std::size_t m = config_.l_max, batch = users.size();
  if (batch == 0 || ids.size() != batch * m) {
    throw nn::ShapeError("forward expects " + std::to_string(batch) + " windows of " + std::to_string(m) +
                         " ids, got " + std::to_string(ids.size()));
  }
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) > num_items_) {
      throw std::out_of_range("item id " + std::to_string(id) + " outside catalog of " + std::to_string(num_items_));
    }
  }
  const bool drop = dropout_rng != nullptr && config_.dropout > 0.0 && tape.grad_enabled();
  auto maybe_drop = [&](const Var<T>& v) { return drop ? nn::dropout(v, config_.dropout, *dropout_rng) : v; };

  auto x = nn::gather_rows(leaf(tape, token_embeddings), ids);
  x = maybe_drop(nn::add_tiled(x, leaf(tape, positional)));

  std::vector<std::int64_t> user_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto u = users[b];
    user_rows[b] = u >= 1 && static_cast<std::size_t>(u) <= num_users_ ? u : 0;
  }
  auto r = nn::matmul(nn::gather_rows(leaf(tape, user_embeddings), user_rows), leaf(tape, w_user), false, true);
  auto bias = pim_bias(r, config_);

  for (auto& lp : layer_params) {
    auto q = nn::matmul(x, leaf(tape, lp.wq));
    auto k = nn::matmul(x, leaf(tape, lp.wk));
    auto v = nn::matmul(x, leaf(tape, lp.wv));
    auto a = nn::attention(q, k, v, bias, config_.heads);
    auto o = maybe_drop(nn::add_bias(nn::matmul(a, leaf(tape, lp.wo)), leaf(tape, lp.bo)));
    x = nn::layer_norm(nn::add(x, o), leaf(tape, lp.ln1_gain), leaf(tape, lp.ln1_bias));
    auto h = nn::relu(nn::add_bias(nn::matmul(x, leaf(tape, lp.w1)), leaf(tape, lp.b1)));
    auto f = maybe_drop(nn::add_bias(nn::matmul(h, leaf(tape, lp.w2)), leaf(tape, lp.b2)));
    x = nn::layer_norm(nn::add(x, f), leaf(tape, lp.ln2_gain), leaf(tape, lp.ln2_bias));
  }
  if (!rows.empty()) x = nn::gather_rows(x, rows);
  return nn::matmul(x, leaf(tape, w_proj), false, true);
}

template <class T>
std::vector<T> BasicIrnModel<T>::slot_logits(std::span<const ItemId> window, UserId user, std::size_t slot) const {
  if (slot >= config_.l_max) throw std::out_of_range("slot outside the window");
  Tape<T> tape;
  tape.set_grad_enabled(false);
  const std::int64_t row = static_cast<std::int64_t>(slot);
  const UserId users[1] = {user};
  // With gradients disabled forward() only reads parameter values.
  auto logits = const_cast<BasicIrnModel*>(this)->forward(tape, window, users, std::span<const std::int64_t>(&row, 1));
  return logits.value().storage();
}

template <class T>
std::vector<Parameter<T>*> BasicIrnModel<T>::parameters() {
  std::vector<Parameter<T>*> out{&token_embeddings};
  if (config_.learned_positional) out.push_back(&positional);
  out.push_back(&user_embeddings);
  out.push_back(&w_user);
  for (auto& lp : layer_params) {
    for (auto* p : {&lp.wq, &lp.wk, &lp.wv, &lp.wo, &lp.bo, &lp.ln1_gain, &lp.ln1_bias, &lp.w1, &lp.b1, &lp.w2,
                    &lp.b2, &lp.ln2_gain, &lp.ln2_bias}) {
      out.push_back(p);
    }
  }
  out.push_back(&w_proj);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> BasicIrnModel<T>::parameters() const {
  auto mut = const_cast<BasicIrnModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <class T>
void BasicIrnModel<T>::mask_pad_gradient() {
  for (auto& g : token_embeddings.grad.row(0)) g = T(0);
}

template <class T>
Checkpoint BasicIrnModel<T>::to_checkpoint() const {
  Checkpoint c;
  c.meta = {{"kind", "irn"}, {"config", to_json(config_)}, {"num_items", num_items_}, {"num_users", num_users_}};
  c.tensors.emplace(positional.name, positional.value.template cast<float>());
  for (const auto* p : parameters()) c.tensors.emplace(p->name, p->value.template cast<float>());
  return c;
}

template <class T>
BasicIrnModel<T> BasicIrnModel<T>::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "irn") throw FormatError("checkpoint does not hold an IRN model");
  BasicIrnModel model(irn_config_from_json(ckpt.meta.at("config")), ckpt.meta.at("num_items").get<std::size_t>(),
                 ckpt.meta.at("num_users").get<std::size_t>(), 0);
  auto assign = [&](Parameter<T>& p) {
    const auto& t = ckpt.at(p.name);
    if (t.shape() != p.value.shape()) {
      throw FormatError("tensor '" + p.name + "' has shape " + nn::shape_string(t.shape()) + ", expected " +
                        nn::shape_string(p.value.shape()));
    }
    p.value = t.template cast<T>();
    p.grad = Tensor<T>(t.shape());
  };
  assign(model.positional);
  for (auto* p : model.parameters()) assign(*p);
  return model;
}

template class BasicIrnModel<float>;
template class BasicIrnModel<double>;

std::vector<ItemId> layout_window(const std::vector<ItemId>& context, ItemId last, std::size_t l_max) {
  const std::size_t keep = std::min(context.size(), l_max - 1);
  std::vector<ItemId> w(l_max - 1 - keep, kPad);
  w.insert(w.end(), context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
  w.push_back(last);
  return w;
}

std::vector<std::int64_t> window_targets(std::span<const ItemId> items, std::int64_t ignore_id) {
  std::vector<std::int64_t> t(items.size(), ignore_id);
  for (std::size_t j = 0; j + 1 < items.size(); ++j) {
    if (items[j + 1] != kPad) t[j] = items[j + 1];
  }
  return t;
}

std::vector<double> item_log_softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double z = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) z += std::exp(static_cast<double>(logits[i]) - mx);
  const double log_z = mx + std::log(z);
  for (std::size_t i = 1; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - log_z;
  return out;
}

std::vector<double> IrnScorer::next_log_probs(const std::vector<ItemId>& context, ItemId objective,
                                              UserId user) const {
  const std::size_t m = model_.config().l_max;
  auto window = layout_window(context, objective, m);
  return item_log_softmax(model_.slot_logits(window, user, m - 2));
}

// ---- training --------------------------------------------------------------------

namespace {

struct Batch {
  std::vector<ItemId> ids;
  std::vector<UserId> users;
  std::vector<std::int64_t> targets;
  std::size_t count = 0;
};

Batch make_batch(const std::vector<corpus::TrainingExample>& examples, std::span<const std::size_t> order,
                 std::size_t l_max) {
  Batch b;
  for (auto idx : order) {
    const auto& ex = examples[idx];
    if (ex.items.size() != l_max) {
      throw std::invalid_argument("training example of length " + std::to_string(ex.items.size()) +
                                  " does not match l_max " + std::to_string(l_max));
    }
    b.ids.insert(b.ids.end(), ex.items.begin(), ex.items.end());
    b.users.push_back(ex.user);
    auto t = window_targets(ex.items);
    for (auto v : t) b.count += v >= 0;
    b.targets.insert(b.targets.end(), t.begin(), t.end());
  }
  return b;
}

}  // namespace

double mean_loss(IrnModel& model, const std::vector<corpus::TrainingExample>& examples, std::size_t batch_size) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto span = std::span<const std::size_t>(order).subspan(start, std::min(batch_size, order.size() - start));
    auto b = make_batch(examples, span, model.config().l_max);
    if (b.count == 0) continue;
    Tape<float> tape;
    tape.set_grad_enabled(false);
    auto loss = nn::cross_entropy(model.forward(tape, b.ids, b.users), b.targets, -1);
    total += static_cast<double>(loss.value().item()) * static_cast<double>(b.count);
    count += b.count;
  }
  if (count == 0) throw std::invalid_argument("no scorable targets in the evaluation set");
  return total / static_cast<double>(count);
}

std::vector<EpochLog> train(IrnModel& model, const corpus::DatasetSplit& split, const TrainConfig& config,
                            const EpochCallback& on_epoch) {
  if (split.train.empty()) throw std::invalid_argument("training split is empty");
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  auto params = model.parameters();
  auto adam = nn::make_adam(params, {.lr = config.lr});
  nn::PlateauScheduler scheduler(config.lr, config.factor, config.patience, std::min(config.min_lr, config.lr));
  std::vector<EpochLog> logs;
  const std::size_t l_max = model.config().l_max;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = derive_stream(config.seed, "irn-shuffle", epoch);
    shuffle(shuffle_rng, order);
    auto dropout_rng = derive_stream(config.seed, "irn-dropout", epoch);

    double total = 0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto span =
          std::span<const std::size_t>(order).subspan(start, std::min(config.batch_size, order.size() - start));
      auto b = make_batch(split.train, span, l_max);
      if (b.count == 0) continue;
      Tape<float> tape;
      auto loss = nn::cross_entropy(model.forward(tape, b.ids, b.users, {}, &dropout_rng), b.targets, -1);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw nn::NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                               std::to_string(start) + " (lr " + std::to_string(adam.config.lr) + ")");
      }
      tape.backward(loss);
      model.mask_pad_gradient();
      nn::adam_step(params, adam);
      for (auto* p : params) p->zero_grad();
      total += value * static_cast<double>(b.count);
      count += b.count;
    }
    if (count == 0) throw std::invalid_argument("training split has no scorable targets");

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = total / static_cast<double>(count);
    log.train_ppl = std::exp(log.train_loss);
    if (!split.validation.empty()) {
      log.valid_loss = mean_loss(model, split.validation, config.batch_size);
      log.valid_ppl = std::exp(*log.valid_loss);
    }
    adam.config.lr = scheduler.step(log.valid_loss.value_or(log.train_loss));
    log.lr = adam.config.lr;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace irs::irn
