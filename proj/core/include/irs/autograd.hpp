#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "irs/rng.hpp"
#include "irs/tensor.hpp"

namespace irs::nn {

// A named trainable tensor. Gradients accumulate into `grad` across backward
// passes until zero_grad().
template <class T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

using NodeId = std::size_t;

template <class T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape<T>* tape() const noexcept { return tape_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

// Append-only record of operations. Node order is a topological order, so
// backward() walks it once in reverse.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Parameter<T>& param);
  Var<T> record(Tensor<T> value, std::vector<NodeId> inputs, Backward backward);

  // Populates gradients of every parameter reachable from `loss`. A tape can be
  // differentiated once; record a fresh one for the next step.
  void backward(const Var<T>& loss);

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }

  // Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad(NodeId id);
  bool has_grad(NodeId id) const { return !nodes_[id].grad.empty(); }

  // With gradients disabled nothing is kept for backward; used for inference.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<NodeId> inputs;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool grad_enabled_ = true;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---- operations ------------------------------------------------------------
// All 2-D operations treat the leading extents of their inputs as rows.

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T factor);

// x[r, :] + bias for every row r.
template <class T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

// x[r, :] + table[r % table.rows, :]; adds a per-position table to stacked windows.
template <class T> Var<T> add_tiled(const Var<T>& x, const Var<T>& table);

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_a = false, bool transpose_b = false);

template <class T> Var<T> relu(const Var<T>& x);
template <class T> Var<T> tanh(const Var<T>& x);

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Row-wise softmax with max subtraction. -inf entries get probability zero; a
// row that is entirely -inf raises NumericError.
template <class T> Var<T> softmax_rows(const Var<T>& x);

// Mean of -log softmax(logits[r])[targets[r]] over rows whose target is not
// `ignore_id`. Ignored rows receive exactly zero gradient.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int64_t> targets, std::int64_t ignore_id);

template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> square_sum(const Var<T>& x);

// out[i, :] = table[ids[i], :]
template <class T> Var<T> gather_rows(const Var<T>& table, std::span<const std::int64_t> ids);

// Inverted dropout. rate == 0 returns x unchanged.
template <class T> Var<T> dropout(const Var<T>& x, double rate, Rng& rng);

// Packed multi-head attention over `batch` stacked windows of length m.
//   Q, K: [batch*m, heads*d_k]   V: [batch*m, heads*d_v]   bias: [batch, m, m]
// Each head computes softmax(Q_h K_h^T / sqrt(d_k) + bias_b) V_h; bias entries
// are additive logits (0, finite weights, or -inf).
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& bias, std::size_t heads);

// Head-major form: Q, K: [heads, m, d_k], V: [heads, m, d_v], bias: [m, m].
template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& bias);

// [heads, m, d] <-> [m, heads*d]
template <class T> Var<T> merge_heads(const Var<T>& x);
template <class T> Var<T> split_heads(const Var<T>& x, std::size_t heads);

// Plain-value kernels shared by the ops above and by inference code.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool transpose_a,
          bool transpose_b, bool accumulate);

}  // namespace irs::nn
