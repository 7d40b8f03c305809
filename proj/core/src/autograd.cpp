#include "irs/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace irs::nn {

// ---- tape ------------------------------------------------------------------

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  if (consumed_) throw std::logic_error("tape already differentiated; record a new one");
  Node node{param.value, {}, {}, {}, &param, grad_enabled_};
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<NodeId> inputs, Backward backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
  }
  Node node{std::move(value), {}, {}, {}, nullptr, needs};
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Tensor<T>& Tape<T>::grad(NodeId id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  return node.grad;
}

template <class T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw std::invalid_argument("loss was recorded on a different tape");
  if (consumed_) throw std::logic_error("backward() already called on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!nodes_[loss.id()].requires_grad) throw std::logic_error("loss does not depend on any parameter");
  consumed_ = true;
  grad(loss.id()).fill(T(1));
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.param != nullptr) {
      auto& dst = node.param->grad.storage();
      const auto& src = node.grad.storage();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    } else if (node.backward) {
      node.backward(*this, id);
    }
  }
}

template class Tape<float>;
template class Tape<double>;

// ---- kernels ---------------------------------------------------------------

template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool transpose_a,
          bool transpose_b, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  Eigen::Map<Mat> out(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  const auto en = static_cast<Eigen::Index>(n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  if (!transpose_a && !transpose_b) {
    run(CMap(a, em, ek), CMap(b, ek, en));
  } else if (transpose_a && !transpose_b) {
    run(CMap(a, ek, em).transpose(), CMap(b, ek, en));
  } else if (!transpose_a && transpose_b) {
    run(CMap(a, em, ek), CMap(b, en, ek).transpose());
  } else {
    run(CMap(a, ek, em).transpose(), CMap(b, en, ek).transpose());
  }
}

template void gemm<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool, bool,
                          bool);
template void gemm<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool, bool,
                           bool);

namespace {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
}

template <class T>
void accumulate(Tape<T>& tape, NodeId target, const Tensor<T>& g, T factor = T(1)) {
  if (!tape.requires_grad(target)) return;
  auto& dst = tape.grad(target).storage();
  const auto& src = g.storage();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] += bv[i];
  NodeId ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self);
    accumulate(t, ia, g);
    accumulate(t, ib, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] -= bv[i];
  NodeId ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self);
    accumulate(t, ia, g);
    accumulate(t, ib, g, T(-1));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] *= bv[i];
  NodeId ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self).storage();
    const auto& av = t.value(ia).storage();
    const auto& bv = t.value(ib).storage();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).storage();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).storage();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  NodeId ia = a.id();
  return a.tape()->record(std::move(out), {ia}, [ia, factor](Tape<T>& t, NodeId self) {
    accumulate(t, ia, t.grad(self), factor);
  });
}

template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  require_same_tape(x, bias);
  const std::size_t cols = x.value().cols();
  if (bias.value().size() != cols) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " vs rows of width " + std::to_string(cols));
  }
  Tensor<T> out = x.value();
  const auto& bv = bias.value().storage();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) row[c] += bv[c];
  }
  NodeId ix = x.id(), ib = bias.id();
  return x.tape()->record(std::move(out), {ix, ib}, [ix, ib, cols](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self);
    accumulate(t, ix, g);
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).storage();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < cols; ++c) gb[c] += row[c];
      }
    }
  });
}

template <class T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& table) {
  require_same_tape(x, table);
  const auto& tv = table.value();
  const std::size_t cols = x.value().cols();
  if (tv.cols() != cols || x.value().rows() % tv.rows() != 0) {
    throw ShapeError("add_tiled: " + shape_string(x.shape()) + " vs table " + shape_string(table.shape()));
  }
  const std::size_t period = tv.rows();
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    auto src = tv.row(r % period);
    for (std::size_t c = 0; c < cols; ++c) row[c] += src[c];
  }
  NodeId ix = x.id(), it = table.id();
  return x.tape()->record(std::move(out), {ix, it}, [ix, it, period, cols](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self);
    accumulate(t, ix, g);
    if (t.requires_grad(it)) {
      auto& gt = t.grad(it);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        auto dst = gt.row(r % period);
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    }
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_a, bool transpose_b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) {
    throw ShapeError("matmul needs 2-D operands, got " + shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  }
  const std::size_t m = transpose_a ? av.dim(1) : av.dim(0);
  const std::size_t k = transpose_a ? av.dim(0) : av.dim(1);
  const std::size_t kb = transpose_b ? bv.dim(1) : bv.dim(0);
  const std::size_t n = transpose_b ? bv.dim(0) : bv.dim(1);
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + shape_string(av.shape()) + (transpose_a ? "^T" : "") +
                     " x " + shape_string(bv.shape()) + (transpose_b ? "^T" : ""));
  }
  Tensor<T> out({m, n});
  gemm(av.data(), bv.data(), out.data(), m, k, n, transpose_a, transpose_b, false);
  NodeId ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {ia, ib}, [=](Tape<T>& t, NodeId self) {
    const auto& g = t.grad(self);  // [m, n]
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      if (!transpose_a) {
        // dA[m,k] = G[m,n] * op(B)^T
        gemm(g.data(), B.data(), ga.data(), m, n, k, false, !transpose_b, true);
      } else {
        // dA[k,m] = op(B)[k,n] * G^T
        gemm(B.data(), g.data(), ga.data(), k, n, m, transpose_b, true, true);
      }
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      if (!transpose_b) {
        // dB[k,n] = op(A)^T * G
        gemm(A.data(), g.data(), gb.data(), k, m, n, !transpose_a, false, true);
      } else {
        // dB[n,k] = G^T * op(A)
        gemm(g.data(), A.data(), gb.data(), n, m, k, true, transpose_a, true);
      }
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& g = t.grad(self).storage();
    const auto& xv = t.value(ix).storage();
    auto& gx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > T(0) ? g[i] : T(0);
  });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = std::tanh(v);
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& g = t.grad(self).storage();
    const auto& y = t.value(self).storage();
    auto& gx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    throw ShapeError("layer_norm: gain/shift must have " + std::to_string(cols) + " entries");
  }
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  const auto& gv = gamma.value().storage();
  const auto& bv = beta.value().storage();
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    T mean = 0;
    for (auto v : in) mean += v;
    mean /= T(cols);
    T var = 0;
    for (auto v : in) var += (v - mean) * (v - mean);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    auto xh = xhat.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      xh[c] = (in[c] - mean) * is;
      o[c] = xh[c] * gv[c] + bv[c];
    }
  }
  NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, NodeId self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(ig).storage();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          auto* gg = t.requires_grad(ig) ? &t.grad(ig).storage() : nullptr;
          auto* gb = t.requires_grad(ib) ? &t.grad(ib).storage() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            auto gr = g.row(r);
            auto xh = xhat.row(r);
            for (std::size_t c = 0; c < cols; ++c) {
              if (gg) (*gg)[c] += gr[c] * xh[c];
              if (gb) (*gb)[c] += gr[c];
            }
          }
        }
        if (!t.requires_grad(ix)) return;
        auto& gx = t.grad(ix);
        std::vector<T> dxh(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          auto gr = g.row(r);
          auto xh = xhat.row(r);
          T mean_d = 0, mean_dx = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            dxh[c] = gr[c] * gv[c];
            mean_d += dxh[c];
            mean_dx += dxh[c] * xh[c];
          }
          mean_d /= T(cols);
          mean_dx /= T(cols);
          auto out_row = gx.row(r);
          for (std::size_t c = 0; c < cols; ++c) {
            out_row[c] += inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
          }
        }
      });
}

namespace {

// In-place softmax of one row; returns false when every entry is -inf.
template <class T>
bool softmax_inplace(std::span<T> row) {
  T mx = -std::numeric_limits<T>::infinity();
  for (auto v : row) mx = std::max(mx, v);
  if (mx == -std::numeric_limits<T>::infinity()) return false;
  T total = 0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : row) v /= total;
  return true;
}

template <class T>
void softmax_backward_row(std::span<const T> p, std::span<const T> g, std::span<T> out) {
  T dot = 0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * g[i];
  for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i] * (g[i] - dot);
}

}  // namespace

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (!softmax_inplace(out.row(r))) throw NumericError("softmax_rows: row " + std::to_string(r) + " is fully masked");
  }
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& p = t.value(self);
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t r = 0; r < p.rows(); ++r) softmax_backward_row<T>(p.row(r), g.row(r), gx.row(r));
  });
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int64_t> targets, std::int64_t ignore_id) {
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), cols = lv.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  }
  // Probabilities are kept for the backward pass; ignored rows stay empty.
  Tensor<T> probs(lv.shape());
  std::vector<std::int64_t> kept(targets.begin(), targets.end());
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto target = targets[r];
    if (target == ignore_id) continue;
    if (target < 0 || static_cast<std::size_t>(target) >= cols) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside [0," +
                              std::to_string(cols) + ")");
    }
    auto in = lv.row(r);
    auto p = probs.row(r);
    std::copy(in.begin(), in.end(), p.begin());
    T mx = *std::max_element(p.begin(), p.end());
    double z = 0;
    for (auto& v : p) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : p) v = static_cast<T>(v / z);
    total += -(static_cast<double>(in[static_cast<std::size_t>(target)]) - mx - std::log(z));
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  Tensor<T> out(Shape{1}, static_cast<T>(total / static_cast<double>(count)));
  NodeId il = logits.id();
  return logits.tape()->record(
      std::move(out), {il},
      [il, ignore_id, count, probs = std::move(probs), kept = std::move(kept)](Tape<T>& t, NodeId self) {
        if (!t.requires_grad(il)) return;
        const T g = t.grad(self)[0] / static_cast<T>(count);
        auto& gl = t.grad(il);
        for (std::size_t r = 0; r < kept.size(); ++r) {
          if (kept[r] == ignore_id) continue;
          auto p = probs.row(r);
          auto dst = gl.row(r);
          for (std::size_t c = 0; c < p.size(); ++c) dst[c] += g * p[c];
          dst[static_cast<std::size_t>(kept[r])] -= g;
        }
      });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (auto v : x.value().storage()) total += v;
  NodeId ix = x.id();
  return x.tape()->record(Tensor<T>(Shape{1}, total), {ix}, [ix](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(ix).storage()) v += g;
  });
}

template <class T>
Var<T> square_sum(const Var<T>& x) {
  T total = 0;
  for (auto v : x.value().storage()) total += v * v;
  NodeId ix = x.id();
  return x.tape()->record(Tensor<T>(Shape{1}, total), {ix}, [ix](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const T g = t.grad(self)[0];
    const auto& xv = t.value(ix).storage();
    auto& gx = t.grad(ix).storage();
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += T(2) * g * xv[i];
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& table, std::span<const std::int64_t> ids) {
  const auto& tv = table.value();
  const std::size_t cols = tv.cols(), n_rows = tv.rows();
  Tensor<T> out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(n_rows) + " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  NodeId it = table.id();
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {it}, [it, cols, idx = std::move(idx)](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(it)) return;
    const auto& g = t.grad(self);
    auto& gt = t.grad(it);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = g.row(i);
      auto dst = gt.row(static_cast<std::size_t>(idx[i]));
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

template <class T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.storage()) m = uniform_real(rng) < rate ? T(0) : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [ix, mask = std::move(mask)](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& g = t.grad(self).storage();
    auto& gx = t.grad(ix).storage();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---- attention -------------------------------------------------------------

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& bias, std::size_t heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  require_same_tape(q, bias);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const auto& bv = bias.value();
  if (bv.rank() != 3 || bv.dim(1) != bv.dim(2)) {
    throw ShapeError("attention: bias must be [batch, m, m], got " + shape_string(bv.shape()));
  }
  const std::size_t batch = bv.dim(0), m = bv.dim(1);
  if (heads == 0 || qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 || qv.dim(0) != batch * m ||
      kv.dim(0) != batch * m || vv.dim(0) != batch * m || qv.dim(1) != kv.dim(1) || qv.dim(1) % heads != 0 ||
      vv.dim(1) % heads != 0) {
    throw ShapeError("attention: incompatible Q " + shape_string(qv.shape()) + ", K " + shape_string(kv.shape()) +
                     ", V " + shape_string(vv.shape()) + ", bias " + shape_string(bv.shape()) + ", heads " +
                     std::to_string(heads));
  }
  const std::size_t dk = qv.dim(1) / heads, dv = vv.dim(1) / heads;
  const std::size_t qcols = qv.dim(1), vcols = vv.dim(1);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  Tensor<T> probs({batch * heads, m, m});
  Tensor<T> out({batch * m, vcols});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (b * heads + h) * m * m;
      const T* qb = qv.data() + b * m * qcols + h * dk;
      const T* kb = kv.data() + b * m * qcols + h * dk;
      const T* biasb = bv.data() + b * m * m;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const T bij = biasb[i * m + j];
          if (bij == -std::numeric_limits<T>::infinity()) {
            p[i * m + j] = bij;
            continue;
          }
          T s = 0;
          for (std::size_t c = 0; c < dk; ++c) s += qb[i * qcols + c] * kb[j * qcols + c];
          p[i * m + j] = s * inv_sqrt + bij;
        }
        if (!softmax_inplace(std::span<T>(p + i * m, m))) {
          throw NumericError("attention: query row " + std::to_string(i) + " has every key masked");
        }
      }
      const T* vb = vv.data() + b * m * vcols + h * dv;
      T* ob = out.data() + b * m * vcols + h * dv;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const T pij = p[i * m + j];
          if (pij == T(0)) continue;
          for (std::size_t c = 0; c < dv; ++c) ob[i * vcols + c] += pij * vb[j * vcols + c];
        }
      }
    }
  }

  NodeId iq = q.id(), ik = k.id(), iv = v.id(), ib = bias.id();
  return q.tape()->record(
      std::move(out), {iq, ik, iv, ib},
      [=, probs = std::move(probs)](Tape<T>& t, NodeId self) {
        const auto& g = t.grad(self);
        const auto& Q = t.value(iq);
        const auto& K = t.value(ik);
        const auto& V = t.value(iv);
        Tensor<T>* gq = t.requires_grad(iq) ? &t.grad(iq) : nullptr;
        Tensor<T>* gk = t.requires_grad(ik) ? &t.grad(ik) : nullptr;
        Tensor<T>* gv = t.requires_grad(iv) ? &t.grad(iv) : nullptr;
        Tensor<T>* gb = t.requires_grad(ib) ? &t.grad(ib) : nullptr;
        std::vector<T> dp(m * m), ds(m * m);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (b * heads + h) * m * m;
            const T* gob = g.data() + b * m * vcols + h * dv;
            const T* vb = V.data() + b * m * vcols + h * dv;
            const T* qb = Q.data() + b * m * qcols + h * dk;
            const T* kb = K.data() + b * m * qcols + h * dk;
            // dV = P^T dO
            if (gv) {
              T* gvb = gv->data() + b * m * vcols + h * dv;
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                  const T pij = p[i * m + j];
                  if (pij == T(0)) continue;
                  for (std::size_t c = 0; c < dv; ++c) gvb[j * vcols + c] += pij * gob[i * vcols + c];
                }
            }
            // dP = dO V^T, then dS = P * (dP - <dP, P>)
            for (std::size_t i = 0; i < m; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < m; ++j) {
                T s = 0;
                if (p[i * m + j] != T(0)) {
                  for (std::size_t c = 0; c < dv; ++c) s += gob[i * vcols + c] * vb[j * vcols + c];
                }
                dp[i * m + j] = s;
                dot += s * p[i * m + j];
              }
              for (std::size_t j = 0; j < m; ++j) ds[i * m + j] = p[i * m + j] * (dp[i * m + j] - dot);
            }
            if (gb) {
              T* gbb = gb->data() + b * m * m;
              for (std::size_t i = 0; i < m * m; ++i) gbb[i] += ds[i];
            }
            if (gq) {
              T* gqb = gq->data() + b * m * qcols + h * dk;
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                  const T s = ds[i * m + j] * inv_sqrt;
                  if (s == T(0)) continue;
                  for (std::size_t c = 0; c < dk; ++c) gqb[i * qcols + c] += s * kb[j * qcols + c];
                }
            }
            if (gk) {
              T* gkb = gk->data() + b * m * qcols + h * dk;
              for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                  const T s = ds[i * m + j] * inv_sqrt;
                  if (s == T(0)) continue;
                  for (std::size_t c = 0; c < dk; ++c) gkb[j * qcols + c] += s * qb[i * qcols + c];
                }
            }
          }
        }
      });
}

template <class T>
Var<T> merge_heads(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("merge_heads expects [heads, m, d], got " + shape_string(xv.shape()));
  const std::size_t heads = xv.dim(0), m = xv.dim(1), d = xv.dim(2);
  Tensor<T> out({m, heads * d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < d; ++c) out[i * heads * d + h * d + c] = xv[(h * m + i) * d + c];
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) gx[(h * m + i) * d + c] += g[i * heads * d + h * d + c];
  });
}

template <class T>
Var<T> split_heads(const Var<T>& x, std::size_t heads) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || heads == 0 || xv.dim(1) % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_string(xv.shape()) + " into " + std::to_string(heads) +
                     " heads");
  }
  const std::size_t m = xv.dim(0), d = xv.dim(1) / heads;
  Tensor<T> out({heads, m, d});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < d; ++c) out[(h * m + i) * d + c] = xv[i * heads * d + h * d + c];
  NodeId ix = x.id();
  return x.tape()->record(std::move(out), {ix}, [=](Tape<T>& t, NodeId self) {
    if (!t.requires_grad(ix)) return;
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) gx[i * heads * d + h * d + c] += g[(h * m + i) * d + c];
  });
}

template <class T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& bias) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3) {
    throw ShapeError("scaled_dot_attention expects [heads, m, d] operands");
  }
  const std::size_t heads = q.value().dim(0), m = q.value().dim(1);
  if (k.value().dim(0) != heads || v.value().dim(0) != heads || k.value().dim(2) != q.value().dim(2)) {
    throw ShapeError("scaled_dot_attention: Q " + shape_string(q.shape()) + ", K " + shape_string(k.shape()) + ", V " +
                     shape_string(v.shape()));
  }
  if (bias.value().shape() != Shape{m, m}) {
    throw ShapeError("scaled_dot_attention: bias must be [m, m], got " + shape_string(bias.shape()));
  }
  auto* tape = q.tape();
  // Present the [m, m] bias as a batch of one.
  NodeId ib = bias.id();
  Var<T> bias3 = tape->record(bias.value().reshaped({1, m, m}), {ib}, [ib](Tape<T>& t, NodeId self) {
    accumulate(t, ib, t.grad(self));
  });
  auto packed = attention(merge_heads(q), merge_heads(k), merge_heads(v), bias3, heads);
  return split_heads(packed, heads);
}

#define IRS_INSTANTIATE_OPS(T)                                                                          \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale(const Var<T>&, T);                                                              \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                               \
  template Var<T> add_tiled(const Var<T>&, const Var<T>&);                                              \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool, bool);                                     \
  template Var<T> relu(const Var<T>&);                                                                  \
  template Var<T> tanh(const Var<T>&);                                                                  \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                           \
  template Var<T> softmax_rows(const Var<T>&);                                                          \
  template Var<T> cross_entropy(const Var<T>&, std::span<const std::int64_t>, std::int64_t);            \
  template Var<T> sum(const Var<T>&);                                                                   \
  template Var<T> square_sum(const Var<T>&);                                                            \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::int64_t>);                            \
  template Var<T> dropout(const Var<T>&, double, Rng&);                                                 \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);   \
  template Var<T> scaled_dot_attention(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);     \
  template Var<T> merge_heads(const Var<T>&);                                                           \
  template Var<T> split_heads(const Var<T>&, std::size_t);

IRS_INSTANTIATE_OPS(float)
IRS_INSTANTIATE_OPS(double)

#undef IRS_INSTANTIATE_OPS

}  // namespace irs::nn
