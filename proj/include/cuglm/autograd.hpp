#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every op applied during one forward pass. Parameters enter
// as leaves (cached per graph, so a tensor used by several objectives is a
// single node); `backward` walks the tape in reverse and leaves gradients on
// the nodes. Callers then fold leaf gradients into their parameter storage.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cuglm/error.hpp"
#include "cuglm/rng.hpp"

namespace cuglm {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix<T>::Zero(rows, cols)), grad(Matrix<T>::Zero(rows, cols)) {}
};

struct Var {
  std::int32_t id = -1;
  bool valid() const noexcept { return id >= 0; }
};

template <class T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Matrix<T>& value(Var v) const { return nodes_.at(idx(v)).value; }

  /// Gradient of the last `backward` loss w.r.t. v (zeros if unreached).
  const Matrix<T>& grad(Var v) {
    Node& n = nodes_.at(idx(v));
    ensure_grad(n);
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_.at(idx(v)).needs_grad; }

  /// Leaf for a parameter tensor; repeated calls return the same node.
  Var param(const Parameter<T>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return it->second;
    Var v = push_leaf(p.value, grad_enabled_);
    leaves_.emplace(&p, v);
    return v;
  }

  /// Leaf that takes part in differentiation but is not a parameter.
  Var variable(Matrix<T> m) { return push_leaf(std::move(m), grad_enabled_); }

  Var constant(Matrix<T> m) { return push_leaf(std::move(m), false); }

  /// Node recorded for `p` in this graph, if any.
  std::optional<Var> find_param(const Parameter<T>& p) const {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return it->second;
    return std::nullopt;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var loss) {
    if (!grad_enabled_) throw std::logic_error("backward on a graph without gradient recording");
    Node& l = nodes_.at(idx(loss));
    if (l.value.size() != 1) throw std::logic_error("backward needs a scalar loss");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    ensure_grad(l);
    l.grad(0, 0) = T(1);
    for (std::size_t i = idx(loss) + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back(*this, static_cast<std::int32_t>(i));
    }
  }

  // ---- ops ---------------------------------------------------------------

  /// Rows of `table` selected by ids.
  Var embedding(Var table, std::span<const std::int32_t> ids) {
    const Matrix<T>& tab = value(table);
    Matrix<T> out(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tab.rows())
        throw RangeError("embedding id " + std::to_string(ids[i]) + " out of range [0, " +
                         std::to_string(tab.rows()) + ")");
      out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
    }
    std::vector<std::int32_t> keep(ids.begin(), ids.end());
    return push(std::move(out), {table}, [table, keep](Graph& g, std::int32_t self) {
      const Matrix<T>& dy = g.nodes_[self].grad;
      Matrix<T>& dt = g.grad_mut(table);
      for (std::size_t i = 0; i < keep.size(); ++i)
        dt.row(keep[i]) += dy.row(static_cast<Eigen::Index>(i));
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    return push(value(a) + value(b), {a, b}, [a, b](Graph& g, std::int32_t self) {
      g.accumulate(a, g.nodes_[self].grad);
      g.accumulate(b, g.nodes_[self].grad);
    });
  }

  /// a + broadcast of the 1×d row `bias` to every row.
  Var add_row(Var a, Var bias) {
    const Matrix<T>& b = value(bias);
    if (b.rows() != 1 || b.cols() != value(a).cols()) throw std::invalid_argument("add_row shape");
    Matrix<T> out = value(a).rowwise() + b.row(0);
    return push(std::move(out), {a, bias}, [a, bias](Graph& g, std::int32_t self) {
      const Matrix<T>& dy = g.nodes_[self].grad;
      g.accumulate(a, dy);
      if (g.requires_grad(bias)) g.grad_mut(bias) += dy.colwise().sum();
    });
  }

  /// a · wᵀ with w stored [out × in].
  Var matmul_nt(Var a, Var w) {
    if (value(a).cols() != value(w).cols()) throw std::invalid_argument("matmul_nt shape");
    Matrix<T> out = value(a) * value(w).transpose();
    return push(std::move(out), {a, w}, [a, w](Graph& g, std::int32_t self) {
      const Matrix<T>& dy = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.grad_mut(a).noalias() += dy * g.value(w);
      if (g.requires_grad(w)) g.grad_mut(w).noalias() += dy.transpose() * g.value(a);
    });
  }

  Var linear(Var x, Var w, Var b) { return add_row(matmul_nt(x, w), b); }

  Var scale(Var a, T c) {
    return push(value(a) * c, {a}, [a, c](Graph& g, std::int32_t self) {
      g.accumulate(a, g.nodes_[self].grad * c);
    });
  }

  Var tanh(Var a) {
    Matrix<T> y = value(a).array().tanh().matrix();
    return push(std::move(y), {a}, [a](Graph& g, std::int32_t self) {
      const Node& n = g.nodes_[self];
      g.accumulate(a, (n.grad.array() * (T(1) - n.value.array().square())).matrix());
    });
  }

  /// gelu, tanh approximation.
  Var gelu(Var a) {
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    const auto& x = value(a).array();
    Matrix<T> y = (T(0.5) * x * (T(1) + (c * (x + k * x.cube())).tanh())).matrix();
    return push(std::move(y), {a}, [a, c, k](Graph& g, std::int32_t self) {
      const auto& x = g.value(a).array();
      const auto t = (c * (x + k * x.cube())).tanh().eval();
      const auto d = (T(0.5) * (T(1) + t) +
                      T(0.5) * x * (T(1) - t.square()) * c * (T(1) + T(3) * k * x.square()))
                         .eval();
      g.accumulate(a, (g.nodes_[self].grad.array() * d).matrix());
    });
  }

  /// Row-wise layer normalization with learned gain and bias (both 1×d).
  Var layer_norm(Var x, Var gain, Var bias, T eps = static_cast<T>(1e-5)) {
    const Matrix<T>& in = value(x);
    const Eigen::Index d = in.cols();
    Matrix<T> xhat(in.rows(), d);
    Vector<T> inv_std(in.rows());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const T mean = in.row(r).mean();
      const T var = (in.row(r).array() - mean).square().mean();
      inv_std(r) = T(1) / std::sqrt(var + eps);
      xhat.row(r) = (in.row(r).array() - mean) * inv_std(r);
    }
    Matrix<T> y = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    y.rowwise() += value(bias).row(0);
    return push(std::move(y), {x, gain, bias},
                [x, gain, bias, xhat, inv_std](Graph& g, std::int32_t self) {
                  const Matrix<T>& dy = g.nodes_[self].grad;
                  if (g.requires_grad(gain))
                    g.grad_mut(gain) += (dy.array() * xhat.array()).colwise().sum().matrix();
                  if (g.requires_grad(bias)) g.grad_mut(bias) += dy.colwise().sum();
                  if (!g.requires_grad(x)) return;
                  const Matrix<T> dxhat =
                      (dy.array().rowwise() * g.value(gain).row(0).array()).matrix();
                  const T inv_d = T(1) / static_cast<T>(dxhat.cols());
                  Matrix<T>& dx = g.grad_mut(x);
                  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                    const T m1 = dxhat.row(r).sum() * inv_d;
                    const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_d;
                    dx.row(r).array() +=
                        inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                });
  }

  /// Inverted dropout with a keyed, stateless mask; identity when p == 0.
  Var dropout(Var a, double p, std::uint64_t key) {
    if (p <= 0.0) return a;
    const Matrix<T>& in = value(a);
    Matrix<T> mask(in.rows(), in.cols());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      mask.data()[i] = keyed_uniform(key, static_cast<std::uint64_t>(i)) < p ? T(0) : keep_scale;
    Matrix<T> y = in.cwiseProduct(mask);
    return push(std::move(y), {a}, [a, mask](Graph& g, std::int32_t self) {
      g.accumulate(a, g.nodes_[self].grad.cwiseProduct(mask));
    });
  }

  /// Multi-head scaled dot-product attention with an additive mask
  /// (entries 0 or -inf): per head softmax(Q Kᵀ / sqrt(d_k) + M) V.
  /// Attention weights per head are copied to `probs_out` when given.
  Var attention(Var q, Var k, Var v, const Matrix<T>& mask, std::size_t heads,
                std::vector<Matrix<T>>* probs_out = nullptr) {
    const Matrix<T>& Q = value(q);
    const Matrix<T>& K = value(k);
    const Matrix<T>& V = value(v);
    const Eigen::Index n = Q.rows();
    const Eigen::Index width = Q.cols();
    if (K.rows() != n || V.rows() != n || K.cols() != width || V.cols() != width)
      throw std::invalid_argument("attention q/k/v shapes differ");
    if (mask.rows() != n || mask.cols() != n)
      throw std::invalid_argument("attention mask is " + std::to_string(mask.rows()) + "x" +
                                  std::to_string(mask.cols()) + ", sequence length is " +
                                  std::to_string(n));
    if (heads == 0 || width % static_cast<Eigen::Index>(heads) != 0)
      throw std::invalid_argument("heads must divide the hidden size");
    const Eigen::Index dk = width / static_cast<Eigen::Index>(heads);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

    std::vector<Matrix<T>> probs(heads);
    Matrix<T> out(n, width);
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dk;
      Matrix<T> s = (Q.middleCols(c0, dk) * K.middleCols(c0, dk).transpose()) * inv_sqrt;
      s += mask;
      for (Eigen::Index r = 0; r < n; ++r) {
        const T mx = s.row(r).maxCoeff();
        // Vectorized exp can return denormals for -inf; masked entries must be 0.
        s.row(r) = (mask.row(r).array() == -std::numeric_limits<T>::infinity())
                       .select(T(0), (s.row(r).array() - mx).exp());
        s.row(r) /= s.row(r).sum();
      }
      out.middleCols(c0, dk).noalias() = s * V.middleCols(c0, dk);
      probs[h] = std::move(s);
    }
    if (probs_out) *probs_out = probs;
    return push(std::move(out), {q, k, v},
                [q, k, v, probs = std::move(probs), dk, inv_sqrt](Graph& g, std::int32_t self) {
                  const Matrix<T>& dy = g.nodes_[self].grad;
                  const Matrix<T>& Q = g.value(q);
                  const Matrix<T>& K = g.value(k);
                  const Matrix<T>& V = g.value(v);
                  const bool gq = g.requires_grad(q), gk = g.requires_grad(k),
                             gv = g.requires_grad(v);
                  for (std::size_t h = 0; h < probs.size(); ++h) {
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dk;
                    const Matrix<T>& P = probs[h];
                    const Matrix<T> dout = dy.middleCols(c0, dk);
                    if (gv) g.grad_mut(v).middleCols(c0, dk).noalias() += P.transpose() * dout;
                    if (!gq && !gk) continue;
                    Matrix<T> dP = dout * V.middleCols(c0, dk).transpose();
                    Matrix<T> dS = P.cwiseProduct(dP);
                    const Vector<T> rowdot = dS.rowwise().sum();
                    dS -= (P.array().colwise() * rowdot.array()).matrix();
                    dS *= inv_sqrt;
                    if (gq) g.grad_mut(q).middleCols(c0, dk).noalias() += dS * K.middleCols(c0, dk);
                    if (gk)
                      g.grad_mut(k).middleCols(c0, dk).noalias() +=
                          dS.transpose() * Q.middleCols(c0, dk);
                  }
                });
  }

  /// [a ; b] along columns.
  Var concat_cols(Var a, Var b) {
    const Matrix<T>& A = value(a);
    const Matrix<T>& B = value(b);
    if (A.rows() != B.rows()) throw std::invalid_argument("concat_cols row mismatch");
    Matrix<T> out(A.rows(), A.cols() + B.cols());
    out.leftCols(A.cols()) = A;
    out.rightCols(B.cols()) = B;
    const Eigen::Index ca = A.cols(), cb = B.cols();
    return push(std::move(out), {a, b}, [a, b, ca, cb](Graph& g, std::int32_t self) {
      const Matrix<T>& dy = g.nodes_[self].grad;
      if (g.requires_grad(a)) g.grad_mut(a) += dy.leftCols(ca);
      if (g.requires_grad(b)) g.grad_mut(b) += dy.rightCols(cb);
    });
  }

  Var gather_rows(Var x, std::span<const std::int32_t> rows) {
    const Matrix<T>& X = value(x);
    Matrix<T> out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= X.rows()) throw RangeError("gather_rows index out of range");
      out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
    }
    std::vector<std::int32_t> keep(rows.begin(), rows.end());
    return push(std::move(out), {x}, [x, keep](Graph& g, std::int32_t self) {
      const Matrix<T>& dy = g.nodes_[self].grad;
      Matrix<T>& dx = g.grad_mut(x);
      for (std::size_t i = 0; i < keep.size(); ++i)
        dx.row(keep[i]) += dy.row(static_cast<Eigen::Index>(i));
    });
  }

  /// Sum over rows of -log softmax(logits_row)[target]; a 1×1 node.
  Var cross_entropy_sum(Var logits, std::span<const std::int32_t> targets) {
    const Matrix<T>& L = value(logits);
    if (static_cast<std::size_t>(L.rows()) != targets.size())
      throw std::invalid_argument("cross_entropy_sum: one target per row");
    Matrix<T> probs(L.rows(), L.cols());
    T total = T(0);
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      const std::int32_t t = targets[static_cast<std::size_t>(r)];
      if (t < 0 || t >= L.cols()) throw RangeError("cross-entropy target out of range");
      const T mx = L.row(r).maxCoeff();
      probs.row(r) = (L.row(r).array() - mx).exp();
      const T z = probs.row(r).sum();
      probs.row(r) /= z;
      total += (mx + std::log(z)) - L(r, t);
    }
    Matrix<T> out(1, 1);
    out(0, 0) = total;
    std::vector<std::int32_t> keep(targets.begin(), targets.end());
    return push(std::move(out), {logits},
                [logits, keep, probs = std::move(probs)](Graph& g, std::int32_t self) {
                  const T s = g.nodes_[self].grad(0, 0);
                  Matrix<T> d = probs;
                  for (std::size_t r = 0; r < keep.size(); ++r)
                    d(static_cast<Eigen::Index>(r), keep[r]) -= T(1);
                  g.accumulate(logits, d * s);
                });
  }

  /// Σ x², a 1×1 node.
  Var sum_squares(Var x) {
    Matrix<T> out(1, 1);
    out(0, 0) = value(x).squaredNorm();
    return push(std::move(out), {x}, [x](Graph& g, std::int32_t self) {
      g.accumulate(x, g.value(x) * (T(2) * g.nodes_[self].grad(0, 0)));
    });
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad = false;
    std::function<void(Graph&, std::int32_t)> back;
  };

  static std::size_t idx(Var v) {
    if (!v.valid()) throw std::logic_error("invalid graph variable");
    return static_cast<std::size_t>(v.id);
  }

  Var push_leaf(Matrix<T> m, bool needs_grad) {
    nodes_.push_back(Node{std::move(m), {}, needs_grad, {}});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var push(Matrix<T> value, std::initializer_list<Var> inputs,
           std::function<void(Graph&, std::int32_t)> back) {
    bool needs = false;
    if (grad_enabled_)
      for (Var in : inputs) needs = needs || nodes_.at(idx(in)).needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(back) : nullptr});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  static void ensure_grad(Node& n) {
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
      n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
  }

  Matrix<T>& grad_mut(Var v) {
    Node& n = nodes_[idx(v)];
    ensure_grad(n);
    return n.grad;
  }

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    if (!nodes_[idx(v)].needs_grad) return;
    grad_mut(v) += g;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> leaves_;
};

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

}  // namespace cuglm
