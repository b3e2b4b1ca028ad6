#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Var is a handle to a graph node. Ops record their parents and a backward
// closure when at least one parent requires a gradient and grad mode is
// enabled. Calling backward() on a 1x1 Var propagates through the recorded
// graph in reverse topological order. Graph memory is released when the last
// handle to the root goes away; parameters are long-lived leaves.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mvcodot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// RAII guard disabling graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  static Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  const NodePtr& node() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

  // Gradient of this 1x1 value with respect to every reachable leaf.
  void backward() const {
    if (rows() != 1 || cols() != 1) {
      throw std::logic_error("backward() requires a scalar (1x1) root");
    }
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
  }

 private:
  NodePtr node_;
};

namespace detail {

inline Var make_op(Matrix value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return detail::make_op(a.value() * b.value(), {a.node(), b.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& b = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad * b.value.transpose());
    if (b.requires_grad) b.accumulate(a.value.transpose() * n.grad);
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  return detail::make_op(a.value() * b.value().transpose(), {a.node(), b.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& b = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad * b.value);
    if (b.requires_grad) b.accumulate(n.grad.transpose() * a.value);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make_op(a.value() + b.value(), {a.node(), b.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& b = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad);
    if (b.requires_grad) b.accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make_op(a.value() - b.value(), {a.node(), b.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& b = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad);
    if (b.requires_grad) b.accumulate(-n.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  return detail::make_op(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& b = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad.cwiseProduct(b.value));
    if (b.requires_grad) b.accumulate(n.grad.cwiseProduct(a.value));
  });
}

// Adds a 1 x cols row vector to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: bias must be 1 x cols");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return detail::make_op(std::move(out), {a.node(), row.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    Node& r = detail::parent(n, 1);
    if (a.requires_grad) a.accumulate(n.grad);
    if (r.requires_grad) r.accumulate(n.grad.colwise().sum());
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make_op(a.value() * s, {a.node()}, [s](Node& n) {
    detail::parent(n, 0).accumulate(n.grad * s);
  });
}

// Elementwise product with a constant mask / weight matrix.
inline Var mul_const(const Var& a, Matrix m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) {
    throw std::invalid_argument("mul_const: shape mismatch");
  }
  Matrix out = a.value().cwiseProduct(m);
  return detail::make_op(std::move(out), {a.node()}, [m = std::move(m)](Node& n) {
    detail::parent(n, 0).accumulate(n.grad.cwiseProduct(m));
  });
}

inline Var sum(const Var& a) {
  return detail::make_op(Matrix::Constant(1, 1, a.value().sum()), {a.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    a.accumulate(Matrix::Constant(a.value.rows(), a.value.cols(), n.grad(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

// ---------------------------------------------------------------------------
// Activations

inline Var sigmoid(const Var& a) {
  Matrix y = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return detail::make_op(y, {a.node()}, [y](Node& n) {
    detail::parent(n, 0).accumulate(n.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

inline Var tanh(const Var& a) {
  Matrix y = a.value().array().tanh().matrix();
  return detail::make_op(y, {a.node()}, [y](Node& n) {
    detail::parent(n, 0).accumulate(n.grad.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var relu(const Var& a) {
  Matrix y = a.value().cwiseMax(0.0);
  return detail::make_op(y, {a.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    a.accumulate(n.grad.cwiseProduct(
        a.value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; })));
  });
}

inline Var elu(const Var& a) {
  Matrix y = a.value().unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
  return detail::make_op(y, {a.node()}, [](Node& n) {
    Node& a = detail::parent(n, 0);
    a.accumulate(n.grad.cwiseProduct(
        a.value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); })));
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
    parents.push_back(p.node());
  }
  return detail::make_op(std::move(out), std::move(parents), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = *n.parents[i];
      if (p.requires_grad) p.accumulate(n.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
    parents.push_back(p.node());
  }
  return detail::make_op(std::move(out), std::move(parents), [offsets](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = *n.parents[i];
      if (p.requires_grad) p.accumulate(n.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  Matrix out = a.value().middleCols(start, count);
  return detail::make_op(std::move(out), {a.node()}, [start, count](Node& n) {
    Node& a = detail::parent(n, 0);
    Matrix g = Matrix::Zero(a.value.rows(), a.value.cols());
    g.middleCols(start, count) = n.grad;
    a.accumulate(g);
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  Matrix out = a.value().middleRows(start, count);
  return detail::make_op(std::move(out), {a.node()}, [start, count](Node& n) {
    Node& a = detail::parent(n, 0);
    Matrix g = Matrix::Zero(a.value.rows(), a.value.cols());
    g.middleRows(start, count) = n.grad;
    a.accumulate(g);
  });
}

// Mean over consecutive groups of `block` rows: (k*block x c) -> (k x c).
inline Var block_mean_rows(const Var& a, Eigen::Index block) {
  if (block <= 0 || a.rows() % block != 0) {
    throw std::invalid_argument("block_mean_rows: rows not divisible by block");
  }
  const Eigen::Index groups = a.rows() / block;
  Matrix out(groups, a.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    out.row(g) = a.value().middleRows(g * block, block).colwise().mean();
  }
  return detail::make_op(std::move(out), {a.node()}, [block, groups](Node& n) {
    Node& a = detail::parent(n, 0);
    Matrix g(a.value.rows(), a.value.cols());
    const double inv = 1.0 / static_cast<double>(block);
    for (Eigen::Index k = 0; k < groups; ++k) {
      g.middleRows(k * block, block) = n.grad.row(k).replicate(block, 1) * inv;
    }
    a.accumulate(g);
  });
}

// Row gather from an embedding table.
inline Var embedding(const Var& table, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw std::out_of_range("embedding: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return detail::make_op(std::move(out), {table.node()}, [ids](Node& n) {
    Node& t = detail::parent(n, 0);
    Matrix g = Matrix::Zero(t.value.rows(), t.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    t.accumulate(g);
  });
}

// out(i) = a(i, cols[i]); rows with cols[i] < 0 produce 0 and receive no gradient.
inline Var pick(const Var& a, const std::vector<int>& cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows()) {
    throw std::invalid_argument("pick: one column index per row required");
  }
  Matrix out = Matrix::Zero(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int c = cols[static_cast<std::size_t>(i)];
    if (c >= a.cols()) throw std::out_of_range("pick: column out of range");
    if (c >= 0) out(i, 0) = a.value()(i, c);
  }
  return detail::make_op(std::move(out), {a.node()}, [cols](Node& n) {
    Node& a = detail::parent(n, 0);
    Matrix g = Matrix::Zero(a.value.rows(), a.value.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const int c = cols[static_cast<std::size_t>(i)];
      if (c >= 0) g(i, c) = n.grad(i, 0);
    }
    a.accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Normalisations

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

inline Var softmax_rows(const Var& a) {
  Matrix y = softmax_rows_value(a.value());
  return detail::make_op(y, {a.node()}, [y](Node& n) {
    Matrix dot = (n.grad.cwiseProduct(y)).rowwise().sum();
    Matrix g = y.cwiseProduct(n.grad - dot.replicate(1, y.cols()));
    detail::parent(n, 0).accumulate(g);
  });
}

// Row-wise log-softmax. With mask_diagonal, entry (i, i) is excluded from
// the normaliser; its output is set to 0 and it receives no gradient.
inline Var log_softmax_rows(const Var& a, bool mask_diagonal = false) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (mask_diagonal && i == j) continue;
      m = std::max(m, x(i, j));
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (mask_diagonal && i == j) continue;
      z += std::exp(x(i, j) - m);
    }
    const double lse = m + std::log(z);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (mask_diagonal && i == j) {
        y(i, j) = 0.0;
        p(i, j) = 0.0;
      } else {
        y(i, j) = x(i, j) - lse;
        p(i, j) = std::exp(y(i, j));
      }
    }
  }
  return detail::make_op(std::move(y), {a.node()}, [p, mask_diagonal](Node& n) {
    Matrix gin = n.grad;
    if (mask_diagonal) {
      for (Eigen::Index i = 0; i < std::min(gin.rows(), gin.cols()); ++i) gin(i, i) = 0.0;
    }
    Matrix total = gin.rowwise().sum();
    Matrix g = gin - p.cwiseProduct(total.replicate(1, p.cols()));
    if (mask_diagonal) {
      for (Eigen::Index i = 0; i < std::min(g.rows(), g.cols()); ++i) g(i, i) = 0.0;
    }
    detail::parent(n, 0).accumulate(g);
  });
}

// Scales every row to unit Euclidean norm. A zero row has no direction.
inline Var row_l2_normalize(const Var& a) {
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) throw std::domain_error("row_l2_normalize: zero vector has no direction");
  }
  Matrix y = norms.cwiseInverse().asDiagonal() * x;
  return detail::make_op(y, {a.node()}, [y, norms](Node& n) {
    Vector dots = (n.grad.cwiseProduct(y)).rowwise().sum();
    Matrix g = n.grad - dots.asDiagonal() * y;
    g = norms.cwiseInverse().asDiagonal() * g;
    detail::parent(n, 0).accumulate(g);
  });
}

inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Matrix& x = a.value();
  const Eigen::Index c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1 x cols");
  }
  Vector mu = x.rowwise().mean();
  Matrix centered = x.colwise() - mu;
  Vector inv_std = ((centered.array().square().rowwise().sum() / static_cast<double>(c)) + eps)
                       .sqrt()
                       .inverse()
                       .matrix();
  Matrix xhat = inv_std.asDiagonal() * centered;
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return detail::make_op(std::move(out), {a.node(), gain.node(), bias.node()},
                         [xhat, inv_std](Node& n) {
                           Node& a = detail::parent(n, 0);
                           Node& g = detail::parent(n, 1);
                           Node& b = detail::parent(n, 2);
                           if (g.requires_grad) g.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
                           if (b.requires_grad) b.accumulate(n.grad.colwise().sum());
                           if (a.requires_grad) {
                             Matrix dxhat = (n.grad.array().rowwise() * g.value.row(0).array()).matrix();
                             const double inv_c = 1.0 / static_cast<double>(xhat.cols());
                             Vector m1 = dxhat.rowwise().sum() * inv_c;
                             Vector m2 = dxhat.cwiseProduct(xhat).rowwise().sum() * inv_c;
                             Matrix dx = dxhat;
                             dx.colwise() -= m1;
                             dx -= m2.asDiagonal() * xhat;
                             a.accumulate(inv_std.asDiagonal() * dx);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Block-diagonal scaled dot-product attention.
//
// Rows of q are grouped into blocks of `q_block`, rows of k/v into blocks of
// `kv_block`; block b of q attends only to block b of k/v. This batches the
// per-sample attention of both the region encoder (q_block = kv_block = R)
// and the decoder (q_block = 1, kv_block = R).

struct AttentionWeights {
  std::vector<Matrix> per_block;
};

inline Var block_attention(const Var& q, const Var& k, const Var& v, Eigen::Index q_block,
                           Eigen::Index kv_block, AttentionWeights* weights_out = nullptr) {
  if (q_block <= 0 || kv_block <= 0 || q.rows() % q_block != 0 || k.rows() % kv_block != 0) {
    throw std::invalid_argument("block_attention: rows not divisible by block size");
  }
  const Eigen::Index blocks = q.rows() / q_block;
  if (k.rows() / kv_block != blocks || v.rows() != k.rows() || q.cols() != k.cols()) {
    throw std::invalid_argument("block_attention: incompatible q/k/v shapes");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  auto attn = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(blocks));
  Matrix out(q.rows(), v.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    Matrix scores = q.value().middleRows(b * q_block, q_block) *
                    k.value().middleRows(b * kv_block, kv_block).transpose() * s;
    Matrix a = softmax_rows_value(scores);
    out.middleRows(b * q_block, q_block) = a * v.value().middleRows(b * kv_block, kv_block);
    (*attn)[static_cast<std::size_t>(b)] = std::move(a);
  }
  if (weights_out) weights_out->per_block = *attn;
  return detail::make_op(std::move(out), {q.node(), k.node(), v.node()},
                         [attn, q_block, kv_block, blocks, s](Node& n) {
                           Node& q = detail::parent(n, 0);
                           Node& k = detail::parent(n, 1);
                           Node& v = detail::parent(n, 2);
                           Matrix gq, gk, gv;
                           if (q.requires_grad) gq = Matrix::Zero(q.value.rows(), q.value.cols());
                           if (k.requires_grad) gk = Matrix::Zero(k.value.rows(), k.value.cols());
                           if (v.requires_grad) gv = Matrix::Zero(v.value.rows(), v.value.cols());
                           for (Eigen::Index b = 0; b < blocks; ++b) {
                             const Matrix& a = (*attn)[static_cast<std::size_t>(b)];
                             auto dout = n.grad.middleRows(b * q_block, q_block);
                             auto vb = v.value.middleRows(b * kv_block, kv_block);
                             if (v.requires_grad) gv.middleRows(b * kv_block, kv_block) += a.transpose() * dout;
                             if (!q.requires_grad && !k.requires_grad) continue;
                             Matrix da = dout * vb.transpose();
                             Matrix rowdot = da.cwiseProduct(a).rowwise().sum();
                             Matrix ds = a.cwiseProduct(da - rowdot.replicate(1, a.cols())) * s;
                             if (q.requires_grad) {
                               gq.middleRows(b * q_block, q_block) +=
                                   ds * k.value.middleRows(b * kv_block, kv_block);
                             }
                             if (k.requires_grad) {
                               gk.middleRows(b * kv_block, kv_block) +=
                                   ds.transpose() * q.value.middleRows(b * q_block, q_block);
                             }
                           }
                           if (q.requires_grad) q.accumulate(gq);
                           if (k.requires_grad) k.accumulate(gk);
                           if (v.requires_grad) v.accumulate(gv);
                         });
}

// ---------------------------------------------------------------------------
// Mixture selection over K candidate tensors with per-block weights.
//
// `weights` is (blocks x K); each candidate is (blocks*block x c). With
// `hard` set, the forward value of block b is exactly candidate hard[b]
// (no arithmetic), while the backward pass uses the soft weights as if the
// output were sum_i weights(b,i) * candidate_i (straight-through surrogate).
// Without `hard` the forward value is the soft mixture itself.

inline Var weighted_select(const std::vector<Var>& candidates, const Var& weights,
                           Eigen::Index block, const std::vector<int>* hard) {
  if (candidates.empty()) throw std::invalid_argument("weighted_select: no candidates");
  const Eigen::Index rows = candidates.front().rows();
  const Eigen::Index cols = candidates.front().cols();
  for (const auto& c : candidates) {
    if (c.rows() != rows || c.cols() != cols) {
      throw std::invalid_argument("weighted_select: candidates must share shape");
    }
  }
  if (block <= 0 || rows % block != 0) throw std::invalid_argument("weighted_select: bad block size");
  const Eigen::Index blocks = rows / block;
  const auto k = static_cast<Eigen::Index>(candidates.size());
  if (weights.rows() != blocks || weights.cols() != k) {
    throw std::invalid_argument("weighted_select: weights must be blocks x candidates");
  }
  if (hard && static_cast<Eigen::Index>(hard->size()) != blocks) {
    throw std::invalid_argument("weighted_select: one hard index per block required");
  }
  Matrix out(rows, cols);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    if (hard) {
      const int h = (*hard)[static_cast<std::size_t>(b)];
      if (h < 0 || h >= k) throw std::out_of_range("weighted_select: hard index out of range");
      out.middleRows(b * block, block) = candidates[static_cast<std::size_t>(h)].value().middleRows(b * block, block);
    } else {
      out.middleRows(b * block, block).setZero();
      for (Eigen::Index i = 0; i < k; ++i) {
        out.middleRows(b * block, block) +=
            weights.value()(b, i) * candidates[static_cast<std::size_t>(i)].value().middleRows(b * block, block);
      }
    }
  }
  std::vector<NodePtr> parents;
  for (const auto& c : candidates) parents.push_back(c.node());
  parents.push_back(weights.node());
  return detail::make_op(std::move(out), std::move(parents), [block, blocks, k](Node& n) {
    Node& w = *n.parents.back();
    Matrix gw;
    if (w.requires_grad) gw = Matrix::Zero(blocks, k);
    for (Eigen::Index i = 0; i < k; ++i) {
      Node& c = *n.parents[static_cast<std::size_t>(i)];
      Matrix gc;
      if (c.requires_grad) gc.resize(c.value.rows(), c.value.cols());
      for (Eigen::Index b = 0; b < blocks; ++b) {
        auto dout = n.grad.middleRows(b * block, block);
        if (c.requires_grad) gc.middleRows(b * block, block) = w.value(b, i) * dout;
        if (w.requires_grad) gw(b, i) = dout.cwiseProduct(c.value.middleRows(b * block, block)).sum();
      }
      if (c.requires_grad) c.accumulate(gc);
    }
    if (w.requires_grad) w.accumulate(gw);
  });
}

}  // namespace ag
}  // namespace mvcodot
