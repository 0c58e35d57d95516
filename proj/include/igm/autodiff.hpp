#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation as a node holding its forward value. Calling backward()
// walks the nodes in reverse creation order and accumulates gradients into the inputs.
// Nodes that depend only on constants are never differentiated. Parameter leaves remember
// which ParamStore entry they came from so gradients can be collected after the sweep.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "igm/error.hpp"

namespace igm::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Named parameter storage.

template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat<S> value;
  };

  int add(const std::string& name, Mat<S> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = int(entries_.size());
    entries_.push_back({name, std::move(value)});
    return int(entries_.size()) - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return it->second;
  }
  Mat<S>& value(int i) { return entries_[i].value; }
  const Mat<S>& value(int i) const { return entries_[i].value; }
  Mat<S>& operator[](const std::string& name) { return entries_[id(name)].value; }
  const Mat<S>& operator[](const std::string& name) const { return entries_[id(name)].value; }
  const std::string& name(int i) const { return entries_[i].name; }
  int size() const { return int(entries_.size()); }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += std::size_t(e.value.size());
    return n;
  }

  std::vector<Mat<S>> zeros_like() const {
    std::vector<Mat<S>> g;
    g.reserve(entries_.size());
    for (const auto& e : entries_) g.push_back(Mat<S>::Zero(e.value.rows(), e.value.cols()));
    return g;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<T>());
    return out;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.value.allFinite()) return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
};

template <typename S>
using Grads = std::vector<Mat<S>>;

// ---------------------------------------------------------------------------

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <typename S>
class Tape {
 public:
  using M = Mat<S>;
  using BackFn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var<S> constant(M v) { return push(std::move(v), false, nullptr); }
  Var<S> variable(M v) { return push(std::move(v), true, nullptr); }

  /// Leaf bound to a parameter; repeated requests for the same entry share one node.
  Var<S> param(const ParamStore<S>& store, int index) {
    if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return {this, it->second};
    Var<S> v = push(store.value(index), true, nullptr);
    nodes_[v.id].param = index;
    param_nodes_[index] = v.id;
    return v;
  }
  Var<S> param(const ParamStore<S>& store, const std::string& name) { return param(store, store.id(name)); }

  Var<S> push(M value, bool needs_grad, BackFn back) {
    nodes_.push_back({std::move(value), M(), std::move(back), -1, needs_grad});
    return {this, int(nodes_.size()) - 1};
  }

  const M& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  const M& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Adds a seed gradient to an arbitrary node before the sweep.
  void seed(Var<S> v, const M& g) { accumulate(v.id, g); }

  void backward() {
    for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.needs_grad && n.grad.size() != 0) n.back(*this, i);
    }
  }

  /// Backward from a scalar (1x1) root with d(root)/d(root) = 1.
  void backward(Var<S> root, S weight = S(1)) {
    if (root.rows() != 1 || root.cols() != 1) throw ConfigError("backward root must be a scalar");
    seed(root, M::Constant(1, 1, weight));
    backward();
  }

  /// Adds parameter gradients from the last sweep into `grads` (aligned with the store).
  void collect(Grads<S>& grads) const {
    for (const auto& n : nodes_)
      if (n.param >= 0 && n.grad.size() != 0) grads[n.param] += n.grad;
  }

 private:
  struct Node {
    M value;
    M grad;
    BackFn back;
    int param = -1;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Each returns a new node; shape errors throw ConfigError.

namespace detail {
template <typename S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (auto v : vs)
    if (v.tape->needs_grad(v.id)) return true;
  return false;
}
inline void check(bool ok, const char* op) {
  if (!ok) throw ConfigError(std::string("shape mismatch in ") + op);
}
}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check(a.cols() == b.rows(), "matmul");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::check(a.cols() == b.cols(), "matmul_nt");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value().transpose(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  const int ia = a.id;
  return a.tape->push(a.value().transpose(), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

/// Elementwise product.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                      [ia, ib](Tape<S>& t, int self) {
                        const auto& g = t.grad(self);
                        if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                        if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                      });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, detail::any_grad({a}), [ia, s](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

/// a + s (scalar broadcast)
template <typename S>
Var<S> shift(Var<S> a, S s) {
  const int ia = a.id;
  return a.tape->push(a.value().array() + s, detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
  });
}

/// a + row, where row is 1 x cols and broadcast over every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  const int ia = a.id, ir = row.id;
  Mat<S> out = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

/// a * row elementwise, row broadcast over every row of a.
template <typename S>
Var<S> mul_row(Var<S> a, Var<S> row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "mul_row");
  const int ia = a.id, ir = row.id;
  Mat<S> out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ir](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, Mat<S>(g.array().rowwise() * t.value(ir).row(0).array()));
    if (t.needs_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index n) {
  detail::check(start >= 0 && start + n <= a.rows(), "slice_rows");
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().middleRows(start, n), detail::any_grad({a}),
                      [ia, start, n, r, c](Tape<S>& t, int self) {
                        Mat<S> g = Mat<S>::Zero(r, c);
                        g.middleRows(start, n) = t.grad(self);
                        t.accumulate(ia, g);
                      });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index n) {
  detail::check(start >= 0 && start + n <= a.cols(), "slice_cols");
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().middleCols(start, n), detail::any_grad({a}),
                      [ia, start, n, r, c](Tape<S>& t, int self) {
                        Mat<S> g = Mat<S>::Zero(r, c);
                        g.middleCols(start, n) = t.grad(self);
                        t.accumulate(ia, g);
                      });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "concat_rows");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool grad = false;
  for (auto p : parts) {
    detail::check(p.cols() == cols, "concat_rows");
    rows += p.rows();
    grad = grad || p.tape->needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (auto p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.push_back({p.id, at});
    at += p.rows();
  }
  return parts.front().tape->push(std::move(out), grad, [spans](Tape<S>& t, int self) {
    for (auto [id, off] : spans)
      if (t.needs_grad(id)) t.accumulate(id, t.grad(self).middleRows(off, t.value(id).rows()));
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "concat_cols");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  bool grad = false;
  for (auto p : parts) {
    detail::check(p.rows() == rows, "concat_cols");
    cols += p.cols();
    grad = grad || p.tape->needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (auto p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.push_back({p.id, at});
    at += p.cols();
  }
  return parts.front().tape->push(std::move(out), grad, [spans](Tape<S>& t, int self) {
    for (auto [id, off] : spans)
      if (t.needs_grad(id)) t.accumulate(id, t.grad(self).middleCols(off, t.value(id).cols()));
  });
}

/// Row-major reinterpretation to a new shape with the same element count.
template <typename S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  detail::check(rows * cols == a.value().size(), "reshape");
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, r0, c0](Tape<S>& t, int self) {
    t.accumulate(ia, Eigen::Map<const Mat<S>>(t.grad(self).data(), r0, c0));
  });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    y.row(i).array() -= y.row(i).maxCoeff();
    y.row(i) = y.row(i).array().exp();
    y.row(i) /= y.row(i).sum();
  }
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Mat<S> dot = g.cwiseProduct(y).rowwise().sum();
    Mat<S> ga = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    t.accumulate(ia, ga);
  });
}

template <typename S>
Var<S> log_softmax_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S mx = y.row(i).maxCoeff();
    const S lse = mx + std::log((y.row(i).array() - mx).exp().sum());
    y.row(i).array() -= lse;
  }
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    Mat<S> p = t.value(self).array().exp();
    Mat<S> gs = g.rowwise().sum();
    t.accumulate(ia, Mat<S>(g - p.cwiseProduct(gs.replicate(1, g.cols()))));
  });
}

/// Per-row log(sum_j exp(a_ij)), returned as rows x 1.
template <typename S>
Var<S> logsumexp_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> y(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S mx = a.value().row(i).maxCoeff();
    y(i, 0) = mx + std::log((a.value().row(i).array() - mx).exp().sum());
  }
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    const auto& a = t.value(ia);
    Mat<S> p = (a - t.value(self).replicate(1, a.cols())).array().exp();
    t.accumulate(ia, Mat<S>(p.array().colwise() * t.grad(self).col(0).array()));
  });
}

/// Row-wise normalization to zero mean and unit variance (no affine part).
template <typename S>
Var<S> layer_norm_rows(Var<S> a, S eps = S(1e-6)) {
  const int ia = a.id;
  const Eigen::Index n = a.cols();
  Mat<S> y(a.rows(), n);
  Mat<S> inv_sd(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const S mu = a.value().row(i).mean();
    const auto centered = (a.value().row(i).array() - mu).eval();
    const S var = centered.square().mean();
    inv_sd(i, 0) = S(1) / std::sqrt(var + eps);
    y.row(i) = centered * inv_sd(i, 0);
  }
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia, inv_sd, n](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Mat<S> ga(g.rows(), n);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const S gm = g.row(i).mean();
      const S gy = g.row(i).cwiseProduct(y.row(i)).mean();
      ga.row(i) = (g.row(i).array() - gm - y.row(i).array() * gy) * inv_sd(i, 0);
    }
    t.accumulate(ia, ga);
  });
}

/// GELU, tanh approximation.
template <typename S>
Var<S> gelu(Var<S> a) {
  const int ia = a.id;
  const S k = S(0.7978845608028654);
  const S c = S(0.044715);
  Mat<S> y = a.value().unaryExpr([k, c](S x) { return S(0.5) * x * (S(1) + std::tanh(k * (x + c * x * x * x))); });
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia, k, c](Tape<S>& t, int self) {
    const auto& x = t.value(ia);
    Mat<S> d = x.unaryExpr([k, c](S v) {
      const S th = std::tanh(k * (v + c * v * v * v));
      return S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * k * (S(1) + S(3) * c * v * v);
    });
    t.accumulate(ia, Mat<S>(t.grad(self).cwiseProduct(d)));
  });
}

template <typename S>
Var<S> exp(Var<S> a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().exp(), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, Mat<S>(t.grad(self).cwiseProduct(t.value(self))));
  });
}

template <typename S>
Var<S> log(Var<S> a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().log(), detail::any_grad({a}), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, Mat<S>(t.grad(self).cwiseQuotient(t.value(ia))));
  });
}

/// Mean over rows: rows x cols -> 1 x cols.
template <typename S>
Var<S> mean_rows(Var<S> a) {
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  return a.tape->push(a.value().colwise().mean(), detail::any_grad({a}), [ia, r](Tape<S>& t, int self) {
    t.accumulate(ia, Mat<S>(t.grad(self).replicate(r, 1) / S(r)));
  });
}

/// Each row divided by its L2 norm.
template <typename S>
Var<S> l2_normalize_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> norms = a.value().rowwise().norm();
  if ((norms.array() <= S(0)).any()) throw NumericError("cannot normalize a zero row");
  Mat<S> y = a.value().array().colwise() / norms.col(0).array();
  return a.tape->push(std::move(y), detail::any_grad({a}), [ia, norms](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Mat<S> dot = g.cwiseProduct(y).rowwise().sum();
    Mat<S> ga = (g - y.cwiseProduct(dot.replicate(1, g.cols()))).array().colwise() / norms.col(0).array();
    t.accumulate(ia, ga);
  });
}

/// Sum of all entries, as a 1 x 1 node.
template <typename S>
Var<S> sum(Var<S> a) {
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(Mat<S>::Constant(1, 1, a.value().sum()), detail::any_grad({a}),
                      [ia, r, c](Tape<S>& t, int self) {
                        t.accumulate(ia, Mat<S>::Constant(r, c, t.grad(self)(0, 0)));
                      });
}

template <typename S>
Var<S> dot(Var<S> a, Var<S> b) {
  return sum(mul(a, b));
}

/// Square m x m -> m x (m - 1) with the diagonal entries removed from each row.
template <typename S>
Var<S> drop_diagonal(Var<S> a) {
  detail::check(a.rows() == a.cols() && a.rows() >= 2, "drop_diagonal");
  const int ia = a.id;
  const Eigen::Index m = a.rows();
  Mat<S> out(m, m - 1);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0, k = 0; j < m; ++j)
      if (j != i) out(i, k++) = a.value()(i, j);
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, m](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    Mat<S> ga = Mat<S>::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0, k = 0; j < m; ++j)
        if (j != i) ga(i, j) = g(i, k++);
    t.accumulate(ia, ga);
  });
}

/// x * W + b with b a 1 x out row.
template <typename S>
Var<S> affine(Var<S> x, Var<S> w, Var<S> b) {
  return add_row(matmul(x, w), b);
}

}  // namespace igm::ad
