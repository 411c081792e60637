#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pretext/common.hpp"
#include "pretext/numerics/tensor.hpp"

namespace pretext {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode tape. One tape is built per batch and thrown
// away after the optimizer step; nodes are appended in topological order by
// construction, so the backward sweep is a single reverse walk.
template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    const char* op;
    std::vector<int> inputs;
    T value;
    T grad;  // empty until a gradient flows here
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var leaf(T value, bool requires_grad) {
    return push("leaf", {}, std::move(value), nullptr, requires_grad);
  }

  Var push(const char* op, std::vector<int> inputs, T value, BackwardFn backward,
           bool requires_grad) {
    for (int in : inputs) {
      if (in < 0 || in >= static_cast<int>(nodes_.size()))
        throw Error(std::string(op) + ": input node out of order");
    }
    if (check_finite_ && !value.allFinite())
      throw NumericError(std::string(op) + ": produced non-finite values " +
                         shape_str(value));
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), T(), requires_grad,
                          std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const T& value(Var v) const { return nodes_.at(v.id).value; }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  size_t size() const { return nodes_.size(); }

  void set_check_finite(bool on) { check_finite_ = on; }

  // Gradient of the last backward() w.r.t. v. Zero for parameters the loss
  // never reached (disconnected subgraphs).
  const T& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) n.grad = T::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(int id, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = T::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
  }

  void backward(Var loss) {
    Node& ln = nodes_.at(loss.id);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.value));
    ln.grad = T::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

 private:
  std::vector<Node> nodes_;
  bool check_finite_ = true;
};

namespace detail {
template <typename Scalar>
void check_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Forward ops. Each appends one node; gradients are accumulated into inputs
// during the reverse sweep.
// ---------------------------------------------------------------------------

template <typename Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows())
    throw ShapeError("matmul: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  Tensor<Scalar> v = A * B;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push("matmul", {a.id, b.id}, std::move(v),
                [a, b](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(a.id, g * tp.value(b).transpose());
                  tp.accumulate(b.id, tp.value(a).transpose() * g);
                },
                rg);
}

// C = A * B^T. Used for attention scores and the tied masked-token head.
template <typename Scalar>
Var matmul_nt(Tape<Scalar>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.cols())
    throw ShapeError("matmul_nt: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  Tensor<Scalar> v = A * B.transpose();
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push("matmul_nt", {a.id, b.id}, std::move(v),
                [a, b](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(a.id, g * tp.value(b));
                  tp.accumulate(b.id, g.transpose() * tp.value(a));
                },
                rg);
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::check_same_shape<Scalar>("add", A, B);
  Tensor<Scalar> v = A + B;
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push("add", {a.id, b.id}, std::move(v),
                [a, b](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(a.id, g);
                  tp.accumulate(b.id, g);
                },
                rg);
}

// [n x c] + broadcast row [1 x c].
template <typename Scalar>
Var add_rowvec(Tape<Scalar>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (B.rows() != 1 || A.cols() != B.cols())
    throw ShapeError("add_rowvec: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  Tensor<Scalar> v = A.rowwise() + B.row(0);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push("add_rowvec", {a.id, b.id}, std::move(v),
                [a, b](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(a.id, g);
                  tp.accumulate(b.id, g.colwise().sum());
                },
                rg);
}

template <typename Scalar>
Var mul(Tape<Scalar>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::check_same_shape<Scalar>("mul", A, B);
  Tensor<Scalar> v = A.cwiseProduct(B);
  bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push("mul", {a.id, b.id}, std::move(v),
                [a, b](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(a.id, g.cwiseProduct(tp.value(b)));
                  tp.accumulate(b.id, g.cwiseProduct(tp.value(a)));
                },
                rg);
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var a, Scalar s) {
  Tensor<Scalar> v = t.value(a) * s;
  return t.push("scale", {a.id}, std::move(v),
                [a, s](Tape<Scalar>& tp, int self) {
                  tp.accumulate(a.id, tp.node(Var{self}).grad * s);
                },
                t.requires_grad(a));
}

// Exact GELU, x * Phi(x).
template <typename Scalar>
Var gelu(Tape<Scalar>& t, Var a) {
  const auto& A = t.value(a);
  const Scalar inv_sqrt2 = Scalar(0.7071067811865475);
  Tensor<Scalar> v = A.unaryExpr([inv_sqrt2](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
  return t.push("gelu", {a.id}, std::move(v),
                [a, inv_sqrt2](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  const auto& x = tp.value(a);
                  const Scalar inv_sqrt2pi = Scalar(0.3989422804014327);
                  Tensor<Scalar> d = x.unaryExpr([inv_sqrt2, inv_sqrt2pi](Scalar xi) {
                    Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(xi * inv_sqrt2));
                    Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * xi * xi);
                    return cdf + xi * pdf;
                  });
                  tp.accumulate(a.id, g.cwiseProduct(d));
                },
                t.requires_grad(a));
}

// Per-row normalization followed by the learned affine (gamma, beta are
// [1 x c]). Constant rows come out all zeros before the affine: the variance
// epsilon keeps the division finite.
template <typename Scalar>
Var layer_norm(Tape<Scalar>& t, Var x, Var gamma, Var beta, Scalar eps) {
  const auto& X = t.value(x);
  const auto& G = t.value(gamma);
  const auto& B = t.value(beta);
  if (G.rows() != 1 || B.rows() != 1 || G.cols() != X.cols() || B.cols() != X.cols())
    throw ShapeError("layer_norm: affine shape mismatch " + shape_str(X) + " vs " +
                     shape_str(G) + ", " + shape_str(B));
  const Eigen::Index n = X.rows(), c = X.cols();
  Tensor<Scalar> xhat(n, c);
  Tensor<Scalar> inv_std(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar mu = X.row(i).mean();
    Scalar var = (X.row(i).array() - mu).square().mean();
    Scalar inv = Scalar(1) / std::sqrt(var + eps);
    inv_std(i, 0) = inv;
    xhat.row(i) = (X.row(i).array() - mu) * inv;
  }
  Tensor<Scalar> v = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push("layer_norm", {x.id, gamma.id, beta.id}, std::move(v),
                [x, gamma, beta, xhat, inv_std](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate(gamma.id, g.cwiseProduct(xhat).colwise().sum());
                  tp.accumulate(beta.id, g.colwise().sum());
                  if (!tp.requires_grad(x)) return;
                  const auto& G = tp.value(gamma);
                  const Eigen::Index n = g.rows(), c = g.cols();
                  Tensor<Scalar> dx(n, c);
                  for (Eigen::Index i = 0; i < n; ++i) {
                    auto dxhat = (g.row(i).array() * G.row(0).array()).eval();
                    Scalar m1 = dxhat.mean();
                    Scalar m2 = (dxhat * xhat.row(i).array()).mean();
                    dx.row(i) =
                        inv_std(i, 0) * (dxhat - m1 - xhat.row(i).array() * m2);
                  }
                  tp.accumulate(x.id, dx);
                },
                rg);
}

// Row-wise softmax; additive_mask (if given) is a constant added to the
// logits before normalization (e.g. -1e9 on padding keys).
template <typename Scalar>
Var softmax_rows(Tape<Scalar>& t, Var x, const Tensor<Scalar>* additive_mask = nullptr) {
  Tensor<Scalar> z = t.value(x);
  if (additive_mask != nullptr) {
    detail::check_same_shape<Scalar>("softmax", z, *additive_mask);
    z += *additive_mask;
  }
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Scalar mx = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - mx).exp();
    z.row(i) /= z.row(i).sum();
  }
  return t.push("softmax", {x.id}, std::move(z),
                [x](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  const auto& y = tp.node(Var{self}).value;
                  Tensor<Scalar> dot = g.cwiseProduct(y).rowwise().sum();
                  Tensor<Scalar> dx =
                      y.cwiseProduct(g - dot.replicate(1, g.cols()));
                  tp.accumulate(x.id, dx);
                },
                t.requires_grad(x));
}

// Gathers table rows by id. table_name is only used in error messages.
template <typename Scalar>
Var embedding_lookup(Tape<Scalar>& t, Var table, const std::vector<int>& ids,
                     const char* table_name = "embedding") {
  const auto& T = t.value(table);
  Tensor<Scalar> v(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      throw ShapeError(std::string("embedding_lookup: id ") + std::to_string(ids[i]) +
                       " out of range [0," + std::to_string(T.rows()) + ") in table " +
                       table_name);
    v.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  return t.push("embedding_lookup", {table.id}, std::move(v),
                [table, ids](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  for (size_t i = 0; i < ids.size(); ++i)
                    tp.accumulate_row(table.id, ids[i],
                                      g.row(static_cast<Eigen::Index>(i)));
                },
                t.requires_grad(table));
}

// Mean negative log-likelihood over the rows selected by mask. labels[i] is
// ignored wherever mask[i] is false.
template <typename Scalar>
Var cross_entropy(Tape<Scalar>& t, Var logits, const std::vector<int>& labels,
                  const std::vector<uint8_t>& mask) {
  const auto& L = t.value(logits);
  const size_t n = static_cast<size_t>(L.rows());
  if (labels.size() != n || mask.size() != n)
    throw ShapeError("cross_entropy: labels/mask length " + std::to_string(labels.size()) +
                     "/" + std::to_string(mask.size()) + " vs logits " + shape_str(L));
  Tensor<Scalar> probs(L.rows(), L.cols());
  Scalar total = 0;
  long count = 0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    Scalar mx = L.row(i).maxCoeff();
    Tensor<Scalar> e = (L.row(i).array() - mx).exp();
    Scalar z = e.sum();
    probs.row(i) = e / z;
    if (!mask[static_cast<size_t>(i)]) continue;
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= L.cols())
      throw ShapeError("cross_entropy: label " + std::to_string(lab) +
                       " out of range [0," + std::to_string(L.cols()) + ")");
    total += -(L(i, lab) - mx - std::log(z));
    ++count;
  }
  if (count == 0) throw DataError("cross_entropy: mask selects no positions");
  Tensor<Scalar> v(1, 1);
  v(0, 0) = total / Scalar(count);
  return t.push("cross_entropy", {logits.id}, std::move(v),
                [logits, labels, mask, probs, count](Tape<Scalar>& tp, int self) {
                  Scalar g = tp.node(Var{self}).grad(0, 0) / Scalar(count);
                  Tensor<Scalar> dl = Tensor<Scalar>::Zero(probs.rows(), probs.cols());
                  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                    if (!mask[static_cast<size_t>(i)]) continue;
                    dl.row(i) = probs.row(i) * g;
                    dl(i, labels[static_cast<size_t>(i)]) -= g;
                  }
                  tp.accumulate(logits.id, dl);
                },
                t.requires_grad(logits));
}

template <typename Scalar>
Var slice_cols(Tape<Scalar>& t, Var x, int c0, int n) {
  const auto& X = t.value(x);
  if (c0 < 0 || n <= 0 || c0 + n > X.cols())
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + n) +
                     ") out of " + shape_str(X));
  Tensor<Scalar> v = X.middleCols(c0, n);
  return t.push("slice_cols", {x.id}, std::move(v),
                [x, c0, n](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate_cols(x.id, c0, n, g);
                },
                t.requires_grad(x));
}

template <typename Scalar>
Var concat_cols(Tape<Scalar>& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  Eigen::Index rows = t.value(xs[0]).rows();
  Eigen::Index cols = 0;
  bool rg = false;
  std::vector<int> ids;
  for (Var v : xs) {
    if (t.value(v).rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + shape_str(t.value(xs[0])) + " vs " +
                       shape_str(t.value(v)));
    cols += t.value(v).cols();
    rg = rg || t.requires_grad(v);
    ids.push_back(v.id);
  }
  Tensor<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  for (Var v : xs) {
    out.middleCols(c, t.value(v).cols()) = t.value(v);
    c += t.value(v).cols();
  }
  return t.push("concat_cols", ids, std::move(out),
                [xs](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  Eigen::Index c = 0;
                  for (Var v : xs) {
                    Eigen::Index w = tp.value(v).cols();
                    tp.accumulate(v.id, g.middleCols(c, w));
                    c += w;
                  }
                },
                rg);
}

template <typename Scalar>
Var select_row(Tape<Scalar>& t, Var x, int r) {
  const auto& X = t.value(x);
  if (r < 0 || r >= X.rows())
    throw ShapeError("select_row: row " + std::to_string(r) + " out of " + shape_str(X));
  Tensor<Scalar> v = X.row(r);
  return t.push("select_row", {x.id}, std::move(v),
                [x, r](Tape<Scalar>& tp, int self) {
                  const auto& g = tp.node(Var{self}).grad;
                  tp.accumulate_row(x.id, r, g.row(0));
                },
                t.requires_grad(x));
}

template <typename Scalar>
Var reduce_sum(Tape<Scalar>& t, Var x) {
  Tensor<Scalar> v(1, 1);
  v(0, 0) = t.value(x).sum();
  return t.push("reduce_sum", {x.id}, std::move(v),
                [x](Tape<Scalar>& tp, int self) {
                  Scalar g = tp.node(Var{self}).grad(0, 0);
                  const auto& X = tp.value(x);
                  tp.accumulate(x.id,
                                (Tensor<Scalar>::Ones(X.rows(), X.cols()) * g).eval());
                },
                t.requires_grad(x));
}

}  // namespace pretext
