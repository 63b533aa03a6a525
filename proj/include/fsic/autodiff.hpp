#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
// A Tape records each op's output and a closure that pushes the output
// gradient back to its inputs. Parameters live outside the tape in a
// ParameterSet and receive their gradients through leaf nodes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fsic {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Numerically stable logistic function.
template <class Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) {
    const Scalar z = std::exp(-x);
    return Scalar(1) / (Scalar(1) + z);
  }
  const Scalar z = std::exp(x);
  return z / (Scalar(1) + z);
}

template <class Scalar>
struct Tensor {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;
};

/// Named tensors addressed by index. Indices are stable for the lifetime of
/// the set, so models store indices rather than references.
template <class Scalar>
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix<Scalar> value, bool trainable = true) {
    if (find(name) != npos) throw std::invalid_argument("duplicate parameter '" + name + "'");
    Tensor<Scalar> t;
    t.name = std::move(name);
    t.grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    t.value = std::move(value);
    t.trainable = trainable;
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return i;
    }
    return npos;
  }

  Tensor<Scalar>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<Scalar>& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t size() const { return tensors_.size(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  void zero_grad() {
    for (auto& t : tensors_) t.grad.setZero();
  }

  std::size_t scalar_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& t : tensors_) {
      if (!trainable_only || t.trainable) n += static_cast<std::size_t>(t.value.size());
    }
    return n;
  }

  /// Copies values only; gradients are left untouched.
  void assign_values(const ParameterSet& other) {
    if (other.size() != size()) throw std::invalid_argument("parameter set shape mismatch");
    for (std::size_t i = 0; i < size(); ++i) tensors_[i].value = other.tensors_[i].value;
  }

 private:
  std::vector<Tensor<Scalar>> tensors_;
};

template <class Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;

  struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
  };

  /// With recording off the tape only computes values (evaluation mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }

  const Mat& value(Var v) const {
    const auto& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }
  Scalar scalar(Var v) const { return value(v)(0, 0); }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  Var constant(Mat m) { return push(std::move(m)); }

  /// Leaf bound to a parameter tensor; gradients accumulate into t.grad.
  Var param(Tensor<Scalar>& t) {
    Var out = push_external(&t.value);
    if (record_ && t.trainable) {
      auto* tp = &t;
      on_backward(out, [this, out, tp] { tp->grad += nodes_[out.id].grad; });
    }
    return out;
  }

  /// Rows of an embedding table; the backward pass scatters into t.grad.
  Var gather_rows(Tensor<Scalar>& t, std::span<const int> ids) {
    Mat m(static_cast<Eigen::Index>(ids.size()), t.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = t.value.row(ids[i]);
    Var out = push(std::move(m));
    if (record_ && t.trainable) {
      auto* tp = &t;
      std::vector<int> idx(ids.begin(), ids.end());
      on_backward(out, [this, out, tp, idx = std::move(idx)] {
        const auto& g = nodes_[out.id].grad;
        for (std::size_t i = 0; i < idx.size(); ++i) tp->grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      });
    }
    return out;
  }

  Var matmul(Var a, Var b) {
    Var out = push(value(a) * value(b));
    if (record_) on_backward(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      acc(a, g * value(b).transpose());
      acc(b, value(a).transpose() * g);
    });
    return out;
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Var out = push(value(a) * value(b).transpose());
    if (record_) on_backward(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      acc(a, g * value(b));
      acc(b, g.transpose() * value(a));
    });
    return out;
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var out = push(value(a) + value(b));
    if (record_) on_backward(out, [this, a, b, out] {
      acc(a, nodes_[out.id].grad);
      acc(b, nodes_[out.id].grad);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Var out = push(value(a) - value(b));
    if (record_) on_backward(out, [this, a, b, out] {
      acc(a, nodes_[out.id].grad);
      acc(b, -nodes_[out.id].grad);
    });
    return out;
  }

  /// Element-wise product.
  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Var out = push(value(a).cwiseProduct(value(b)));
    if (record_) on_backward(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      acc(a, g.cwiseProduct(value(b)));
      acc(b, g.cwiseProduct(value(a)));
    });
    return out;
  }

  /// Adds a 1 x c row to every row of a.
  Var add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
      throw std::invalid_argument("add_row: shape mismatch");
    }
    Mat m = value(a);
    m.rowwise() += value(row).row(0);
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, a, row, out] {
      const auto& g = nodes_[out.id].grad;
      acc(a, g);
      acc(row, g.colwise().sum());
    });
    return out;
  }

  Var scale(Var a, Scalar s) {
    Var out = push(value(a) * s);
    if (record_) on_backward(out, [this, a, s, out] { acc(a, nodes_[out.id].grad * s); });
    return out;
  }

  Var tanh(Var a) {
    Var out = push(value(a).array().tanh().matrix());
    if (record_) on_backward(out, [this, a, out] {
      const auto& y = nodes_[out.id].value;
      acc(a, (nodes_[out.id].grad.array() * (Scalar(1) - y.array().square())).matrix());
    });
    return out;
  }

  Var sigmoid(Var a) {
    Mat m = value(a).unaryExpr([](Scalar x) { return fsic::sigmoid(x); });
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, a, out] {
      const auto& y = nodes_[out.id].value;
      acc(a, (nodes_[out.id].grad.array() * y.array() * (Scalar(1) - y.array())).matrix());
    });
    return out;
  }

  /// Element-wise |a|; the subgradient at 0 is taken as 0.
  Var abs(Var a) {
    Var out = push(value(a).cwiseAbs());
    if (record_) on_backward(out, [this, a, out] {
      Mat sign = value(a).unaryExpr([](Scalar x) { return Scalar((x > 0) - (x < 0)); });
      acc(a, nodes_[out.id].grad.cwiseProduct(sign));
    });
    return out;
  }

  Var softmax_rows(Var a) {
    Mat m = value(a);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const Scalar mx = m.row(r).maxCoeff();
      m.row(r) = (m.row(r).array() - mx).exp().matrix();
      m.row(r) /= m.row(r).sum();
    }
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, a, out] {
      const auto& y = nodes_[out.id].value;
      const auto& g = nodes_[out.id].grad;
      Mat gi(y.rows(), y.cols());
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const Scalar dotp = g.row(r).dot(y.row(r));
        gi.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dotp).matrix());
      }
      acc(a, gi);
    });
    return out;
  }

  Var row(Var a, Eigen::Index r) {
    Var out = push(value(a).row(r));
    if (record_) on_backward(out, [this, a, r, out] {
      Mat g = Mat::Zero(value(a).rows(), value(a).cols());
      g.row(r) = nodes_[out.id].grad;
      acc(a, g);
    });
    return out;
  }

  /// Horizontal concatenation of same-height blocks.
  Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::vector<Var>(parts)); }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const auto rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (auto p : parts) {
      if (value(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Mat m(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
      m.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, parts, out] {
      Eigen::Index at2 = 0;
      for (auto p : parts) {
        const auto c = value(p).cols();
        acc(p, nodes_[out.id].grad.middleCols(at2, c));
        at2 += c;
      }
    });
    return out;
  }

  /// Sum of all entries, as 1 x 1.
  Var sum(Var a) {
    Mat m(1, 1);
    m(0, 0) = value(a).sum();
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, a, out] {
      acc(a, Mat::Constant(value(a).rows(), value(a).cols(), nodes_[out.id].grad(0, 0)));
    });
    return out;
  }

  /// Column sums, as 1 x c.
  Var sum_rows(Var a) {
    Var out = push(value(a).colwise().sum());
    if (record_) on_backward(out, [this, a, out] {
      Mat g = nodes_[out.id].grad.replicate(value(a).rows(), 1);
      acc(a, g);
    });
    return out;
  }

  /// Row-wise dot products of two n x c matrices, as n x 1.
  Var dot_rows(Var a, Var b) {
    check_same(a, b, "dot_rows");
    Mat m = value(a).cwiseProduct(value(b)).rowwise().sum();
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, a, b, out] {
      const auto& g = nodes_[out.id].grad;
      acc(a, (value(b).array().colwise() * g.col(0).array()).matrix());
      acc(b, (value(a).array().colwise() * g.col(0).array()).matrix());
    });
    return out;
  }

  /// Vertical stacking of same-width blocks.
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const auto cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    for (auto p : parts) {
      if (value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += value(p).rows();
    }
    Mat m(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
      m.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, parts, out] {
      Eigen::Index at2 = 0;
      for (auto p : parts) {
        const auto r = value(p).rows();
        acc(p, nodes_[out.id].grad.middleRows(at2, r));
        at2 += r;
      }
    });
    return out;
  }

  /// Squared Euclidean distance from the single row q (1 x c) to each row of
  /// p (n x c), returned as 1 x n.
  Var sq_distances(Var q, Var p) {
    if (value(q).rows() != 1 || value(q).cols() != value(p).cols()) {
      throw std::invalid_argument("sq_distances: shape mismatch");
    }
    Mat diff = value(p).rowwise() - value(q).row(0);
    Mat m = diff.rowwise().squaredNorm().transpose();
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, q, p, out] {
      Mat d = value(p).rowwise() - value(q).row(0);
      const auto& g = nodes_[out.id].grad;  // 1 x n
      Mat gp = (d.array().colwise() * (Scalar(2) * g.row(0).transpose()).array()).matrix();
      acc(p, gp);
      acc(q, -gp.colwise().sum());
    });
    return out;
  }

  /// Mean binary cross-entropy of scores (any shape) against 0/1 labels.
  /// Scores are clamped to [eps, 1 - eps]; the clamp passes no gradient.
  Var bce_mean(Var scores, const std::vector<Scalar>& labels, Scalar eps) {
    const auto& s = value(scores);
    if (static_cast<std::size_t>(s.size()) != labels.size() || labels.empty()) {
      throw std::invalid_argument("bce_mean: " + std::to_string(labels.size()) + " labels for " +
                                  std::to_string(s.size()) + " scores");
    }
    const auto n = static_cast<Scalar>(labels.size());
    Scalar total = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      const Scalar c = std::clamp(s.data()[i], eps, Scalar(1) - eps);
      const Scalar y = labels[static_cast<std::size_t>(i)];
      total -= y * std::log(c) + (Scalar(1) - y) * std::log(Scalar(1) - c);
    }
    Mat m(1, 1);
    m(0, 0) = total / n;
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, scores, labels, eps, n, out] {
      const auto& sv = value(scores);
      const Scalar g = nodes_[out.id].grad(0, 0);
      Mat gi = Mat::Zero(sv.rows(), sv.cols());
      for (Eigen::Index i = 0; i < sv.size(); ++i) {
        const Scalar x = sv.data()[i];
        if (x < eps || x > Scalar(1) - eps) continue;
        const Scalar y = labels[static_cast<std::size_t>(i)];
        gi.data()[i] = -g * (y / x - (Scalar(1) - y) / (Scalar(1) - x)) / n;
      }
      acc(scores, gi);
    });
    return out;
  }

  /// -log softmax(logits)[target] for a 1 x n row of logits.
  Var nll_softmax(Var logits, Eigen::Index target) {
    const auto& z = value(logits);
    if (z.rows() != 1 || target < 0 || target >= z.cols()) throw std::invalid_argument("nll_softmax: bad target");
    const Scalar mx = z.maxCoeff();
    const Scalar lse = mx + std::log((z.array() - mx).exp().sum());
    Mat m(1, 1);
    m(0, 0) = lse - z(0, target);
    Var out = push(std::move(m));
    if (record_) on_backward(out, [this, logits, target, lse, out] {
      const auto& zz = value(logits);
      Mat p = (zz.array() - lse).exp().matrix();
      p(0, target) -= Scalar(1);
      acc(logits, p * nodes_[out.id].grad(0, 0));
    });
    return out;
  }

  /// Runs the recorded closures in reverse, seeding d(root)/d(root) = seed.
  void backward(Var root, Scalar seed = Scalar(1)) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    auto& r = nodes_[root.id];
    ensure_grad(root);
    r.grad.array() += seed;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward();
    }
  }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    std::function<void()> backward;
  };

  Var push(Mat m) {
    Node n;
    n.value = std::move(m);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push_external(const Mat* m) {
    Node n;
    n.external = m;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void on_backward(Var v, std::function<void()> fn) { nodes_[v.id].backward = std::move(fn); }

  void ensure_grad(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      const auto& val = value(v);
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
  }

  template <class Expr>
  void acc(Var v, const Expr& g) {
    ensure_grad(v);
    nodes_[v.id].grad += g;
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace fsic
