#pragma once

// Reverse-mode differentiation over dense row-major matrices. A Tape records
// one forward pass; backward() walks the nodes in reverse creation order.
// Parameters live outside the tape and receive their gradients in place, so
// several tapes (one per example) can accumulate into the same parameters.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deskvqa/util/error.hpp"

namespace deskvqa::nn {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Parameter {
  Matrix<S> value;
  Matrix<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Named parameters, iterated in name order.
template <class S>
class ParamStore {
 public:
  Parameter<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw Error(ErrorKind::InvalidConfig, "duplicate parameter " + name);
    it->second.value.setZero(rows, cols);
    it->second.grad.setZero(rows, cols);
    return it->second;
  }

  Parameter<S>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorKind::ShapeError, "unknown parameter " + name);
    return it->second;
  }
  const Parameter<S>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error(ErrorKind::ShapeError, "unknown parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.contains(name); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter<S>> params_;
};

struct Var {
  int id = -1;
};

template <class S>
class Tape {
 public:
  using Mat = Matrix<S>;

  Var constant(Mat value) { return push(std::move(value), false); }

  /// Leaf that reads the parameter value without copying and accumulates
  /// into the parameter gradient.
  Var param(Parameter<S>& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf that reads the parameter value and never receives a gradient.
  Var frozen(const Parameter<S>& p) {
    Node n;
    n.ref = &p.value;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  Mat& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.param) return n.param->grad;
    if (n.grad.size() == 0) n.grad.setZero(value(v).rows(), value(v).cols());
    return n.grad;
  }

  /// Records an op result. backward receives the tape and the gradient of
  /// the result; it runs only when some input requires a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, std::function<void(Tape&, const Mat&)> backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(Mat value, std::span<const Var> inputs, std::function<void(Tape&, const Mat&)> backward) {
    bool needs = false;
    for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
    Var out = push(std::move(value), needs);
    if (needs) nodes_[out.id].backward = std::move(backward);
    return out;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every leaf.
  void backward(Var out) {
    if (value(out).size() != 1) throw Error(ErrorKind::ShapeError, "backward needs a scalar output");
    grad(out).setOnes();
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    const Mat* ref = nullptr;
    Parameter<S>* param = nullptr;
    bool requires_grad = false;
    std::function<void(Tape&, const Mat&)> backward;
  };

  Var push(Mat value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------

template <class S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows()) throw Error(ErrorKind::ShapeError, "matmul inner dimensions differ");
  Matrix<S> C = A * B;
  return t.record(std::move(C), {a, b}, [a, b](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
  });
}

/// a * b^T
template <class S>
Var matmul_bt(Tape<S>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.cols()) throw Error(ErrorKind::ShapeError, "matmul_bt inner dimensions differ");
  Matrix<S> C = A * B.transpose();
  return t.record(std::move(C), {a, b}, [a, b](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.requires_grad(a)) tp.grad(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad(b).noalias() += g.transpose() * tp.value(a);
  });
}

template <class S>
Var add(Tape<S>& t, Var a, Var b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw Error(ErrorKind::ShapeError, "add shapes differ");
  }
  Matrix<S> C = t.value(a) + t.value(b);
  return t.record(std::move(C), {a, b}, [a, b](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

/// Adds a 1 x n row to every row of a.
template <class S>
Var add_row(Tape<S>& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  if (R.rows() != 1 || R.cols() != A.cols()) throw Error(ErrorKind::ShapeError, "add_row width mismatch");
  Matrix<S> C = A.rowwise() + R.row(0);
  return t.record(std::move(C), {a, row}, [a, row](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.requires_grad(a)) tp.grad(a) += g;
    if (tp.requires_grad(row)) tp.grad(row) += g.colwise().sum();
  });
}

/// x W + b
template <class S>
Var linear(Tape<S>& t, Var x, Var w, Var b) {
  return add_row(t, matmul(t, x, w), b);
}

template <class S>
Var scale(Tape<S>& t, Var a, S s) {
  Matrix<S> C = t.value(a) * s;
  return t.record(std::move(C), {a}, [a, s](Tape<S>& tp, const Matrix<S>& g) { tp.grad(a) += g * s; });
}

/// tanh-approximated GELU.
template <class S>
Var gelu(Tape<S>& t, Var a) {
  const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S c = static_cast<S>(0.044715);
  const auto& X = t.value(a);
  Matrix<S> Y(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    S x = X.data()[i];
    Y.data()[i] = S(0.5) * x * (S(1) + std::tanh(k * (x + c * x * x * x)));
  }
  return t.record(std::move(Y), {a}, [a, k, c](Tape<S>& tp, const Matrix<S>& g) {
    const auto& X = tp.value(a);
    auto& G = tp.grad(a);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      S x = X.data()[i];
      S th = std::tanh(k * (x + c * x * x * x));
      S dth = (S(1) - th * th) * k * (S(1) + S(3) * c * x * x);
      G.data()[i] += g.data()[i] * (S(0.5) * (S(1) + th) + S(0.5) * x * dth);
    }
  });
}

template <class S>
Var tanh(Tape<S>& t, Var a) {
  Matrix<S> Y = t.value(a).array().tanh().matrix();
  Matrix<S> saved = Y;
  return t.record(std::move(Y), {a}, [a, saved = std::move(saved)](Tape<S>& tp, const Matrix<S>& g) {
    tp.grad(a).array() += g.array() * (S(1) - saved.array().square());
  });
}

/// Row-wise layer normalization followed by gamma/beta (both 1 x n).
template <class S>
Var layer_norm(Tape<S>& t, Var x, Var g, Var b, S eps = S(1e-5)) {
  const auto& X = t.value(x);
  Matrix<S> xhat(X.rows(), X.cols());
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    S mean = X.row(r).mean();
    S var = (X.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mean) * inv_std(r);
  }
  const auto& gamma = t.value(g);
  const auto& beta = t.value(b);
  if (gamma.cols() != X.cols() || beta.cols() != X.cols()) throw Error(ErrorKind::ShapeError, "layer_norm width");
  Matrix<S> Y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  return t.record(std::move(Y), {x, g, b},
                  [x, g, b, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& tp, const Matrix<S>& G) {
                    if (tp.requires_grad(g)) tp.grad(g) += (G.array() * xhat.array()).colwise().sum().matrix();
                    if (tp.requires_grad(b)) tp.grad(b) += G.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    const auto& gam = tp.value(g);
                    auto& dX = tp.grad(x);
                    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                      Eigen::Array<S, 1, Eigen::Dynamic> dxhat = G.row(r).array() * gam.row(0).array();
                      S mean_d = dxhat.mean();
                      S mean_dx = (dxhat * xhat.row(r).array()).mean();
                      dX.row(r).array() += inv_std(r) * (dxhat - mean_d - xhat.row(r).array() * mean_dx);
                    }
                  });
}

/// Softmax over each row restricted to columns with key_mask[c] = true;
/// masked columns get probability exactly 0.
template <class S>
Var masked_softmax(Tape<S>& t, Var a, const std::vector<char>& key_mask) {
  const auto& A = t.value(a);
  if (static_cast<Eigen::Index>(key_mask.size()) != A.cols()) {
    throw Error(ErrorKind::ShapeError, "attention mask width mismatch");
  }
  Matrix<S> P = Matrix<S>::Zero(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < A.cols(); ++c) {
      if (key_mask[c]) mx = std::max(mx, A(r, c));
    }
    S sum = 0;
    for (Eigen::Index c = 0; c < A.cols(); ++c) {
      if (key_mask[c]) {
        P(r, c) = std::exp(A(r, c) - mx);
        sum += P(r, c);
      }
    }
    P.row(r) /= sum;
  }
  Matrix<S> saved = P;
  return t.record(std::move(P), {a}, [a, saved = std::move(saved)](Tape<S>& tp, const Matrix<S>& g) {
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = (g.array() * saved.array()).rowwise().sum();
    tp.grad(a).array() += saved.array() * (g.array().colwise() - dot.array());
  });
}

template <class S>
Var slice_cols(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index count) {
  Matrix<S> C = t.value(a).middleCols(start, count);
  return t.record(std::move(C), {a}, [a, start, count](Tape<S>& tp, const Matrix<S>& g) {
    tp.grad(a).middleCols(start, count) += g;
  });
}

template <class S>
Var slice_rows(Tape<S>& t, Var a, Eigen::Index start, Eigen::Index count) {
  Matrix<S> C = t.value(a).middleRows(start, count);
  return t.record(std::move(C), {a}, [a, start, count](Tape<S>& tp, const Matrix<S>& g) {
    tp.grad(a).middleRows(start, count) += g;
  });
}

template <class S>
Var concat_cols(Tape<S>& t, const std::vector<Var>& parts) {
  Eigen::Index rows = t.value(parts.front()).rows(), cols = 0;
  for (Var p : parts) cols += t.value(p).cols();
  Matrix<S> C(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    C.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  auto backward = [parts](Tape<S>& tp, const Matrix<S>& g) {
    Eigen::Index at = 0;
    for (Var p : parts) {
      auto w = tp.value(p).cols();
      if (tp.requires_grad(p)) tp.grad(p) += g.middleCols(at, w);
      at += w;
    }
  };
  return t.record(std::move(C), std::span<const Var>(parts), backward);
}

template <class S>
Var concat_rows(Tape<S>& t, const std::vector<Var>& parts) {
  Eigen::Index cols = t.value(parts.front()).cols(), rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw Error(ErrorKind::ShapeError, "concat_rows width mismatch");
    rows += t.value(p).rows();
  }
  Matrix<S> C(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    C.middleRows(at, t.value(p).rows()) = t.value(p);
    at += t.value(p).rows();
  }
  auto backward = [parts](Tape<S>& tp, const Matrix<S>& g) {
    Eigen::Index at = 0;
    for (Var p : parts) {
      auto h = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.grad(p) += g.middleRows(at, h);
      at += h;
    }
  };
  return t.record(std::move(C), std::span<const Var>(parts), backward);
}

/// Rows of an embedding table; the gradient scatters back into the table.
template <class S>
Var gather_rows(Tape<S>& t, Var tab, std::span<const int> ids) {
  const auto& table = t.value(tab);
  Matrix<S> C(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw Error(ErrorKind::ShapeError, "embedding id out of range");
    C.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.record(std::move(C), {tab}, [tab, idx = std::move(idx)](Tape<S>& tp, const Matrix<S>& g) {
    auto& G = tp.grad(tab);
    for (std::size_t i = 0; i < idx.size(); ++i) G.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Inverted dropout; identity when p == 0 or rng is null.
template <class S>
Var dropout(Tape<S>& t, Var a, double p, std::mt19937_64* rng) {
  if (p <= 0.0 || rng == nullptr) return a;
  const auto& A = t.value(a);
  Matrix<S> mask(A.rows(), A.cols());
  std::bernoulli_distribution keep(1.0 - p);
  const S s = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : S(0);
  Matrix<S> C = A.cwiseProduct(mask);
  return t.record(std::move(C), {a}, [a, mask = std::move(mask)](Tape<S>& tp, const Matrix<S>& g) {
    tp.grad(a) += g.cwiseProduct(mask);
  });
}

/// Mean over labels of binary cross-entropy between sigmoid(logits) and
/// soft targets in [0,1]. logits and targets are 1 x A.
template <class S>
Var bce_with_logits(Tape<S>& t, Var logits, const Matrix<S>& targets) {
  const auto& X = t.value(logits);
  if (X.rows() != targets.rows() || X.cols() != targets.cols()) {
    throw Error(ErrorKind::ShapeError, "target shape does not match logits");
  }
  const S n = static_cast<S>(X.size());
  S loss = 0;
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    S x = X.data()[i], y = targets.data()[i];
    loss += std::max(x, S(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Matrix<S> out(1, 1);
  out(0, 0) = loss / n;
  return t.record(std::move(out), {logits}, [logits, targets, n](Tape<S>& tp, const Matrix<S>& g) {
    const auto& X = tp.value(logits);
    auto& G = tp.grad(logits);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      S sig = S(1) / (S(1) + std::exp(-X.data()[i]));
      G.data()[i] += g(0, 0) * (sig - targets.data()[i]) / n;
    }
  });
}

}  // namespace deskvqa::nn
