#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Vars in evaluation order. Weight
// matrices are bound with Tape::param() and referenced in place, so a model's
// forward function can be written once and used both for inference (a tape
// constructed with record = false keeps no backward closures) and for training.

#include "mkup/tensor.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mkup::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(int self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Scalar> constant(Mat value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, {}});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Binds a weight matrix. Repeated calls with the same matrix return the same
  // leaf, so gradients from every use accumulate in one place.
  Var<Scalar> param(const Mat& weight) {
    auto it = params_.find(&weight);
    if (it != params_.end()) return Var<Scalar>(this, it->second);
    nodes_.push_back(Node{Mat(), &weight, {}, record_, {}});
    const int id = static_cast<int>(nodes_.size()) - 1;
    params_.emplace(&weight, id);
    return Var<Scalar>(this, id);
  }

  Var<Scalar> push(Mat value, bool needs_grad, Backward backward) {
    const bool track = record_ && needs_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, track, track ? std::move(backward) : Backward{}});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  bool any_needs_grad(std::initializer_list<int> ids) const {
    for (int id : ids)
      if (needs_grad(id)) return true;
    return false;
  }

  // Gradient buffer of node `id`, allocated as zeros on first touch.
  Mat& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Mat& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  // Gradient accumulated for a bound weight, or nullptr if it never received one.
  const Mat* param_grad(const Mat& weight) const {
    auto it = params_.find(&weight);
    if (it == params_.end()) return nullptr;
    const Mat& g = grad(it->second);
    return g.size() == 0 ? nullptr : &g;
  }

  void backward(Var<Scalar> root) {
    if (!record_) throw std::logic_error("backward() on a non-recording tape");
    if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward() needs a scalar root");
    grad_ref(root.id()).setConstant(Scalar(1));
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external;
    Mat grad;
    bool needs_grad;
    Backward backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const void*, int> params_;
  bool record_;
};

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw std::logic_error("Vars from different tapes");
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value() + b.value(), t->any_needs_grad({ia, ib}), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia) += g;
    if (t->needs_grad(ib)) t->grad_ref(ib) += g;
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value() - b.value(), t->any_needs_grad({ia, ib}), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia) += g;
    if (t->needs_grad(ib)) t->grad_ref(ib) -= g;
  });
}

// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value().cwiseProduct(b.value()), t->any_needs_grad({ia, ib}), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia) += g.cwiseProduct(t->value(ib));
    if (t->needs_grad(ib)) t->grad_ref(ib) += g.cwiseProduct(t->value(ia));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto* t = a.tape();
  const int ia = a.id();
  return t->push(a.value() * s, t->needs_grad(ia), [t, ia, s](int self) {
    t->grad_ref(ia) += t->grad(self) * s;
  });
}

// alpha * a + beta * b
template <typename Scalar>
Var<Scalar> lincomb(Scalar alpha, Var<Scalar> a, Scalar beta, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "lincomb");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(alpha * a.value() + beta * b.value(), t->any_needs_grad({ia, ib}),
                 [t, ia, ib, alpha, beta](int self) {
                   const auto& g = t->grad(self);
                   if (t->needs_grad(ia)) t->grad_ref(ia) += alpha * g;
                   if (t->needs_grad(ib)) t->grad_ref(ib) += beta * g;
                 });
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return t->push(std::move(v), t->any_needs_grad({ia, ib}), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia).noalias() += g * t->value(ib).transpose();
    if (t->needs_grad(ib)) t->grad_ref(ib).noalias() += t->value(ia).transpose() * g;
  });
}

// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> v(a.rows(), b.rows());
  v.noalias() = a.value() * b.value().transpose();
  return t->push(std::move(v), t->any_needs_grad({ia, ib}), [t, ia, ib](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia).noalias() += g * t->value(ib);
    if (t->needs_grad(ib)) t->grad_ref(ib).noalias() += g.transpose() * t->value(ia);
  });
}

// Adds a 1 x C row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  detail::require_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  auto* t = a.tape();
  const int ia = a.id(), ir = row.id();
  Matrix<Scalar> v = a.value();
  v.rowwise() += row.value().row(0);
  return t->push(std::move(v), t->any_needs_grad({ia, ir}), [t, ia, ir](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(ia)) t->grad_ref(ia) += g;
    if (t->needs_grad(ir)) t->grad_ref(ir) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> silu(Var<Scalar> a) {
  auto* t = a.tape();
  const int ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> v(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar xi = x.data()[i];
    v.data()[i] = xi / (Scalar(1) + std::exp(-xi));
  }
  return t->push(std::move(v), t->needs_grad(ia), [t, ia](int self) {
    const auto& g = t->grad(self);
    const auto& x = t->value(ia);
    auto& gx = t->grad_ref(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const Scalar xi = x.data()[i];
      const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-xi));
      gx.data()[i] += g.data()[i] * s * (Scalar(1) + xi * (Scalar(1) - s));
    }
  });
}

// Row-wise layer normalisation with learned gain and bias (both 1 x C).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> a, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar(1e-5)) {
  detail::require_same_tape(a, gain);
  detail::require_same_tape(a, bias);
  if (gain.cols() != a.cols() || bias.cols() != a.cols()) throw ShapeError("layer_norm: affine shape mismatch");
  auto* t = a.tape();
  const int ia = a.id(), ig = gain.id(), ib = bias.id();
  const auto& x = a.value();
  const Eigen::Index n = x.rows(), c = x.cols();
  Matrix<Scalar> xhat(n, c);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (x.row(r).array() - mean) * is;
  }
  Matrix<Scalar> v = xhat.array().rowwise() * gain.value().row(0).array();
  v.rowwise() += bias.value().row(0);
  return t->push(std::move(v), t->any_needs_grad({ia, ig, ib}),
                 [t, ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](int self) {
                   const auto& g = t->grad(self);
                   if (t->needs_grad(ig)) t->grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
                   if (t->needs_grad(ib)) t->grad_ref(ib) += g.colwise().sum();
                   if (t->needs_grad(ia)) {
                     auto& gx = t->grad_ref(ia);
                     const auto& gamma = t->value(ig);
                     const Scalar inv_c = Scalar(1) / Scalar(g.cols());
                     for (Eigen::Index r = 0; r < g.rows(); ++r) {
                       RowVector<Scalar> gh = g.row(r).cwiseProduct(gamma.row(0));
                       const Scalar m1 = gh.sum() * inv_c;
                       const Scalar m2 = gh.dot(xhat.row(r)) * inv_c;
                       gx.row(r).array() +=
                           inv_std[static_cast<std::size_t>(r)] * (gh.array() - m1 - xhat.row(r).array() * m2);
                     }
                   }
                 });
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  auto* t = a.tape();
  const int ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return t->push(std::move(y), t->needs_grad(ia), [t, ia](int self) {
    const auto& g = t->grad(self);
    const auto& y = t->value(self);
    auto& gx = t->grad_ref(ia);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const Scalar d = g.row(r).dot(y.row(r));
      gx.row(r).array() += y.row(r).array() * (g.row(r).array() - d);
    }
  });
}

// Unfolds 3x3 neighbourhoods (zero padding 1) of an H x W x C map into rows of
// 9*C values ordered (ky, kx, c). With stride 2 the output grid is H/2 x W/2.
template <typename Scalar>
Var<Scalar> im2col3x3(Var<Scalar> a, int height, int width, int stride) {
  const int c = static_cast<int>(a.cols());
  if (a.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("im2col3x3: grid size mismatch");
  if (stride != 1 && stride != 2) throw ShapeError("im2col3x3: stride must be 1 or 2");
  const int ho = height / stride, wo = width / stride;
  auto* t = a.tape();
  const int ia = a.id();
  const auto& x = a.value();
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * c);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index orow = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= width) continue;
          cols.block(orow, (ky * 3 + kx) * c, 1, c) = x.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  return t->push(std::move(cols), t->needs_grad(ia), [t, ia, height, width, stride, c, ho, wo](int self) {
    const auto& g = t->grad(self);
    auto& gx = t->grad_ref(ia);
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const Eigen::Index orow = static_cast<Eigen::Index>(oy) * wo + ox;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= height) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= width) continue;
            gx.row(static_cast<Eigen::Index>(iy) * width + ix) += g.block(orow, (ky * 3 + kx) * c, 1, c);
          }
        }
      }
  });
}

// Nearest-neighbour 2x upsampling of an H x W grid.
template <typename Scalar>
Var<Scalar> upsample2x(Var<Scalar> a, int height, int width) {
  if (a.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("upsample2x: grid size mismatch");
  auto* t = a.tape();
  const int ia = a.id();
  const auto& x = a.value();
  const int w2 = width * 2;
  Matrix<Scalar> y(static_cast<Eigen::Index>(height) * 4 * width, x.cols());
  for (int yy = 0; yy < height * 2; ++yy)
    for (int xx = 0; xx < w2; ++xx)
      y.row(static_cast<Eigen::Index>(yy) * w2 + xx) = x.row(static_cast<Eigen::Index>(yy / 2) * width + xx / 2);
  return t->push(std::move(y), t->needs_grad(ia), [t, ia, height, width, w2](int self) {
    const auto& g = t->grad(self);
    auto& gx = t->grad_ref(ia);
    for (int yy = 0; yy < height * 2; ++yy)
      for (int xx = 0; xx < w2; ++xx)
        gx.row(static_cast<Eigen::Index>(yy / 2) * width + xx / 2) += g.row(static_cast<Eigen::Index>(yy) * w2 + xx);
  });
}

// Column means: N x C -> 1 x C.
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> a) {
  auto* t = a.tape();
  const int ia = a.id();
  const Scalar inv_n = Scalar(1) / Scalar(a.rows());
  Matrix<Scalar> v = a.value().colwise().sum() * inv_n;
  return t->push(std::move(v), t->needs_grad(ia), [t, ia, inv_n](int self) {
    const auto& g = t->grad(self);
    t->grad_ref(ia).rowwise() += g.row(0) * inv_n;
  });
}

template <typename Scalar>
Var<Scalar> col_block(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw ShapeError("col_block: out of range");
  auto* t = a.tape();
  const int ia = a.id();
  Matrix<Scalar> v = a.value().middleCols(start, count);
  return t->push(std::move(v), t->needs_grad(ia), [t, ia, start, count](int self) {
    t->grad_ref(ia).middleCols(start, count) += t->grad(self);
  });
}

template <typename Scalar>
Var<Scalar> row_block(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw ShapeError("row_block: out of range");
  auto* t = a.tape();
  const int ia = a.id();
  Matrix<Scalar> v = a.value().middleRows(start, count);
  return t->push(std::move(v), t->needs_grad(ia), [t, ia, start, count](int self) {
    t->grad_ref(ia).middleRows(start, count) += t->grad(self);
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto* t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
    needs = needs || t->needs_grad(p.id());
  }
  Matrix<Scalar> v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return t->push(std::move(v), needs, [t, spans = std::move(spans)](int self) {
    const auto& g = t->grad(self);
    for (const auto& [id, start] : spans)
      if (t->needs_grad(id)) t->grad_ref(id) += g.middleCols(start, t->value(id).cols());
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto* t = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    needs = needs || t->needs_grad(p.id());
  }
  Matrix<Scalar> v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return t->push(std::move(v), needs, [t, spans = std::move(spans)](int self) {
    const auto& g = t->grad(self);
    for (const auto& [id, start] : spans)
      if (t->needs_grad(id)) t->grad_ref(id) += g.middleRows(start, t->value(id).rows());
  });
}

// Mean squared difference, returned as a 1 x 1 Var.
template <typename Scalar>
Var<Scalar> mse(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, "mse");
  auto* t = a.tape();
  const int ia = a.id(), ib = b.id();
  Matrix<Scalar> diff = a.value() - b.value();
  const Scalar n = Scalar(diff.size());
  Matrix<Scalar> v(1, 1);
  v(0, 0) = diff.squaredNorm() / n;
  return t->push(std::move(v), t->any_needs_grad({ia, ib}), [t, ia, ib, diff = std::move(diff), n](int self) {
    const Scalar g = t->grad(self)(0, 0) * Scalar(2) / n;
    if (t->needs_grad(ia)) t->grad_ref(ia) += g * diff;
    if (t->needs_grad(ib)) t->grad_ref(ib) -= g * diff;
  });
}

// Mean of all entries as a 1 x 1 Var.
template <typename Scalar>
Var<Scalar> mean_all(Var<Scalar> a) {
  auto* t = a.tape();
  const int ia = a.id();
  const Scalar n = Scalar(a.value().size());
  Matrix<Scalar> v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return t->push(std::move(v), t->needs_grad(ia), [t, ia, n](int self) {
    t->grad_ref(ia).array() += t->grad(self)(0, 0) / n;
  });
}

template <typename Scalar>
Scalar scalar_value(const Var<Scalar>& v) {
  return v.value()(0, 0);
}

}  // namespace mkup::ad
