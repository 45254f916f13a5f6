#pragma once

// Building blocks shared by the encoder, the attention block and the denoiser.

#include "mkup/autodiff.hpp"

#include <cmath>
#include <random>
#include <string>

namespace mkup {

template <typename Scalar>
using Var = ad::Var<Scalar>;

template <typename Scalar>
using Tape = ad::Tape<Scalar>;

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, const Matrix<Scalar>& weight, const Matrix<Scalar>& bias) {
  auto* t = x.tape();
  return ad::add_row(ad::matmul(x, t->param(weight)), t->param(bias));
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, const Matrix<Scalar>& weight) {
  return ad::matmul(x, x.tape()->param(weight));
}

// 3x3 convolution with padding 1. weight is (9*Cin) x Cout, bias 1 x Cout.
template <typename Scalar>
Var<Scalar> conv3x3(Var<Scalar> x, int height, int width, int stride, const Matrix<Scalar>& weight,
                    const Matrix<Scalar>& bias) {
  if (weight.rows() != 9 * x.cols()) throw ShapeError("conv3x3: weight has wrong input width");
  return linear(ad::im2col3x3(x, height, width, stride), weight, bias);
}

template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias) {
  auto* t = x.tape();
  return ad::layer_norm(x, t->param(gain), t->param(bias));
}

// Query/key/value/output projections of one attention stage (all D x D, no bias).
template <typename Scalar>
struct AttentionWeights {
  Matrix<Scalar> query, key, value, output;

  static AttentionWeights zeros(int dim) {
    AttentionWeights w;
    w.query = w.key = w.value = w.output = Matrix<Scalar>::Zero(dim, dim);
    return w;
  }

  static AttentionWeights init(int dim, double std, std::mt19937_64& rng) {
    AttentionWeights w = zeros(dim);
    fill_truncated_normal(w.query, std, rng);
    fill_truncated_normal(w.key, std, rng);
    fill_truncated_normal(w.value, std, rng);
    fill_truncated_normal(w.output, std, rng);
    return w;
  }

  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& f) {
    f(prefix + ".q", query);
    f(prefix + ".k", key);
    f(prefix + ".v", value);
    f(prefix + ".o", output);
  }
  template <typename Visitor>
  void visit(const std::string& prefix, Visitor&& f) const {
    f(prefix + ".q", query);
    f(prefix + ".k", key);
    f(prefix + ".v", value);
    f(prefix + ".o", output);
  }
};

// Multi-head scaled dot-product attention of `queries` (N x D) over `tokens`
// (L x D). Every softmax row is a distribution over the L tokens.
template <typename Scalar>
Var<Scalar> multi_head_attention(const AttentionWeights<Scalar>& w, Var<Scalar> queries, Var<Scalar> tokens,
                                 int heads) {
  const Eigen::Index dim = w.query.rows();
  if (queries.cols() != dim || tokens.cols() != dim) throw ShapeError("attention: token width mismatch");
  if (tokens.rows() < 1) throw ShapeError("attention: empty token sequence");
  if (heads < 1 || dim % heads != 0) throw ShapeError("attention: head count must divide the width");
  auto* t = queries.tape();
  const Var<Scalar> q = ad::matmul(queries, t->param(w.query));
  const Var<Scalar> k = ad::matmul(tokens, t->param(w.key));
  const Var<Scalar> v = ad::matmul(tokens, t->param(w.value));
  const Eigen::Index head_dim = dim / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(head_dim));
  std::vector<Var<Scalar>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index at = h * head_dim;
    auto scores = ad::scale(ad::matmul_nt(ad::col_block(q, at, head_dim), ad::col_block(k, at, head_dim)), inv_sqrt);
    outs.push_back(ad::matmul(ad::softmax_rows(scores), ad::col_block(v, at, head_dim)));
  }
  return ad::matmul(heads == 1 ? outs.front() : ad::concat_cols(outs), t->param(w.output));
}

// Sinusoidal embedding of an integer timestep.
template <typename Scalar>
Matrix<Scalar> sinusoidal_embedding(int timestep, int dim) {
  Matrix<Scalar> e(1, dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e(0, i) = static_cast<Scalar>(std::sin(timestep * freq));
    e(0, half + i) = static_cast<Scalar>(std::cos(timestep * freq));
  }
  if (dim % 2) e(0, dim - 1) = Scalar(0);
  return e;
}

}  // namespace mkup
