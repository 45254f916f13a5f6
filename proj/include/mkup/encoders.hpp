#pragma once

// Image encoder, identity/makeup projection heads and the prompt embedder.
//
// The encoder is three stride-2 3x3 convolutions (3 -> 32 -> 64 -> feature_dim
// channels, SiLU after each) followed by global average pooling. Both heads
// are affine maps from the same pooled feature vector.

#include "mkup/layers.hpp"
#include "mkup/prompt.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mkup {

inline constexpr int kFeatureDim = 128;
inline constexpr int kEmbedDim = 64;
inline constexpr double kInitStd = 0.02;

// Words of the closed prompt vocabulary, one embedding row each.
inline constexpr std::array<std::string_view, 6> kVocabulary = {"no", "makeup", "full", "eye", "lip", "face"};

inline std::vector<int> tokenize(Prompt prompt) {
  const std::string_view text = to_string(prompt);
  std::vector<int> ids;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(' ', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view word = text.substr(start, end - start);
    int id = -1;
    for (std::size_t k = 0; k < kVocabulary.size(); ++k)
      if (kVocabulary[k] == word) id = static_cast<int>(k);
    if (id < 0) throw std::invalid_argument("word '" + std::string(word) + "' is not in the vocabulary");
    ids.push_back(id);
    start = end + 1;
  }
  return ids;
}

template <typename Scalar>
struct EncoderWeights {
  int resolution = 64;
  Matrix<Scalar> conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
  Matrix<Scalar> identity_w, identity_b, makeup_w, makeup_b;
  Matrix<Scalar> text_table;

  static EncoderWeights zeros(int resolution, int feature_dim = kFeatureDim, int embed_dim = kEmbedDim) {
    EncoderWeights w;
    w.resolution = resolution;
    w.conv1_w = Matrix<Scalar>::Zero(9 * 3, 32);
    w.conv1_b = Matrix<Scalar>::Zero(1, 32);
    w.conv2_w = Matrix<Scalar>::Zero(9 * 32, 64);
    w.conv2_b = Matrix<Scalar>::Zero(1, 64);
    w.conv3_w = Matrix<Scalar>::Zero(9 * 64, feature_dim);
    w.conv3_b = Matrix<Scalar>::Zero(1, feature_dim);
    w.identity_w = Matrix<Scalar>::Zero(feature_dim, embed_dim);
    w.identity_b = Matrix<Scalar>::Zero(1, embed_dim);
    w.makeup_w = Matrix<Scalar>::Zero(feature_dim, embed_dim);
    w.makeup_b = Matrix<Scalar>::Zero(1, embed_dim);
    w.text_table = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(kVocabulary.size()), embed_dim);
    return w;
  }

  // Truncated-normal weights; biases zero. Convolution weights use a fan-in
  // scaled std so activations keep their scale through the trunk.
  static EncoderWeights init(int resolution, std::mt19937_64& rng) {
    EncoderWeights w = zeros(resolution);
    fill_truncated_normal(w.conv1_w, std::sqrt(2.0 / 27.0), rng);
    fill_truncated_normal(w.conv2_w, std::sqrt(2.0 / 288.0), rng);
    fill_truncated_normal(w.conv3_w, std::sqrt(2.0 / 576.0), rng);
    fill_truncated_normal(w.identity_w, std::sqrt(1.0 / kFeatureDim), rng);
    fill_truncated_normal(w.makeup_w, std::sqrt(1.0 / kFeatureDim), rng);
    fill_truncated_normal(w.text_table, kInitStd, rng);
    return w;
  }

  int feature_dim() const { return static_cast<int>(conv3_w.cols()); }
  int embed_dim() const { return static_cast<int>(identity_w.cols()); }

  template <typename Visitor>
  void visit(Visitor&& f) {
    visit_impl(*this, f);
  }
  template <typename Visitor>
  void visit(Visitor&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename Visitor>
  static void visit_impl(Self& w, Visitor& f) {
    f("encoder.conv1.w", w.conv1_w);
    f("encoder.conv1.b", w.conv1_b);
    f("encoder.conv2.w", w.conv2_w);
    f("encoder.conv2.b", w.conv2_b);
    f("encoder.conv3.w", w.conv3_w);
    f("encoder.conv3.b", w.conv3_b);
    f("encoder.identity_head.w", w.identity_w);
    f("encoder.identity_head.b", w.identity_b);
    f("encoder.makeup_head.w", w.makeup_w);
    f("encoder.makeup_head.b", w.makeup_b);
    f("encoder.text_table", w.text_table);
  }
};

template <typename Scalar>
Var<Scalar> image_input(Tape<Scalar>& tape, const Image& image) {
  return tape.constant(image.pixels.template cast<Scalar>());
}

// Pooled encoder features, 1 x feature_dim.
template <typename Scalar>
Var<Scalar> encode_image(const EncoderWeights<Scalar>& w, Var<Scalar> pixels, int height, int width) {
  if (height != w.resolution || width != w.resolution)
    throw ShapeError("encode_image: expected " + std::to_string(w.resolution) + "px input, got " +
                     std::to_string(height) + "x" + std::to_string(width));
  if (pixels.rows() != static_cast<Eigen::Index>(height) * width || pixels.cols() != 3)
    throw ShapeError("encode_image: pixel matrix must be (H*W) x 3");
  auto h = ad::silu(conv3x3(pixels, height, width, 2, w.conv1_w, w.conv1_b));
  h = ad::silu(conv3x3(h, height / 2, width / 2, 2, w.conv2_w, w.conv2_b));
  h = ad::silu(conv3x3(h, height / 4, width / 4, 2, w.conv3_w, w.conv3_b));
  return ad::mean_rows(h);
}

template <typename Scalar>
Var<Scalar> encode_image(Tape<Scalar>& tape, const EncoderWeights<Scalar>& w, const Image& image) {
  return encode_image(w, image_input(tape, image), image.height, image.width);
}

template <typename Scalar>
Var<Scalar> project_identity(const EncoderWeights<Scalar>& w, Var<Scalar> features) {
  if (features.cols() != w.identity_w.rows()) throw ShapeError("project_identity: feature width mismatch");
  return linear(features, w.identity_w, w.identity_b);
}

template <typename Scalar>
Var<Scalar> project_makeup(const EncoderWeights<Scalar>& w, Var<Scalar> features) {
  if (features.cols() != w.makeup_w.rows()) throw ShapeError("project_makeup: feature width mismatch");
  return linear(features, w.makeup_w, w.makeup_b);
}

// One embedding row per whitespace-separated word of the prompt.
template <typename Scalar>
Var<Scalar> embed_text(Tape<Scalar>& tape, const EncoderWeights<Scalar>& w, Prompt prompt) {
  const std::vector<int> ids = tokenize(prompt);
  Matrix<Scalar> one_hot = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(ids.size()), w.text_table.rows());
  for (std::size_t k = 0; k < ids.size(); ++k) one_hot(static_cast<Eigen::Index>(k), ids[k]) = Scalar(1);
  return ad::matmul(tape.constant(std::move(one_hot)), tape.param(w.text_table));
}

// Feature and both embeddings of one image, computed from a single encoder pass.
template <typename Scalar>
struct ImageCodes {
  Matrix<Scalar> features, identity, makeup;
};

template <typename Scalar>
ImageCodes<Scalar> image_codes(const EncoderWeights<Scalar>& w, const Image& image) {
  Tape<Scalar> tape(false);
  const auto f = encode_image(tape, w, image);
  return {f.value(), project_identity(w, f).value(), project_makeup(w, f).value()};
}

struct ZeroNormError : std::domain_error {
  using std::domain_error::domain_error;
};

// cos(a, b); throws ZeroNormError if either vector is zero.
template <typename DerivedA, typename DerivedB>
double cosine_similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  const Eigen::MatrixXd am = a.template cast<double>();
  const Eigen::MatrixXd bm = b.template cast<double>();
  const Eigen::Map<const Eigen::VectorXd> av(am.data(), am.size()), bv(bm.data(), bm.size());
  const double na = av.norm(), nb = bv.norm();
  if (na == 0.0 || nb == 0.0) throw ZeroNormError("cosine_similarity: zero-norm input");
  const double c = av.dot(bv) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace mkup
