#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkup {

// Dense row-major matrix. Spatial tensors are stored as (pixels x channels)
// with pixels in raster order, so a H x W x C map is a (H*W) x C matrix.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Precision used for training, sampling and on-disk checkpoints.
using Real = float;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// RGB raster with values in [0, 1]; pixels are rows, channels are columns.
struct Image {
  int height = 0;
  int width = 0;
  Matrix<Real> pixels;  // (height*width) x 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(Matrix<Real>::Zero(h * w, 3)) {}

  Real& at(int y, int x, int c) { return pixels(y * width + x, c); }
  Real at(int y, int x, int c) const { return pixels(y * width + x, c); }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.pixels == b.pixels;
  }
};

// Region labels for the synthetic faces.
enum class Region : std::uint8_t { background = 0, face = 1, eyes = 2, lips = 3 };

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Fills m with N(0, std^2) draws truncated at two standard deviations.
template <typename Scalar>
void fill_truncated_normal(Matrix<Scalar>& m, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = dist(rng);
    while (std::abs(v) > 2.0) v = dist(rng);
    m.data()[i] = static_cast<Scalar>(v * std);
  }
}

template <typename Scalar>
Matrix<Scalar> standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

// Hashes a base seed with a stream index into an independent seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  return m.template cast<To>();
}

}  // namespace mkup
