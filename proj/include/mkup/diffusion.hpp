#pragma once

// Noise schedule, latent transform, the conditional denoiser and DDIM sampling.

#include "mkup/encoders.hpp"
#include "mkup/mga.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mkup {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  int steps() const { return static_cast<int>(betas.size()); }

  // alpha_bar(-1) is 1: the clean end of the chain.
  double alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || t >= steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside the schedule");
    return alpha_bars[static_cast<std::size_t>(t)];
  }
};

inline constexpr int kDefaultTimesteps = 200;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

// Linearly spaced betas; alpha_bar_t = prod_{s <= t} (1 - beta_s).
inline NoiseSchedule make_schedule(int steps, double beta_start = kDefaultBetaStart, double beta_end = kDefaultBetaEnd) {
  if (steps < 2) throw std::invalid_argument("schedule needs at least 2 timesteps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(static_cast<std::size_t>(steps));
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (steps - 1);
    prod *= 1.0 - beta;
    s.betas[static_cast<std::size_t>(t)] = beta;
    s.alpha_bars[static_cast<std::size_t>(t)] = prod;
  }
  return s;
}

// `count` evenly spaced descending timesteps below `upper`, each the last index
// of its stride: {upper-1, ..., upper/count - 1}.
inline std::vector<int> sampling_timesteps(int upper, int count) {
  if (count < 1 || count > upper) throw std::invalid_argument("sampling step count must lie in [1, " + std::to_string(upper) + "]");
  std::vector<int> ts(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k)
    ts[static_cast<std::size_t>(count - 1 - k)] = static_cast<int>((static_cast<long long>(k) + 1) * upper / count) - 1;
  return ts;
}

// ---------------------------------------------------------------------------
// Latent transform: 4x4 space-to-depth with a scale of 1/2. A R x R RGB image
// becomes (R/4)^2 tokens of 48 values ordered (py, px, channel).

inline constexpr int kPatch = 4;
inline constexpr int kLatentChannels = kPatch * kPatch * 3;
// The schedule ends at alpha_bar ~ 0.13, so the latent scale sets how far the
// last noisy latent is from the N(0, I) start used for sampling.
inline constexpr Real kLatentScale = 0.5;

struct LatentShape {
  int channels = kLatentChannels;
  int height = 0;
  int width = 0;
};

inline LatentShape latent_shape(int resolution) {
  if (resolution <= 0 || resolution % kPatch != 0) throw ShapeError("resolution must be a positive multiple of the patch size");
  return {kLatentChannels, resolution / kPatch, resolution / kPatch};
}

template <typename Scalar = Real>
Matrix<Scalar> encode_latent(const Image& image) {
  if (image.height != image.width || image.height % kPatch != 0)
    throw ShapeError("encode_latent: image must be square with a side divisible by the patch size");
  const int grid = image.width / kPatch;
  Matrix<Scalar> z(static_cast<Eigen::Index>(grid) * grid, kLatentChannels);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx)
      for (int py = 0; py < kPatch; ++py)
        for (int px = 0; px < kPatch; ++px)
          for (int c = 0; c < 3; ++c)
            z(gy * grid + gx, (py * kPatch + px) * 3 + c) =
                static_cast<Scalar>(image.at(gy * kPatch + py, gx * kPatch + px, c) * kLatentScale);
  return z;
}

template <typename Scalar>
Image decode_latent(const Matrix<Scalar>& z, int resolution) {
  const LatentShape shape = latent_shape(resolution);
  if (z.rows() != static_cast<Eigen::Index>(shape.height) * shape.width || z.cols() != kLatentChannels)
    throw ShapeError("decode_latent: latent shape does not match the resolution");
  Image image(resolution, resolution);
  const int grid = shape.width;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx)
      for (int py = 0; py < kPatch; ++py)
        for (int px = 0; px < kPatch; ++px)
          for (int c = 0; c < 3; ++c)
            image.at(gy * kPatch + py, gx * kPatch + px, c) =
                static_cast<Real>(z(gy * grid + gx, (py * kPatch + px) * 3 + c)) / kLatentScale;
  return image;
}

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
template <typename Scalar>
Matrix<Scalar> add_noise(const Matrix<Scalar>& z0, const Matrix<Scalar>& eps, int t, const NoiseSchedule& s) {
  if (z0.rows() != eps.rows() || z0.cols() != eps.cols()) throw ShapeError("add_noise: shape mismatch");
  const double ab = s.alpha_bar(t);
  return static_cast<Scalar>(std::sqrt(ab)) * z0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps;
}

template <typename Scalar>
Var<Scalar> add_noise(Var<Scalar> z0, Var<Scalar> eps, int t, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  return ad::lincomb(static_cast<Scalar>(std::sqrt(ab)), z0, static_cast<Scalar>(std::sqrt(1.0 - ab)), eps);
}

struct DdimCoefficients {
  double z, eps;  // z_prev = z * z_t + eps * eps_hat
};

// Deterministic (eta = 0) DDIM update written as a linear map of (z_t, eps_hat):
//   x0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
//   z_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev) eps_hat
inline DdimCoefficients ddim_coefficients(int t, int t_prev, const NoiseSchedule& s) {
  if (t_prev >= t) throw std::invalid_argument("ddim_step needs t_prev < t");
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  const double zc = std::sqrt(ab_prev / ab);
  return {zc, std::sqrt(1.0 - ab_prev) - zc * std::sqrt(1.0 - ab)};
}

template <typename Scalar>
Matrix<Scalar> ddim_step(const Matrix<Scalar>& z_t, const Matrix<Scalar>& eps_hat, int t, int t_prev,
                         const NoiseSchedule& s) {
  if (z_t.rows() != eps_hat.rows() || z_t.cols() != eps_hat.cols()) throw ShapeError("ddim_step: shape mismatch");
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  if (t_prev >= t) throw std::invalid_argument("ddim_step needs t_prev < t");
  const Matrix<Scalar> x0 =
      (z_t - static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps_hat) / static_cast<Scalar>(std::sqrt(ab));
  return static_cast<Scalar>(std::sqrt(ab_prev)) * x0 + static_cast<Scalar>(std::sqrt(1.0 - ab_prev)) * eps_hat;
}

template <typename Scalar>
Var<Scalar> ddim_step(Var<Scalar> z_t, Var<Scalar> eps_hat, int t, int t_prev, const NoiseSchedule& s) {
  const DdimCoefficients c = ddim_coefficients(t, t_prev, s);
  return ad::lincomb(static_cast<Scalar>(c.z), z_t, static_cast<Scalar>(c.eps), eps_hat);
}

// ---------------------------------------------------------------------------
// Denoiser: a two-level U-shaped network over the latent token grid.
//
//   level 0 (G x G): input projection + position + time, residual conv block
//   level 1 (G/2 x G/2): strided conv, MGA, MLP
//   level 0 again: upsample, concat skip, conv, MGA, MLP, output projection
//
// The noise estimate is
//   eps_hat = skip * eps_lin(z_t) + c_out(t) * F
// where eps_lin is the best linear estimate of the noise under a Gaussian prior
// on each latent token (isotropic at initialisation, fitted to the training
// latents when training starts), F is the network output and
// skip is a fixed switch (1 at initialisation, 0 in an all-zero model) that the
// optimiser leaves alone: a learned gain drifts away from 1 to help at low noise
// and then spoils the high-noise estimates, where the linear term is nearly
// exact. The network therefore carries a clean-image correction at high noise
// and a bounded noise correction at low noise.

// pixel mean ~0.75, spread ~0.2 on the synthetic faces
inline constexpr double kLatentMean = 0.75 * kLatentScale;
inline constexpr double kLatentStd = 0.2 * kLatentScale;

// skip_gain and the token prior are fixed buffers, not learned.
inline bool trainable(std::string_view parameter) {
  return parameter != "denoiser.skip_gain" && !parameter.starts_with("denoiser.prior.");
}

// Linear noise estimate under a Gaussian prior N(mean, cov) on each latent token:
// eps_lin = z_t * map + offset. With cov = U diag(l) U^T the map is
// U diag(sigma / (abar l + sigma^2)) U^T, and offset = -sqrt(abar) mean * map.
template <typename Scalar>
struct LinearNoiseEstimate {
  Matrix<Scalar> map, offset;
};

template <typename Scalar>
LinearNoiseEstimate<Scalar> linear_noise_estimate(const Matrix<Scalar>& mean, const Matrix<Scalar>& cov,
                                                  double alpha_bar) {
  if (cov.rows() != cov.cols() || mean.rows() != 1 || mean.cols() != cov.rows())
    throw ShapeError("linear_noise_estimate: prior shape mismatch");
  const double sigma2 = 1.0 - alpha_bar, sigma = std::sqrt(sigma2);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov.template cast<double>());
  const Eigen::VectorXd l = es.eigenvalues().cwiseMax(0.0);
  const Eigen::VectorXd d = (alpha_bar * l.array() + sigma2).inverse() * sigma;
  const Eigen::MatrixXd map = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
  const Eigen::MatrixXd offset = -std::sqrt(alpha_bar) * mean.template cast<double>() * map;
  return {map.cast<Scalar>(), offset.cast<Scalar>()};
}

struct OutputScaling {
  double z, mean, out;  // eps_lin = z * z_t + mean * kLatentMean
};

inline OutputScaling output_scaling(double alpha_bar) {
  const double a = std::sqrt(alpha_bar), sigma = std::sqrt(1.0 - alpha_bar);
  const double v = alpha_bar * kLatentStd * kLatentStd + sigma * sigma;
  const double c_skip = a * kLatentStd * kLatentStd / v;  // x0_lin = c_skip * z + (1 - a c_skip) mean
  const double c_out = sigma * kLatentStd / std::sqrt(v);
  return {(1.0 - a * c_skip) / sigma, -a * (1.0 - a * c_skip) / sigma, -a * c_out / sigma};
}

template <typename Scalar>
struct MlpBlock {
  Matrix<Scalar> norm_g, norm_b, w1, b1, w2, b2;

  static MlpBlock zeros(int dim, int hidden) {
    return {Matrix<Scalar>::Zero(1, dim), Matrix<Scalar>::Zero(1, dim), Matrix<Scalar>::Zero(dim, hidden),
            Matrix<Scalar>::Zero(1, hidden), Matrix<Scalar>::Zero(hidden, dim), Matrix<Scalar>::Zero(1, dim)};
  }
  static MlpBlock init(int dim, int hidden, std::mt19937_64& rng) {
    MlpBlock m = zeros(dim, hidden);
    m.norm_g.setOnes();
    fill_truncated_normal(m.w1, std::sqrt(2.0 / dim), rng);
    fill_truncated_normal(m.w2, std::sqrt(1.0 / hidden), rng);
    return m;
  }
  template <typename Visitor>
  void visit(const std::string& p, Visitor&& f) {
    f(p + ".norm.g", norm_g); f(p + ".norm.b", norm_b);
    f(p + ".fc1.w", w1); f(p + ".fc1.b", b1); f(p + ".fc2.w", w2); f(p + ".fc2.b", b2);
  }
  template <typename Visitor>
  void visit(const std::string& p, Visitor&& f) const {
    f(p + ".norm.g", norm_g); f(p + ".norm.b", norm_b);
    f(p + ".fc1.w", w1); f(p + ".fc1.b", b1); f(p + ".fc2.w", w2); f(p + ".fc2.b", b2);
  }

  Var<Scalar> operator()(Var<Scalar> x) const {
    return linear(ad::silu(linear(layer_norm(x, norm_g, norm_b), w1, b1)), w2, b2);
  }
};

// Pre-norm attention site: x + mga_block(norm(x), ...).
template <typename Scalar>
struct AttentionSite {
  Matrix<Scalar> norm_g, norm_b;
  MgaWeights<Scalar> mga;

  static AttentionSite zeros(int dim) {
    return {Matrix<Scalar>::Zero(1, dim), Matrix<Scalar>::Zero(1, dim), MgaWeights<Scalar>::zeros(dim)};
  }
  static AttentionSite init(int dim, std::mt19937_64& rng) {
    AttentionSite s{Matrix<Scalar>::Ones(1, dim), Matrix<Scalar>::Zero(1, dim), MgaWeights<Scalar>::init(dim, rng)};
    return s;
  }
  template <typename Visitor>
  void visit(const std::string& p, Visitor&& f) {
    f(p + ".norm.g", norm_g); f(p + ".norm.b", norm_b);
    mga.visit(p + ".mga", f);
  }
  template <typename Visitor>
  void visit(const std::string& p, Visitor&& f) const {
    f(p + ".norm.g", norm_g); f(p + ".norm.b", norm_b);
    mga.visit(p + ".mga", f);
  }
};

template <typename Scalar>
struct DenoiserWeights {
  int resolution = 64;
  int width = kEmbedDim;
  Matrix<Scalar> in_w, in_b, position, time_w, time_b;
  Matrix<Scalar> res_norm_g, res_norm_b, res_conv_w, res_conv_b;
  Matrix<Scalar> down_w, down_b;
  AttentionSite<Scalar> mid_attn;
  MlpBlock<Scalar> mid_mlp;
  Matrix<Scalar> up_w, up_b;
  AttentionSite<Scalar> top_attn;
  MlpBlock<Scalar> top_mlp;
  Matrix<Scalar> out_norm_g, out_norm_b, out_w, out_b;
  Matrix<Scalar> skip_gain;
  Matrix<Scalar> prior_mean, prior_cov;  // token prior behind the linear estimate

  int grid() const { return resolution / kPatch; }

  static DenoiserWeights zeros(int resolution, int width = kEmbedDim) {
    const LatentShape shape = latent_shape(resolution);
    if (shape.width < 2 || shape.width % 2) throw ShapeError("denoiser needs an even latent grid of at least 2");
    const Eigen::Index n = static_cast<Eigen::Index>(shape.height) * shape.width;
    const int hidden = 4 * width;
    DenoiserWeights w;
    w.resolution = resolution;
    w.width = width;
    w.in_w = Matrix<Scalar>::Zero(kLatentChannels, width);
    w.in_b = Matrix<Scalar>::Zero(1, width);
    w.position = Matrix<Scalar>::Zero(n, width);
    w.time_w = Matrix<Scalar>::Zero(width, width);
    w.time_b = Matrix<Scalar>::Zero(1, width);
    w.res_norm_g = Matrix<Scalar>::Zero(1, width);
    w.res_norm_b = Matrix<Scalar>::Zero(1, width);
    w.res_conv_w = Matrix<Scalar>::Zero(9 * width, width);
    w.res_conv_b = Matrix<Scalar>::Zero(1, width);
    w.down_w = Matrix<Scalar>::Zero(9 * width, width);
    w.down_b = Matrix<Scalar>::Zero(1, width);
    w.mid_attn = AttentionSite<Scalar>::zeros(width);
    w.mid_mlp = MlpBlock<Scalar>::zeros(width, hidden);
    w.up_w = Matrix<Scalar>::Zero(9 * 2 * width, width);
    w.up_b = Matrix<Scalar>::Zero(1, width);
    w.top_attn = AttentionSite<Scalar>::zeros(width);
    w.top_mlp = MlpBlock<Scalar>::zeros(width, hidden);
    w.out_norm_g = Matrix<Scalar>::Zero(1, width);
    w.out_norm_b = Matrix<Scalar>::Zero(1, width);
    w.out_w = Matrix<Scalar>::Zero(width, kLatentChannels);
    w.out_b = Matrix<Scalar>::Zero(1, kLatentChannels);
    w.skip_gain = Matrix<Scalar>::Zero(1, 1);
    w.prior_mean = Matrix<Scalar>::Zero(1, kLatentChannels);
    w.prior_cov = Matrix<Scalar>::Zero(kLatentChannels, kLatentChannels);
    return w;
  }

  static DenoiserWeights init(int resolution, std::mt19937_64& rng, int width = kEmbedDim) {
    DenoiserWeights w = zeros(resolution, width);
    fill_truncated_normal(w.in_w, std::sqrt(1.0 / kLatentChannels), rng);
    fill_truncated_normal(w.position, kInitStd, rng);
    fill_truncated_normal(w.time_w, std::sqrt(1.0 / width), rng);
    w.res_norm_g.setOnes();
    fill_truncated_normal(w.res_conv_w, std::sqrt(2.0 / (9.0 * width)), rng);
    fill_truncated_normal(w.down_w, std::sqrt(1.0 / (9.0 * width)), rng);
    w.mid_attn = AttentionSite<Scalar>::init(width, rng);
    w.mid_mlp = MlpBlock<Scalar>::init(width, 4 * width, rng);
    fill_truncated_normal(w.up_w, std::sqrt(1.0 / (18.0 * width)), rng);
    w.top_attn = AttentionSite<Scalar>::init(width, rng);
    w.top_mlp = MlpBlock<Scalar>::init(width, 4 * width, rng);
    w.out_norm_g.setOnes();
    fill_truncated_normal(w.out_w, kInitStd, rng);
    w.skip_gain.setOnes();
    w.prior_mean.setConstant(static_cast<Scalar>(kLatentMean));
    w.prior_cov = Matrix<Scalar>::Identity(kLatentChannels, kLatentChannels) * static_cast<Scalar>(kLatentStd * kLatentStd);
    return w;
  }

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
    f("denoiser.in.w", w.in_w);
    f("denoiser.in.b", w.in_b);
    f("denoiser.position", w.position);
    f("denoiser.time.w", w.time_w);
    f("denoiser.time.b", w.time_b);
    f("denoiser.res.norm.g", w.res_norm_g);
    f("denoiser.res.norm.b", w.res_norm_b);
    f("denoiser.res.conv.w", w.res_conv_w);
    f("denoiser.res.conv.b", w.res_conv_b);
    f("denoiser.down.w", w.down_w);
    f("denoiser.down.b", w.down_b);
    w.mid_attn.visit("denoiser.mid.attn", f);
    w.mid_mlp.visit("denoiser.mid.mlp", f);
    f("denoiser.up.w", w.up_w);
    f("denoiser.up.b", w.up_b);
    w.top_attn.visit("denoiser.top.attn", f);
    w.top_mlp.visit("denoiser.top.mlp", f);
    f("denoiser.out.norm.g", w.out_norm_g);
    f("denoiser.out.norm.b", w.out_norm_b);
    f("denoiser.out.w", w.out_w);
    f("denoiser.out.b", w.out_b);
    f("denoiser.skip_gain", w.skip_gain);
    f("denoiser.prior.mean", w.prior_mean);
    f("denoiser.prior.cov", w.prior_cov);
  }
};

// The fit counts the isotropic default as this many extra images: the prior is
// the mean and covariance of the mixture of the training tokens and the default
// Gaussian. A handful of images stays close to the default, so colours the fit
// never saw keep some variance; a full dataset barely moves.
inline constexpr double kPriorDefaultImages = 1.0;

// Fits the token prior to `latents` (one matrix per image).
template <typename Scalar>
void fit_latent_prior(DenoiserWeights<Scalar>& w, const std::vector<Matrix<Scalar>>& latents,
                      double default_images = kPriorDefaultImages) {
  if (!(default_images >= 0.0)) throw std::invalid_argument("fit_latent_prior: default weight must be non-negative");
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(kLatentChannels);
  Eigen::Index n = 0;
  for (const auto& z : latents) {
    if (z.cols() != kLatentChannels) throw ShapeError("fit_latent_prior: latent width mismatch");
    sum += z.template cast<double>().colwise().sum();
    n += z.rows();
  }
  if (n < 2) throw std::invalid_argument("fit_latent_prior: need at least two tokens");
  const Eigen::RowVectorXd mean = sum / static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(kLatentChannels, kLatentChannels);
  for (const auto& z : latents) {
    const Eigen::MatrixXd c = z.template cast<double>().rowwise() - mean;
    cov.noalias() += c.transpose() * c;
  }
  cov /= static_cast<double>(n - 1);

  const double d = default_images / (default_images + static_cast<double>(latents.size()));
  const Eigen::RowVectorXd mean0 = Eigen::RowVectorXd::Constant(kLatentChannels, kLatentMean);
  const Eigen::RowVectorXd shift = mean - mean0;
  Eigen::MatrixXd mixed = (1.0 - d) * cov + d * (1.0 - d) * shift.transpose() * shift;
  mixed.diagonal().array() += d * kLatentStd * kLatentStd;
  w.prior_mean = ((1.0 - d) * mean + d * mean0).cast<Scalar>();
  w.prior_cov = mixed.cast<Scalar>();
}

namespace detail {

// s * a for a 1 x 1 Var s.
template <typename Scalar>
Var<Scalar> scale_by(Var<Scalar> s, Var<Scalar> a) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("scale_by: scale must be 1 x 1");
  auto* t = a.tape();
  const int is = s.id(), ia = a.id();
  return t->push(s.value()(0, 0) * a.value(), t->any_needs_grad({is, ia}), [t, is, ia](int self) {
    const auto& g = t->grad(self);
    if (t->needs_grad(is)) t->grad_ref(is)(0, 0) += g.cwiseProduct(t->value(ia)).sum();
    if (t->needs_grad(ia)) t->grad_ref(ia) += t->value(is)(0, 0) * g;
  });
}

}  // namespace detail

// Conditioning tokens fed to every attention site.
template <typename Scalar>
struct Conditioning {
  Var<Scalar> text;      // L x D
  Var<Scalar> identity;  // 1 x D
  Var<Scalar> makeup;    // 1 x D
};

template <typename Scalar>
Var<Scalar> predict_noise(const DenoiserWeights<Scalar>& w, Var<Scalar> z_t, int t, const Conditioning<Scalar>& cond,
                          const GuidanceWeights& g, const NoiseSchedule& s) {
  const int grid = w.grid();
  const Eigen::Index n = static_cast<Eigen::Index>(grid) * grid;
  if (z_t.rows() != n || z_t.cols() != kLatentChannels)
    throw ShapeError("predict_noise: latent shape does not match the denoiser resolution");
  auto* tape = z_t.tape();
  const double ab = s.alpha_bar(t);
  if (t < 0) throw std::out_of_range("predict_noise needs t >= 0");

  const auto temb = ad::silu(linear(tape->constant(sinusoidal_embedding<Scalar>(t, w.width)), w.time_w, w.time_b));
  auto h0 = ad::add_row(ad::add(linear(z_t, w.in_w, w.in_b), tape->param(w.position)), temb);
  h0 = ad::add(h0, conv3x3(ad::silu(layer_norm(h0, w.res_norm_g, w.res_norm_b)), grid, grid, 1, w.res_conv_w,
                           w.res_conv_b));

  const int half = grid / 2;
  auto h1 = ad::add_row(conv3x3(h0, grid, grid, 2, w.down_w, w.down_b), temb);
  h1 = ad::add(h1, mga_block(w.mid_attn.mga, layer_norm(h1, w.mid_attn.norm_g, w.mid_attn.norm_b), cond.text,
                             cond.makeup, cond.identity, g));
  h1 = ad::add(h1, w.mid_mlp(h1));

  auto h2 = conv3x3(ad::concat_cols<Scalar>({ad::upsample2x(h1, half, half), h0}), grid, grid, 1, w.up_w, w.up_b);
  h2 = ad::add(h2, mga_block(w.top_attn.mga, layer_norm(h2, w.top_attn.norm_g, w.top_attn.norm_b), cond.text,
                             cond.makeup, cond.identity, g));
  h2 = ad::add(h2, w.top_mlp(h2));

  const auto f = linear(layer_norm(h2, w.out_norm_g, w.out_norm_b), w.out_w, w.out_b);
  const OutputScaling c = output_scaling(ab);
  const LinearNoiseEstimate<Scalar> lin = linear_noise_estimate(w.prior_mean, w.prior_cov, ab);
  const auto eps_lin = ad::add_row(ad::matmul(z_t, tape->constant(lin.map)), tape->constant(lin.offset));
  return ad::lincomb(Scalar(1), detail::scale_by(tape->param(w.skip_gain), eps_lin), static_cast<Scalar>(c.out), f);
}

// ---------------------------------------------------------------------------
// Full model: encoder plus denoiser.

template <typename Scalar>
struct Model {
  EncoderWeights<Scalar> encoder;
  DenoiserWeights<Scalar> denoiser;

  int resolution() const { return denoiser.resolution; }

  static Model init(int resolution, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Model m;
    m.encoder = EncoderWeights<Scalar>::init(resolution, rng);
    m.denoiser = DenoiserWeights<Scalar>::init(resolution, rng);
    return m;
  }
  static Model zeros(int resolution) {
    return Model{EncoderWeights<Scalar>::zeros(resolution), DenoiserWeights<Scalar>::zeros(resolution)};
  }

  template <typename Visitor>
  void visit(Visitor&& f) {
    encoder.visit(f);
    denoiser.visit(f);
  }
  template <typename Visitor>
  void visit(Visitor&& f) const {
    encoder.visit(f);
    denoiser.visit(f);
  }

  template <typename To>
  Model<To> cast() const {
    Model<To> out = Model<To>::zeros(resolution());
    std::vector<const Matrix<Scalar>*> src;
    visit([&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    std::size_t k = 0;
    out.visit([&](const std::string&, Matrix<To>& m) { m = src[k++]->template cast<To>(); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }
};

// Conditioning values for generation (1 x D embeddings).
template <typename Scalar>
struct ConditioningValues {
  Matrix<Scalar> identity;
  Matrix<Scalar> makeup;
  Prompt prompt = Prompt::full_makeup;
};

// eta = 0 DDIM sampling from a seeded standard-normal latent; returns the final
// clean-latent estimate.
template <typename Scalar>
Matrix<Scalar> sample_latent(const Model<Scalar>& model, const ConditioningValues<Scalar>& cond,
                             const GuidanceWeights& g, int ddim_steps, std::uint64_t seed, const NoiseSchedule& s) {
  g.validate();
  const auto ts = sampling_timesteps(s.steps(), ddim_steps);
  const LatentShape shape = latent_shape(model.resolution());
  std::mt19937_64 rng(seed);
  Matrix<Scalar> z = standard_normal<Scalar>(static_cast<Eigen::Index>(shape.height) * shape.width, shape.channels, rng);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : -1;
    Tape<Scalar> tape(false);
    const Conditioning<Scalar> c{embed_text(tape, model.encoder, cond.prompt), tape.constant(cond.identity),
                                 tape.constant(cond.makeup)};
    const auto eps = predict_noise(model.denoiser, tape.constant(z), t, c, g, s);
    z = ddim_step(z, eps.value(), t, t_prev, s);
  }
  return z;
}

template <typename Scalar>
Image generate(const Model<Scalar>& model, const ConditioningValues<Scalar>& cond, const GuidanceWeights& g,
               int ddim_steps, std::uint64_t seed, const NoiseSchedule& s) {
  Image img = decode_latent(sample_latent(model, cond, g, ddim_steps, seed, s), model.resolution());
  img.pixels = img.pixels.cwiseMax(Real(0)).cwiseMin(Real(1));
  return img;
}

}  // namespace mkup
