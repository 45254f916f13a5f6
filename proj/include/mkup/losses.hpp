#pragma once

// Training losses.
//
// L_diffusion is the usual noise-prediction error at a random timestep. The two
// reconstruction losses need the output of the generator, which is approximated
// during training by a short differentiable DDIM unroll: the clean target latent
// is noised to a mid-schedule timestep and denoised in K steps down to t = -1.
// Both are mean squared errors in pixel units.

#include "mkup/diffusion.hpp"

#include <cmath>
#include <random>

namespace mkup {

inline constexpr int kDefaultUnrollSteps = 3;

struct LossReport {
  double l_diffusion = 0;
  double l_makeup = 0;
  double l_id = 0;
  double l_total = 0;
};

inline double loss_total(double l_diffusion, double l_makeup, double l_id, double lambda1, double lambda2) {
  return l_diffusion + lambda1 * l_makeup + lambda2 * l_id;
}

inline double loss_total(const LossReport& r, double lambda1, double lambda2) {
  return loss_total(r.l_diffusion, r.l_makeup, r.l_id, lambda1, lambda2);
}

// Timesteps of the training unroll: K evenly spaced steps from t_start.
inline std::vector<int> unroll_timesteps(int t_start, int k) {
  if (k < 1 || t_start + 1 < k) throw std::invalid_argument("unroll needs 1 <= K <= t_start + 1");
  return sampling_timesteps(t_start + 1, k);
}

inline int unroll_start(const NoiseSchedule& s) { return s.steps() / 2 - 1; }

template <typename Scalar>
Var<Scalar> loss_diffusion(const DenoiserWeights<Scalar>& w, const Conditioning<Scalar>& cond, Var<Scalar> z0,
                           const Matrix<Scalar>& eps, int t, const GuidanceWeights& g, const NoiseSchedule& s) {
  auto* tape = z0.tape();
  const auto e = tape->constant(eps);
  const auto z_t = add_noise(z0, e, t, s);
  return ad::mse(predict_noise(w, z_t, t, cond, g, s), e);
}

// Differentiable K-step DDIM reconstruction of a latent from its noised
// version at timesteps.front(). Returns the latent estimate at t = -1.
template <typename Scalar>
Var<Scalar> unrolled_generate(const DenoiserWeights<Scalar>& w, const Conditioning<Scalar>& cond, Var<Scalar> z_start,
                              const std::vector<int>& timesteps, const GuidanceWeights& g, const NoiseSchedule& s) {
  Var<Scalar> z = z_start;
  for (std::size_t k = 0; k < timesteps.size(); ++k) {
    const int t = timesteps[k];
    const int t_prev = k + 1 < timesteps.size() ? timesteps[k + 1] : -1;
    z = ddim_step(z, predict_noise(w, z, t, cond, g, s), t, t_prev, s);
  }
  return z;
}

// Pixel-space mean squared error between a latent estimate and a target latent.
template <typename Scalar>
Var<Scalar> latent_image_mse(Var<Scalar> z, Var<Scalar> target) {
  return ad::scale(ad::mse(z, target), static_cast<Scalar>(1.0 / (kLatentScale * kLatentScale)));
}

// || G(f_I(source), f_M(reference)) - I_target ||^2 with the unrolled generator.
template <typename Scalar>
Var<Scalar> loss_makeup(const DenoiserWeights<Scalar>& w, const Conditioning<Scalar>& cond, Var<Scalar> target_latent,
                        const Matrix<Scalar>& eps, int unroll_steps, const GuidanceWeights& g,
                        const NoiseSchedule& s) {
  const int t0 = unroll_start(s);
  auto* tape = target_latent.tape();
  const auto z_start = add_noise(target_latent, tape->constant(eps), t0, s);
  return latent_image_mse(unrolled_generate(w, cond, z_start, unroll_timesteps(t0, unroll_steps), g, s),
                          target_latent);
}

// Same structure with the reference's bare-face makeup code and the source's
// bare image as target.
template <typename Scalar>
Var<Scalar> loss_id(const DenoiserWeights<Scalar>& w, const Conditioning<Scalar>& bare_cond,
                    Var<Scalar> bare_target_latent, const Matrix<Scalar>& eps, int unroll_steps,
                    const GuidanceWeights& g, const NoiseSchedule& s) {
  return loss_makeup(w, bare_cond, bare_target_latent, eps, unroll_steps, g, s);
}

// Images for one training example. `target` is the source identity wearing the
// reference's style; `source` is the bare source face.
struct TrainingExample {
  const Image* source = nullptr;
  const Image* reference = nullptr;
  const Image* reference_bare = nullptr;
  const Image* target = nullptr;
  Prompt prompt = Prompt::full_makeup;
};

// Random quantities consumed by one example.
template <typename Scalar>
struct ExampleDraws {
  int t = 0;
  Matrix<Scalar> eps_diffusion, eps_makeup, eps_id;

  static ExampleDraws draw(std::mt19937_64& rng, const NoiseSchedule& s, Eigen::Index rows, Eigen::Index cols) {
    ExampleDraws d;
    d.t = static_cast<int>(rng() % static_cast<std::uint64_t>(s.steps()));
    d.eps_diffusion = standard_normal<Scalar>(rows, cols, rng);
    d.eps_makeup = standard_normal<Scalar>(rows, cols, rng);
    d.eps_id = standard_normal<Scalar>(rows, cols, rng);
    return d;
  }
};

template <typename Scalar>
struct ExampleLosses {
  Var<Scalar> diffusion, makeup, id, total;
};

// Builds all three losses for one example on `tape`. The source, the styled
// reference and the bare reference are each encoded once.
template <typename Scalar>
ExampleLosses<Scalar> example_losses(Tape<Scalar>& tape, const Model<Scalar>& model, const TrainingExample& ex,
                                     const ExampleDraws<Scalar>& d, double lambda1, double lambda2,
                                     int unroll_steps, const GuidanceWeights& g, const NoiseSchedule& s) {
  const auto& enc = model.encoder;
  const auto f_source = encode_image(tape, enc, *ex.source);
  const auto f_reference = encode_image(tape, enc, *ex.reference);
  const auto f_reference_bare = encode_image(tape, enc, *ex.reference_bare);
  const auto identity = project_identity(enc, f_source);

  const Conditioning<Scalar> cond{embed_text(tape, enc, ex.prompt), identity, project_makeup(enc, f_reference)};
  const Conditioning<Scalar> bare_cond{embed_text(tape, enc, Prompt::no_makeup), identity,
                                       project_makeup(enc, f_reference_bare)};

  const auto target = tape.constant(encode_latent<Scalar>(*ex.target));
  const auto bare_target = tape.constant(encode_latent<Scalar>(*ex.source));

  ExampleLosses<Scalar> out;
  out.diffusion = loss_diffusion(model.denoiser, cond, target, d.eps_diffusion, d.t, g, s);
  out.makeup = loss_makeup(model.denoiser, cond, target, d.eps_makeup, unroll_steps, g, s);
  out.id = loss_id(model.denoiser, bare_cond, bare_target, d.eps_id, unroll_steps, g, s);
  out.total = ad::add(out.diffusion, ad::lincomb(static_cast<Scalar>(lambda1), out.makeup,
                                                 static_cast<Scalar>(lambda2), out.id));
  return out;
}

}  // namespace mkup
