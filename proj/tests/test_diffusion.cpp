#include "mkup/losses.hpp"
#include "mkup/synthetic_faces.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

using namespace mkup;
using M = Matrix<double>;

namespace {

M randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return standard_normal<double>(r, c, rng);
}

Image random_image(int res, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(res, res);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
  return img;
}

// Adds small noise to every parameter so no gradient path is switched off by
// zero-initialised biases or gains.
template <typename Visitable>
void jitter(Visitable& v, std::uint64_t seed, double std) {
  std::mt19937_64 rng(seed);
  v.visit([&](const std::string&, M& m) {
    M noise(m.rows(), m.cols());
    fill_truncated_normal(noise, std, rng);
    m += noise;
  });
}

Conditioning<double> random_cond(Tape<double>& t, std::uint64_t seed) {
  return {t.constant(randn(2, kEmbedDim, seed)), t.constant(randn(1, kEmbedDim, seed + 1)),
          t.constant(randn(1, kEmbedDim, seed + 2))};
}

double l2(const Image& a, const Image& b) { return std::sqrt((a.pixels - b.pixels).cast<double>().squaredNorm()); }

}  // namespace

TEST_CASE("make_schedule") {
  const auto s = make_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bars[1] == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(s.alpha_bars[0] == 1.0 - s.betas[0]);

  const auto c = make_schedule(10, 0.05, 0.05);
  for (double b : c.betas) CHECK(b == 0.05);

  const auto d = make_schedule(kDefaultTimesteps);
  CHECK(d.steps() == 200);
  CHECK(d.betas.front() == doctest::Approx(1e-4));
  CHECK(d.betas.back() == doctest::Approx(0.02));
  CHECK(d.alpha_bar(-1) == 1.0);
  CHECK_THROWS_AS(d.alpha_bar(200), std::out_of_range);

  CHECK_THROWS_AS(make_schedule(1, 0.1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST_CASE("property: alpha_bars strictly decrease inside (0, 1)") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1e-5, 0.2);
  for (int k = 0; k < 200; ++k) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const auto s = make_schedule(2 + static_cast<int>(rng() % 300), a, b);
    for (int t = 0; t < s.steps(); ++t) {
      CHECK(s.alpha_bars[t] > 0.0);
      CHECK(s.alpha_bars[t] < 1.0);
      if (t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
  }
}

TEST_CASE("sampling timesteps are evenly spaced and descending") {
  const auto ts = sampling_timesteps(200, 50);
  REQUIRE(ts.size() == 50);
  CHECK(ts.front() == 199);
  CHECK(ts.back() == 3);
  for (std::size_t k = 1; k < ts.size(); ++k) CHECK(ts[k - 1] - ts[k] == 4);
  const auto all = sampling_timesteps(200, 200);
  for (int k = 0; k < 200; ++k) CHECK(all[k] == 199 - k);
  CHECK(unroll_timesteps(99, 3) == std::vector<int>{99, 65, 32});
  CHECK_THROWS_AS(sampling_timesteps(200, 201), std::invalid_argument);
  CHECK_THROWS_AS(sampling_timesteps(200, 0), std::invalid_argument);
}

TEST_CASE("latent transform is lossless") {
  const Image img = random_image(64, 3);
  const auto z = encode_latent<Real>(img);
  const auto shape = latent_shape(64);
  CHECK(shape.channels == 48);
  CHECK(shape.height == 16);
  CHECK(shape.width == 16);
  CHECK(z.rows() == 256);
  CHECK(z.cols() == 48);
  CHECK(decode_latent(z, 64) == img);
  CHECK(decode_latent(encode_latent<double>(img), 64) == img);
  CHECK(encode_latent<Real>(Image(64, 64)).isZero(0));
  // a face image round-trips as well
  const auto face = render_face(sample_identity(2), sample_makeup(0, 4), 32).image;
  CHECK(decode_latent(encode_latent<Real>(face), 32) == face);
  // pixel (y, x) = (5, 6) lands in token (1, 1) at patch offset (1, 2)
  CHECK(z(1 * 16 + 1, (1 * 4 + 2) * 3 + 2) == img.at(5, 6, 2) * kLatentScale);
  CHECK_THROWS_AS(encode_latent<Real>(Image(30, 30)), ShapeError);
  CHECK_THROWS_AS(decode_latent(z, 32), ShapeError);
}

TEST_CASE("add_noise") {
  NoiseSchedule near_one;
  near_one.betas = {1e-12};
  near_one.alpha_bars = {1.0 - 1e-12};
  const M z0 = randn(16, 48, 4), eps = randn(16, 48, 5);
  CHECK((add_noise(z0, eps, 0, near_one) - z0).cwiseAbs().maxCoeff() <= 1e-5);

  const auto s = make_schedule(kDefaultTimesteps);
  CHECK(add_noise(z0, M(M::Zero(16, 48)), 77, s).isApprox(std::sqrt(s.alpha_bar(77)) * z0, 1e-15));
  CHECK_THROWS_AS(add_noise(z0, eps, 200, s), std::out_of_range);
  CHECK_THROWS_AS(add_noise(z0, M(randn(4, 48, 1)), 10, s), ShapeError);

  // E||z_t||^2 / dim = abar + (1 - abar) = 1 for standard-normal z0 and eps
  std::mt19937_64 rng(6);
  double total = 0;
  const int draws = 10000;
  for (int k = 0; k < draws; ++k) {
    const int t = static_cast<int>(rng() % 200);
    const M a = standard_normal<double>(1, 48, rng), e = standard_normal<double>(1, 48, rng);
    total += add_noise(a, e, t, s).squaredNorm() / 48.0;
  }
  CHECK(total / draws == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("ddim_step") {
  const auto s = make_schedule(kDefaultTimesteps);
  const M z = randn(16, 48, 7);
  const M zero = M::Zero(16, 48);
  CHECK(ddim_step(z, zero, 120, 80, s).isApprox(z * std::sqrt(s.alpha_bar(80) / s.alpha_bar(120)), 1e-12));
  CHECK(ddim_step(z, zero, 120, -1, s).isApprox(z / std::sqrt(s.alpha_bar(120)), 1e-12));
  CHECK(ddim_step(z, z, 50, 10, s) == ddim_step(z, z, 50, 10, s));
  CHECK_THROWS_AS(ddim_step(z, zero, 50, 50, s), std::invalid_argument);
  CHECK_THROWS_AS(ddim_step(z, zero, 50, 60, s), std::invalid_argument);

  // with the true noise the step lands exactly on the re-noised clean latent
  std::mt19937_64 rng(8);
  for (int k = 0; k < 300; ++k) {
    const int t = 1 + static_cast<int>(rng() % 199);
    const int t_prev = static_cast<int>(rng() % static_cast<std::uint64_t>(t + 1)) - 1;
    const M z0 = standard_normal<double>(4, 48, rng), eps = standard_normal<double>(4, 48, rng);
    const M stepped = ddim_step(add_noise(z0, eps, t, s), eps, t, t_prev, s);
    const M expected = t_prev < 0 ? z0 : add_noise(z0, eps, t_prev, s);
    CHECK((stepped - expected).cwiseAbs().maxCoeff() <= 1e-5);
  }

  // the taped version matches the matrix version
  Tape<double> tape(false);
  CHECK(ddim_step(tape.constant(z), tape.constant(randn(16, 48, 9)), 90, 30, s).value().isApprox(
      ddim_step(z, randn(16, 48, 9), 90, 30, s), 1e-14));
}

TEST_CASE("predict_noise") {
  const auto s = make_schedule(kDefaultTimesteps);
  const auto model = Model<double>::init(16, 10);
  Tape<double> t(false);
  const auto cond = random_cond(t, 11);
  const auto z = t.constant(randn(16, 48, 12));
  const GuidanceWeights g;
  const M a = predict_noise(model.denoiser, z, 60, cond, g, s).value();
  CHECK(a.rows() == 16);
  CHECK(a.cols() == 48);
  CHECK(predict_noise(model.denoiser, z, 60, cond, g, s).value() == a);
  CHECK(predict_noise(model.denoiser, z, 61, cond, g, s).value() != a);

  const GuidanceWeights no_id{1, 1, 0};
  const M b = predict_noise(model.denoiser, z, 60, cond, no_id, s).value();
  auto other = cond;
  other.identity = t.constant(randn(1, kEmbedDim, 99) * 10.0);
  CHECK(predict_noise(model.denoiser, z, 60, other, no_id, s).value() == b);
  CHECK(predict_noise(model.denoiser, z, 60, other, g, s).value() != a);

  CHECK_THROWS_AS(predict_noise(model.denoiser, t.constant(randn(15, 48, 1)), 60, cond, g, s), ShapeError);
  CHECK_THROWS_AS(predict_noise(model.denoiser, z, 200, cond, g, s), std::out_of_range);
  CHECK_THROWS_AS(DenoiserWeights<double>::zeros(4), ShapeError);

  // the all-zero network predicts zero noise
  const auto zero = Model<double>::zeros(16);
  CHECK(predict_noise(zero.denoiser, z, 60, cond, g, s).value().isZero(0));
}

TEST_CASE("linear noise estimate") {
  const auto s = make_schedule(kDefaultTimesteps);
  const int n = kLatentChannels;

  // isotropic prior: the scalar closed form
  const M mean = M::Constant(1, n, kLatentMean), iso = M::Identity(n, n) * (kLatentStd * kLatentStd);
  for (int t : {0, 10, 99, 199}) {
    const OutputScaling c = output_scaling(s.alpha_bar(t));
    const auto lin = linear_noise_estimate(mean, iso, s.alpha_bar(t));
    CHECK((lin.map - c.z * M::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-9 * c.z);
    CHECK((lin.offset - M::Constant(1, n, c.mean * kLatentMean)).cwiseAbs().maxCoeff() < 1e-9 * std::abs(c.mean));
  }

  // full covariance: eps = (z - a x0) / sigma with x0 = mu + (z - a mu) K, K = a C (abar C + sigma^2 I)^-1
  const M f = randn(n, n, 41) * 0.05, mu = randn(1, n, 42) * 0.1;
  const M cov = f * f.transpose();
  for (int t : {3, 50, 180}) {
    const double ab = s.alpha_bar(t), a = std::sqrt(ab), sigma = std::sqrt(1.0 - ab);
    const M k = a * cov * (ab * cov + (1.0 - ab) * M::Identity(n, n)).inverse();
    const M z = randn(5, n, 43 + t);
    const M x0 = (z.rowwise() - a * mu.row(0)) * k;
    const M expected = (z - a * (x0.rowwise() + mu.row(0))) / sigma;
    const auto lin = linear_noise_estimate(mu, cov, ab);
    const M got = (z * lin.map).rowwise() + lin.offset.row(0);
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-8);
  }

  // Monte Carlo: on Gaussian tokens the estimate beats the isotropic one and
  // reaches the posterior variance sum_i l_i / (abar l_i + sigma^2) / n
  std::mt19937_64 rng(44);
  const int t = 10;
  const double ab = s.alpha_bar(t), sigma2 = 1.0 - ab;
  const M x = (standard_normal<double>(20000, n, rng) * f.transpose()).rowwise() + mu.row(0);
  const M eps = standard_normal<double>(20000, n, rng);
  const M z = add_noise(x, eps, t, s);
  const auto full = linear_noise_estimate(mu, cov, ab);
  const auto flat = linear_noise_estimate(mu, iso, ab);
  const double err_full = (((z * full.map).rowwise() + full.offset.row(0)) - eps).squaredNorm() / eps.size();
  const double err_flat = (((z * flat.map).rowwise() + flat.offset.row(0)) - eps).squaredNorm() / eps.size();
  const Eigen::VectorXd l = Eigen::SelfAdjointEigenSolver<M>(cov).eigenvalues().cwiseMax(0.0);
  const double theory = (l.array() / (ab * l.array() + sigma2)).sum() * ab / n;
  CHECK(err_full == doctest::Approx(theory).epsilon(0.03));
  CHECK(err_full < err_flat);

  CHECK_THROWS_AS(linear_noise_estimate(mu, M(M::Identity(3, 3)), 0.5), ShapeError);
}

TEST_CASE("fit_latent_prior") {
  std::mt19937_64 rng(1);
  auto w = DenoiserWeights<double>::init(16, rng);
  const M a = randn(16, 48, 51), b = randn(16, 48, 52) * 2.0;
  fit_latent_prior(w, {a, b}, 0.0);
  M all(32, 48);
  all << a, b;
  const M mean = all.colwise().mean();
  const M c = all.rowwise() - mean.row(0);
  CHECK((w.prior_mean - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((w.prior_cov - c.transpose() * c / 31.0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(w.prior_cov.isApprox(w.prior_cov.transpose(), 0));

  // with the default counted as one more image, the prior is the pooled
  // statistics of the image and an equally large draw from the default
  std::mt19937_64 rng2(53);
  const M big = (standard_normal<double>(40000, 48, rng2) * 0.03).rowwise() + randn(1, 48, 54).row(0) * 0.05;
  const M draw = (standard_normal<double>(40000, 48, rng2) * kLatentStd).array() + kLatentMean;
  fit_latent_prior(w, {big});
  M pooled(80000, 48);
  pooled << big, draw;
  const M pmean = pooled.colwise().mean();
  const M pc = pooled.rowwise() - pmean.row(0);
  const M pcov = pc.transpose() * pc / 79999.0;
  CHECK((w.prior_mean - pmean).cwiseAbs().maxCoeff() < 1.5e-3);
  CHECK((w.prior_cov - pcov).cwiseAbs().maxCoeff() < 0.03 * pcov.diagonal().maxCoeff());
  CHECK_THROWS_AS(fit_latent_prior(w, {big}, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(fit_latent_prior(w, {M(1, 48)}), std::invalid_argument);
  CHECK_THROWS_AS(fit_latent_prior(w, {M(4, 47)}), ShapeError);
  CHECK_FALSE(trainable("denoiser.prior.cov"));
  CHECK_FALSE(trainable("denoiser.skip_gain"));
  CHECK(trainable("denoiser.out.w"));
}

TEST_CASE("gradient check: mean squared denoiser output") {
  const auto s = make_schedule(kDefaultTimesteps);
  std::mt19937_64 rng(13);
  auto w = DenoiserWeights<double>::init(16, rng);
  jitter(w, 14, 0.05);
  const M z = randn(16, 48, 15), text = randn(2, kEmbedDim, 16), id = randn(1, kEmbedDim, 17),
          mk = randn(1, kEmbedDim, 18);
  const GuidanceWeights g{0.9, 1.2, 0.7};
  const LossFn loss = [&](Tape<double>& t) {
    const Conditioning<double> c{t.constant(text), t.constant(id), t.constant(mk)};
    const auto out = predict_noise(w, t.constant(z), 37, c, g, s);
    return ad::mean_all(ad::mul(out, out));
  };
  const auto r = grad_check(collect_params(w), loss, 12, 19);
  for (std::size_t k = 0; k < std::min<std::size_t>(r.failures.size(), 10); ++k) MESSAGE(r.failures[k]);
  CHECK(r.checked > 500);
  CHECK(r.pass_rate() >= 0.95);
}

TEST_CASE("gradient check: all three losses through the whole model") {
  const auto s = make_schedule(kDefaultTimesteps);
  auto model = Model<double>::init(16, 20);
  jitter(model, 21, 0.03);
  const Image src = random_image(16, 22), ref = random_image(16, 23), ref_bare = random_image(16, 24),
              target = random_image(16, 25);
  const TrainingExample ex{&src, &ref, &ref_bare, &target, Prompt::lip_makeup};
  std::mt19937_64 rng(26);
  const auto draws = ExampleDraws<double>::draw(rng, s, 16, 48);
  const LossFn loss = [&](Tape<double>& t) {
    return example_losses(t, model, ex, draws, 1.0, 1.0, kDefaultUnrollSteps, GuidanceWeights{}, s).total;
  };
  const auto r = grad_check(collect_params(model), loss, 8, 27);
  for (std::size_t k = 0; k < std::min<std::size_t>(r.failures.size(), 10); ++k) MESSAGE(r.failures[k]);
  CHECK(r.checked > 500);
  CHECK(r.pass_rate() >= 0.95);
}

TEST_CASE("loss_diffusion") {
  const auto s = make_schedule(kDefaultTimesteps);
  const auto zero = Model<double>::zeros(16);
  Tape<double> t(false);
  const auto cond = random_cond(t, 30);
  const auto z0 = t.constant(randn(16, 48, 31));
  // zero network predicts zero; zero noise makes the prediction exact
  CHECK(loss_diffusion(zero.denoiser, cond, z0, M(M::Zero(16, 48)), 50, GuidanceWeights{}, s).value()(0, 0) == 0.0);

  // with unit-normal noise the zero network's loss is E||eps||^2 / dim = 1
  std::mt19937_64 rng(32);
  std::vector<double> items;
  std::vector<M> eps;
  std::vector<int> ts;
  for (int k = 0; k < 400; ++k) {
    eps.push_back(standard_normal<double>(16, 48, rng));
    ts.push_back(static_cast<int>(rng() % 200));
    items.push_back(loss_diffusion(zero.denoiser, cond, z0, eps.back(), ts.back(), GuidanceWeights{}, s).value()(0, 0));
  }
  double mean = 0;
  for (double v : items) mean += v / items.size();
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));

  // batch mean does not depend on order with fixed per-item draws
  const auto model = Model<double>::init(16, 33);
  double forward = 0, backward = 0;
  for (int k = 0; k < 6; ++k)
    forward += loss_diffusion(model.denoiser, cond, z0, eps[k], ts[k], GuidanceWeights{}, s).value()(0, 0);
  for (int k = 5; k >= 0; --k) {
    const double v = loss_diffusion(model.denoiser, cond, z0, eps[k], ts[k], GuidanceWeights{}, s).value()(0, 0);
    CHECK(v >= 0.0);
    backward += v;
  }
  CHECK(forward == doctest::Approx(backward).epsilon(1e-12));
}

TEST_CASE("reconstruction losses") {
  const auto s = make_schedule(kDefaultTimesteps);
  const auto model = Model<double>::init(16, 40);
  Tape<double> t(false);
  const auto cond = random_cond(t, 41);
  const auto target = t.constant(encode_latent<double>(random_image(16, 42)));
  CHECK(latent_image_mse(target, target).value()(0, 0) == 0.0);
  // pixel units: a latent offset of kLatentScale is one unit of intensity
  CHECK(latent_image_mse(ad::add(target, t.constant(M::Constant(16, 48, kLatentScale))), target).value()(0, 0) ==
        doctest::Approx(1.0));

  const M eps = randn(16, 48, 43);
  const double lm = loss_makeup(model.denoiser, cond, target, eps, 3, GuidanceWeights{}, s).value()(0, 0);
  const auto start = add_noise(target, t.constant(eps), unroll_start(s), s);
  const auto generated = unrolled_generate(model.denoiser, cond, start, {99, 65, 32}, GuidanceWeights{}, s);
  CHECK(lm == doctest::Approx(latent_image_mse(generated, target).value()(0, 0)).epsilon(1e-12));
  CHECK(loss_id(model.denoiser, cond, target, eps, 3, GuidanceWeights{}, s).value()(0, 0) == lm);

  std::mt19937_64 rng(44);
  for (int k = 0; k < 20; ++k) {
    const M e = standard_normal<double>(16, 48, rng);
    CHECK(loss_makeup(model.denoiser, cond, target, e, 1 + k % 4, GuidanceWeights{}, s).value()(0, 0) >= 0.0);
  }
}

TEST_CASE("loss_total") {
  CHECK(loss_total(1.0, 2.0, 3.0, 1.0, 1.0) == 6.0);
  CHECK(loss_total(1.0, 2.0, 3.0, 0.0, 0.0) == 1.0);
  CHECK(loss_total(0.0, 0.0, 0.0, 1.0, 1.0) == 0.0);
  CHECK(loss_total(LossReport{1.0, 2.0, 3.0, 0.0}, 0.5, 2.0) == 8.0);

  const auto s = make_schedule(kDefaultTimesteps);
  const auto model = Model<double>::init(16, 50);
  const Image a = random_image(16, 51), b = random_image(16, 52), c = random_image(16, 53), d = random_image(16, 54);
  std::mt19937_64 rng(55);
  const auto draws = ExampleDraws<double>::draw(rng, s, 16, 48);
  Tape<double> t(false);
  const auto l = example_losses(t, model, TrainingExample{&a, &b, &c, &d, Prompt::eye_makeup}, draws, 0.25, 4.0,
                                3, GuidanceWeights{}, s);
  CHECK(l.total.value()(0, 0) == doctest::Approx(loss_total(l.diffusion.value()(0, 0), l.makeup.value()(0, 0),
                                                            l.id.value()(0, 0), 0.25, 4.0))
                                     .epsilon(1e-14));
}

TEST_CASE("generate") {
  const auto s = make_schedule(kDefaultTimesteps);
  const auto model = Model<Real>::init(32, 60);
  const auto face = render_face(sample_identity(1), sample_makeup(0, 0), 32).image;
  const auto ref = render_face(sample_identity(2), sample_makeup(0, 2), 32).image;
  const auto src_codes = image_codes(model.encoder, face);
  const auto ref_codes = image_codes(model.encoder, ref);
  const ConditioningValues<Real> cond{src_codes.identity, ref_codes.makeup, Prompt::eye_makeup};

  const Image a = generate(model, cond, GuidanceWeights{}, 50, 7, s);
  CHECK(a.height == 32);
  CHECK(a == generate(model, cond, GuidanceWeights{}, 50, 7, s));
  CHECK_FALSE(a == generate(model, cond, GuidanceWeights{}, 50, 8, s));
  CHECK(a.pixels.minCoeff() >= 0.0f);
  CHECK(a.pixels.maxCoeff() <= 1.0f);

  const GuidanceWeights no_makeup{1, 0, 1};
  auto perturbed = cond;
  perturbed.makeup = src_codes.makeup * 3.0f;
  CHECK(generate(model, cond, no_makeup, 20, 7, s) == generate(model, perturbed, no_makeup, 20, 7, s));

  // full-length sampling completes; its distance to the 50-step result is a
  // regression number for this initialisation, pinned from the first run
  const Image full = generate(model, cond, GuidanceWeights{}, kDefaultTimesteps, 7, s);
  const double dist = l2(full, a);
  MESSAGE("L2(200 steps, 50 steps) = " << dist);
  CHECK(dist == doctest::Approx(0.8597).epsilon(0.05));
  CHECK_THROWS_AS(generate(model, cond, GuidanceWeights{}, kDefaultTimesteps + 1, 7, s), std::invalid_argument);
}
