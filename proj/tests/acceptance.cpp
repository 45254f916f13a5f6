// Runs the nine acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is 0 only when every selected criterion passes.

#include "mkup/checkpoint.hpp"
#include "mkup/curation.hpp"
#include "mkup/image_io.hpp"
#include "mkup/losses.hpp"
#include "mkup/synthetic_faces.hpp"

#include "gradcheck.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace mkup;
namespace fs = std::filesystem;
using M = Matrix<double>;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1: fusion

Outcome fusion_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> weight(0.0, 3.0), coef(-2.0, 2.0);
  std::uniform_int_distribution<int> tokens(1, 12);
  const int dim = kEmbedDim;
  int failed = 0;
  Tape<double> t(false);
  for (int k = 0; k < 1000; ++k) {
    const auto w = MgaWeights<double>::init(dim, rng);
    const int n = tokens(rng);
    const M z = standard_normal<double>(n, dim, rng), c = standard_normal<double>(2, dim, rng),
            fm = standard_normal<double>(1, dim, rng), fi = standard_normal<double>(1, dim, rng);
    const M fm2 = 10.0 * standard_normal<double>(1, dim, rng), fi2 = 10.0 * standard_normal<double>(1, dim, rng),
            c2 = 10.0 * standard_normal<double>(2, dim, rng);
    const GuidanceWeights g{weight(rng), weight(rng), weight(rng)};
    auto block = [&](const M& cc, const M& m, const M& i, GuidanceWeights gw) {
      return mga_block(w, t.constant(z), t.constant(cc), t.constant(m), t.constant(i), gw).value();
    };
    bool ok = true;
    // zero-weight independence, bit for bit
    ok &= block(c, fm, fi, {g.text, g.makeup, 0}) == block(c, fm, fi2, {g.text, g.makeup, 0});
    ok &= block(c, fm, fi, {g.text, 0, g.id}) == block(c, fm2, fi, {g.text, 0, g.id});
    // text also drives the makeup self-update, so only the text-and-makeup-free block ignores it
    ok &= block(c, fm, fi, {0, 0, g.id}) == block(c2, fm, fi, {0, 0, g.id});
    // homogeneity in the weights
    const double h = weight(rng);
    const M base = block(c, fm, fi, g);
    ok &= block(c, fm, fi, g.scaled(h)).isApprox(h * base, 1e-12);
    // linearity of the fusion in each attention output
    const M a = standard_normal<double>(n, dim, rng), a2 = standard_normal<double>(n, dim, rng),
            b = standard_normal<double>(n, dim, rng), d = standard_normal<double>(n, dim, rng);
    const double alpha = coef(rng);
    const M lhs = fuse(t.constant(M(alpha * a + a2)), t.constant(b), t.constant(d), g).value();
    const M rhs = alpha * fuse(t.constant(a), t.constant(M::Zero(n, dim)), t.constant(M::Zero(n, dim)), g).value() +
                  fuse(t.constant(a2), t.constant(b), t.constant(d), g).value();
    ok &= lhs.isApprox(rhs, 1e-10);
    failed += ok ? 0 : 1;
  }
  const double secs = seconds_since(t0);
  return {failed == 0 && secs < 10.0, fmt("%d/1000 instances pass, %.2f s (limit 10 s)", 1000 - failed, secs)};
}

// ---- 2: gradients

template <typename Visitable>
void jitter(Visitable& v, std::uint64_t seed, double std) {
  std::mt19937_64 rng(seed);
  v.visit([&](const std::string&, M& m) {
    M noise(m.rows(), m.cols());
    fill_truncated_normal(noise, std, rng);
    m += noise;
  });
}

Outcome gradient_oracle() {
  std::mt19937_64 rng(202);
  const auto s = make_schedule(kDefaultTimesteps);
  Image img(16, 16);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);

  auto enc = EncoderWeights<double>::init(16, rng);
  jitter(enc, 203, 0.05);
  const M r1 = standard_normal<double>(1, kEmbedDim, rng), r2 = standard_normal<double>(1, kEmbedDim, rng),
          r3 = standard_normal<double>(2, kEmbedDim, rng);
  const GradCheck ge = grad_check(
      collect_params(enc),
      [&](Tape<double>& t) {
        const auto f = encode_image(t, enc, img);
        auto l = ad::add(ad::mse(project_identity(enc, f), t.constant(r1)), ad::mse(project_makeup(enc, f), t.constant(r2)));
        return ad::add(l, ad::mse(embed_text(t, enc, Prompt::eye_makeup), t.constant(r3)));
      },
      40, 204);

  auto mga = MgaWeights<double>::init(16, rng);
  const M z = standard_normal<double>(6, 16, rng), c = standard_normal<double>(2, 16, rng),
          fm = standard_normal<double>(1, 16, rng), fi = standard_normal<double>(1, 16, rng),
          target = standard_normal<double>(6, 16, rng);
  NamedParams mp;
  mga.visit("mga", [&](const std::string& name, M& m) { mp.emplace_back(name, &m); });
  const GradCheck gm = grad_check(
      mp,
      [&](Tape<double>& t) {
        return ad::mse(mga_block(mga, t.constant(z), t.constant(c), t.constant(fm), t.constant(fi), {0.8, 1.1, 0.6}),
                       t.constant(target));
      },
      60, 205);

  auto den = DenoiserWeights<double>::init(16, rng);
  jitter(den, 206, 0.05);
  const M zl = standard_normal<double>(16, 48, rng), text = standard_normal<double>(2, kEmbedDim, rng),
          id = standard_normal<double>(1, kEmbedDim, rng), mk = standard_normal<double>(1, kEmbedDim, rng);
  const GradCheck gd = grad_check(
      collect_params(den),
      [&](Tape<double>& t) {
        const Conditioning<double> cond{t.constant(text), t.constant(id), t.constant(mk)};
        const auto out = predict_noise(den, t.constant(zl), 37, cond, GuidanceWeights{0.9, 1.2, 0.7}, s);
        return ad::mean_all(ad::mul(out, out));
      },
      12, 207);

  bool pass = true;
  std::string detail;
  for (const auto& [name, g] : {std::pair{"encoder", ge}, std::pair{"mga", gm}, std::pair{"denoiser", gd}}) {
    pass &= g.pass_rate() >= 0.95;
    detail += fmt("%s %d/%d (%.1f%%) ", name, g.passed, g.checked, 100.0 * g.pass_rate());
  }
  return {pass, detail + "within 1e-3 at h = 1e-4; need 95%"};
}

// ---- 3: DDIM

Outcome ddim_identity() {
  const auto s = make_schedule(kDefaultTimesteps);
  std::mt19937_64 rng(303);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const int t = 1 + static_cast<int>(rng() % (kDefaultTimesteps - 1));
    const int t_prev = static_cast<int>(rng() % static_cast<std::uint64_t>(t + 1)) - 1;
    const M z0 = standard_normal<double>(16, 48, rng), eps = standard_normal<double>(16, 48, rng);
    const M stepped = ddim_step(add_noise(z0, eps, t, s), eps, t, t_prev, s);
    const M expected = t_prev < 0 ? z0 : add_noise(z0, eps, t_prev, s);
    worst = std::max(worst, (stepped - expected).cwiseAbs().maxCoeff());
  }
  const auto model = Model<Real>::init(32, 304);
  const ConditioningValues<Real> cond{standard_normal<Real>(1, kEmbedDim, rng), standard_normal<Real>(1, kEmbedDim, rng),
                                      Prompt::full_makeup};
  const Image a = generate(model, cond, GuidanceWeights{}, 50, 305, s);
  const Image b = generate(model, cond, GuidanceWeights{}, 50, 305, s);
  const bool bitwise = a.pixels.size() == b.pixels.size() &&
                       std::memcmp(a.pixels.data(), b.pixels.data(), sizeof(Real) * a.pixels.size()) == 0;
  return {worst <= 1e-5 && bitwise,
          fmt("max error %.3g over 1000 tuples (limit 1e-5); repeated 50-step sampling %s", worst,
              bitwise ? "bitwise identical" : "DIFFERS")};
}

// ---- 4: filter

Outcome filter_oracle() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<CandidatePair> c;
  const double specials[] = {0.69, 0.70, 0.71};
  for (int k = 0; k < 10000; ++k) {
    const SampleId a{k, 0}, b{20000 + k % 97, 1 + k % 8};
    CandidatePair p;
    p.bare_source = {a, "a/" + to_string(a) + ".png", "a/m" + to_string(a) + ".png", Prompt::no_makeup, Provenance::base};
    p.styled_reference = {b, "b/" + to_string(b) + ".png", "b/m" + to_string(b) + ".png", Prompt::full_makeup,
                          Provenance::base};
    p.generated_path = "gen/" + std::to_string(k) + ".png";
    p.sim = k % 10 == 0 ? specials[(k / 10) % 3] : u(rng);
    c.push_back(p);
  }
  const DatasetManifest m = curate(c, 0.7);
  std::vector<const CandidatePair*> expect;
  for (const auto& p : c)
    if (*p.sim >= 0.7) expect.push_back(&p);
  bool same = m.pairs.size() == expect.size();
  int at_boundary = 0;
  for (std::size_t k = 0; same && k < expect.size(); ++k) {
    const auto& p = m.pairs[k];
    same = p.source == expect[k]->bare_source && p.target.id == expect[k]->styled_reference.id &&
           p.target.image_path == expect[k]->styled_reference.image_path &&
           p.target.provenance == Provenance::filtered_retained && p.sim == expect[k]->sim;
    at_boundary += *p.sim == 0.70;
  }
  int boundary_total = 0;
  for (const auto& p : c) boundary_total += *p.sim == 0.70;
  const bool boundary_kept = at_boundary == boundary_total && boundary_total > 0 && filter_pair(0.7, 0.7) == 1 &&
                             filter_pair(0.69, 0.7) == 0 && filter_pair(0.71, 0.7) == 1;
  return {same && boundary_kept, fmt("%zu of 10000 retained, brute force %s; %d/%d pairs at sim = 0.70 kept",
                                     m.pairs.size(), same ? "agrees" : "DISAGREES", at_boundary, boundary_total)};
}

// ---- 5: Frechet distance

FeatureSet gaussian(int n, const Eigen::RowVectorXd& mean, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  FeatureSet x(n, mean.size());
  for (int i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < mean.size(); ++j) x(i, j) = mean(j) + nd(rng);
  return x;
}

Outcome frechet() {
  std::mt19937_64 rng(505);
  const FeatureSet a = gaussian(500, Eigen::RowVectorXd::Zero(8), rng);
  const double self = frechet_distance(a, a);
  Eigen::RowVectorXd m(8);
  m << 1.0, -0.5, 0.25, 0.0, 0.75, -1.0, 0.5, 0.1;
  const double d = frechet_distance(gaussian(10000, Eigen::RowVectorXd::Zero(8), rng), gaussian(10000, m, rng));
  const double rel = std::abs(d - m.squaredNorm()) / m.squaredNorm();
  return {std::abs(self) <= 1e-6 && rel <= 0.05,
          fmt("identical sets %.2g (limit 1e-6); shifted %.4f vs |m|^2 = %.4f, %.2f%% off (limit 5%%)", self, d,
              m.squaredNorm(), 100.0 * rel)};
}

// ---- 6-8: the full-size pipeline

struct FullRun {
  int identities = 16, styles = 8, resolution = 64, holdout = 2, references = 4;
  int g1_steps = 6000, g2_steps = 1000, pool = 8;
  double learning_rate = 1e-3, final_lr_ratio = 0.1;
  double g2_learning_rate = 1e-4;  // fine-tuning G1 at the rate it ended on
  int batch = 4;
};

// Key-sim gap measured at 0.70 on the first full run, pinned with slack. The
// CLS gap has never been positive (the true restyled faces score about -0.30
// too), so it keeps the bare claim of a positive gap.
constexpr double kKeySimMargin = 0.5;
constexpr double kClsMargin = 0.0;
constexpr double kLipRatio = 0.5;

struct FullResults {
  Outcome disentangle, pipeline, region;
};

FullResults full_pipeline(const FullRun& cfg, const fs::path& work) {
  const auto t0 = Clock::now();
  const fs::path data = work / "data", out = work / "pipeline";
  const DatasetManifest base = build_base_dataset(cfg.identities, cfg.styles, cfg.resolution, 7, data);
  const DatasetSplit split =
      holdout_split(base, default_holdout(cfg.identities, cfg.styles, cfg.holdout), cfg.references, 7);
  write_manifest(split.train, data / "train_manifest.txt");
  write_manifest(split.test, data / "test_manifest.txt");

  PipelineConfig pc;
  pc.pool_a_size = pc.pool_b_size = cfg.pool;
  pc.g1_train.steps = cfg.g1_steps;
  pc.g1_train.learning_rate = cfg.learning_rate;
  pc.g1_train.final_lr_ratio = cfg.final_lr_ratio;
  pc.g1_train.batch_size = cfg.batch;
  pc.g1_train.seed = 1;
  pc.g2_train = pc.g1_train;
  pc.g2_train.steps = cfg.g2_steps;
  pc.g2_train.learning_rate = cfg.g2_learning_rate;
  pc.g2_train.final_lr_ratio = 1.0;
  pc.g2_train.seed = 2;
  pc.seed = 3;
  std::ostringstream log;
  const PipelineResult r = run_pipeline(pc, data / "train_manifest.txt", data / "test_manifest.txt", out, &log);
  std::cout << slurp(r.report);
  const double pipeline_secs = seconds_since(t0);

  // Per-transfer scores of G1 on the held-out combinations.
  const Model<Real> g1 = load_checkpoint(r.g1_checkpoint);
  const Dataset test = load_dataset(data / "test_manifest.txt");
  const auto transfers = run_transfers(g1, test, EvalOptions{{}, 50, kDefaultTimesteps, 41});
  const Evaluation ev = score_transfers(transfers, g1.encoder);
  double ks_src = 0, ks_ref = 0, cls_ref = 0, cls_src = 0;
  for (const auto& t : ev.transfers) {
    ks_src += t.key_sim_source;
    ks_ref += t.key_sim_reference.value();
    cls_ref += t.cls_reference;
    cls_src += t.cls_source;
  }
  const double n = static_cast<double>(ev.transfers.size());
  ks_src /= n, ks_ref /= n, cls_ref /= n, cls_src /= n;

  // The same scores for the true restyled faces: what a perfect transfer would get.
  std::vector<Transfer> truth = transfers;
  for (auto& t : truth) t.generated = t.ground_truth.value();
  double gt_cls_ref = 0, gt_cls_src = 0;
  for (const auto& t : score_transfers(truth, g1.encoder).transfers) gt_cls_ref += t.cls_reference, gt_cls_src += t.cls_source;
  gt_cls_ref /= n, gt_cls_src /= n;

  FullResults res;
  res.disentangle = {ks_src - ks_ref > kKeySimMargin && cls_ref - cls_src > kClsMargin,
                     fmt("%d held-out transfers: Key-sim source %.4f vs reference identity %.4f (gap %.4f, need > "
                         "%.3f); CLS reference %.4f vs source %.4f (gap %.4f, need > %.3f); ground truth CLS "
                         "reference %.4f vs source %.4f; pipeline %.0f s",
                         static_cast<int>(n), ks_src, ks_ref, ks_src - ks_ref, kKeySimMargin, cls_ref, cls_src,
                         cls_ref - cls_src, kClsMargin, gt_cls_ref, gt_cls_src, pipeline_secs)};

  const MetricsRow& a = *r.g1_metrics;
  const MetricsRow& b = *r.g2_metrics;
  res.pipeline = {b.fid_to_real.value() <= a.fid_to_real.value() && b.cls >= a.cls,
                  fmt("FID-to-real G1 %.4f, G2 %.4f; CLS G1 %.4f, G2 %.4f; %zu of %zu candidates retained",
                      *a.fid_to_real, *b.fid_to_real, a.cls, b.cls, r.retained, r.candidates)};

  // Lip makeup: held-out transfers whose reference style is lips only, prompted "lip makeup".
  double inside = 0, outside = 0, gt_inside = 0, gt_outside = 0;
  int count = 0;
  std::uint64_t k = 0;
  const NoiseSchedule s = make_schedule(kDefaultTimesteps);
  for (const TrainingPair& p : test.manifest.pairs) {
    ++k;
    if (p.target.prompt != Prompt::lip_makeup || count == 32) continue;
    const Image source = read_png(test.resolve(p.source.image_path));
    const Image reference = read_png(test.resolve(p.target.image_path));
    const LabelMap masks = read_label_png(test.resolve(p.source.masks_path));
    const ConditioningValues<Real> cond{image_codes(g1.encoder, source).identity,
                                        image_codes(g1.encoder, reference).makeup, Prompt::lip_makeup};
    Image result = generate(g1, cond, GuidanceWeights{}, 50, mix_seed(43, k), s);
    quantize_8bit(result);
    const Image truth_image = read_png(sibling_image(test.resolve(p.source.image_path),
                                                     SampleId{p.source.id.identity, p.target.id.makeup}));
    const auto change = [&](const Image& img) {
      double in_sum = 0, out_sum = 0;
      int in_n = 0, out_n = 0;
      for (int y = 0; y < source.height; ++y)
        for (int x = 0; x < source.width; ++x) {
          double d = 0;
          for (int ch = 0; ch < 3; ++ch) d += std::abs(double(img.at(y, x, ch)) - double(source.at(y, x, ch)));
          if (masks.at(y, x) == static_cast<std::uint8_t>(Region::lips))
            in_sum += d / 3, ++in_n;
          else
            out_sum += d / 3, ++out_n;
        }
      return std::pair{in_sum / in_n, out_sum / out_n};
    };
    const auto [in, out] = change(result);
    const auto [gt_in, gt_out] = change(truth_image);
    inside += in, outside += out, gt_inside += gt_in, gt_outside += gt_out;
    if (count < 8)
      write_png(work / ("lips_" + std::to_string(count) + ".png"), hconcat({source, reference, result, truth_image}));
    ++count;
  }
  const double ratio = count ? outside / inside : 1e9;
  res.region = {count == 32 && ratio < kLipRatio,
                fmt("%d transfers: mean change inside lips %.4f, outside %.4f, ratio %.3f (need < %.2f); ground truth "
                    "inside %.4f, outside %.4f",
                    count, inside / std::max(count, 1), outside / std::max(count, 1), ratio, kLipRatio,
                    gt_inside / std::max(count, 1), gt_outside / std::max(count, 1))};
  return res;
}

// ---- 9: reproducibility

Outcome reproducible(const fs::path& work) {
  const fs::path data = work / "repro_data";
  const DatasetManifest base = build_base_dataset(4, 2, 32, 9, data);
  const DatasetSplit split = holdout_split(base, default_holdout(4, 2, 1), 1, 9);
  write_manifest(split.train, data / "train_manifest.txt");
  write_manifest(split.test, data / "test_manifest.txt");
  PipelineConfig pc;
  pc.pool_a_size = pc.pool_b_size = 3;
  pc.g1_train.steps = 20;
  pc.g1_train.batch_size = 2;
  pc.g1_train.learning_rate = 1e-3;
  pc.g2_train = pc.g1_train;
  pc.ddim_steps = 10;
  pc.seed = 99;
  pc.tau = 0.5;
  PipelineResult r[2];
  for (int k = 0; k < 2; ++k)
    r[k] = run_pipeline(pc, data / "train_manifest.txt", data / "test_manifest.txt", work / ("repro_" + std::to_string(k)));
  const bool manifests = slurp(r[0].curated_manifest) == slurp(r[1].curated_manifest);
  const bool reports = slurp(r[0].report) == slurp(r[1].report);
  const bool checkpoints = slurp(r[0].g2_checkpoint) == slurp(r[1].g2_checkpoint);
  return {manifests && reports && checkpoints,
          fmt("curated manifests %s, reports %s, G2 checkpoints %s (%zu pairs retained)",
              manifests ? "identical" : "DIFFER", reports ? "identical" : "DIFFER", checkpoints ? "identical" : "DIFFER",
              r[0].retained)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  fs::path work = "acceptance_work";
  std::vector<int> only;
  FullRun full;
  app.add_option("--work-dir", work, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria (1-9)");
  app.add_option("--g1-steps", full.g1_steps, "G1 training steps for criteria 6-8");
  app.add_option("--g2-steps", full.g2_steps, "G2 training steps for criteria 6-8");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::cout << "criterion " << id << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << "  (" << o.detail << ")"
              << std::endl;
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& f) {
    if (!want(id)) return;
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("threw: ") + e.what()});
    }
  };

  guarded(1, "fusion suite", fusion_suite);
  guarded(2, "gradient oracle", gradient_oracle);
  guarded(3, "DDIM identity", ddim_identity);
  guarded(4, "filter oracle", filter_oracle);
  guarded(5, "Frechet distance", frechet);
  if (want(6) || want(7) || want(8)) {
    try {
      const FullResults r = full_pipeline(full, work / "full");
      if (want(6)) report(6, "disentanglement", r.disentangle);
      if (want(7)) report(7, "pipeline value", r.pipeline);
      if (want(8)) report(8, "region control", r.region);
    } catch (const std::exception& e) {
      for (int id : {6, 7, 8})
        if (want(id)) report(id, "full pipeline", {false, std::string("threw: ") + e.what()});
    }
  }
  guarded(9, "reproducibility", [&] { return reproducible(work); });
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
  return failures == 0 ? 0 : 1;
}
