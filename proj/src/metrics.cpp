#include "mkup/metrics.hpp"

#include "mkup/image_io.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <fstream>

namespace mkup {

namespace fs = std::filesystem;

namespace {

constexpr double kEigenTolerance = 1e-10;
constexpr double kTraceResidue = 1e-6;

Eigen::VectorXd checked_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* what) {
  if (es.info() != Eigen::Success) throw MetricsError(std::string("frechet_distance: eigendecomposition of ") + what + " failed");
  Eigen::VectorXd ev = es.eigenvalues();
  if (!ev.allFinite()) throw MetricsError(std::string("frechet_distance: non-finite eigenvalues in ") + what);
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -kEigenTolerance * scale) {
      char msg[200];
      std::snprintf(msg, sizeof msg, "frechet_distance: %s has eigenvalue %.3e (largest %.3e); not positive semidefinite",
                    what, ev(i), ev.maxCoeff());
      throw MetricsError(msg);
    }
    ev(i) = std::max(ev(i), 0.0);
  }
  return ev;
}

Eigen::MatrixXd covariance(const FeatureSet& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

FeatureSet features_of(const std::vector<const Image*>& images, const EncoderWeights<Real>& enc) {
  FeatureSet f(static_cast<Eigen::Index>(images.size()), enc.feature_dim());
  for (std::size_t i = 0; i < images.size(); ++i)
    f.row(static_cast<Eigen::Index>(i)) = image_codes(enc, *images[i]).features.cast<double>();
  return f;
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  if (a.rows() < 2 || b.rows() < 2) throw MetricsError("frechet_distance: each set needs at least 2 rows");
  if (a.cols() != b.cols()) throw MetricsError("frechet_distance: feature dimensions differ");
  if (!a.allFinite() || !b.allFinite()) throw MetricsError("frechet_distance: non-finite features");
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a, ma), sb = covariance(b, mb);

  // Tr (Sa Sb)^{1/2} = Tr (Sa^{1/2} Sb Sa^{1/2})^{1/2}; the inner product is symmetric.
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const Eigen::VectorXd la = checked_eigenvalues(ea, "covariance of the first set");
  const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = root_a * sb * root_a;
  inner = 0.5 * (inner + inner.transpose()).eval();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double tr_root = checked_eigenvalues(ei, "covariance product").cwiseSqrt().sum();

  const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root;
  if (!std::isfinite(d)) throw MetricsError("frechet_distance: non-finite result");
  return d < 0.0 && d >= -kTraceResidue ? 0.0 : d;
}

double cls_score(const Image& generated, const Image& reference, const EncoderWeights<Real>& enc) {
  if (generated.height != reference.height || generated.width != reference.width)
    throw ShapeError("cls_score: resolutions differ");
  return cosine_similarity(image_codes(enc, generated).makeup, image_codes(enc, reference).makeup);
}

double key_sim(const Image& generated, const Image& source, const EncoderWeights<Real>& enc) {
  if (generated.height != source.height || generated.width != source.width)
    throw ShapeError("key_sim: resolutions differ");
  return cosine_similarity(image_codes(enc, generated).identity, image_codes(enc, source).identity);
}

Evaluation score_transfers(const std::vector<Transfer>& transfers, const EncoderWeights<Real>& enc) {
  if (transfers.empty()) throw MetricsError("evaluate: empty test set");
  Evaluation out;
  std::vector<const Image*> generated, references, truths;
  double cls = 0, ks = 0;
  for (const Transfer& t : transfers) {
    const auto g = image_codes(enc, t.generated);
    const auto s = image_codes(enc, t.source);
    const auto r = image_codes(enc, t.reference);
    TransferScores sc;
    sc.cls_reference = cosine_similarity(g.makeup, r.makeup);
    sc.cls_source = cosine_similarity(g.makeup, s.makeup);
    sc.key_sim_source = cosine_similarity(g.identity, s.identity);
    if (t.reference_bare) sc.key_sim_reference = cosine_similarity(g.identity, image_codes(enc, *t.reference_bare).identity);
    cls += sc.cls_reference;
    ks += sc.key_sim_source;
    out.transfers.push_back(sc);
    generated.push_back(&t.generated);
    references.push_back(&t.reference);
    if (t.ground_truth) truths.push_back(&*t.ground_truth);
  }
  const double n = static_cast<double>(transfers.size());
  out.row.cls = cls / n;
  out.row.key_sim = ks / n;
  const FeatureSet fg = features_of(generated, enc);
  out.row.fid = frechet_distance(fg, features_of(references, enc));
  if (truths.size() == transfers.size()) out.row.fid_to_real = frechet_distance(fg, features_of(truths, enc));
  return out;
}

std::vector<Transfer> run_transfers(const Model<Real>& model, const Dataset& test, const EvalOptions& options) {
  if (test.manifest.pairs.empty()) throw MetricsError("evaluate: empty test set");
  const NoiseSchedule s = make_schedule(options.timesteps);
  std::vector<Transfer> out;
  for (std::size_t k = 0; k < test.manifest.pairs.size(); ++k) {
    const TrainingPair& p = test.manifest.pairs[k];
    Transfer t;
    const fs::path source_path = test.resolve(p.source.image_path);
    const fs::path reference_path = test.resolve(p.target.image_path);
    t.source = read_png(source_path);
    t.reference = read_png(reference_path);
    const fs::path truth = sibling_image(source_path, SampleId{p.source.id.identity, p.target.id.makeup});
    if (fs::exists(truth)) t.ground_truth = read_png(truth);
    const fs::path ref_bare = sibling_image(reference_path, SampleId{p.target.id.identity, 0});
    if (fs::exists(ref_bare)) t.reference_bare = read_png(ref_bare);

    const ConditioningValues<Real> cond{image_codes(model.encoder, t.source).identity,
                                        image_codes(model.encoder, t.reference).makeup, p.target.prompt};
    t.generated = generate(model, cond, options.guidance, options.ddim_steps, mix_seed(options.seed, k), s);
    quantize_8bit(t.generated);
    out.push_back(std::move(t));
  }
  return out;
}

Evaluation evaluate(const Model<Real>& model, const EncoderWeights<Real>& eval_encoder, const Dataset& test,
                    const EvalOptions& options) {
  return score_transfers(run_transfers(model, test, options), eval_encoder);
}

std::string format_report(const std::vector<LabeledRow>& rows) {
  std::string out = "Training Dataset\tFID\tCLS\tKey-sim\tFID-to-Real\n";
  for (const auto& r : rows) {
    out += r.label + "\t" + fixed(r.row.fid) + "\t" + fixed(r.row.cls) + "\t" + fixed(r.row.key_sim) + "\t" +
           (r.row.fid_to_real ? fixed(*r.row.fid_to_real) : std::string("NA")) + "\n";
  }
  return out;
}

void write_report(const std::vector<LabeledRow>& rows, const fs::path& path) {
  const std::string text = format_report(rows);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << text;
}

}  // namespace mkup
