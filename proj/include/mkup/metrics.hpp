#pragma once

// FID, CLS and Key-sim in the feature space of a trained encoder.
//
// FID is the Frechet distance between Gaussians fitted to pooled encoder
// features. CLS compares makeup-head embeddings of a result and its reference;
// Key-sim compares identity-head embeddings of a result and its bare source.

#include "mkup/diffusion.hpp"
#include "mkup/sample_model.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkup {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Rows are images, columns are features.
using FeatureSet = Eigen::MatrixXd;

double frechet_distance(const FeatureSet& a, const FeatureSet& b);

double cls_score(const Image& generated, const Image& reference, const EncoderWeights<Real>& enc);
double key_sim(const Image& generated, const Image& source, const EncoderWeights<Real>& enc);

struct MetricsRow {
  double fid = 0;
  double cls = 0;
  double key_sim = 0;
  std::optional<double> fid_to_real;
};

// One evaluated transfer. reference_bare and ground_truth are optional.
struct Transfer {
  Image generated, source, reference;
  std::optional<Image> reference_bare, ground_truth;
};

struct TransferScores {
  double cls_reference = 0;  // CLS(result, reference)
  double cls_source = 0;     // CLS(result, source)
  double key_sim_source = 0;  // Key-sim(result, source)
  std::optional<double> key_sim_reference;  // Key-sim(result, bare reference identity)
};

struct Evaluation {
  MetricsRow row;
  std::vector<TransferScores> transfers;
};

// Aggregates metrics over already generated transfers.
Evaluation score_transfers(const std::vector<Transfer>& transfers, const EncoderWeights<Real>& enc);

struct EvalOptions {
  GuidanceWeights guidance;
  int ddim_steps = 50;
  int timesteps = kDefaultTimesteps;
  std::uint64_t seed = 0;
};

// Source image for pair k is the manifest source, reference is the manifest
// target; the ground truth is the source identity's file for the reference
// style when present next to the source image.
std::vector<Transfer> run_transfers(const Model<Real>& model, const Dataset& test, const EvalOptions& options);

Evaluation evaluate(const Model<Real>& model, const EncoderWeights<Real>& eval_encoder, const Dataset& test,
                    const EvalOptions& options);

struct LabeledRow {
  std::string label;
  MetricsRow row;
};

// Tab-separated table: Training Dataset, FID, CLS, Key-sim, FID-to-Real.
std::string format_report(const std::vector<LabeledRow>& rows);
void write_report(const std::vector<LabeledRow>& rows, const std::filesystem::path& path);

}  // namespace mkup
