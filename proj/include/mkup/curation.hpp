#pragma once

// Train, generate, filter, retrain.
//
// G1 is trained on the base pairs. Bare faces of pool A are given the styles of
// pool B references by G1, each result is scored against its reference with the
// makeup head, and pairs scoring at least tau are kept as (bare source, styled
// reference). G2 continues from G1 on the base pairs plus the kept pairs.

#include "mkup/metrics.hpp"
#include "mkup/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkup {

struct CandidatePair {
  SampleRecord bare_source;
  SampleRecord styled_reference;
  std::string generated_path;  // relative to the candidates directory; empty if generation failed
  std::optional<double> sim;
  std::string error;
};

struct PipelineConfig {
  double tau = kDefaultThreshold;
  int pool_a_size = 8;
  int pool_b_size = 8;
  bool disjoint_pools = true;
  TrainConfig g1_train;
  TrainConfig g2_train;
  GuidanceWeights guidance;
  int ddim_steps = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerateOptions {
  GuidanceWeights guidance;
  int ddim_steps = 50;
  int timesteps = kDefaultTimesteps;
  std::uint64_t seed = 0;
};

// One generated image per (bare, styled) combination, ordered by (a, b).
// Records are resolved against pool_root; images go to out_dir/images.
std::vector<CandidatePair> cross_generate(const Model<Real>& g1, const std::vector<SampleRecord>& bare_pool,
                                          const std::vector<SampleRecord>& styled_pool,
                                          const std::filesystem::path& pool_root, const std::filesystem::path& out_dir,
                                          const GenerateOptions& options);

double score_candidate(const EncoderWeights<Real>& enc, const Image& generated, const Image& reference);

// Fills in sim for every successfully generated candidate.
void score_candidates(std::vector<CandidatePair>& candidates, const EncoderWeights<Real>& enc,
                      const std::filesystem::path& pool_root, const std::filesystem::path& candidates_dir);

inline int filter_pair(double sim, double tau) { return sim >= tau ? 1 : 0; }

// Kept pairs store the styled reference as target, never the generated image.
// Candidates whose generation failed are skipped; any other unscored candidate
// is an error.
DatasetManifest curate(const std::vector<CandidatePair>& candidates, double tau);

std::string format_candidates(const std::vector<CandidatePair>& candidates);

struct PipelineResult {
  std::filesystem::path g1_checkpoint, g2_checkpoint, curated_manifest, report;
  std::size_t candidates = 0, retained = 0;
  std::optional<MetricsRow> g1_metrics, g2_metrics;
};

// Writes g1/, pools/, candidates/, curated/manifest.txt, g2/ and report.txt
// under out_dir. With a test manifest, both models are evaluated with G1's
// encoder and the report holds one row per model.
PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& base_manifest,
                            const std::optional<std::filesystem::path>& test_manifest,
                            const std::filesystem::path& out_dir, std::ostream* log = nullptr);

}  // namespace mkup
