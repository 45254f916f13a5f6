#pragma once

// Training loop: Adam over all encoder and denoiser parameters, minimising
// L_diffusion + lambda1 * L_makeup + lambda2 * L_id.

#include "mkup/losses.hpp"
#include "mkup/sample_model.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkup {

struct TrainConfig {
  double learning_rate = 1e-4;
  double final_lr_ratio = 1.0;  // cosine decay to learning_rate * ratio at the last step; 1 keeps it constant
  int batch_size = 4;
  int steps = 1000;
  int timesteps = kDefaultTimesteps;
  int ddim_steps = 50;
  double lambda1 = 1.0;  // L_makeup
  double lambda2 = 1.0;  // L_id
  std::uint64_t seed = 0;
  int unroll_steps = kDefaultUnrollSteps;
  int holdout_pairs = 0;  // pairs withheld for the before/after loss check
  bool fit_prior = true;  // refit the denoiser's token prior to the training images first
  GuidanceWeights guidance;

  void validate() const;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LossLogEntry {
  int step = 0;
  LossReport report;
};

struct TrainResult {
  Model<Real> model;
  std::vector<LossLogEntry> log;
  std::optional<LossReport> heldout_initial, heldout_final;
};

// Images referenced by a manifest, loaded on first use.
class ImageCache {
 public:
  const Image& get(const std::filesystem::path& path);

 private:
  std::map<std::string, Image> images_;
};

// Resolves every manifest pair into the images one training example needs.
//
// A pair whose target shares the source identity, (I_aM_0, I_aM_j), draws its
// reference from another identity wearing style j when the manifest has one.
// A pair whose target is another identity, (I_aM_0, I_bM_j), uses that target
// as the reference and the file of I_aM_j next to the source image as ground
// truth.
class ExampleSet {
 public:
  ExampleSet(const Dataset& data, ImageCache& cache);

  std::size_t size() const { return plans_.size(); }
  // choice selects among the candidate references of pair `index`.
  TrainingExample example(std::size_t index, std::uint64_t choice);

 private:
  struct Reference {
    std::filesystem::path image, bare;
  };
  struct Plan {
    std::filesystem::path source, target;
    std::vector<Reference> references;
    Prompt prompt;
  };
  std::vector<Plan> plans_;
  ImageCache* cache_;
};

// Learning rate at `step` of cfg.steps.
double learning_rate_at(const TrainConfig& cfg, int step);

// Mean losses of the given pairs under fixed per-pair draws (no parameter updates).
LossReport evaluate_losses(const Model<Real>& model, ExampleSet& examples, const std::vector<std::size_t>& pairs,
                           const TrainConfig& cfg);

TrainResult train(Model<Real> init, const Dataset& data, const TrainConfig& cfg, std::ostream* progress = nullptr);

std::string format_loss_log(const std::vector<LossLogEntry>& log);
void write_loss_log(const std::vector<LossLogEntry>& log, const std::filesystem::path& path);

}  // namespace mkup
