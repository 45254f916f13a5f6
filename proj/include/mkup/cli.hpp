#pragma once

// The `mkup` command line: dataset, train, pipeline, transfer, evaluate.
//
// Every option can also be given in a config file (`key = value` per line, `#`
// comments, keys are option names without the leading dashes). Flags on the
// command line override the file. Exit codes: 0 success, 2 configuration error,
// 3 runtime failure.

#include "mkup/curation.hpp"
#include "mkup/prompt.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mkup {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  int resolution = 64;
  GuidanceWeights guidance;
  double tau = kDefaultThreshold;
  int ddim_steps = 50;

  // dataset
  int identities = 16;
  int styles = 8;
  int holdout_per_identity = 0;
  int test_references = 4;

  // training
  double learning_rate = 1e-4;
  double final_lr_ratio = 1.0;
  int batch_size = 4;
  int steps = 1000;
  int timesteps = kDefaultTimesteps;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  int unroll_steps = kDefaultUnrollSteps;
  int holdout_pairs = 0;

  // pipeline
  int pool_a = 8;
  int pool_b = 8;
  bool disjoint_pools = true;
  std::optional<int> g2_steps;
  std::optional<double> g2_learning_rate;

  // paths and transfer inputs
  std::optional<std::filesystem::path> manifest, test_manifest, checkpoint, init_checkpoint, ablation_checkpoint,
      source, reference;
  std::string prompt = "full makeup";

  TrainConfig train_config() const;
  PipelineConfig pipeline_config() const;
};

// Checks ranges and that every required input exists for `command`; throws
// ConfigError.
void validate(const RunConfig& cfg, const std::string& command);

int cmd_dataset(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_pipeline(const RunConfig& cfg, std::ostream& log);
int cmd_transfer(const RunConfig& cfg, std::ostream& log);
int cmd_evaluate(const RunConfig& cfg, std::ostream& log);

// Parses argv, validates, dispatches; never throws.
int run_cli(int argc, const char* const* argv, std::ostream& log);

}  // namespace mkup
