#include "mkup/cli.hpp"

#include "mkup/checkpoint.hpp"
#include "mkup/image_io.hpp"
#include "mkup/synthetic_faces.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <ostream>

namespace mkup {

namespace fs = std::filesystem;

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = learning_rate;
  t.final_lr_ratio = final_lr_ratio;
  t.batch_size = batch_size;
  t.steps = steps;
  t.timesteps = timesteps;
  t.ddim_steps = ddim_steps;
  t.lambda1 = lambda1;
  t.lambda2 = lambda2;
  t.seed = seed;
  t.unroll_steps = unroll_steps;
  t.holdout_pairs = holdout_pairs;
  t.guidance = guidance;
  return t;
}

PipelineConfig RunConfig::pipeline_config() const {
  PipelineConfig p;
  p.tau = tau;
  p.pool_a_size = pool_a;
  p.pool_b_size = pool_b;
  p.disjoint_pools = disjoint_pools;
  p.g1_train = train_config();
  p.g1_train.seed = mix_seed(seed, 1);
  p.g2_train = train_config();
  p.g2_train.seed = mix_seed(seed, 2);
  if (g2_steps) p.g2_train.steps = *g2_steps;
  if (g2_learning_rate) p.g2_train.learning_rate = *g2_learning_rate;
  p.guidance = guidance;
  p.ddim_steps = ddim_steps;
  p.seed = seed;
  return p;
}

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void require_file(const std::optional<fs::path>& path, const char* option) {
  require(path.has_value(), std::string("--") + option + " is required");
  require(fs::is_regular_file(*path), std::string("--") + option + ": no such file " + path->string());
}

template <typename F>
void rethrow_as_config(F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

Prompt prompt_of(const RunConfig& cfg) {
  const auto p = parse_prompt(cfg.prompt);
  if (!p) throw ConfigError("prompt '" + cfg.prompt + "' is not in the vocabulary");
  return *p;
}

}  // namespace

void validate(const RunConfig& cfg, const std::string& command) {
  require(!cfg.out_dir.empty(), "--out-dir must not be empty");
  require(cfg.resolution >= 32 && cfg.resolution <= 512 && (cfg.resolution & (cfg.resolution - 1)) == 0,
          "--resolution must be a power of two in [32, 512]");
  rethrow_as_config([&] {
    cfg.guidance.validate();
    cfg.train_config().validate();
    if (command == "pipeline") cfg.pipeline_config().validate();
  });
  require(std::isfinite(cfg.tau) && cfg.tau > 0.0 && cfg.tau <= 1.0, "--tau must lie in (0, 1]");

  if (command == "dataset") {
    require(cfg.identities >= 2, "--identities must be at least 2");
    require(cfg.styles >= 1, "--styles must be at least 1");
    require(cfg.holdout_per_identity >= 0 && cfg.holdout_per_identity < cfg.styles,
            "--holdout-per-identity must lie in [0, styles)");
    require(cfg.test_references >= 1 && cfg.test_references < cfg.identities,
            "--test-references must lie in [1, identities)");
  } else if (command == "train") {
    require_file(cfg.manifest, "manifest");
    if (cfg.init_checkpoint) require_file(cfg.init_checkpoint, "init-checkpoint");
  } else if (command == "pipeline") {
    require_file(cfg.manifest, "manifest");
    if (cfg.test_manifest) require_file(cfg.test_manifest, "test-manifest");
  } else if (command == "transfer") {
    require_file(cfg.checkpoint, "checkpoint");
    require_file(cfg.source, "source");
    require_file(cfg.reference, "reference");
    prompt_of(cfg);
  } else if (command == "evaluate") {
    require_file(cfg.checkpoint, "checkpoint");
    require_file(cfg.test_manifest, "test-manifest");
    if (cfg.ablation_checkpoint) require_file(cfg.ablation_checkpoint, "ablation-checkpoint");
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
}

int cmd_dataset(const RunConfig& cfg, std::ostream& log) {
  const DatasetManifest base = build_base_dataset(cfg.identities, cfg.styles, cfg.resolution, cfg.seed, cfg.out_dir);
  log << "wrote " << base.pairs.size() << " pairs to " << (cfg.out_dir / "manifest.txt").string() << "\n";
  if (cfg.holdout_per_identity > 0) {
    const DatasetSplit split = holdout_split(
        base, default_holdout(cfg.identities, cfg.styles, cfg.holdout_per_identity), cfg.test_references, cfg.seed);
    write_manifest(split.train, cfg.out_dir / "train_manifest.txt");
    write_manifest(split.test, cfg.out_dir / "test_manifest.txt");
    log << "held out " << split.test.pairs.size() << " test transfers; " << split.train.pairs.size()
        << " training pairs\n";
  }
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const Dataset data = load_dataset(*cfg.manifest);
  Model<Real> init = cfg.init_checkpoint ? load_checkpoint(*cfg.init_checkpoint)
                                         : Model<Real>::init(cfg.resolution, mix_seed(cfg.seed, 11));
  TrainConfig tc = cfg.train_config();
  tc.fit_prior = !cfg.init_checkpoint;
  const TrainResult r = train(std::move(init), data, tc, &log);
  save_checkpoint(r.model, cfg.out_dir / "model.ckpt");
  write_loss_log(r.log, cfg.out_dir / "loss_log.tsv");
  if (r.heldout_initial && r.heldout_final)
    log << "held-out l_total " << r.heldout_initial->l_total << " -> " << r.heldout_final->l_total << "\n";
  return kExitOk;
}

int cmd_pipeline(const RunConfig& cfg, std::ostream& log) {
  const PipelineResult r = run_pipeline(cfg.pipeline_config(), *cfg.manifest, cfg.test_manifest, cfg.out_dir, &log);
  log << "report: " << r.report.string() << "\n";
  return kExitOk;
}

int cmd_transfer(const RunConfig& cfg, std::ostream& log) {
  const Model<Real> model = load_checkpoint(*cfg.checkpoint);
  const Image source = read_png(*cfg.source);
  const Image reference = read_png(*cfg.reference);
  for (const Image* img : {&source, &reference})
    if (img->height != model.resolution() || img->width != model.resolution())
      throw ConfigError("input images must be " + std::to_string(model.resolution()) + "px to match the checkpoint");
  const ConditioningValues<Real> cond{image_codes(model.encoder, source).identity,
                                      image_codes(model.encoder, reference).makeup, prompt_of(cfg)};
  Image result = generate(model, cond, cfg.guidance, cfg.ddim_steps, cfg.seed, make_schedule(cfg.timesteps));
  quantize_8bit(result);
  write_png(cfg.out_dir / "result.png", result);
  write_png(cfg.out_dir / "grid.png", hconcat({source, reference, result}));
  log << "wrote " << (cfg.out_dir / "result.png").string() << " and grid.png\n";
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
  const Model<Real> model = load_checkpoint(*cfg.checkpoint);
  std::optional<Model<Real>> ablation;
  if (cfg.ablation_checkpoint) ablation = load_checkpoint(*cfg.ablation_checkpoint);
  const Dataset test = load_dataset(*cfg.test_manifest);
  const EvalOptions options{cfg.guidance, cfg.ddim_steps, cfg.timesteps, cfg.seed};
  std::vector<LabeledRow> rows;
  rows.push_back({ablation ? "base" : "model", evaluate(model, model.encoder, test, options).row});
  if (ablation) rows.push_back({"base+curated", evaluate(*ablation, model.encoder, test, options).row});
  write_report(rows, cfg.out_dir / "report.txt");
  log << format_report(rows);
  return kExitOk;
}

namespace {

// Registers an option under both the dashed and the underscored spelling.
template <typename T>
CLI::Option* option(CLI::App& app, const std::string& name, T& target, const std::string& help) {
  std::string alias = name;
  for (char& c : alias)
    if (c == '-') c = '_';
  const std::string names = alias == name ? "--" + name : "--" + name + ",--" + alias;
  return app.add_option(names, target, help);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& log) {
  RunConfig cfg;
  CLI::App app{"Makeup transfer with a small latent diffusion model"};
  app.set_config("--config", "", "Config file of key = value lines");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1, 1);
  app.fallthrough();

  option(app, "seed", cfg.seed, "Random seed");
  option(app, "out-dir", cfg.out_dir, "Output directory");
  option(app, "resolution", cfg.resolution, "Image resolution");
  option(app, "lambda-text", cfg.guidance.text, "Text attention weight");
  option(app, "lambda-makeup", cfg.guidance.makeup, "Makeup attention weight");
  option(app, "lambda-id", cfg.guidance.id, "Identity attention weight");
  option(app, "tau", cfg.tau, "Similarity threshold for curation");
  option(app, "ddim-steps", cfg.ddim_steps, "DDIM sampling steps");
  option(app, "identities", cfg.identities, "Identities in the base dataset");
  option(app, "styles", cfg.styles, "Makeup styles in the base dataset");
  option(app, "holdout-per-identity", cfg.holdout_per_identity, "Held-out styles per identity");
  option(app, "test-references", cfg.test_references, "References per held-out combination");
  option(app, "learning-rate", cfg.learning_rate, "Adam learning rate");
  option(app, "final-lr-ratio", cfg.final_lr_ratio, "Cosine-decay the learning rate to this fraction by the last step");
  option(app, "batch-size", cfg.batch_size, "Examples per step");
  option(app, "steps", cfg.steps, "Training steps");
  option(app, "timesteps", cfg.timesteps, "Diffusion timesteps");
  option(app, "lambda1", cfg.lambda1, "Weight of the makeup reconstruction loss");
  option(app, "lambda2", cfg.lambda2, "Weight of the bare-face reconstruction loss");
  option(app, "unroll-steps", cfg.unroll_steps, "DDIM steps unrolled for the reconstruction losses");
  option(app, "holdout-pairs", cfg.holdout_pairs, "Training pairs withheld for the held-out loss");
  option(app, "pool-a", cfg.pool_a, "Bare identities in pool A");
  option(app, "pool-b", cfg.pool_b, "Styled references in pool B");
  option(app, "disjoint-pools", cfg.disjoint_pools, "Use disjoint identities for pools A and B");
  option(app, "g2-steps", cfg.g2_steps, "Training steps for G2 (default: --steps)");
  option(app, "g2-learning-rate", cfg.g2_learning_rate, "Learning rate for G2 (default: --learning-rate)");
  option(app, "manifest", cfg.manifest, "Training manifest");
  option(app, "test-manifest", cfg.test_manifest, "Test manifest");
  option(app, "checkpoint", cfg.checkpoint, "Model checkpoint");
  option(app, "init-checkpoint", cfg.init_checkpoint, "Checkpoint to continue training from");
  option(app, "ablation-checkpoint", cfg.ablation_checkpoint, "Checkpoint trained on base + curated data");
  option(app, "source", cfg.source, "Bare source face");
  option(app, "reference", cfg.reference, "Styled reference face");
  // several words so that an unquoted `prompt = lip makeup` in a config file works
  std::vector<std::string> prompt_words;
  option(app, "prompt", prompt_words, "Prompt, e.g. \"lip makeup\"")->expected(1, 2);

  std::string command;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"dataset", "Render the synthetic base dataset"},
      {"train", "Train a model on a manifest"},
      {"pipeline", "Train, cross-generate, filter and retrain"},
      {"transfer", "Apply a reference's makeup to a source face"},
      {"evaluate", "Report FID, CLS and Key-sim on a test manifest"}};
  for (const auto& [name, help] : commands)
    app.add_subcommand(name, help)->fallthrough()->callback([&command, n = name] { command = n; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, log, log);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, log);
    return kExitConfig;
  }

  if (!prompt_words.empty()) {
    cfg.prompt = prompt_words.front();
    for (std::size_t k = 1; k < prompt_words.size(); ++k) cfg.prompt += " " + prompt_words[k];
  }
  try {
    validate(cfg, command);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (command == "dataset") return cmd_dataset(cfg, log);
    if (command == "train") return cmd_train(cfg, log);
    if (command == "pipeline") return cmd_pipeline(cfg, log);
    if (command == "transfer") return cmd_transfer(cfg, log);
    return cmd_evaluate(cfg, log);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace mkup
