#include "mkup/train.hpp"

#include "mkup/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <set>

namespace mkup {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be positive");
  if (!(final_lr_ratio > 0.0 && final_lr_ratio <= 1.0)) throw std::invalid_argument("final_lr_ratio must lie in (0, 1]");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (timesteps < 2) throw std::invalid_argument("timesteps must be at least 2");
  if (ddim_steps < 1 || ddim_steps > timesteps) throw std::invalid_argument("ddim_steps must lie in [1, timesteps]");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2))
    throw std::invalid_argument("loss weights must be finite and non-negative");
  if (unroll_steps < 1 || unroll_steps > timesteps / 2) throw std::invalid_argument("unroll_steps must lie in [1, timesteps/2]");
  if (holdout_pairs < 0) throw std::invalid_argument("holdout_pairs must be non-negative");
  guidance.validate();
}

const Image& ImageCache::get(const fs::path& path) {
  const std::string key = path.lexically_normal().string();
  auto it = images_.find(key);
  if (it == images_.end()) it = images_.emplace(key, read_png(path)).first;
  return it->second;
}

ExampleSet::ExampleSet(const Dataset& data, ImageCache& cache) : cache_(&cache) {
  std::map<SampleId, fs::path> index;
  for (const TrainingPair& p : data.manifest.pairs) {
    index.emplace(p.source.id, data.resolve(p.source.image_path));
    index.emplace(p.target.id, data.resolve(p.target.image_path));
  }
  const auto bare_of = [&](SampleId id, const fs::path& image, const fs::path& fallback) {
    const auto it = index.find(SampleId{id.identity, 0});
    if (it != index.end()) return it->second;
    const fs::path sibling = sibling_image(image, SampleId{id.identity, 0});
    return fs::exists(sibling) ? sibling : fallback;
  };

  for (const TrainingPair& p : data.manifest.pairs) {
    Plan plan;
    plan.source = data.resolve(p.source.image_path);
    plan.prompt = p.target.prompt;
    const int a = p.source.id.identity, j = p.target.id.makeup;
    if (p.target.id.identity == a) {
      plan.target = data.resolve(p.target.image_path);
      for (const auto& [id, path] : index)
        if (id.makeup == j && id.identity != a) plan.references.push_back({path, bare_of(id, path, plan.source)});
      if (plan.references.empty()) plan.references.push_back({plan.target, plan.source});
    } else {
      const fs::path reference = data.resolve(p.target.image_path);
      const auto it = index.find(SampleId{a, j});
      plan.target = it != index.end() ? it->second : sibling_image(plan.source, SampleId{a, j});
      if (!fs::exists(plan.target))
        throw std::runtime_error("no ground truth " + to_string(SampleId{a, j}) + " for pair " + to_string(p.source.id) +
                                 " -> " + to_string(p.target.id) + " (expected " + plan.target.string() + ")");
      plan.references.push_back({reference, bare_of(p.target.id, reference, plan.source)});
    }
    plans_.push_back(std::move(plan));
  }
}

TrainingExample ExampleSet::example(std::size_t index, std::uint64_t choice) {
  const Plan& plan = plans_.at(index);
  const Reference& ref = plan.references[choice % plan.references.size()];
  TrainingExample ex;
  ex.source = &cache_->get(plan.source);
  ex.target = &cache_->get(plan.target);
  ex.reference = &cache_->get(ref.image);
  ex.reference_bare = &cache_->get(ref.bare);
  ex.prompt = plan.prompt;
  return ex;
}

namespace {

constexpr std::uint64_t kHeldoutStream = 0x4E1D0u;
constexpr int kHeldoutDraws = 8;

struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<Matrix<Real>> m, v;

  void step(Model<Real>& model, const std::vector<Matrix<Real>>& grads) {
    ++t;
    if (m.empty()) {
      for (const auto& g : grads) {
        m.push_back(Matrix<Real>::Zero(g.rows(), g.cols()));
        v.push_back(Matrix<Real>::Zero(g.rows(), g.cols()));
      }
    }
    const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
    const Real step_size = static_cast<Real>(lr * std::sqrt(c2) / c1);
    const Real e = static_cast<Real>(eps * std::sqrt(c2));
    std::size_t k = 0;
    model.visit([&](const std::string& name, Matrix<Real>& w) {
      if (!trainable(name)) {
        ++k;
        return;
      }
      const auto& g = grads[k];
      m[k] = static_cast<Real>(beta1) * m[k] + static_cast<Real>(1 - beta1) * g;
      v[k] = static_cast<Real>(beta2) * v[k] + static_cast<Real>(1 - beta2) * g.cwiseProduct(g);
      w.array() -= step_size * m[k].array() / (v[k].array().sqrt() + e);
      ++k;
    });
  }
};

bool finite(const LossReport& r) {
  return std::isfinite(r.l_diffusion) && std::isfinite(r.l_makeup) && std::isfinite(r.l_id) && std::isfinite(r.l_total);
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

LossReport report_of(const ExampleLosses<Real>& l) {
  return {ad::scalar_value(l.diffusion), ad::scalar_value(l.makeup), ad::scalar_value(l.id), ad::scalar_value(l.total)};
}

}  // namespace

double learning_rate_at(const TrainConfig& cfg, int step) {
  if (cfg.final_lr_ratio == 1.0 || cfg.steps < 2) return cfg.learning_rate;
  const double progress = static_cast<double>(step) / (cfg.steps - 1);
  const double r = cfg.final_lr_ratio;
  return cfg.learning_rate * (r + (1.0 - r) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

LossReport evaluate_losses(const Model<Real>& model, ExampleSet& examples, const std::vector<std::size_t>& pairs,
                           const TrainConfig& cfg) {
  if (pairs.empty()) throw std::invalid_argument("evaluate_losses: no pairs");
  const NoiseSchedule s = make_schedule(cfg.timesteps);
  const LatentShape shape = latent_shape(model.resolution());
  LossReport mean;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, kHeldoutStream), k));
    for (int draw = 0; draw < kHeldoutDraws; ++draw) {
      const TrainingExample ex = examples.example(pairs[k], static_cast<std::uint64_t>(draw));
      const auto d =
          ExampleDraws<Real>::draw(rng, s, static_cast<Eigen::Index>(shape.height) * shape.width, shape.channels);
      Tape<Real> tape(false);
      const LossReport r = report_of(example_losses(tape, model, ex, d, cfg.lambda1, cfg.lambda2, cfg.unroll_steps,
                                                    cfg.guidance, s));
      mean.l_diffusion += r.l_diffusion;
      mean.l_makeup += r.l_makeup;
      mean.l_id += r.l_id;
    }
  }
  const double n = static_cast<double>(pairs.size()) * kHeldoutDraws;
  mean.l_diffusion /= n;
  mean.l_makeup /= n;
  mean.l_id /= n;
  mean.l_total = loss_total(mean, cfg.lambda1, cfg.lambda2);
  return mean;
}

TrainResult train(Model<Real> init, const Dataset& data, const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  if (data.manifest.pairs.empty()) throw std::invalid_argument("train: empty manifest");
  if (static_cast<std::size_t>(cfg.holdout_pairs) >= data.manifest.pairs.size())
    throw std::invalid_argument("train: holdout_pairs leaves no training pairs");

  ImageCache cache;
  ExampleSet examples(data, cache);
  const NoiseSchedule s = make_schedule(cfg.timesteps);
  const LatentShape shape = latent_shape(init.resolution());
  const Eigen::Index latent_rows = static_cast<Eigen::Index>(shape.height) * shape.width;

  const std::vector<std::size_t> split = permutation(examples.size(), mix_seed(cfg.seed, 1));
  const std::vector<std::size_t> heldout(split.begin(), split.begin() + cfg.holdout_pairs);
  const std::vector<std::size_t> pool(split.begin() + cfg.holdout_pairs, split.end());

  TrainResult result;
  result.model = std::move(init);
  Model<Real>& model = result.model;
  if (cfg.fit_prior) {
    std::set<std::string> seen;
    std::vector<Matrix<Real>> latents;
    for (std::size_t i : pool)
      for (const auto* r : {&data.manifest.pairs[i].source, &data.manifest.pairs[i].target}) {
        const fs::path path = data.resolve(r->image_path);
        if (seen.insert(path.lexically_normal().string()).second) latents.push_back(encode_latent<Real>(cache.get(path)));
      }
    fit_latent_prior(model.denoiser, latents);
  }
  if (!heldout.empty()) result.heldout_initial = evaluate_losses(model, examples, heldout, cfg);

  Adam adam;
  std::vector<Matrix<Real>> grads;
  model.visit([&](const std::string&, const Matrix<Real>& w) { grads.push_back(Matrix<Real>::Zero(w.rows(), w.cols())); });

  std::vector<std::size_t> order;
  std::size_t cursor = 0, epoch = 0;
  const Real inv_batch = Real(1) / static_cast<Real>(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& g : grads) g.setZero();
    LossReport mean;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        const auto perm = permutation(pool.size(), mix_seed(cfg.seed, 1000 + epoch++));
        order.clear();
        for (std::size_t i : perm) order.push_back(pool[i]);
        cursor = 0;
      }
      const std::size_t pair = order[cursor++];
      std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 4096 + static_cast<std::uint64_t>(b)));
      const TrainingExample ex = examples.example(pair, rng());
      const auto d = ExampleDraws<Real>::draw(rng, s, latent_rows, shape.channels);

      Tape<Real> tape;
      const auto losses = example_losses(tape, model, ex, d, cfg.lambda1, cfg.lambda2, cfg.unroll_steps, cfg.guidance, s);
      const LossReport r = report_of(losses);
      if (!finite(r))
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": non-finite loss (diffusion " +
                               std::to_string(r.l_diffusion) + ", makeup " + std::to_string(r.l_makeup) + ", id " +
                               std::to_string(r.l_id) + ")");
      tape.backward(losses.total);
      std::size_t k = 0;
      model.visit([&](const std::string&, const Matrix<Real>& w) {
        if (const Matrix<Real>* g = tape.param_grad(w)) grads[k] += inv_batch * *g;
        ++k;
      });
      mean.l_diffusion += r.l_diffusion / cfg.batch_size;
      mean.l_makeup += r.l_makeup / cfg.batch_size;
      mean.l_id += r.l_id / cfg.batch_size;
    }
    mean.l_total = loss_total(mean, cfg.lambda1, cfg.lambda2);
    for (const auto& g : grads)
      if (!g.allFinite()) throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": non-finite gradient");
    adam.lr = learning_rate_at(cfg, step);
    adam.step(model, grads);
    result.log.push_back({step, mean});
    if (progress && (step % 50 == 0 || step + 1 == cfg.steps)) {
      char line[160];
      std::snprintf(line, sizeof line, "step %d  diffusion %.4f  makeup %.4f  id %.4f  total %.4f\n", step,
                    mean.l_diffusion, mean.l_makeup, mean.l_id, mean.l_total);
      *progress << line << std::flush;
    }
  }
  if (!heldout.empty()) result.heldout_final = evaluate_losses(model, examples, heldout, cfg);
  return result;
}

std::string format_loss_log(const std::vector<LossLogEntry>& log) {
  std::string out = "step\tl_diffusion\tl_makeup\tl_id\tl_total\n";
  char line[160];
  for (const auto& e : log) {
    std::snprintf(line, sizeof line, "%d\t%.9g\t%.9g\t%.9g\t%.9g\n", e.step, e.report.l_diffusion, e.report.l_makeup,
                  e.report.l_id, e.report.l_total);
    out += line;
  }
  return out;
}

void write_loss_log(const std::vector<LossLogEntry>& log, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write loss log " + path.string());
  out << format_loss_log(log);
}

}  // namespace mkup
