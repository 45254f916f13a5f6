#include "mkup/curation.hpp"

#include "mkup/checkpoint.hpp"
#include "mkup/image_io.hpp"
#include "mkup/synthetic_faces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace mkup {

namespace fs = std::filesystem;

void PipelineConfig::validate() const {
  if (!std::isfinite(tau) || tau <= 0.0 || tau > 1.0) throw std::invalid_argument("tau must lie in (0, 1]");
  if (pool_a_size < 1 || pool_b_size < 1) throw std::invalid_argument("pool sizes must be positive");
  if (ddim_steps < 1) throw std::invalid_argument("ddim_steps must be positive");
  g1_train.validate();
  g2_train.validate();
  if (ddim_steps > g1_train.timesteps) throw std::invalid_argument("ddim_steps exceeds the schedule length");
  if (g1_train.timesteps != g2_train.timesteps) throw std::invalid_argument("G1 and G2 must share the noise schedule");
  guidance.validate();
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Path of `target` relative to directory `dir`.
std::string relative_to(const fs::path& target, const fs::path& dir) {
  return fs::absolute(target).lexically_normal().lexically_relative(fs::absolute(dir).lexically_normal()).generic_string();
}

SampleRecord rebased(SampleRecord r, const fs::path& from, const fs::path& to) {
  r.image_path = relative_to(from / r.image_path, to);
  r.masks_path = relative_to(from / r.masks_path, to);
  return r;
}

TrainingPair rebased(TrainingPair p, const fs::path& from, const fs::path& to) {
  p.source = rebased(std::move(p.source), from, to);
  p.target = rebased(std::move(p.target), from, to);
  return p;
}

template <typename F>
auto stage(const char* name, std::ostream* log, F&& body) {
  if (log) *log << "[pipeline] " << name << "\n" << std::flush;
  try {
    return body();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(std::string("stage '") + name + "' failed: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<CandidatePair> cross_generate(const Model<Real>& g1, const std::vector<SampleRecord>& bare_pool,
                                          const std::vector<SampleRecord>& styled_pool, const fs::path& pool_root,
                                          const fs::path& out_dir, const GenerateOptions& options) {
  for (const auto& r : bare_pool)
    if (!r.id.bare()) throw std::invalid_argument("cross_generate: " + to_string(r.id) + " in the bare pool has makeup");
  for (const auto& r : styled_pool)
    if (r.id.bare()) throw std::invalid_argument("cross_generate: " + to_string(r.id) + " in the styled pool is bare");
  std::vector<SampleRecord> bare = bare_pool, styled = styled_pool;
  const auto by_id = [](const SampleRecord& x, const SampleRecord& y) { return x.id < y.id; };
  std::sort(bare.begin(), bare.end(), by_id);
  std::sort(styled.begin(), styled.end(), by_id);

  const NoiseSchedule s = make_schedule(options.timesteps);
  fs::create_directories(out_dir / "images");
  std::vector<CandidatePair> out;
  out.reserve(bare.size() * styled.size());
  for (const SampleRecord& a : bare) {
    std::optional<Matrix<Real>> identity;
    std::string a_error;
    try {
      identity = image_codes(g1.encoder, read_png(pool_root / a.image_path)).identity;
    } catch (const std::exception& e) {
      a_error = e.what();
    }
    for (const SampleRecord& b : styled) {
      CandidatePair c{a, b, "", std::nullopt, a_error};
      const std::uint64_t k = out.size();
      if (identity) {
        try {
          const ConditioningValues<Real> cond{*identity, image_codes(g1.encoder, read_png(pool_root / b.image_path)).makeup,
                                              b.prompt};
          const Image img = generate(g1, cond, options.guidance, options.ddim_steps, mix_seed(options.seed, k), s);
          if (!img.pixels.allFinite()) throw std::runtime_error("non-finite pixels");
          const std::string rel = "images/" + to_string(a.id) + "_" + to_string(b.id) + ".png";
          write_png(out_dir / rel, img);
          c.generated_path = rel;
        } catch (const std::exception& e) {
          c.error = e.what();
        }
      }
      out.push_back(std::move(c));
    }
  }
  return out;
}

double score_candidate(const EncoderWeights<Real>& enc, const Image& generated, const Image& reference) {
  if (generated.height != reference.height || generated.width != reference.width)
    throw ShapeError("score_candidate: resolutions differ");
  return cosine_similarity(image_codes(enc, generated).makeup, image_codes(enc, reference).makeup);
}

void score_candidates(std::vector<CandidatePair>& candidates, const EncoderWeights<Real>& enc, const fs::path& pool_root,
                      const fs::path& candidates_dir) {
  for (CandidatePair& c : candidates) {
    if (c.generated_path.empty()) continue;
    try {
      c.sim = score_candidate(enc, read_png(candidates_dir / c.generated_path), read_png(pool_root / c.styled_reference.image_path));
    } catch (const std::exception& e) {
      c.error = e.what();
      c.generated_path.clear();
    }
  }
}

DatasetManifest curate(const std::vector<CandidatePair>& candidates, double tau) {
  if (!std::isfinite(tau) || tau > 1.0) throw std::invalid_argument("curate: tau must be finite and at most 1");
  DatasetManifest m;
  m.threshold = tau;
  for (const CandidatePair& c : candidates) {
    if (c.generated_path.empty() && !c.error.empty()) continue;
    if (!c.sim) throw std::invalid_argument("curate: candidate " + to_string(c.bare_source.id) + " -> " +
                                            to_string(c.styled_reference.id) + " has not been scored");
    if (!filter_pair(*c.sim, tau)) continue;
    SampleRecord target = c.styled_reference;
    target.provenance = Provenance::filtered_retained;
    m.add(TrainingPair{c.bare_source, target, c.sim});
  }
  return m;
}

std::string format_candidates(const std::vector<CandidatePair>& candidates) {
  std::string out = "source\treference\tgenerated\tsim\terror\n";
  for (const CandidatePair& c : candidates) {
    out += to_string(c.bare_source.id) + "\t" + to_string(c.styled_reference.id) + "\t" +
           (c.generated_path.empty() ? "NA" : c.generated_path) + "\t" + (c.sim ? fixed6(*c.sim) : "NA") + "\t" +
           (c.error.empty() ? "-" : c.error) + "\n";
  }
  return out;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const fs::path& base_manifest,
                            const std::optional<fs::path>& test_manifest, const fs::path& out_dir, std::ostream* log) {
  cfg.validate();
  PipelineResult result;

  struct BaseInfo {
    Dataset data;
    int resolution = 0, n_identities = 0, n_styles = 0;
  };
  const BaseInfo base = stage("load base dataset", log, [&] {
    BaseInfo b{load_dataset(base_manifest), 0, 0, 0};
    if (b.data.manifest.pairs.empty()) throw std::invalid_argument("base manifest has no pairs");
    b.resolution = png_dimensions(b.data.resolve(b.data.manifest.pairs.front().source.image_path)).first;
    for (const TrainingPair& p : b.data.manifest.pairs) {
      b.n_identities = std::max({b.n_identities, p.source.id.identity + 1, p.target.id.identity + 1});
      b.n_styles = std::max(b.n_styles, p.target.id.makeup);
    }
    if (b.n_styles < 1) throw std::invalid_argument("base manifest has no styled targets");
    return b;
  });
  std::optional<Dataset> test;
  if (test_manifest) test = stage("load test set", log, [&] { return load_dataset(*test_manifest); });

  const fs::path g1_dir = out_dir / "g1", g2_dir = out_dir / "g2", pools_dir = out_dir / "pools",
                 cand_dir = out_dir / "candidates", curated_dir = out_dir / "curated";

  const Model<Real> g1 = stage("train G1", log, [&] {
    TrainResult r = train(Model<Real>::init(base.resolution, mix_seed(cfg.seed, 11)), base.data, cfg.g1_train, log);
    result.g1_checkpoint = g1_dir / "model.ckpt";
    save_checkpoint(r.model, result.g1_checkpoint);
    write_loss_log(r.log, g1_dir / "loss_log.tsv");
    return std::move(r.model);
  });

  struct Pools {
    std::vector<SampleRecord> bare, styled;
  };
  const Pools pools = stage("render pools", log, [&] {
    Pools p;
    std::vector<int> all_styles;
    for (int j = 0; j <= base.n_styles; ++j) all_styles.push_back(j);
    std::vector<int> a_ids;
    for (int k = 0; k < cfg.pool_a_size; ++k) a_ids.push_back(base.n_identities + k);
    for (const SampleRecord& r : render_samples(a_ids, all_styles, base.resolution, cfg.seed, pools_dir))
      if (r.id.bare()) p.bare.push_back(r);
    for (int k = 0; k < cfg.pool_b_size; ++k) {
      const int b = cfg.disjoint_pools ? base.n_identities + cfg.pool_a_size + k : a_ids[static_cast<std::size_t>(k % cfg.pool_a_size)];
      const int j = 1 + k % base.n_styles;
      for (const SampleRecord& r : render_samples({b}, {0, j}, base.resolution, cfg.seed, pools_dir))
        if (!r.id.bare()) p.styled.push_back(r);
    }
    return p;
  });

  std::vector<CandidatePair> candidates = stage("cross-generate", log, [&] {
    auto c = cross_generate(g1, pools.bare, pools.styled, pools_dir, cand_dir,
                            GenerateOptions{cfg.guidance, cfg.ddim_steps, cfg.g1_train.timesteps, mix_seed(cfg.seed, 21)});
    score_candidates(c, g1.encoder, pools_dir, cand_dir);
    write_text(cand_dir / "candidates.tsv", format_candidates(c));
    return c;
  });
  result.candidates = candidates.size();

  const DatasetManifest curated = stage("filter", log, [&] {
    DatasetManifest m = curate(candidates, cfg.tau);
    for (TrainingPair& p : m.pairs) p = rebased(std::move(p), pools_dir, curated_dir);
    result.curated_manifest = curated_dir / "manifest.txt";
    write_manifest(m, result.curated_manifest);
    return m;
  });
  result.retained = curated.pairs.size();
  if (log) *log << "[pipeline] retained " << result.retained << " of " << result.candidates << " candidates\n";

  const Model<Real> g2 = stage("train G2", log, [&] {
    DatasetManifest combined;
    for (const TrainingPair& p : base.data.manifest.pairs) combined.pairs.push_back(rebased(p, base.data.root, g2_dir));
    for (const TrainingPair& p : curated.pairs) combined.pairs.push_back(rebased(p, curated_dir, g2_dir));
    combined.threshold = cfg.tau;
    write_manifest(combined, g2_dir / "train_manifest.txt");
    TrainConfig tc = cfg.g2_train;
    tc.fit_prior = false;  // keep G1's prior so the warm start is the same function
    TrainResult r = train(g1, load_dataset(g2_dir / "train_manifest.txt"), tc, log);
    result.g2_checkpoint = g2_dir / "model.ckpt";
    save_checkpoint(r.model, result.g2_checkpoint);
    write_loss_log(r.log, g2_dir / "loss_log.tsv");
    return std::move(r.model);
  });

  stage("evaluate", log, [&] {
    std::vector<LabeledRow> rows;
    if (test) {
      const EvalOptions options{cfg.guidance, cfg.ddim_steps, cfg.g1_train.timesteps, mix_seed(cfg.seed, 31)};
      result.g1_metrics = evaluate(g1, g1.encoder, *test, options).row;
      result.g2_metrics = evaluate(g2, g1.encoder, *test, options).row;
      rows.push_back({"base", *result.g1_metrics});
      rows.push_back({"base+curated", *result.g2_metrics});
    }
    std::string text = format_report(rows);
    text += "# candidates " + std::to_string(result.candidates) + "\tretained " + std::to_string(result.retained) +
            "\ttau " + fixed6(cfg.tau) + "\n";
    result.report = out_dir / "report.txt";
    write_text(result.report, text);
    return 0;
  });
  return result;
}

}  // namespace mkup
