#include "mkup/synthetic_faces.hpp"

#include "mkup/image_io.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <map>
#include <set>
#include <stdexcept>

namespace mkup {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, Range r) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return r.lo + (r.hi - r.lo) * u;
}

constexpr std::array<double, 3> kBackground = {0.82, 0.86, 0.90};
constexpr std::array<double, 3> kSclera = {0.95, 0.95, 0.93};
constexpr std::array<double, 3> kIris = {0.16, 0.11, 0.08};
constexpr double kFaceCentreY = 0.05;
constexpr double kNoseY = 0.12;

bool in_ellipse(double u, double v, double cu, double cv, double ru, double rv) {
  const double du = (u - cu) / ru, dv = (v - cv) / rv;
  return du * du + dv * dv <= 1.0;
}

RegionStyle random_region(std::mt19937_64& rng, std::array<Range, 3> color) {
  RegionStyle s;
  for (int c = 0; c < 3; ++c) s.color[static_cast<std::size_t>(c)] = uniform(rng, color[static_cast<std::size_t>(c)]);
  s.intensity = uniform(rng, {0.55, 0.90});
  s.texture_frequency = uniform(rng, {0.0, 4.0});
  return s;
}

void apply_region(Image& img, const LabelMap& masks, Region region, const RegionStyle& style, int resolution) {
  if (!style.active()) return;
  const double a = style.intensity;
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      if (masks.at(y, x) != static_cast<std::uint8_t>(region)) continue;
      const double u = (x + 0.5) / resolution * 2.0 - 1.0;
      const double v = (y + 0.5) / resolution * 2.0 - 1.0;
      const double tex = 1.0 - 0.15 * (0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * style.texture_frequency * (u + v)));
      for (int c = 0; c < 3; ++c) {
        const double base = img.at(y, x, c);
        img.at(y, x, c) = static_cast<Real>((1.0 - a) * base + a * style.color[static_cast<std::size_t>(c)] * tex);
      }
    }
}

}  // namespace

std::uint64_t identity_seed(std::uint64_t dataset_seed, int index) {
  return splitmix(splitmix(dataset_seed) ^ (0x1D00000000ull + static_cast<std::uint64_t>(index)));
}

IdentityParams sample_identity(std::uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed));
  IdentityParams p;
  for (std::size_t k = 0; k < p.geometry.size(); ++k) p.geometry[k] = uniform(rng, kGeometryRanges[k]);
  for (std::size_t c = 0; c < 3; ++c) p.skin_tone[c] = uniform(rng, kSkinToneRanges[c]);
  return p;
}

MakeupParams sample_makeup(std::uint64_t /*seed*/, int style_index) {
  if (style_index < 0) throw std::invalid_argument("style_index must be non-negative");
  MakeupParams m;
  m.style_index = style_index;
  if (style_index == 0) return m;
  std::mt19937_64 rng(splitmix(0x5717E000ull + static_cast<std::uint64_t>(style_index)));
  const RegionStyle lips = random_region(rng, {{{0.50, 0.95}, {0.00, 0.35}, {0.10, 0.60}}});
  const RegionStyle eyes = random_region(rng, {{{0.05, 0.90}, {0.05, 0.90}, {0.05, 0.90}}});
  const RegionStyle face = random_region(rng, {{{0.75, 1.00}, {0.35, 0.70}, {0.35, 0.70}}});
  switch ((style_index - 1) % 4) {
    case 0: m.lips = lips; break;
    case 1: m.eyes = eyes; break;
    case 2: m.face = face; break;
    default:
      m.lips = lips;
      m.eyes = eyes;
      m.face = face;
  }
  return m;
}

RenderedFace render_face(const IdentityParams& id, const MakeupParams& makeup, int resolution) {
  if (resolution < 32 || resolution > 512 || (resolution & (resolution - 1)) != 0)
    throw std::invalid_argument("resolution must be a power of two in [32, 512], got " + std::to_string(resolution));
  const auto& g = id.geometry;
  RenderedFace out{Image(resolution, resolution), LabelMap(resolution, resolution)};
  Image& img = out.image;
  LabelMap& masks = out.masks;
  const double mouth_y = kFaceCentreY + 0.5 * g[kFaceRadiusY];
  const double eye_dx = 0.5 * g[kEyeSpacing];

  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      const double u = (x + 0.5) / resolution * 2.0 - 1.0;
      const double v = (y + 0.5) / resolution * 2.0 - 1.0;
      std::array<double, 3> rgb = kBackground;
      Region label = Region::background;
      if (in_ellipse(u, v, 0.0, kFaceCentreY, g[kFaceRadiusX], g[kFaceRadiusY])) {
        label = Region::face;
        rgb = id.skin_tone;
        if (in_ellipse(u, v, g[kNoseOffset], kNoseY, 0.06, 0.13))
          for (auto& c : rgb) c *= 0.88;
        for (double side : {-1.0, 1.0}) {
          const double cx = side * eye_dx, cy = g[kEyeHeight], r = g[kEyeSize];
          if (!in_ellipse(u, v, cx, cy, 1.5 * r, r)) continue;
          label = Region::eyes;
          rgb = id.skin_tone;
          for (auto& c : rgb) c *= 0.92;
          if (in_ellipse(u, v, cx, cy, r, 0.55 * r)) rgb = kSclera;
          if (in_ellipse(u, v, cx, cy, 0.45 * r, 0.45 * r)) rgb = kIris;
        }
        if (in_ellipse(u, v, 0.0, mouth_y, g[kMouthWidth], g[kMouthHeight])) {
          label = Region::lips;
          rgb = {id.skin_tone[0] * 0.95, id.skin_tone[1] * 0.62, id.skin_tone[2] * 0.62};
        }
      }
      masks.at(y, x) = static_cast<std::uint8_t>(label);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<Real>(rgb[static_cast<std::size_t>(c)]);
    }

  apply_region(img, masks, Region::face, makeup.face, resolution);
  apply_region(img, masks, Region::eyes, makeup.eyes, resolution);
  apply_region(img, masks, Region::lips, makeup.lips, resolution);
  quantize_8bit(img);
  return out;
}

Prompt prompt_for(const MakeupParams& makeup) {
  const int active = int(makeup.eyes.active()) + int(makeup.lips.active()) + int(makeup.face.active());
  if (active == 0) return Prompt::no_makeup;
  if (active > 1) return Prompt::full_makeup;
  if (makeup.lips.active()) return Prompt::lip_makeup;
  if (makeup.eyes.active()) return Prompt::eye_makeup;
  return Prompt::face_makeup;
}

std::vector<SampleRecord> render_samples(const std::vector<int>& identities, const std::vector<int>& styles,
                                         int resolution, std::uint64_t dataset_seed, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "images") || !fs::is_directory(out_dir / "masks"))
    throw std::runtime_error("cannot create dataset directories under " + out_dir.string());
  std::vector<SampleRecord> records;
  for (int i : identities) {
    const IdentityParams identity = sample_identity(identity_seed(dataset_seed, i));
    for (int j : styles) {
      const MakeupParams makeup = sample_makeup(dataset_seed, j);
      const RenderedFace face = render_face(identity, makeup, resolution);
      SampleRecord r;
      r.id = SampleId{i, j};
      r.image_path = "images/" + to_string(r.id) + ".png";
      r.masks_path = "masks/" + to_string(r.id) + ".png";
      r.prompt = prompt_for(makeup);
      r.provenance = Provenance::base;
      write_png(out_dir / r.image_path, face.image);
      write_label_png(out_dir / r.masks_path, face.masks);
      records.push_back(std::move(r));
    }
  }
  return records;
}

DatasetManifest build_base_dataset(int n_identities, int n_styles, int resolution, std::uint64_t seed,
                                   const fs::path& out_dir) {
  if (n_identities < 2) throw std::invalid_argument("build_base_dataset needs at least 2 identities");
  if (n_styles < 1) throw std::invalid_argument("build_base_dataset needs at least 1 style");
  std::vector<int> ids(static_cast<std::size_t>(n_identities));
  for (int i = 0; i < n_identities; ++i) ids[static_cast<std::size_t>(i)] = i;
  std::vector<int> styles(static_cast<std::size_t>(n_styles) + 1);
  for (int j = 0; j <= n_styles; ++j) styles[static_cast<std::size_t>(j)] = j;
  const auto records = render_samples(ids, styles, resolution, seed, out_dir);

  DatasetManifest manifest;
  const std::size_t per_identity = styles.size();
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 1; j < per_identity; ++j)
      manifest.pairs.push_back(TrainingPair{records[i * per_identity], records[i * per_identity + j], std::nullopt});
  write_manifest(manifest, out_dir / "manifest.txt");
  return manifest;
}

std::vector<SampleId> default_holdout(int n_identities, int n_styles, int per_identity) {
  if (per_identity < 0 || per_identity > n_styles) throw std::invalid_argument("per_identity must lie in [0, n_styles]");
  std::vector<SampleId> out;
  for (int i = 0; i < n_identities; ++i)
    for (int m = 0; m < per_identity; ++m) out.push_back(SampleId{i, 1 + (i + m * n_styles / per_identity) % n_styles});
  return out;
}

DatasetSplit holdout_split(const DatasetManifest& base, const std::vector<SampleId>& held_out, int references,
                           std::uint64_t seed) {
  if (references < 1) throw std::invalid_argument("holdout_split needs at least one reference per combination");
  const std::set<SampleId> held(held_out.begin(), held_out.end());
  DatasetSplit split;
  split.train.threshold = split.test.threshold = base.threshold;
  std::map<SampleId, SampleRecord> bare;
  std::map<int, std::vector<SampleRecord>> styled;  // style -> training records
  for (const TrainingPair& p : base.pairs) {
    bare.emplace(p.source.id, p.source);
    if (held.count(p.target.id)) continue;
    split.train.pairs.push_back(p);
    styled[p.target.id.makeup].push_back(p.target);
  }
  for (const SampleId& h : held_out) {
    const auto src = bare.find(SampleId{h.identity, 0});
    if (src == bare.end()) throw std::invalid_argument("held-out identity " + std::to_string(h.identity) + " has no bare sample");
    std::vector<SampleRecord> pool;
    for (const SampleRecord& r : styled[h.makeup])
      if (r.id.identity != h.identity) pool.push_back(r);
    if (static_cast<int>(pool.size()) < references)
      throw std::invalid_argument("not enough references wearing style " + std::to_string(h.makeup) + " for " + to_string(h));
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(h.identity) * 1009 + static_cast<std::uint64_t>(h.makeup)));
    for (int k = 0; k < references; ++k) {
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(k) + rng() % (pool.size() - static_cast<std::size_t>(k))]);
      split.test.pairs.push_back(TrainingPair{src->second, pool[static_cast<std::size_t>(k)], std::nullopt});
    }
  }
  validate(split.train);
  validate(split.test);
  return split;
}

}  // namespace mkup
