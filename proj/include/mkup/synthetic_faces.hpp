#pragma once

// Procedural faces with known identity and makeup factors.
//
// Coordinates are normalised to [-1, 1] across the raster (v grows downwards).
// The face is an ellipse centred at (0, 0.05); eyes, lips and a nose are drawn
// inside it. Makeup blends a colour into one region's pixels and never touches
// pixels outside that region's mask.

#include "mkup/prompt.hpp"
#include "mkup/sample_model.hpp"
#include "mkup/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace mkup {

struct Range {
  double lo, hi;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

enum GeometryParam : int {
  kFaceRadiusX,
  kFaceRadiusY,
  kEyeSpacing,
  kEyeHeight,
  kEyeSize,
  kMouthWidth,
  kMouthHeight,
  kNoseOffset,
  kGeometryParamCount
};

inline constexpr std::array<Range, kGeometryParamCount> kGeometryRanges = {{
    {0.55, 0.80},    // face ellipse half-width
    {0.70, 0.90},    // face ellipse half-height
    {0.32, 0.50},    // distance between eye centres
    {-0.28, -0.10},  // eye centre height
    {0.09, 0.14},    // eye half-width
    {0.16, 0.30},    // lips half-width
    {0.06, 0.10},    // lips half-height
    {-0.08, 0.08},   // horizontal nose offset
}};

inline constexpr std::array<Range, 3> kSkinToneRanges = {{{0.55, 0.95}, {0.38, 0.78}, {0.28, 0.68}}};

struct IdentityParams {
  std::array<double, kGeometryParamCount> geometry{};
  std::array<double, 3> skin_tone{};

  friend bool operator==(const IdentityParams&, const IdentityParams&) = default;
};

struct RegionStyle {
  std::array<double, 3> color{};
  double intensity = 0.0;
  double texture_frequency = 0.0;

  bool active() const { return intensity > 0.0; }
  friend bool operator==(const RegionStyle&, const RegionStyle&) = default;
};

struct MakeupParams {
  RegionStyle eyes, lips, face;
  int style_index = 0;

  friend bool operator==(const MakeupParams&, const MakeupParams&) = default;
};

struct RenderedFace {
  Image image;
  LabelMap masks;
};

// Uniform draws inside the declared ranges; deterministic in seed.
IdentityParams sample_identity(std::uint64_t seed);

// Style 0 is the bare face. Styles j > 0 come from a fixed catalogue keyed by j
// alone: (j-1) mod 4 selects lips only, eyes only, face only, or all three.
MakeupParams sample_makeup(std::uint64_t seed, int style_index);

// resolution must be a power of two in [32, 512].
RenderedFace render_face(const IdentityParams& identity, const MakeupParams& makeup, int resolution);

Prompt prompt_for(const MakeupParams& makeup);

// Seed of identity `index` within a dataset generated from `dataset_seed`.
std::uint64_t identity_seed(std::uint64_t dataset_seed, int index);

// Renders identities x styles into out_dir/images and out_dir/masks and returns
// the records, keyed by sample id, with paths relative to out_dir.
std::vector<SampleRecord> render_samples(const std::vector<int>& identities, const std::vector<int>& styles,
                                         int resolution, std::uint64_t dataset_seed,
                                         const std::filesystem::path& out_dir);

// Base dataset: n_identities bare faces plus every identity in n_styles styles,
// one (bare, styled) pair per styled image. Writes out_dir/manifest.txt.
DatasetManifest build_base_dataset(int n_identities, int n_styles, int resolution, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

struct DatasetSplit {
  DatasetManifest train, test;
};

// `per_identity` held-out styles for each identity, spread so every style is
// held out equally often: 1 + ((i + m * S / per_identity) mod S).
std::vector<SampleId> default_holdout(int n_identities, int n_styles, int per_identity);

// Drops the held-out (identity, style) pairs from `base` and builds a test
// manifest pairing each held-out bare face with `references` other identities
// that wear the same style in the training split.
DatasetSplit holdout_split(const DatasetManifest& base, const std::vector<SampleId>& held_out, int references,
                           std::uint64_t seed);

}  // namespace mkup
