#pragma once

// Sample notation (identity i, makeup j), training pairs and the line-oriented
// manifest that ties images on disk to pairs.
//
// Manifest layout: a header line
//
//   mkup-manifest<TAB>schema_version=1<TAB>threshold=0.700000
//
// followed by one pair per line, every field written as key=value and
// separated by tabs, in this order:
//
//   source source_image source_masks source_prompt source_provenance
//   target target_image target_masks target_prompt target_provenance sim
//
// Sample ids are written as I<i>M<j>; sim is a fixed six-decimal number or the
// token NA. Paths are relative to the directory holding the manifest.

#include "mkup/prompt.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mkup {

inline constexpr int kManifestSchemaVersion = 1;
inline constexpr double kDefaultThreshold = 0.7;

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SampleId {
  int identity = 0;
  int makeup = 0;  // 0 means bare-faced

  bool bare() const { return makeup == 0; }
  friend auto operator<=>(const SampleId&, const SampleId&) = default;
};

std::string to_string(SampleId id);
SampleId parse_sample_id(const std::string& text);

enum class Provenance { base, cross_generated, filtered_retained };

std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& text);

struct SampleRecord {
  SampleId id;
  std::string image_path;
  std::string masks_path;
  Prompt prompt = Prompt::no_makeup;
  Provenance provenance = Provenance::base;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct TrainingPair {
  SampleRecord source;  // bare face
  SampleRecord target;  // styled face
  std::optional<double> sim;

  friend bool operator==(const TrainingPair&, const TrainingPair&) = default;
};

struct DatasetManifest {
  std::vector<TrainingPair> pairs;
  double threshold = kDefaultThreshold;
  int schema_version = kManifestSchemaVersion;

  // Appends a pair, rejecting anything that would break the manifest invariants.
  void add(TrainingPair pair);

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

// Throws ManifestError naming the first offending pair.
void validate(const DatasetManifest& manifest);

struct LoadOptions {
  bool check_files = true;  // image and mask files exist and share a resolution
};

DatasetManifest load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);

// A manifest together with the directory its relative paths are anchored at.
struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;

  std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
};

Dataset load_dataset(const std::filesystem::path& manifest_path, const LoadOptions& options = {});

// Path of the ground-truth render of `id` next to an image of the same dataset
// (images are stored as <dir>/I<i>M<j>.png).
std::filesystem::path sibling_image(const std::filesystem::path& image, SampleId id);

}  // namespace mkup
