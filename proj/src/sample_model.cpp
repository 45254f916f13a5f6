#include "mkup/sample_model.hpp"

#include "mkup/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace mkup {

namespace fs = std::filesystem;

std::string to_string(SampleId id) {
  return "I" + std::to_string(id.identity) + "M" + std::to_string(id.makeup);
}

SampleId parse_sample_id(const std::string& text) {
  int i = -1, j = -1;
  char tail = 0;
  if (std::sscanf(text.c_str(), "I%dM%d%c", &i, &j, &tail) != 2 || i < 0 || j < 0 ||
      to_string(SampleId{i, j}) != text)
    throw ManifestError("malformed sample id '" + text + "'");
  return SampleId{i, j};
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::base: return "base";
    case Provenance::cross_generated: return "cross_generated";
    case Provenance::filtered_retained: return "filtered_retained";
  }
  return "base";
}

Provenance parse_provenance(const std::string& text) {
  if (text == "base") return Provenance::base;
  if (text == "cross_generated") return Provenance::cross_generated;
  if (text == "filtered_retained") return Provenance::filtered_retained;
  throw ManifestError("unknown provenance '" + text + "'");
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string describe(const TrainingPair& p, std::size_t index) {
  return "pair " + std::to_string(index) + " (" + to_string(p.source.id) + " -> " + to_string(p.target.id) + ")";
}

void check_pair(const TrainingPair& p, std::size_t index, double threshold) {
  if (!p.source.id.bare()) throw ManifestError(describe(p, index) + ": source must be bare (makeup index 0)");
  if (p.sim) {
    if (!std::isfinite(*p.sim) || *p.sim < -1.0 || *p.sim > 1.0)
      throw ManifestError(describe(p, index) + ": sim_score outside [-1, 1]");
  }
  if (p.target.provenance == Provenance::filtered_retained) {
    if (!p.sim) throw ManifestError(describe(p, index) + ": filtered_retained pair without sim_score");
    if (*p.sim < threshold)
      throw ManifestError(describe(p, index) + ": sim_score " + fixed6(*p.sim) + " below threshold " +
                          fixed6(threshold));
  }
  if (p.source.image_path.empty() || p.target.image_path.empty())
    throw ManifestError(describe(p, index) + ": empty image path");
}

struct IdRegistry {
  std::map<SampleId, SampleRecord> records;
  std::set<std::pair<SampleId, SampleId>> pairs;

  void check(const TrainingPair& p, std::size_t index) {
    if (!pairs.emplace(p.source.id, p.target.id).second)
      throw ManifestError(describe(p, index) + ": duplicate pair");
    for (const SampleRecord* r : {&p.source, &p.target}) {
      auto [it, inserted] = records.emplace(r->id, *r);
      if (!inserted && (it->second.image_path != r->image_path || it->second.masks_path != r->masks_path))
        throw ManifestError(describe(p, index) + ": sample " + to_string(r->id) +
                            " refers to two different files");
    }
  }
};

std::string format_record(const char* role, const SampleRecord& r) {
  std::string out;
  out += std::string(role) + "=" + to_string(r.id);
  out += std::string("\t") + role + "_image=" + r.image_path;
  out += std::string("\t") + role + "_masks=" + r.masks_path;
  out += std::string("\t") + role + "_prompt=" + std::string(to_string(r.prompt));
  out += std::string("\t") + role + "_provenance=" + to_string(r.provenance);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t at = s.find(sep, start);
    out.push_back(s.substr(start, at == std::string::npos ? std::string::npos : at - start));
    if (at == std::string::npos) break;
    start = at + 1;
  }
  return out;
}

const std::vector<std::string> kPairKeys = {
    "source",        "source_image",  "source_masks",  "source_prompt",     "source_provenance", "target",
    "target_image",  "target_masks",  "target_prompt", "target_provenance", "sim"};

std::map<std::string, std::string> parse_fields(const std::string& line, std::size_t line_no) {
  std::map<std::string, std::string> fields;
  for (const std::string& part : split(line, '\t')) {
    const std::size_t eq = part.find('=');
    if (eq == std::string::npos)
      throw ManifestError("line " + std::to_string(line_no) + ": field without '=': '" + part + "'");
    if (!fields.emplace(part.substr(0, eq), part.substr(eq + 1)).second)
      throw ManifestError("line " + std::to_string(line_no) + ": repeated field '" + part.substr(0, eq) + "'");
  }
  return fields;
}

double parse_number(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || !std::isfinite(v)) throw ManifestError("malformed " + what + " '" + text + "'");
  return v;
}

SampleRecord parse_record(std::map<std::string, std::string>& f, const std::string& role) {
  SampleRecord r;
  r.id = parse_sample_id(f.at(role));
  r.image_path = f.at(role + "_image");
  r.masks_path = f.at(role + "_masks");
  const auto prompt = parse_prompt(f.at(role + "_prompt"));
  if (!prompt) throw ManifestError("prompt '" + f.at(role + "_prompt") + "' is not in the vocabulary");
  r.prompt = *prompt;
  r.provenance = parse_provenance(f.at(role + "_provenance"));
  return r;
}

}  // namespace

void DatasetManifest::add(TrainingPair pair) {
  check_pair(pair, pairs.size(), threshold);
  IdRegistry registry;
  for (std::size_t i = 0; i < pairs.size(); ++i) registry.check(pairs[i], i);
  registry.check(pair, pairs.size());
  pairs.push_back(std::move(pair));
}

void validate(const DatasetManifest& manifest) {
  if (manifest.schema_version != kManifestSchemaVersion)
    throw ManifestError("schema version " + std::to_string(manifest.schema_version) + " is not supported (expected " +
                        std::to_string(kManifestSchemaVersion) + ")");
  if (!std::isfinite(manifest.threshold) || manifest.threshold < -1.0 || manifest.threshold > 1.0)
    throw ManifestError("threshold outside [-1, 1]");
  IdRegistry registry;
  for (std::size_t i = 0; i < manifest.pairs.size(); ++i) {
    check_pair(manifest.pairs[i], i, manifest.threshold);
    registry.check(manifest.pairs[i], i);
  }
}

std::string format_manifest(const DatasetManifest& manifest) {
  validate(manifest);
  std::string out = "mkup-manifest\tschema_version=" + std::to_string(manifest.schema_version) +
                    "\tthreshold=" + fixed6(manifest.threshold) + "\n";
  for (const TrainingPair& p : manifest.pairs) {
    out += format_record("source", p.source);
    out += "\t";
    out += format_record("target", p.target);
    out += "\tsim=" + (p.sim ? fixed6(*p.sim) : std::string("NA"));
    out += "\n";
  }
  return out;
}

DatasetManifest parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ManifestError("empty manifest");
  const auto header = split(line, '\t');
  if (header.empty() || header[0] != "mkup-manifest") throw ManifestError("missing manifest header");
  auto header_fields = parse_fields(line.substr(line.find('\t') == std::string::npos ? line.size() : line.find('\t') + 1), 1);
  DatasetManifest m;
  if (!header_fields.count("schema_version") || !header_fields.count("threshold") || header_fields.size() != 2)
    throw ManifestError("header must carry exactly schema_version and threshold");
  const double version = parse_number(header_fields["schema_version"], "schema_version");
  if (version != kManifestSchemaVersion)
    throw ManifestError("schema version " + header_fields["schema_version"] + " is not supported (expected " +
                        std::to_string(kManifestSchemaVersion) + ")");
  m.threshold = parse_number(header_fields["threshold"], "threshold");

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = parse_fields(line, line_no);
    for (const auto& key : kPairKeys)
      if (!fields.count(key)) throw ManifestError("line " + std::to_string(line_no) + ": missing field '" + key + "'");
    if (fields.size() != kPairKeys.size())
      throw ManifestError("line " + std::to_string(line_no) + ": unexpected extra fields");
    TrainingPair p;
    try {
      p.source = parse_record(fields, "source");
      p.target = parse_record(fields, "target");
      if (fields["sim"] != "NA") p.sim = parse_number(fields["sim"], "sim_score");
    } catch (const ManifestError& e) {
      throw ManifestError("line " + std::to_string(line_no) + ": " + e.what());
    }
    m.pairs.push_back(std::move(p));
  }
  validate(m);
  return m;
}

DatasetManifest load_manifest(const fs::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  DatasetManifest m = parse_manifest(buf.str());
  if (options.check_files) {
    const fs::path root = path.parent_path();
    std::set<std::string> seen;
    for (std::size_t i = 0; i < m.pairs.size(); ++i) {
      for (const SampleRecord* r : {&m.pairs[i].source, &m.pairs[i].target}) {
        if (!seen.insert(r->image_path).second) continue;
        const fs::path img = root / r->image_path, msk = root / r->masks_path;
        if (!fs::exists(img) || !fs::exists(msk))
          throw ManifestError(describe(m.pairs[i], i) + ": missing file for sample " + to_string(r->id));
        if (png_dimensions(img) != png_dimensions(msk))
          throw ManifestError(describe(m.pairs[i], i) + ": image and mask resolutions differ for " + to_string(r->id));
      }
    }
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const std::string text = format_manifest(manifest);  // validates before touching the file
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  out << text;
  if (!out) throw ManifestError("failed writing manifest " + path.string());
}

Dataset load_dataset(const fs::path& manifest_path, const LoadOptions& options) {
  return Dataset{manifest_path.parent_path(), load_manifest(manifest_path, options)};
}

fs::path sibling_image(const fs::path& image, SampleId id) {
  return image.parent_path() / (to_string(id) + ".png");
}

}  // namespace mkup
