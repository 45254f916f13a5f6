#include "mkup/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace mkup {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'K', 'U', 'P', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json header_for(const Model<Real>& model) {
  json params = json::array();
  model.visit([&](const std::string& name, const Matrix<Real>& m) {
    params.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  return {{"format", "mkup-checkpoint"},
          {"schema_version", kCheckpointSchemaVersion},
          {"resolution", model.resolution()},
          {"feature_dim", model.encoder.feature_dim()},
          {"embed_dim", model.encoder.embed_dim()},
          {"denoiser_width", model.denoiser.width},
          {"parameter_count", model.parameter_count()},
          {"dtype", "float32"},
          {"parameters", params}};
}

}  // namespace

void save_checkpoint(const Model<Real>& model, const fs::path& path) {
  const std::string header = header_for(model).dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  model.visit([&](const std::string&, const Matrix<Real>& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Real)));
  });
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Model<Real> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  if (len > (1u << 24)) throw CheckpointError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(path.string() + ": truncated header");

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  if (header.value("schema_version", -1) != kCheckpointSchemaVersion)
    throw CheckpointError(path.string() + ": unsupported schema version");
  if (header.value("feature_dim", -1) != kFeatureDim || header.value("embed_dim", -1) != kEmbedDim ||
      header.value("denoiser_width", -1) != kEmbedDim)
    throw CheckpointError(path.string() + ": model dimensions do not match this build");

  Model<Real> model;
  try {
    model = Model<Real>::zeros(header.at("resolution").get<int>());
  } catch (const std::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  const json& params = header.at("parameters");
  std::size_t k = 0;
  model.visit([&](const std::string& name, Matrix<Real>& m) {
    if (k >= params.size()) throw CheckpointError(path.string() + ": missing parameter " + name);
    const json& p = params[k++];
    if (p.at("name").get<std::string>() != name || p.at("rows").get<Eigen::Index>() != m.rows() ||
        p.at("cols").get<Eigen::Index>() != m.cols())
      throw CheckpointError(path.string() + ": parameter " + std::to_string(k - 1) + " does not match " + name);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Real)));
    if (!in) throw CheckpointError(path.string() + ": truncated data for " + name);
  });
  if (k != params.size()) throw CheckpointError(path.string() + ": unexpected extra parameters");
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return model;
}

}  // namespace mkup
