#include "petfuse/volume.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace petfuse {

using nlohmann::json;

std::string to_string(Modality m) { return m == Modality::PET ? "PET" : "CT"; }

Modality modality_from_string(const std::string& s) {
  if (s == "PET") return Modality::PET;
  if (s == "CT") return Modality::CT;
  throw ValidationError("unknown modality: " + s);
}

void Volume::validate() const {
  for (const int d : shape) {
    if (d <= 0) throw ValidationError("volume shape must be positive");
  }
  for (const double s : spacing_mm) {
    if (!(s > 0.0)) throw ValidationError("voxel spacing must be strictly positive");
  }
  if (numel() != static_cast<int64_t>(voxels.size())) {
    throw ValidationError("volume voxel count does not match shape");
  }
}

void save_volume(const Volume& v, const std::string& path_base) {
  v.validate();
  std::ofstream raw(path_base + ".vol", std::ios::binary);
  if (!raw) throw IoError("cannot write volume: " + path_base + ".vol");
  raw.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  if (!raw) throw IoError("short write on volume: " + path_base + ".vol");

  const json side = {
      {"modality", to_string(v.modality)},
      {"shape", v.shape},
      {"spacing_mm", v.spacing_mm},
      {"rescale_slope", v.rescale_slope},
      {"rescale_intercept", v.rescale_intercept},
  };
  std::ofstream meta(path_base + ".vol.json");
  if (!meta) throw IoError("cannot write volume sidecar: " + path_base + ".vol.json");
  meta << side.dump(2) << "\n";
}

Volume load_volume(const std::string& path_base) {
  std::ifstream meta(path_base + ".vol.json");
  if (!meta) throw IoError("cannot open volume sidecar: " + path_base + ".vol.json");
  json side;
  try {
    meta >> side;
  } catch (const json::exception& e) {
    throw IoError("malformed volume sidecar: " + std::string(e.what()));
  }
  Volume v;
  v.modality = modality_from_string(side.at("modality").get<std::string>());
  v.shape = side.at("shape").get<std::array<int, 3>>();
  v.spacing_mm = side.at("spacing_mm").get<std::array<double, 3>>();
  v.rescale_slope = side.at("rescale_slope").get<double>();
  v.rescale_intercept = side.at("rescale_intercept").get<double>();

  std::ifstream raw(path_base + ".vol", std::ios::binary);
  if (!raw) throw IoError("cannot open volume: " + path_base + ".vol");
  v.voxels.resize(static_cast<size_t>(v.numel()));
  raw.read(reinterpret_cast<char*>(v.voxels.data()),
           static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  if (!raw) throw IoError("volume data truncated: " + path_base + ".vol");
  v.validate();
  return v;
}

}  // namespace petfuse
