// 3D voxel volumes and the on-disk .vol format.
//
// A volume is stored as `<name>.vol` (raw little-endian float32, row-major
// D,H,W order) plus a `<name>.vol.json` sidecar carrying modality, shape,
// spacing and the rescale slope/intercept metadata.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "petfuse/common.hpp"

namespace petfuse {

enum class Modality { PET, CT };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

struct Volume {
  Modality modality = Modality::PET;
  std::array<int, 3> shape{0, 0, 0};            // (D, H, W)
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};  // (sz, sy, sx)
  std::vector<float> voxels;                    // row-major, length D*H*W
  double rescale_slope = 1.0;
  double rescale_intercept = 0.0;

  int64_t numel() const {
    return static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
  }
  float at(int z, int y, int x) const {
    return voxels[(static_cast<int64_t>(z) * shape[1] + y) * shape[2] + x];
  }
  float& at(int z, int y, int x) {
    return voxels[(static_cast<int64_t>(z) * shape[1] + y) * shape[2] + x];
  }
  void validate() const;  // throws ValidationError on inconsistent fields
};

// path_base excludes the extension: writes/reads path_base.vol(.json).
void save_volume(const Volume& v, const std::string& path_base);
Volume load_volume(const std::string& path_base);

}  // namespace petfuse
