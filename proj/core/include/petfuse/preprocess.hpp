// Volume harmonization, artifact clipping, normalization and resizing.
//
// The canonical per-volume pipeline is
//   harmonize -> clip_artifacts -> apply_normalizer -> resize_volume
// with the normalizer fitted on training-fold volumes only. All functions are
// pure and safe to call concurrently on distinct inputs.
#pragma once

#include <string>
#include <vector>

#include "petfuse/volume.hpp"

namespace petfuse {

inline constexpr std::array<int, 3> kModelVolumeShape{75, 50, 50};

struct Normalizer {
  Modality modality = Modality::PET;
  double mean = 0.0;
  double std = 1.0;  // floored at 1e-6 when fitted
  std::vector<std::string> fit_on;  // training-fold patient ids only
};

// Applies the stored rescale: voxels*slope + intercept, then resets the
// metadata to slope 1 / intercept 0 so a second call is the identity.
Volume harmonize(Volume v);

// Winsorizes voxels to the [lo_pct, hi_pct] percentile interval.
Volume clip_artifacts(Volume v, double lo_pct = 0.1, double hi_pct = 99.9);

// Percentile with linear interpolation between order statistics (pct in
// [0,100]); exposed because clip_artifacts and its tests share it.
double percentile(std::vector<float> values, double pct);

// Pooled mean/std over every voxel of the listed volumes (two-pass, 64-bit
// accumulation). `fit_ids` records which patients contributed, for the
// leakage audit.
Normalizer fit_normalizer(const std::vector<const Volume*>& training, Modality modality,
                          std::vector<std::string> fit_ids = {});

Volume apply_normalizer(Volume v, const Normalizer& n);

// Trilinear, corner-aligned resize to `target` (D,H,W); spacing is rescaled
// so the physical extent (n-1)*spacing is preserved.
Volume resize_volume(const Volume& v, std::array<int, 3> target = kModelVolumeShape);

// harmonize -> clip -> normalize -> resize in one call.
Volume preprocess_volume(Volume v, const Normalizer& n,
                         std::array<int, 3> target = kModelVolumeShape);

}  // namespace petfuse
