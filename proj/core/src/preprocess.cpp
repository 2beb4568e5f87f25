#include "petfuse/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace petfuse {

Volume harmonize(Volume v) {
  v.validate();
  if (v.rescale_slope == 0.0) throw ValidationError("harmonize: rescale slope must be nonzero");
  const float slope = static_cast<float>(v.rescale_slope);
  const float intercept = static_cast<float>(v.rescale_intercept);
  if (slope != 1.0f || intercept != 0.0f) {
    for (float& x : v.voxels) x = x * slope + intercept;
  }
  v.rescale_slope = 1.0;
  v.rescale_intercept = 0.0;
  return v;
}

double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw ValidationError("percentile of empty set");
  if (pct < 0.0 || pct > 100.0) throw ValidationError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + frac * (static_cast<double>(values[lo + 1]) - values[lo]);
}

Volume clip_artifacts(Volume v, double lo_pct, double hi_pct) {
  v.validate();
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) {
    throw ValidationError("clip_artifacts: require 0 <= lo_pct < hi_pct <= 100");
  }
  const float lo = static_cast<float>(percentile(v.voxels, lo_pct));
  const float hi = static_cast<float>(percentile(v.voxels, hi_pct));
  for (float& x : v.voxels) x = std::clamp(x, lo, hi);
  return v;
}

Normalizer fit_normalizer(const std::vector<const Volume*>& training, Modality modality,
                          std::vector<std::string> fit_ids) {
  if (training.empty()) throw ValidationError("fit_normalizer: empty training set");
  int64_t count = 0;
  double sum = 0.0;
  for (const Volume* v : training) {
    if (v->modality != modality) {
      throw ValidationError("fit_normalizer: modality mismatch in training set");
    }
    for (const float x : v->voxels) sum += x;
    count += v->numel();
  }
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (const Volume* v : training) {
    for (const float x : v->voxels) {
      const double d = x - mean;
      ss += d * d;
    }
  }
  Normalizer n;
  n.modality = modality;
  n.mean = mean;
  n.std = std::max(std::sqrt(ss / static_cast<double>(count)), 1e-6);
  n.fit_on = std::move(fit_ids);
  return n;
}

Volume apply_normalizer(Volume v, const Normalizer& n) {
  v.validate();
  if (v.modality != n.modality) throw ValidationError("apply_normalizer: modality mismatch");
  const float mean = static_cast<float>(n.mean);
  const float inv_std = static_cast<float>(1.0 / n.std);
  for (float& x : v.voxels) x = (x - mean) * inv_std;
  return v;
}

Volume resize_volume(const Volume& v, std::array<int, 3> target) {
  v.validate();
  for (const int d : v.shape) {
    if (d < 2) throw ValidationError("resize_volume: every source axis must have size >= 2");
  }
  for (const int d : target) {
    if (d <= 0) throw ValidationError("resize_volume: target dims must be positive");
  }
  const int D = v.shape[0], H = v.shape[1], W = v.shape[2];
  const int Do = target[0], Ho = target[1], Wo = target[2];

  Volume out;
  out.modality = v.modality;
  out.shape = target;
  out.rescale_slope = v.rescale_slope;
  out.rescale_intercept = v.rescale_intercept;
  for (int a = 0; a < 3; ++a) {
    const double scale = target[a] > 1
        ? static_cast<double>(v.shape[a] - 1) / static_cast<double>(target[a] - 1)
        : 0.0;
    out.spacing_mm[a] = target[a] > 1 ? v.spacing_mm[a] * scale : v.spacing_mm[a] * v.shape[a];
  }
  out.voxels.resize(static_cast<size_t>(out.numel()));

  // Precompute corner-aligned source coordinates per axis.
  const auto axis_coords = [](int src, int dst) {
    std::vector<std::pair<int, float>> c(static_cast<size_t>(dst));  // (lo index, frac)
    const double scale = dst > 1 ? static_cast<double>(src - 1) / (dst - 1) : 0.0;
    for (int i = 0; i < dst; ++i) {
      double pos = i * scale;
      int lo = static_cast<int>(pos);
      if (lo >= src - 1) lo = src - 2;
      c[static_cast<size_t>(i)] = {lo, static_cast<float>(pos - lo)};
    }
    return c;
  };
  const auto zc = axis_coords(D, Do);
  const auto yc = axis_coords(H, Ho);
  const auto xc = axis_coords(W, Wo);

  int64_t o = 0;
  for (int z = 0; z < Do; ++z) {
    const auto [z0, fz] = zc[static_cast<size_t>(z)];
    for (int y = 0; y < Ho; ++y) {
      const auto [y0, fy] = yc[static_cast<size_t>(y)];
      for (int x = 0; x < Wo; ++x, ++o) {
        const auto [x0, fx] = xc[static_cast<size_t>(x)];
        const float c000 = v.at(z0, y0, x0), c001 = v.at(z0, y0, x0 + 1);
        const float c010 = v.at(z0, y0 + 1, x0), c011 = v.at(z0, y0 + 1, x0 + 1);
        const float c100 = v.at(z0 + 1, y0, x0), c101 = v.at(z0 + 1, y0, x0 + 1);
        const float c110 = v.at(z0 + 1, y0 + 1, x0), c111 = v.at(z0 + 1, y0 + 1, x0 + 1);
        const float c00 = c000 + fx * (c001 - c000);
        const float c01 = c010 + fx * (c011 - c010);
        const float c10 = c100 + fx * (c101 - c100);
        const float c11 = c110 + fx * (c111 - c110);
        const float c0 = c00 + fy * (c01 - c00);
        const float c1 = c10 + fy * (c11 - c10);
        out.voxels[static_cast<size_t>(o)] = c0 + fz * (c1 - c0);
      }
    }
  }
  return out;
}

Volume preprocess_volume(Volume v, const Normalizer& n, std::array<int, 3> target) {
  return resize_volume(apply_normalizer(clip_artifacts(harmonize(std::move(v))), n), target);
}

}  // namespace petfuse
