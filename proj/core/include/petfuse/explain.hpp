// Gradient explainability: input-gradient saliency volumes, slice overlays,
// pooled gradient histograms, distribution distances, laboratory-feature
// gradient importance, and a 2-component PCA projection of embeddings.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "petfuse/models.hpp"
#include "petfuse/stats.hpp"
#include "petfuse/volume.hpp"

namespace petfuse::explain {

struct SaliencyVolume {
  std::array<int, 3> shape{0, 0, 0};
  std::vector<float> values;   // |input gradient| max-normalized to [0,1]
  std::string model_kind;
  std::string patient_id;
  bool degenerate = false;     // gradient was identically zero
};

// Backpropagates the predicted logit to the image inputs (eval mode) and
// max-normalizes the absolute voxel gradients per volume. One SaliencyVolume
// per active image branch, keyed by modality.
std::vector<std::pair<Modality, SaliencyVolume>> input_gradient_saliency(
    const Model& model, const ModelInput& item);

struct OverlayImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;  // 3 bytes per pixel, row-major
};

// Central slice per anatomical plane (axial, coronal, sagittal); saliency
// below v_min is fully transparent, above it the heat color is blended with
// alpha equal to the saliency value.
std::array<OverlayImage, 3> render_slices(const SaliencyVolume& s, const Volume& base,
                                          float v_min = 0.3f);

void write_ppm(const OverlayImage& img, const std::string& path);

struct GradientHistogram {
  std::array<double, 51> bin_edges{};  // uniform on [0,1]
  std::array<int64_t, 50> counts{};
  int64_t total = 0;
};

// Pooled histogram of all voxel values across the given saliency volumes.
GradientHistogram gradient_distribution(const std::vector<SaliencyVolume>& saliencies);

GradientHistogram histogram_from_samples(const std::vector<float>& samples);

struct DistanceReport {
  double wasserstein = 0.0;
  double ks_statistic = 0.0;
  double ks_p = 1.0;
  double jensen_shannon = 0.0;   // base-2 logs, in [0,1]
  double energy = 0.0;           // 2E|X-Y| - E|X-X'| - E|Y-Y'|
  double bhattacharyya = 0.0;
  double histogram_overlap = 1.0;
};

// Sample metrics (Wasserstein-1, energy, KS with asymptotic p) come from the
// raw samples; histogram metrics (JSD, Bhattacharyya, overlap) from 50-bin
// histograms built on identical edges.
DistanceReport distribution_distances(const std::vector<float>& a, const std::vector<float>& b);
DistanceReport distribution_distances(const GradientHistogram& pa, const GradientHistogram& qb,
                                      const std::vector<float>& a, const std::vector<float>& b);

std::string distance_report_to_json(const DistanceReport& r);

// Mean |d logit / d lab_j| over the evaluation set, order (AST, ALT, CgA, GGT).
std::array<double, 4> lab_gradient_importance(const Model& model,
                                              const std::vector<const ModelInput*>& eval_set);

struct PcaResult {
  Matrix coords;                            // n x 2
  std::array<double, 2> eigenvalues{};      // top-2 covariance eigenvalues
  std::array<double, 2> explained_ratio{};  // eigenvalue / total variance
};

// Column-centered top-2 PCA by power iteration with deflation (1e-9 residual
// target); the largest-magnitude loading of each component is made positive.
PcaResult pca_projection(const Matrix& embeddings);

}  // namespace petfuse::explain
