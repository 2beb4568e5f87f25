#include "petfuse/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "petfuse/rng.hpp"

namespace petfuse::explain {

namespace {

SaliencyVolume normalize_gradient(const std::vector<float>& grad, std::array<int, 3> shape,
                                  const std::string& kind, const std::string& id) {
  SaliencyVolume s;
  s.shape = shape;
  s.model_kind = kind;
  s.patient_id = id;
  s.values.resize(grad.size());
  float peak = 0.0f;
  for (size_t i = 0; i < grad.size(); ++i) {
    s.values[i] = std::abs(grad[i]);
    peak = std::max(peak, s.values[i]);
  }
  if (peak == 0.0f) {
    s.degenerate = true;
    return s;
  }
  const float inv = 1.0f / peak;
  for (float& v : s.values) v *= inv;
  return s;
}

}  // namespace

std::vector<std::pair<Modality, SaliencyVolume>> input_gradient_saliency(
    const Model& model, const ModelInput& item) {
  if (!model.has_pet() && !model.has_ct()) {
    throw ValidationError("input_gradient_saliency: model has no image branch");
  }
  const Model::InputGradients g = model.input_gradients(item);
  const std::string kind = to_string(model.kind());
  std::vector<std::pair<Modality, SaliencyVolume>> out;
  if (model.has_pet()) {
    out.emplace_back(Modality::PET,
                     normalize_gradient(g.pet, model.volume_shape(), kind, item.id));
  }
  if (model.has_ct()) {
    out.emplace_back(Modality::CT,
                     normalize_gradient(g.ct, model.volume_shape(), kind, item.id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// overlays
// ---------------------------------------------------------------------------

namespace {

// hot colormap: black -> red -> yellow -> white
std::array<uint8_t, 3> heat_color(float s) {
  const float r = std::clamp(3.0f * s, 0.0f, 1.0f);
  const float g = std::clamp(3.0f * s - 1.0f, 0.0f, 1.0f);
  const float b = std::clamp(3.0f * s - 2.0f, 0.0f, 1.0f);
  return {static_cast<uint8_t>(255.0f * r), static_cast<uint8_t>(255.0f * g),
          static_cast<uint8_t>(255.0f * b)};
}

OverlayImage render_plane(const SaliencyVolume& s, const Volume& base, float v_min,
                          int plane) {
  const int D = s.shape[0], H = s.shape[1], W = s.shape[2];
  // plane 0: axial (H x W at z=D/2), 1: coronal (D x W at y=H/2),
  // 2: sagittal (D x H at x=W/2)
  int rows = 0, cols = 0;
  if (plane == 0) { rows = H; cols = W; }
  if (plane == 1) { rows = D; cols = W; }
  if (plane == 2) { rows = D; cols = H; }

  float lo = base.voxels[0], hi = base.voxels[0];
  for (const float v : base.voxels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float span = hi > lo ? hi - lo : 1.0f;

  const auto fetch = [&](int r, int c, const std::vector<float>& vox) {
    int z = 0, y = 0, x = 0;
    if (plane == 0) { z = D / 2; y = r; x = c; }
    if (plane == 1) { z = r; y = H / 2; x = c; }
    if (plane == 2) { z = r; y = c; x = W / 2; }
    return vox[(static_cast<int64_t>(z) * H + y) * W + x];
  };

  OverlayImage img;
  img.width = cols;
  img.height = rows;
  img.rgb.resize(static_cast<size_t>(rows) * cols * 3);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const float gray = (fetch(r, c, base.voxels) - lo) / span;
      const float sv = fetch(r, c, s.values);
      uint8_t* px = &img.rgb[(static_cast<size_t>(r) * cols + c) * 3];
      const uint8_t g8 = static_cast<uint8_t>(255.0f * std::clamp(gray, 0.0f, 1.0f));
      if (sv < v_min) {
        px[0] = px[1] = px[2] = g8;  // transparent: base slice shows through
      } else {
        const auto heat = heat_color(sv);
        const float alpha = std::clamp(sv, 0.0f, 1.0f);
        for (int ch = 0; ch < 3; ++ch) {
          px[ch] = static_cast<uint8_t>((1.0f - alpha) * g8 + alpha * heat[static_cast<size_t>(ch)]);
        }
      }
    }
  }
  return img;
}

}  // namespace

std::array<OverlayImage, 3> render_slices(const SaliencyVolume& s, const Volume& base,
                                          float v_min) {
  if (s.shape != base.shape) {
    throw ValidationError("render_slices: saliency and base volume shapes differ");
  }
  return {render_plane(s, base, v_min, 0), render_plane(s, base, v_min, 1),
          render_plane(s, base, v_min, 2)};
}

void write_ppm(const OverlayImage& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("short write on image: " + path);
}

// ---------------------------------------------------------------------------
// histograms and distances
// ---------------------------------------------------------------------------

namespace {

GradientHistogram empty_histogram() {
  GradientHistogram h;
  for (int i = 0; i <= 50; ++i) {
    h.bin_edges[static_cast<size_t>(i)] = static_cast<double>(i) / 50.0;
  }
  return h;
}

void add_sample(GradientHistogram& h, float v) {
  int bin = static_cast<int>(static_cast<double>(v) * 50.0);
  bin = std::clamp(bin, 0, 49);  // v == 1 lands in the top bin
  ++h.counts[static_cast<size_t>(bin)];
  ++h.total;
}

std::array<double, 50> normalized(const GradientHistogram& h) {
  std::array<double, 50> p{};
  for (int i = 0; i < 50; ++i) {
    p[static_cast<size_t>(i)] =
        static_cast<double>(h.counts[static_cast<size_t>(i)]) / static_cast<double>(h.total);
  }
  return p;
}

// Asymptotic two-sample Kolmogorov p, with the standard small-sample
// adjustment of the effective size.
double ks_p_value(double d, int64_t n1, int64_t n2) {
  if (d <= 0.0) return 1.0;
  const double ne = static_cast<double>(n1) * n2 / static_cast<double>(n1 + n2);
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = 2.0 * std::pow(-1.0, j - 1) * std::exp(-2.0 * j * j * lambda * lambda);
    sum += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

}  // namespace

GradientHistogram histogram_from_samples(const std::vector<float>& samples) {
  if (samples.empty()) throw ValidationError("histogram_from_samples: empty input");
  GradientHistogram h = empty_histogram();
  for (const float v : samples) add_sample(h, v);
  return h;
}

GradientHistogram gradient_distribution(const std::vector<SaliencyVolume>& saliencies) {
  if (saliencies.empty()) throw ValidationError("gradient_distribution: empty list");
  GradientHistogram h = empty_histogram();
  for (const auto& s : saliencies) {
    for (const float v : s.values) add_sample(h, v);
  }
  return h;
}

DistanceReport distribution_distances(const GradientHistogram& pa, const GradientHistogram& qb,
                                      const std::vector<float>& a, const std::vector<float>& b) {
  if (a.empty() || b.empty()) throw ValidationError("distribution_distances: empty samples");
  if (pa.bin_edges != qb.bin_edges) {
    throw ValidationError("distribution_distances: histogram bin edges differ");
  }

  DistanceReport r;

  // --- sample metrics ---
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const int64_t n1 = static_cast<int64_t>(sa.size());
  const int64_t n2 = static_cast<int64_t>(sb.size());

  // Wasserstein-1 = integral |Fa - Fb| over the merged support.
  {
    double w = 0.0;
    size_t ia = 0, ib = 0;
    double prev = std::min(sa[0], sb[0]);
    while (ia < sa.size() || ib < sb.size()) {
      const double cur = (ia < sa.size() && (ib >= sb.size() || sa[ia] <= sb[ib])) ? sa[ia]
                                                                                   : sb[ib];
      const double fa = static_cast<double>(ia) / static_cast<double>(n1);
      const double fb = static_cast<double>(ib) / static_cast<double>(n2);
      w += std::abs(fa - fb) * (cur - prev);
      prev = cur;
      while (ia < sa.size() && sa[ia] == cur) ++ia;
      while (ib < sb.size() && sb[ib] == cur) ++ib;
    }
    r.wasserstein = w;
  }

  // Kolmogorov-Smirnov statistic: sup |Fa - Fb|.
  {
    double d = 0.0;
    size_t ia = 0, ib = 0;
    while (ia < sa.size() || ib < sb.size()) {
      const double cur = (ia < sa.size() && (ib >= sb.size() || sa[ia] <= sb[ib])) ? sa[ia]
                                                                                   : sb[ib];
      while (ia < sa.size() && sa[ia] == cur) ++ia;
      while (ib < sb.size() && sb[ib] == cur) ++ib;
      const double fa = static_cast<double>(ia) / static_cast<double>(n1);
      const double fb = static_cast<double>(ib) / static_cast<double>(n2);
      d = std::max(d, std::abs(fa - fb));
    }
    r.ks_statistic = d;
    r.ks_p = ks_p_value(d, n1, n2);
  }

  // Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| from sorted prefix sums.
  {
    const auto mean_abs_within = [](const std::vector<double>& s) {
      // sum over ordered pairs |s_i - s_j| / n^2 via sorted prefix formula
      const int64_t n = static_cast<int64_t>(s.size());
      double acc = 0.0, prefix = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        acc += s[static_cast<size_t>(i)] * static_cast<double>(i) - prefix;
        prefix += s[static_cast<size_t>(i)];
      }
      return 2.0 * acc / (static_cast<double>(n) * static_cast<double>(n));
    };
    const auto mean_abs_between = [&](const std::vector<double>& x, const std::vector<double>& y) {
      // sum |x_i - y_j| by merging: for each x_i, split y by position
      double acc = 0.0;
      double prefix = 0.0;  // sum of y below current x
      size_t j = 0;
      const double total_y = std::accumulate(y.begin(), y.end(), 0.0);
      for (const double xi : x) {
        while (j < y.size() && y[j] <= xi) {
          prefix += y[j];
          ++j;
        }
        acc += xi * static_cast<double>(j) - prefix + (total_y - prefix) -
               xi * static_cast<double>(y.size() - j);
      }
      return acc / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
    };
    r.energy = 2.0 * mean_abs_between(sa, sb) - mean_abs_within(sa) - mean_abs_within(sb);
  }

  // --- histogram metrics ---
  const auto p = normalized(pa);
  const auto q = normalized(qb);
  double jsd = 0.0, bc = 0.0, overlap = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double pi = p[static_cast<size_t>(i)], qi = q[static_cast<size_t>(i)];
    const double mi = 0.5 * (pi + qi);
    if (pi > 0.0) jsd += 0.5 * pi * std::log2(pi / mi);
    if (qi > 0.0) jsd += 0.5 * qi * std::log2(qi / mi);
    bc += std::sqrt(pi * qi);
    overlap += std::min(pi, qi);
  }
  r.jensen_shannon = std::clamp(jsd, 0.0, 1.0);
  r.bhattacharyya = bc > 0.0 ? -std::log(bc) : std::numeric_limits<double>::infinity();
  r.histogram_overlap = overlap;
  return r;
}

DistanceReport distribution_distances(const std::vector<float>& a, const std::vector<float>& b) {
  return distribution_distances(histogram_from_samples(a), histogram_from_samples(b), a, b);
}

std::string distance_report_to_json(const DistanceReport& r) {
  nlohmann::json j = {{"wasserstein", r.wasserstein},
                      {"ks_statistic", r.ks_statistic},
                      {"ks_p", r.ks_p},
                      {"jensen_shannon", r.jensen_shannon},
                      {"energy", r.energy},
                      {"bhattacharyya", r.bhattacharyya},
                      {"histogram_overlap", r.histogram_overlap}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// laboratory importance
// ---------------------------------------------------------------------------

std::array<double, 4> lab_gradient_importance(const Model& model,
                                              const std::vector<const ModelInput*>& eval_set) {
  if (!model.has_labs() || model.is_forest()) {
    throw ValidationError("lab_gradient_importance requires a neural model with a lab branch");
  }
  if (eval_set.empty()) throw ValidationError("lab_gradient_importance: empty evaluation set");
  std::array<double, 4> acc{};
  for (const ModelInput* item : eval_set) {
    const auto g = model.input_gradients(*item);
    for (int j = 0; j < 4; ++j) {
      acc[static_cast<size_t>(j)] += std::abs(static_cast<double>(g.labs[static_cast<size_t>(j)]));
    }
  }
  for (double& v : acc) v /= static_cast<double>(eval_set.size());
  return acc;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

PcaResult pca_projection(const Matrix& embeddings) {
  const int n = embeddings.rows, d = embeddings.cols;
  if (n < 3 || d < 2) throw ValidationError("pca_projection: need n >= 3 and d >= 2");

  // center columns
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += embeddings.at(i, j);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  Matrix x(n, d);
  double total_var = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      x.at(i, j) = embeddings.at(i, j) - mean[static_cast<size_t>(j)];
      total_var += x.at(i, j) * x.at(i, j);
    }
  }
  total_var /= static_cast<double>(n - 1);
  if (total_var <= 0.0) throw ValidationError("pca_projection: rank-0 data");

  // covariance matvec without materializing the d x d matrix
  const auto cov_mul = [&](const std::vector<double>& v) {
    std::vector<double> xv(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += x.at(i, j) * v[static_cast<size_t>(j)];
      xv[static_cast<size_t>(i)] = acc;
    }
    std::vector<double> out(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += x.at(i, j) * xv[static_cast<size_t>(i)];
    }
    for (double& o : out) o /= static_cast<double>(n - 1);
    return out;
  };

  std::array<std::vector<double>, 2> components;
  std::array<double, 2> eigenvalues{};
  Rng rng(0x9e3779b9u);
  for (int comp = 0; comp < 2; ++comp) {
    std::vector<double> v(static_cast<size_t>(d));
    for (double& vi : v) vi = rng.normal();
    double lambda = 0.0;
    for (int it = 0; it < 5000; ++it) {
      // deflate previously found component
      for (int prev = 0; prev < comp; ++prev) {
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += v[static_cast<size_t>(j)] * components[static_cast<size_t>(prev)][static_cast<size_t>(j)];
        for (int j = 0; j < d; ++j) v[static_cast<size_t>(j)] -= dot * components[static_cast<size_t>(prev)][static_cast<size_t>(j)];
      }
      double norm = 0.0;
      for (const double vi : v) norm += vi * vi;
      norm = std::sqrt(norm);
      if (norm < 1e-300) break;
      for (double& vi : v) vi /= norm;

      std::vector<double> w = cov_mul(v);
      lambda = 0.0;
      for (int j = 0; j < d; ++j) lambda += v[static_cast<size_t>(j)] * w[static_cast<size_t>(j)];

      // residual ||Cv - lambda v||
      double res = 0.0;
      for (int j = 0; j < d; ++j) {
        const double rj = w[static_cast<size_t>(j)] - lambda * v[static_cast<size_t>(j)];
        res += rj * rj;
      }
      v = std::move(w);
      if (std::sqrt(res) <= 1e-9 * std::max(1.0, std::abs(lambda))) break;
    }
    double norm = 0.0;
    for (const double vi : v) norm += vi * vi;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& vi : v) vi /= norm;
    }
    // sign convention: largest-magnitude loading positive
    int arg = 0;
    for (int j = 1; j < d; ++j) {
      if (std::abs(v[static_cast<size_t>(j)]) > std::abs(v[static_cast<size_t>(arg)])) arg = j;
    }
    if (v[static_cast<size_t>(arg)] < 0.0) {
      for (double& vi : v) vi = -vi;
    }
    components[static_cast<size_t>(comp)] = v;
    eigenvalues[static_cast<size_t>(comp)] = std::max(lambda, 0.0);
  }

  PcaResult out;
  out.coords = Matrix(n, 2);
  for (int i = 0; i < n; ++i) {
    for (int comp = 0; comp < 2; ++comp) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        acc += x.at(i, j) * components[static_cast<size_t>(comp)][static_cast<size_t>(j)];
      }
      out.coords.at(i, comp) = acc;
    }
  }
  out.eigenvalues = eigenvalues;
  out.explained_ratio = {eigenvalues[0] / total_var, eigenvalues[1] / total_var};
  return out;
}

}  // namespace petfuse::explain
