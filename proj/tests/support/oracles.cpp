#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "petfuse/rng.hpp"

namespace petfuse::test {

std::vector<double> conv3d_direct(const std::vector<double>& x, int n, int c, int d, int h, int w,
                                  const std::vector<double>& kernel, int f,
                                  const std::vector<double>& bias) {
  std::vector<double> out(static_cast<size_t>(n) * f * d * h * w, 0.0);
  const auto xi = [&](int nn, int cc, int zz, int yy, int xx) -> double {
    if (zz < 0 || zz >= d || yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return x[(((static_cast<size_t>(nn) * c + cc) * d + zz) * h + yy) * w + xx];
  };
  for (int nn = 0; nn < n; ++nn)
    for (int ff = 0; ff < f; ++ff)
      for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double acc = bias[static_cast<size_t>(ff)];
            for (int cc = 0; cc < c; ++cc)
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    acc += xi(nn, cc, z + kz - 1, y + ky - 1, xx + kx - 1) *
                           kernel[(((static_cast<size_t>(ff) * c + cc) * 3 + kz) * 3 + ky) * 3 + kx];
                  }
            out[(((static_cast<size_t>(nn) * f + ff) * d + z) * h + y) * w + xx] = acc;
          }
  return out;
}

std::vector<double> maxpool3d_direct(const std::vector<double>& x, int n, int c, int d, int h,
                                     int w) {
  const int dd = (d + 1) / 2, hh = (h + 1) / 2, ww = (w + 1) / 2;
  std::vector<double> out(static_cast<size_t>(n) * c * dd * hh * ww);
  size_t o = 0;
  for (int nn = 0; nn < n; ++nn)
    for (int cc = 0; cc < c; ++cc)
      for (int z = 0; z < dd; ++z)
        for (int y = 0; y < hh; ++y)
          for (int xx = 0; xx < ww; ++xx) {
            double best = -std::numeric_limits<double>::infinity();
            for (int kz = 0; kz < 2; ++kz)
              for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) {
                  const int z2 = 2 * z + kz, y2 = 2 * y + ky, x2 = 2 * xx + kx;
                  if (z2 >= d || y2 >= h || x2 >= w) continue;
                  best = std::max(
                      best,
                      x[(((static_cast<size_t>(nn) * c + cc) * d + z2) * h + y2) * w + x2]);
                }
            out[o++] = best;
          }
  return out;
}

std::vector<double> linear_direct(const std::vector<double>& x, int n, int k,
                                  const std::vector<double>& weight, int m,
                                  const std::vector<double>& bias) {
  std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = bias[static_cast<size_t>(j)];
      for (int kk = 0; kk < k; ++kk) {
        acc += x[static_cast<size_t>(i) * k + kk] * weight[static_cast<size_t>(j) * k + kk];
      }
      out[static_cast<size_t>(i) * m + j] = acc;
    }
  return out;
}

std::vector<double> relu_direct(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

double bce_direct(const std::vector<double>& logits, const std::vector<double>& labels) {
  double acc = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double sigma = 1.0 / (1.0 + std::exp(-logits[i]));
    acc += -(labels[i] * std::log(sigma) + (1.0 - labels[i]) * std::log(1.0 - sigma));
  }
  return acc / static_cast<double>(logits.size());
}

double mse_direct(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  double num = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

double auprc_sweep(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  int64_t total_pos = 0;
  for (const int y : labels) total_pos += y;
  double ap = 0.0, prev_recall = 0.0;
  for (const double thr : thresholds) {
    int64_t tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= thr) {
        if (labels[i] == 1) ++tp; else ++fp;
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

namespace {

double u_of_subset(const std::vector<double>& pooled, const std::vector<int>& group_a_idx) {
  // U = #{(a, b) : a > b} with a from group A and b from group B
  std::vector<bool> in_a(pooled.size(), false);
  for (const int i : group_a_idx) in_a[static_cast<size_t>(i)] = true;
  double u = 0.0;
  for (size_t i = 0; i < pooled.size(); ++i) {
    if (!in_a[i]) continue;
    for (size_t j = 0; j < pooled.size(); ++j) {
      if (in_a[j]) continue;
      if (pooled[i] > pooled[j]) u += 1.0;
      else if (pooled[i] == pooled[j]) u += 0.5;
    }
  }
  return u;
}

}  // namespace

double mann_whitney_enumerate(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const int n = static_cast<int>(pooled.size());
  const int n1 = static_cast<int>(a.size());

  std::vector<int> obs_idx(static_cast<size_t>(n1));
  std::iota(obs_idx.begin(), obs_idx.end(), 0);
  const double u_obs = u_of_subset(pooled, obs_idx);
  const double mu = 0.5 * n1 * (n - n1);
  const double dev_obs = std::abs(u_obs - mu);

  // iterate all C(n, n1) subsets as sorted index combinations
  std::vector<int> comb(static_cast<size_t>(n1));
  std::iota(comb.begin(), comb.end(), 0);
  int64_t total = 0, extreme = 0;
  for (;;) {
    ++total;
    if (std::abs(u_of_subset(pooled, comb) - mu) >= dev_obs - 1e-12) ++extreme;
    int i = n1 - 1;
    while (i >= 0 && comb[static_cast<size_t>(i)] == n - n1 + i) --i;
    if (i < 0) break;
    ++comb[static_cast<size_t>(i)];
    for (int j = i + 1; j < n1; ++j) comb[static_cast<size_t>(j)] = comb[static_cast<size_t>(j - 1)] + 1;
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

double mann_whitney_permutation(const std::vector<double>& a, const std::vector<double>& b,
                                int n_permutations, uint64_t seed) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const int n1 = static_cast<int>(a.size());
  std::vector<int> idx(pooled.size());
  std::iota(idx.begin(), idx.end(), 0);

  std::vector<int> obs(idx.begin(), idx.begin() + n1);
  const double mu = 0.5 * n1 * static_cast<double>(b.size());
  const double dev_obs = std::abs(u_of_subset(pooled, obs) - mu);

  Rng rng(seed);
  int64_t extreme = 0;
  for (int p = 0; p < n_permutations; ++p) {
    rng.shuffle(idx);
    std::vector<int> grp(idx.begin(), idx.begin() + n1);
    if (std::abs(u_of_subset(pooled, grp) - mu) >= dev_obs - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(n_permutations);
}

double fisher_enumerate(int64_t a, int64_t b, int64_t c, int64_t d) {
  const int64_t r1 = a + b, r2 = c + d, c1 = a + c;
  const int64_t lo = std::max<int64_t>(0, c1 - r2), hi = std::min(r1, c1);
  // hypergeometric pmf over the support via the ratio recurrence
  std::vector<double> pmf;
  double p = 1.0;  // unnormalized start at k = lo
  pmf.push_back(p);
  for (int64_t k = lo + 1; k <= hi; ++k) {
    // P(k)/P(k-1) = ((r1-k+1)(c1-k+1)) / (k (r2-c1+k))
    p *= static_cast<double>(r1 - k + 1) * static_cast<double>(c1 - k + 1) /
         (static_cast<double>(k) * static_cast<double>(r2 - c1 + k));
    pmf.push_back(p);
  }
  const double total = std::accumulate(pmf.begin(), pmf.end(), 0.0);
  const double p_obs = pmf[static_cast<size_t>(a - lo)];
  double acc = 0.0;
  for (const double pk : pmf) {
    if (pk <= p_obs * (1.0 + 1e-7)) acc += pk;
  }
  return std::min(1.0, acc / total);
}

double cliffs_delta_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  int64_t net = 0;
  for (const double x : a) {
    for (const double y : b) {
      if (x > y) ++net;
      else if (x < y) --net;
    }
  }
  return static_cast<double>(net) / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

namespace {

double ks_stat(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double dmax = 0.0;
  size_t ia = 0, ib = 0;
  while (ia < sa.size() || ib < sb.size()) {
    const double cur = (ia < sa.size() && (ib >= sb.size() || sa[ia] <= sb[ib])) ? sa[ia] : sb[ib];
    while (ia < sa.size() && sa[ia] == cur) ++ia;
    while (ib < sb.size() && sb[ib] == cur) ++ib;
    dmax = std::max(dmax, std::abs(static_cast<double>(ia) / sa.size() -
                                   static_cast<double>(ib) / sb.size()));
  }
  return dmax;
}

}  // namespace

double ks_enumerate(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const int n = static_cast<int>(pooled.size());
  const int n1 = static_cast<int>(a.size());
  const double d_obs = ks_stat(a, b);

  std::vector<int> comb(static_cast<size_t>(n1));
  std::iota(comb.begin(), comb.end(), 0);
  int64_t total = 0, extreme = 0;
  for (;;) {
    ++total;
    std::vector<double> ga, gb;
    std::vector<bool> in_a(static_cast<size_t>(n), false);
    for (const int i : comb) in_a[static_cast<size_t>(i)] = true;
    for (int i = 0; i < n; ++i) {
      (in_a[static_cast<size_t>(i)] ? ga : gb).push_back(pooled[static_cast<size_t>(i)]);
    }
    if (ks_stat(ga, gb) >= d_obs - 1e-12) ++extreme;
    int i = n1 - 1;
    while (i >= 0 && comb[static_cast<size_t>(i)] == n - n1 + i) --i;
    if (i < 0) break;
    ++comb[static_cast<size_t>(i)];
    for (int j = i + 1; j < n1; ++j) comb[static_cast<size_t>(j)] = comb[static_cast<size_t>(j - 1)] + 1;
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

double energy_distance_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  const auto mean_abs = [](const std::vector<double>& x, const std::vector<double>& y) {
    double acc = 0.0;
    for (const double xi : x)
      for (const double yj : y) acc += std::abs(xi - yj);
    return acc / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
  };
  return 2.0 * mean_abs(a, b) - mean_abs(a, a) - mean_abs(b, b);
}

double silhouette2d(const std::vector<std::array<double, 2>>& points,
                    const std::vector<int>& labels) {
  const auto dist = [&](size_t i, size_t j) {
    const double dx = points[i][0] - points[j][0];
    const double dy = points[i][1] - points[j][1];
    return std::sqrt(dx * dx + dy * dy);
  };
  double acc = 0.0;
  for (size_t i = 0; i < points.size(); ++i) {
    double a_sum = 0.0, b_sum = 0.0;
    int64_t a_n = 0, b_n = 0;
    for (size_t j = 0; j < points.size(); ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        a_sum += dist(i, j);
        ++a_n;
      } else {
        b_sum += dist(i, j);
        ++b_n;
      }
    }
    const double a_mean = a_n > 0 ? a_sum / a_n : 0.0;
    const double b_mean = b_n > 0 ? b_sum / b_n : 0.0;
    const double denom = std::max(a_mean, b_mean);
    acc += denom > 0.0 ? (b_mean - a_mean) / denom : 0.0;
  }
  return acc / static_cast<double>(points.size());
}

}  // namespace petfuse::test
