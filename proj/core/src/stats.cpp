#include "petfuse/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace petfuse::stats {

namespace {

// Midranks of the pooled values (1-based; tied values share the average rank).
std::vector<double> midranks(const std::vector<double>& pooled) {
  const size_t n = pooled.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && pooled[idx[j + 1]] == pooled[idx[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double log_choose(int64_t n, int64_t k) {
  return std::lgamma(static_cast<double>(n + 1)) - std::lgamma(static_cast<double>(k + 1)) -
         std::lgamma(static_cast<double>(n - k + 1));
}

// Regularized lower incomplete gamma P(a, x) by series expansion (x < a+1).
double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < 1000; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-14) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by modified Lentz continued
// fraction (x >= a+1).
double gamma_q_cf(double a, double x) {
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 1000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-14) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

std::string to_string(EffectBand b) {
  switch (b) {
    case EffectBand::kNegligible: return "negligible";
    case EffectBand::kSmall: return "small";
    case EffectBand::kMedium: return "medium";
    case EffectBand::kLarge: return "large";
  }
  return "negligible";
}

EffectBand classify_effect(double delta) {
  const double d = std::abs(delta);
  if (d < 0.147) return EffectBand::kNegligible;
  if (d < 0.33) return EffectBand::kSmall;
  if (d < 0.474) return EffectBand::kMedium;
  return EffectBand::kLarge;
}

double auroc(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size() || s.scores.empty()) {
    throw ValidationError("auroc: scores and labels must be non-empty and equal length");
  }
  int64_t n_pos = 0;
  for (const int y : s.labels) {
    if (y != 0 && y != 1) throw ValidationError("auroc: labels must be 0 or 1");
    n_pos += y;
  }
  const int64_t n_neg = static_cast<int64_t>(s.labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ValidationError("auroc undefined: both classes must be present");
  }
  const std::vector<double> ranks = midranks(s.scores);
  double rank_sum_pos = 0.0;
  for (size_t i = 0; i < s.labels.size(); ++i) {
    if (s.labels[i] == 1) rank_sum_pos += ranks[i];
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auprc(const ScoredSet& s) {
  if (s.scores.size() != s.labels.size() || s.scores.empty()) {
    throw ValidationError("auprc: scores and labels must be non-empty and equal length");
  }
  int64_t total_pos = 0;
  for (const int y : s.labels) total_pos += y;
  if (total_pos == 0) throw ValidationError("auprc undefined: no positive labels");

  std::vector<size_t> idx(s.scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return s.scores[a] > s.scores[b]; });

  double ap = 0.0;
  double recall_prev = 0.0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;  // tied scores form a single block
    while (j + 1 < idx.size() && s.scores[idx[j + 1]] == s.scores[idx[i]]) ++j;
    for (size_t k = i; k <= j; ++k) {
      if (s.labels[idx[k]] == 1) ++tp; else ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j + 1;
  }
  return ap;
}

double accuracy(const ScoredSet& s, double threshold) {
  if (s.scores.size() != s.labels.size() || s.scores.empty()) {
    throw ValidationError("accuracy: scores and labels must be non-empty and equal length");
  }
  int64_t correct = 0;
  for (size_t i = 0; i < s.scores.size(); ++i) {
    const int pred = s.scores[i] >= threshold ? 1 : 0;
    if (pred == s.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(s.scores.size());
}

double mann_whitney_exact_two_sided_p(int n1, int n2, double u_observed) {
  // count[i][j][u] = number of rank arrangements of i A's and j B's with
  // U(A) = u. Peeling off the largest value gives the recurrence
  //   count(i, j, u) = count(i-1, j, u-j) + count(i, j-1, u).
  std::vector<std::vector<std::vector<double>>> count(
      static_cast<size_t>(n1 + 1),
      std::vector<std::vector<double>>(static_cast<size_t>(n2 + 1)));
  for (int i = 0; i <= n1; ++i) {
    for (int j = 0; j <= n2; ++j) {
      auto& v = count[static_cast<size_t>(i)][static_cast<size_t>(j)];
      v.assign(static_cast<size_t>(i * j + 1), 0.0);
      if (i == 0 || j == 0) {
        v[0] = 1.0;
        continue;
      }
      for (int u = 0; u <= i * j; ++u) {
        double s = 0.0;
        if (u - j >= 0) s += count[static_cast<size_t>(i - 1)][static_cast<size_t>(j)][static_cast<size_t>(u - j)];
        if (u <= i * (j - 1)) s += count[static_cast<size_t>(i)][static_cast<size_t>(j - 1)][static_cast<size_t>(u)];
        v[static_cast<size_t>(u)] = s;
      }
    }
  }
  const auto& dist = count[static_cast<size_t>(n1)][static_cast<size_t>(n2)];
  const int umax = n1 * n2;
  const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
  const int u = static_cast<int>(std::llround(u_observed));
  double cdf_le = 0.0;
  for (int k = 0; k <= std::min(u, umax); ++k) cdf_le += dist[static_cast<size_t>(k)];
  double cdf_ge = 0.0;
  for (int k = std::max(u, 0); k <= umax; ++k) cdf_ge += dist[static_cast<size_t>(k)];
  const double p = 2.0 * std::min(cdf_le, cdf_ge) / total;
  return std::min(1.0, p);
}

TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw ValidationError("mann_whitney_u: empty sample");
  const int n1 = static_cast<int>(a.size());
  const int n2 = static_cast<int>(b.size());
  std::vector<double> pooled;
  pooled.reserve(a.size() + b.size());
  pooled.insert(pooled.end(), a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());

  const std::vector<double> ranks = midranks(pooled);
  double rank_sum_a = 0.0;
  for (int i = 0; i < n1; ++i) rank_sum_a += ranks[static_cast<size_t>(i)];
  const double u = rank_sum_a - 0.5 * n1 * (n1 + 1.0);

  // tie census over the pooled sample
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_sum = 0.0;  // sum of t^3 - t over tie groups
  bool has_ties = false;
  for (size_t i = 0; i < sorted.size();) {
    size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    if (t > 1.0) {
      has_ties = true;
      tie_sum += t * t * t - t;
    }
    i = j + 1;
  }

  TestResult r;
  r.method = "mann-whitney-u";
  r.statistic = u;
  if (n1 + n2 <= 16 && !has_ties) {
    r.p_raw = mann_whitney_exact_two_sided_p(n1, n2, u);
    return r;
  }
  const double n = static_cast<double>(n1 + n2);
  const double mu = 0.5 * n1 * n2;
  const double tie_corr = n > 1.0 ? tie_sum / (n * (n - 1.0)) : 0.0;
  const double var = (static_cast<double>(n1) * n2 / 12.0) * ((n + 1.0) - tie_corr);
  if (var <= 0.0) {
    r.p_raw = 1.0;
    return r;
  }
  const double z = std::max(std::abs(u - mu) - 0.5, 0.0) / std::sqrt(var);
  r.p_raw = std::min(1.0, 2.0 * normal_sf(z));
  return r;
}

std::vector<double> bonferroni(const std::vector<double>& p_values, int m) {
  if (m < 1) throw ValidationError("bonferroni: m must be >= 1");
  std::vector<double> out(p_values.size());
  for (size_t i = 0; i < p_values.size(); ++i) {
    out[i] = std::min(1.0, p_values[i] * static_cast<double>(m));
  }
  return out;
}

TestResult cliffs_delta(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw ValidationError("cliffs_delta: empty sample");
  std::vector<double> sorted_b = b;
  std::sort(sorted_b.begin(), sorted_b.end());
  int64_t net = 0;
  for (const double x : a) {
    const auto lo = std::lower_bound(sorted_b.begin(), sorted_b.end(), x);
    const auto hi = std::upper_bound(sorted_b.begin(), sorted_b.end(), x);
    const int64_t less = lo - sorted_b.begin();                   // b_j < x
    const int64_t greater = sorted_b.end() - hi;                  // b_j > x
    net += less - greater;
  }
  const double delta =
      static_cast<double>(net) / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
  TestResult r;
  r.method = "cliffs-delta";
  r.statistic = delta;
  r.effect_size = delta;
  r.effect_band = classify_effect(delta);
  return r;
}

TestResult fisher_exact_2x2(const std::array<std::array<int64_t, 2>, 2>& table) {
  const int64_t a = table[0][0], b = table[0][1], c = table[1][0], d = table[1][1];
  if (a < 0 || b < 0 || c < 0 || d < 0) {
    throw ValidationError("fisher_exact_2x2: cells must be non-negative");
  }
  const int64_t r1 = a + b, r2 = c + d, c1 = a + c, c2 = b + d;
  const int64_t n = r1 + r2;

  TestResult r;
  r.method = "fisher-exact";
  if (b * c > 0) {
    r.statistic = (static_cast<double>(a) * d) / (static_cast<double>(b) * c);
  } else if (a * d > 0) {
    r.statistic = std::numeric_limits<double>::infinity();
  } else {
    r.statistic = std::numeric_limits<double>::quiet_NaN();
  }
  if (r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0) {
    r.p_raw = 1.0;  // degenerate table
    return r;
  }

  const double log_denominator = log_choose(n, c1);
  const auto log_prob = [&](int64_t k) {
    return log_choose(r1, k) + log_choose(r2, c1 - k) - log_denominator;
  };
  const double lp_obs = log_prob(a);
  const int64_t k_lo = std::max<int64_t>(0, c1 - r2);
  const int64_t k_hi = std::min(r1, c1);
  double p = 0.0;
  for (int64_t k = k_lo; k <= k_hi; ++k) {
    const double lp = log_prob(k);
    if (lp <= lp_obs + std::log1p(1e-7)) p += std::exp(lp);
  }
  r.p_raw = std::min(1.0, p);
  return r;
}

SurvivalCurve kaplan_meier(const std::vector<double>& times) {
  if (times.empty()) throw ValidationError("kaplan_meier: empty input");
  for (const double t : times) {
    if (!(t > 0.0)) throw ValidationError("kaplan_meier: times must be positive");
  }
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());

  SurvivalCurve c;
  double s = 1.0;
  int64_t at_risk = static_cast<int64_t>(sorted.size());
  size_t i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const int64_t deaths = static_cast<int64_t>(j - i + 1);
    s *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
    c.event_times.push_back(sorted[i]);
    c.survival.push_back(s);
    c.at_risk.push_back(static_cast<int>(at_risk));
    at_risk -= deaths;
    i = j + 1;
  }
  return c;
}

double km_median(const SurvivalCurve& c) {
  for (size_t i = 0; i < c.event_times.size(); ++i) {
    if (c.survival[i] <= 0.5) return c.event_times[i];
  }
  return c.event_times.empty() ? 0.0 : c.event_times.back();
}

TestResult logrank_test(const std::vector<double>& group_a, const std::vector<double>& group_b) {
  if (group_a.empty() || group_b.empty()) throw ValidationError("logrank_test: empty group");
  std::vector<double> a = group_a, b = group_b;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());

  double observed_a = 0.0, expected_a = 0.0, variance = 0.0;
  size_t ia = 0, ib = 0;
  while (ia < a.size() || ib < b.size()) {
    const double t = (ia < a.size() && (ib >= b.size() || a[ia] <= b[ib])) ? a[ia]
                     : b[ib];
    int64_t da = 0, db = 0;
    while (ia < a.size() && a[ia] == t) { ++da; ++ia; }
    while (ib < b.size() && b[ib] == t) { ++db; ++ib; }
    const double na = static_cast<double>(a.size() - ia) + da;  // at risk at t-
    const double nb = static_cast<double>(b.size() - ib) + db;
    const double nn = na + nb;
    const double dd = static_cast<double>(da + db);
    observed_a += da;
    expected_a += dd * na / nn;
    if (nn > 1.0) {
      variance += dd * (na / nn) * (1.0 - na / nn) * (nn - dd) / (nn - 1.0);
    }
  }

  TestResult r;
  r.method = "logrank";
  if (variance <= 0.0) {
    r.statistic = 0.0;
    r.p_raw = 1.0;
    return r;
  }
  const double diff = observed_a - expected_a;
  r.statistic = diff * diff / variance;
  r.p_raw = chi_square_sf(r.statistic, 1);
  return r;
}

CvSummary summarize_cv(const std::vector<double>& fold_values) {
  if (fold_values.size() != 15) {
    throw ValidationError("summarize_cv expects exactly 5 repetitions x 3 folds = 15 values");
  }
  CvSummary s;
  for (int rep = 0; rep < 5; ++rep) {
    double m = 0.0;
    for (int f = 0; f < 3; ++f) m += fold_values[static_cast<size_t>(rep * 3 + f)];
    s.repetition_means[static_cast<size_t>(rep)] = m / 3.0;
  }
  double grand = 0.0;
  for (const double m : s.repetition_means) grand += m;
  s.mean = grand / 5.0;

  double ss = 0.0;
  for (const double m : s.repetition_means) ss += (m - s.mean) * (m - s.mean);
  s.std_error = std::sqrt(ss / 4.0) / std::sqrt(5.0);

  double fold_mean = 0.0;
  for (const double v : fold_values) fold_mean += v;
  fold_mean /= 15.0;
  double fss = 0.0;
  for (const double v : fold_values) fss += (v - fold_mean) * (v - fold_mean);
  s.std_error_folds = std::sqrt(fss / 14.0) / std::sqrt(15.0);
  return s;
}

double chi_square_sf(double x, int dof) {
  if (dof < 1) throw ValidationError("chi_square_sf: dof must be >= 1");
  if (x <= 0.0) return 1.0;
  const double a = 0.5 * static_cast<double>(dof);
  const double xx = 0.5 * x;
  if (xx < a + 1.0) {
    return 1.0 - gamma_p_series(a, xx);
  }
  return gamma_q_cf(a, xx);
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace petfuse::stats
