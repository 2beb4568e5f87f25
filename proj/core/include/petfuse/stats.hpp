// Metrics and hypothesis tests: AUROC, AUPRC, accuracy, Mann-Whitney U,
// Bonferroni, Cliff's delta, Fisher's exact test, Kaplan-Meier, the two-group
// log-rank test, and cross-validation aggregation.
//
// All functions are pure. Rank metrics require both classes present; survival
// functions assume fully observed events (no censoring in this cohort).
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "petfuse/common.hpp"

namespace petfuse::stats {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 0/1, same length as scores; 1 = long PFS
};

enum class EffectBand { kNegligible, kSmall, kMedium, kLarge };

std::string to_string(EffectBand b);

// |delta| thresholds 0.147 / 0.33 / 0.474 separate the bands.
EffectBand classify_effect(double delta);

struct TestResult {
  std::string method;
  double statistic = 0.0;
  double p_raw = 1.0;
  std::optional<double> p_adjusted;
  std::optional<double> effect_size;   // in [-1, 1]
  std::optional<EffectBand> effect_band;
};

// Probability that a random positive is scored above a random negative,
// ties counted half; computed from midranks.
double auroc(const ScoredSet& s);

// Average precision: sum over descending score blocks of (R_k - R_{k-1})*P_k.
double auprc(const ScoredSet& s);

double accuracy(const ScoredSet& s, double threshold = 0.5);

// Two-sided Mann-Whitney U. Exact p by full enumeration when n1+n2 <= 16 and
// the pooled sample is tie-free, otherwise normal approximation with
// tie-corrected variance and continuity correction. statistic = U of `a`.
TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);

// p*m clamped to 1. `m` is the number of comparisons in the family.
std::vector<double> bonferroni(const std::vector<double>& p_values, int m);

// delta = (#{a_i > b_j} - #{a_i < b_j}) / (n1*n2), with interpretation band.
TestResult cliffs_delta(const std::vector<double>& a, const std::vector<double>& b);

// Two-sided Fisher's exact test on [[a,b],[c,d]]: sums hypergeometric
// probabilities of all tables with the same margins that are at most as
// probable as the observed one (1e-7 relative slack). A zero margin is a
// degenerate table and yields p = 1. statistic = sample odds ratio.
TestResult fisher_exact_2x2(const std::array<std::array<int64_t, 2>, 2>& table);

struct SurvivalCurve {
  std::vector<double> event_times;  // sorted distinct
  std::vector<double> survival;     // S(t) after each event time, non-increasing
  std::vector<int> at_risk;         // subjects at risk just before each time
};

// Product-limit estimator with every event observed: S(t) is the fraction
// with time > t.
SurvivalCurve kaplan_meier(const std::vector<double>& times);

// Smallest event time with S(t) <= 0.5.
double km_median(const SurvivalCurve& c);

// Two-group log-rank test, all events observed; statistic is chi-square with
// one degree of freedom.
TestResult logrank_test(const std::vector<double>& group_a, const std::vector<double>& group_b);

struct CvSummary {
  std::array<double, 5> repetition_means{};
  double mean = 0.0;
  double std_error = 0.0;       // over the 5 repetition means (ddof=1), / sqrt(5)
  double std_error_folds = 0.0; // over all 15 fold values, for transparency
};

// fold_values must hold exactly 15 entries, repetition-major
// (rep0 fold0, rep0 fold1, rep0 fold2, rep1 fold0, ...).
CvSummary summarize_cv(const std::vector<double>& fold_values);

// Upper tail of the chi-square distribution via the regularized incomplete
// gamma function (series + continued fraction, ~1e-10 relative).
double chi_square_sf(double x, int dof);

// Upper tail of the standard normal.
double normal_sf(double z);

// Exact two-sided Mann-Whitney p for an observed U via the counting
// recurrence; exposed for reuse by the exact path and its tests.
double mann_whitney_exact_two_sided_p(int n1, int n2, double u_observed);

}  // namespace petfuse::stats
