// Independent double-precision reference implementations used to check the
// float32 production paths. These are deliberately written as direct
// definitional loops (no shared code with the library) so a bug cannot hide
// on both sides of a comparison.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace petfuse::test {

// Seven-nested-loop cross-correlation, kernel 3x3x3, stride 1, zero pad 1.
std::vector<double> conv3d_direct(const std::vector<double>& x, int n, int c, int d, int h, int w,
                                  const std::vector<double>& kernel, int f,
                                  const std::vector<double>& bias);

// Window-scan max pool, window 2, stride 2, ceil mode.
std::vector<double> maxpool3d_direct(const std::vector<double>& x, int n, int c, int d, int h,
                                     int w);

// Hand matrix multiply: out[n][m] = sum_k x[n][k] * w[m][k] + b[m].
std::vector<double> linear_direct(const std::vector<double>& x, int n, int k,
                                  const std::vector<double>& weight, int m,
                                  const std::vector<double>& bias);

std::vector<double> relu_direct(const std::vector<double>& x);

// -[y ln(sigma) + (1-y) ln(1-sigma)] averaged, evaluated in double.
double bce_direct(const std::vector<double>& logits, const std::vector<double>& labels);

double mse_direct(const std::vector<double>& a, const std::vector<double>& b);

// O(n^2) pair counting: (concordant + 0.5 ties) / (n1*n0).
double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels);

// Exhaustive threshold sweep average precision.
double auprc_sweep(const std::vector<double>& scores, const std::vector<int>& labels);

// Exact two-sided Mann-Whitney p by explicit enumeration of all
// C(n1+n2, n1) group assignments of the pooled ranks (tie-free inputs).
double mann_whitney_enumerate(const std::vector<double>& a, const std::vector<double>& b);

// Monte-Carlo permutation two-sided p for the Mann-Whitney U.
double mann_whitney_permutation(const std::vector<double>& a, const std::vector<double>& b,
                                int n_permutations, uint64_t seed);

// Two-sided Fisher p via the multiplicative hypergeometric recurrence.
double fisher_enumerate(int64_t a, int64_t b, int64_t c, int64_t d);

// delta = (#{a>b} - #{a<b}) / (n1*n2) by double loop.
double cliffs_delta_pairs(const std::vector<double>& a, const std::vector<double>& b);

// Exact two-sample KS p by enumeration of group assignments (small n only).
double ks_enumerate(const std::vector<double>& a, const std::vector<double>& b);

// Energy distance by the definitional double loops.
double energy_distance_pairs(const std::vector<double>& a, const std::vector<double>& b);

// Mean silhouette score of a 2-d embedding under binary cluster labels.
double silhouette2d(const std::vector<std::array<double, 2>>& points,
                    const std::vector<int>& labels);

}  // namespace petfuse::test
