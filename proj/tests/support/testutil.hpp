// Small helpers shared by the unit tests.
#pragma once

#include <vector>

#include "petfuse/rng.hpp"
#include "petfuse/tensor.hpp"

namespace petfuse::test {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0,
                            bool requires_grad = false) {
  Tensor t(std::move(shape));
  for (float& v : t.values) v = static_cast<float>(rng.normal() * scale);
  t.requires_grad = requires_grad;
  return t;
}

inline std::vector<double> to_double(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline bool close_rel(double got, double want, double rel, double abs = 0.0) {
  const double diff = std::abs(got - want);
  return diff <= abs + rel * std::max(std::abs(got), std::abs(want));
}

// max relative deviation between two arrays with an absolute floor
inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double floor = 1e-12) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max({std::abs(got[i]), std::abs(want[i]), floor});
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace petfuse::test
