// Random Forest classifier for the laboratory-only baseline, plus
// permutation feature importance usable with any probability-emitting model.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "petfuse/common.hpp"
#include "petfuse/rng.hpp"

namespace petfuse::forest {

struct TreeNode {
  int feature = -1;        // -1 marks a leaf
  double threshold = 0.0;  // go left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  double prob = 0.0;       // leaf probability of class 1
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // node 0 is the root
};

struct ForestSpec {
  int n_trees = 100;
  int max_depth = -1;        // unlimited
  int min_leaf = 1;
  int features_per_split = 2;  // ceil(sqrt(4)) for the 4-feature lab panel
  bool bootstrap = true;
  uint64_t seed = 0;
};

// Greedy CART with Gini impurity over a random feature subset per node;
// midpoint thresholds between sorted distinct values; ties resolved toward
// the lowest feature index, then the smallest threshold.
DecisionTree fit_tree(const Matrix& x, const std::vector<int>& y, const ForestSpec& spec,
                      Rng& rng);

double tree_predict(const DecisionTree& t, const std::vector<double>& row);

struct Forest {
  ForestSpec spec;
  std::vector<DecisionTree> trees;
  std::vector<std::vector<int>> in_bag_counts;  // per tree, per sample; for OOB
};

Forest fit_forest(const Matrix& x, const std::vector<int>& y, const ForestSpec& spec);

// Mean of per-tree leaf probabilities.
double forest_predict_proba(const Forest& f, const std::vector<double>& row);

// Accuracy over samples predicted only by trees that never saw them.
double oob_accuracy(const Forest& f, const Matrix& x, const std::vector<int>& y);

std::string forest_to_json(const Forest& f);
Forest forest_from_json(const std::string& text);

// Permutation feature importance: baseline AUROC minus the mean AUROC over
// `repeats` shuffles of each feature column. `scorer` maps a feature matrix
// to per-row probabilities (closures may bind per-row side inputs such as
// images).
using BatchScorer = std::function<std::vector<double>(const Matrix&)>;

std::vector<double> permutation_importance(const BatchScorer& scorer, const Matrix& x,
                                           const std::vector<int>& y, int repeats, Rng& rng);

// Deterministic variant taking explicit permutations per (feature, repeat);
// the identity permutation yields an importance of exactly zero.
std::vector<double> permutation_importance_with(
    const BatchScorer& scorer, const Matrix& x, const std::vector<int>& y,
    const std::vector<std::vector<std::vector<int>>>& permutations);

}  // namespace petfuse::forest
