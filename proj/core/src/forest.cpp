#include "petfuse/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "petfuse/stats.hpp"

namespace petfuse::forest {

using nlohmann::json;

namespace {

double gini(int64_t pos, int64_t total) {
  if (total == 0) return 0.0;
  const double p = static_cast<double>(pos) / static_cast<double>(total);
  return 2.0 * p * (1.0 - p);
}

struct Split {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double impurity = std::numeric_limits<double>::infinity();
};

// Weighted Gini of the best threshold on one feature, by a sorted sweep.
void best_split_on_feature(const Matrix& x, const std::vector<int>& y,
                           const std::vector<int>& idx, int feature, Split& best) {
  std::vector<int> order = idx;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return x.at(a, feature) < x.at(b, feature);
  });
  const int64_t n = static_cast<int64_t>(order.size());
  int64_t total_pos = 0;
  for (const int i : order) total_pos += y[static_cast<size_t>(i)];

  int64_t left_n = 0, left_pos = 0;
  for (int64_t k = 0; k + 1 < n; ++k) {
    const int i = order[static_cast<size_t>(k)];
    ++left_n;
    left_pos += y[static_cast<size_t>(i)];
    const double v = x.at(i, feature);
    const double v_next = x.at(order[static_cast<size_t>(k + 1)], feature);
    if (v == v_next) continue;  // only between distinct values
    const double thr = 0.5 * (v + v_next);
    const int64_t right_n = n - left_n;
    const double imp =
        (static_cast<double>(left_n) * gini(left_pos, left_n) +
         static_cast<double>(right_n) * gini(total_pos - left_pos, right_n)) /
        static_cast<double>(n);
    // strict improvement keeps the lowest feature index / smallest threshold
    if (imp < best.impurity) {
      best.found = true;
      best.feature = feature;
      best.threshold = thr;
      best.impurity = imp;
    }
  }
}

int grow(const Matrix& x, const std::vector<int>& y, std::vector<int> idx, int depth,
         const ForestSpec& spec, Rng& rng, DecisionTree& tree) {
  int64_t pos = 0;
  for (const int i : idx) pos += y[static_cast<size_t>(i)];
  const int64_t n = static_cast<int64_t>(idx.size());

  const auto make_leaf = [&]() {
    TreeNode leaf;
    leaf.prob = static_cast<double>(pos) / static_cast<double>(n);
    tree.nodes.push_back(leaf);
    return static_cast<int>(tree.nodes.size() - 1);
  };

  const bool depth_capped = spec.max_depth >= 0 && depth >= spec.max_depth;
  if (pos == 0 || pos == n || n < 2 * spec.min_leaf || depth_capped) return make_leaf();

  // random feature subset, sorted so ties resolve to the lowest index
  std::vector<int> features(static_cast<size_t>(x.cols));
  std::iota(features.begin(), features.end(), 0);
  rng.shuffle(features);
  const int m = std::min(spec.features_per_split, x.cols);
  features.resize(static_cast<size_t>(m));
  std::sort(features.begin(), features.end());

  Split best;
  for (const int f : features) best_split_on_feature(x, y, idx, f, best);
  if (!best.found) return make_leaf();

  std::vector<int> left_idx, right_idx;
  for (const int i : idx) {
    (x.at(i, best.feature) <= best.threshold ? left_idx : right_idx).push_back(i);
  }
  if (static_cast<int>(left_idx.size()) < spec.min_leaf ||
      static_cast<int>(right_idx.size()) < spec.min_leaf) {
    return make_leaf();
  }

  TreeNode inner;
  inner.feature = best.feature;
  inner.threshold = best.threshold;
  tree.nodes.push_back(inner);
  const int me = static_cast<int>(tree.nodes.size() - 1);
  const int l = grow(x, y, std::move(left_idx), depth + 1, spec, rng, tree);
  const int r = grow(x, y, std::move(right_idx), depth + 1, spec, rng, tree);
  tree.nodes[static_cast<size_t>(me)].left = l;
  tree.nodes[static_cast<size_t>(me)].right = r;
  return me;
}

}  // namespace

DecisionTree fit_tree(const Matrix& x, const std::vector<int>& y, const ForestSpec& spec,
                      Rng& rng) {
  if (x.rows < 1 || static_cast<size_t>(x.rows) != y.size()) {
    throw ValidationError("fit_tree: empty data or label length mismatch");
  }
  DecisionTree tree;
  std::vector<int> idx(static_cast<size_t>(x.rows));
  std::iota(idx.begin(), idx.end(), 0);
  grow(x, y, std::move(idx), 0, spec, rng, tree);
  return tree;
}

double tree_predict(const DecisionTree& t, const std::vector<double>& row) {
  int node = 0;
  while (t.nodes[static_cast<size_t>(node)].feature >= 0) {
    const TreeNode& nd = t.nodes[static_cast<size_t>(node)];
    node = row[static_cast<size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
  }
  return t.nodes[static_cast<size_t>(node)].prob;
}

Forest fit_forest(const Matrix& x, const std::vector<int>& y, const ForestSpec& spec) {
  if (spec.n_trees < 1) throw ValidationError("fit_forest: n_trees must be >= 1");
  if (x.rows < 1 || static_cast<size_t>(x.rows) != y.size()) {
    throw ValidationError("fit_forest: empty data or label length mismatch");
  }
  Forest f;
  f.spec = spec;
  f.trees.reserve(static_cast<size_t>(spec.n_trees));
  f.in_bag_counts.reserve(static_cast<size_t>(spec.n_trees));
  for (int t = 0; t < spec.n_trees; ++t) {
    Rng rng(Rng::derive(spec.seed, static_cast<uint64_t>(t)));
    std::vector<int> counts(static_cast<size_t>(x.rows), 0);
    Matrix xb;
    std::vector<int> yb;
    if (spec.bootstrap) {
      xb = Matrix(x.rows, x.cols);
      yb.resize(static_cast<size_t>(x.rows));
      for (int i = 0; i < x.rows; ++i) {
        const int j = rng.uniform_int(0, x.rows - 1);
        ++counts[static_cast<size_t>(j)];
        for (int c = 0; c < x.cols; ++c) xb.at(i, c) = x.at(j, c);
        yb[static_cast<size_t>(i)] = y[static_cast<size_t>(j)];
      }
    } else {
      xb = x;
      yb = y;
      std::fill(counts.begin(), counts.end(), 1);
    }
    f.trees.push_back(fit_tree(xb, yb, spec, rng));
    f.in_bag_counts.push_back(std::move(counts));
  }
  return f;
}

double forest_predict_proba(const Forest& f, const std::vector<double>& row) {
  double acc = 0.0;
  for (const auto& t : f.trees) acc += tree_predict(t, row);
  return acc / static_cast<double>(f.trees.size());
}

double oob_accuracy(const Forest& f, const Matrix& x, const std::vector<int>& y) {
  int64_t scored = 0, correct = 0;
  std::vector<double> row(static_cast<size_t>(x.cols));
  for (int i = 0; i < x.rows; ++i) {
    for (int c = 0; c < x.cols; ++c) row[static_cast<size_t>(c)] = x.at(i, c);
    double acc = 0.0;
    int64_t n_trees = 0;
    for (size_t t = 0; t < f.trees.size(); ++t) {
      if (f.in_bag_counts[t][static_cast<size_t>(i)] > 0) continue;
      acc += tree_predict(f.trees[t], row);
      ++n_trees;
    }
    if (n_trees == 0) continue;
    ++scored;
    const int pred = acc / static_cast<double>(n_trees) >= 0.5 ? 1 : 0;
    if (pred == y[static_cast<size_t>(i)]) ++correct;
  }
  if (scored == 0) throw ValidationError("oob_accuracy: no out-of-bag samples");
  return static_cast<double>(correct) / static_cast<double>(scored);
}

std::string forest_to_json(const Forest& f) {
  json trees = json::array();
  for (const auto& t : f.trees) {
    json nodes = json::array();
    for (const auto& n : t.nodes) {
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"prob", n.prob}});
    }
    trees.push_back(std::move(nodes));
  }
  const json j = {{"n_trees", f.spec.n_trees},
                  {"max_depth", f.spec.max_depth},
                  {"min_leaf", f.spec.min_leaf},
                  {"features_per_split", f.spec.features_per_split},
                  {"bootstrap", f.spec.bootstrap},
                  {"seed", f.spec.seed},
                  {"trees", trees}};
  return j.dump(2);
}

Forest forest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("malformed forest json: " + std::string(e.what()));
  }
  Forest f;
  f.spec.n_trees = j.at("n_trees").get<int>();
  f.spec.max_depth = j.at("max_depth").get<int>();
  f.spec.min_leaf = j.at("min_leaf").get<int>();
  f.spec.features_per_split = j.at("features_per_split").get<int>();
  f.spec.bootstrap = j.at("bootstrap").get<bool>();
  f.spec.seed = j.at("seed").get<uint64_t>();
  for (const auto& tj : j.at("trees")) {
    DecisionTree t;
    for (const auto& nj : tj) {
      TreeNode n;
      n.feature = nj.at("feature").get<int>();
      n.threshold = nj.at("threshold").get<double>();
      n.left = nj.at("left").get<int>();
      n.right = nj.at("right").get<int>();
      n.prob = nj.at("prob").get<double>();
      t.nodes.push_back(n);
    }
    f.trees.push_back(std::move(t));
  }
  return f;
}

// ---------------------------------------------------------------------------
// permutation importance
// ---------------------------------------------------------------------------

namespace {

double scored_auroc(const BatchScorer& scorer, const Matrix& x, const std::vector<int>& y) {
  stats::ScoredSet s;
  s.scores = scorer(x);
  s.labels = y;
  return stats::auroc(s);
}

}  // namespace

std::vector<double> permutation_importance_with(
    const BatchScorer& scorer, const Matrix& x, const std::vector<int>& y,
    const std::vector<std::vector<std::vector<int>>>& permutations) {
  int64_t pos = 0;
  for (const int v : y) pos += v;
  if (pos == 0 || pos == static_cast<int64_t>(y.size())) {
    throw ValidationError("permutation_importance: both classes required");
  }
  const double baseline = scored_auroc(scorer, x, y);
  std::vector<double> importance(static_cast<size_t>(x.cols), 0.0);
  for (int feat = 0; feat < x.cols; ++feat) {
    const auto& perms = permutations[static_cast<size_t>(feat)];
    double acc = 0.0;
    for (const auto& perm : perms) {
      Matrix shuffled = x;
      for (int r = 0; r < x.rows; ++r) {
        shuffled.at(r, feat) = x.at(perm[static_cast<size_t>(r)], feat);
      }
      acc += scored_auroc(scorer, shuffled, y);
    }
    importance[static_cast<size_t>(feat)] =
        baseline - acc / static_cast<double>(perms.size());
  }
  return importance;
}

std::vector<double> permutation_importance(const BatchScorer& scorer, const Matrix& x,
                                           const std::vector<int>& y, int repeats, Rng& rng) {
  if (repeats < 1) throw ValidationError("permutation_importance: repeats must be >= 1");
  std::vector<std::vector<std::vector<int>>> perms(static_cast<size_t>(x.cols));
  for (int f = 0; f < x.cols; ++f) {
    for (int r = 0; r < repeats; ++r) {
      perms[static_cast<size_t>(f)].push_back(rng.permutation(x.rows));
    }
  }
  return permutation_importance_with(scorer, x, y, perms);
}

}  // namespace petfuse::forest
