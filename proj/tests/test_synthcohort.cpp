#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "petfuse/preprocess.hpp"
#include "petfuse/stats.hpp"
#include "petfuse/synthcohort.hpp"
#include "support/testutil.hpp"

using namespace petfuse;
using namespace petfuse::test;

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string cohort_as_string(const CohortManifest& m) {
  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "petfuse_cohort_det.json";
  save_cohort(m, path.string());
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  fs::remove(path);
  return ss.str();
}

// Small logistic regression by full-batch gradient descent; enough to probe
// how much signal a linear model extracts from the labs.
std::vector<double> fit_logistic(const Matrix& x, const std::vector<int>& y, int iters = 3000,
                                 double lr = 0.1) {
  std::vector<double> w(static_cast<size_t>(x.cols) + 1, 0.0);  // bias last
  for (int it = 0; it < iters; ++it) {
    std::vector<double> grad(w.size(), 0.0);
    for (int i = 0; i < x.rows; ++i) {
      double z = w.back();
      for (int j = 0; j < x.cols; ++j) z += w[static_cast<size_t>(j)] * x.at(i, j);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double d = p - y[static_cast<size_t>(i)];
      for (int j = 0; j < x.cols; ++j) grad[static_cast<size_t>(j)] += d * x.at(i, j);
      grad.back() += d;
    }
    for (size_t j = 0; j < w.size(); ++j) w[j] -= lr * grad[j] / x.rows;
  }
  return w;
}

double logistic_auroc(const Matrix& x_train, const std::vector<int>& y_train,
                      const Matrix& x_test, const std::vector<int>& y_test) {
  const auto w = fit_logistic(x_train, y_train);
  stats::ScoredSet s;
  for (int i = 0; i < x_test.rows; ++i) {
    double z = w.back();
    for (int j = 0; j < x_test.cols; ++j) z += w[static_cast<size_t>(j)] * x_test.at(i, j);
    s.scores.push_back(z);
    s.labels.push_back(y_test[static_cast<size_t>(i)]);
  }
  return stats::auroc(s);
}

Matrix labs_matrix(const std::vector<PatientRecord>& recs, int from, int to) {
  Matrix x(to - from, 4);
  for (int i = from; i < to; ++i) {
    const auto& l = recs[static_cast<size_t>(i)].labs;
    x.at(i - from, 0) = std::log(l.ast_u_per_l);
    x.at(i - from, 1) = std::log(l.alt_u_per_l);
    x.at(i - from, 2) = std::log(l.cga_ug_per_l);
    x.at(i - from, 3) = std::log(l.ggt_u_per_l);
  }
  return x;
}

}  // namespace

TEST_CASE("lab panel invariants") {
  const LabPanel p = make_lab_panel(30.0, 25.0, 60.0, 400.0);
  CHECK(p.de_ritis == doctest::Approx(1.2));
  CHECK_THROWS_AS(make_lab_panel(-1.0, 25.0, 60.0, 400.0), ValidationError);
}

TEST_CASE("generate_cohort hits the requested class split exactly at n=116") {
  const auto m = generate_cohort(116, 0.36, 42);
  int n_short = 0;
  for (const auto& r : m.records) n_short += r.label == PfsLabel::SHORT ? 1 : 0;
  CHECK(n_short == 42);
  CHECK(m.records.size() - n_short == 74);
}

TEST_CASE("generate_cohort is deterministic byte for byte") {
  const auto a = generate_cohort(30, 0.4, 777);
  const auto b = generate_cohort(30, 0.4, 777);
  CHECK(cohort_as_string(a) == cohort_as_string(b));
  const auto c = generate_cohort(30, 0.4, 778);
  CHECK(cohort_as_string(a) != cohort_as_string(c));
}

TEST_CASE("generate_cohort validations") {
  CHECK_THROWS_AS(generate_cohort(5, 0.4, 1), ValidationError);
  CHECK_THROWS_AS(generate_cohort(20, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(generate_cohort(20, 1.0, 1), ValidationError);
}

TEST_CASE("record labels are consistent with pfs and events are all observed") {
  const auto m = generate_cohort(80, 0.36, 5);
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    CHECK((r.label == PfsLabel::SHORT) == (r.pfs_months <= 12.0));
    CHECK(r.pfs_months > 0.0);
    CHECK(r.event);
    CHECK(ids.insert(r.id).second);
    r.labs.validate();
  }
}

TEST_CASE("class proportions stay within two patients across seeds at n=116") {
  for (const uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const auto m = generate_cohort(116, 0.36, seed);
    int n_short = 0;
    for (const auto& r : m.records) n_short += r.label == PfsLabel::SHORT ? 1 : 0;
    CHECK(std::abs(n_short - 42) <= 2);
  }
}

TEST_CASE("planted marker shift: SHORT CgA exceeds LONG CgA at n=200") {
  const auto m = generate_cohort(200, 0.36, 9);
  std::vector<double> cga_short, cga_long, ggt_short, ggt_long;
  for (const auto& r : m.records) {
    (r.label == PfsLabel::SHORT ? cga_short : cga_long).push_back(r.labs.cga_ug_per_l);
    (r.label == PfsLabel::SHORT ? ggt_short : ggt_long).push_back(r.labs.ggt_u_per_l);
  }
  CHECK(median_of(cga_short) > median_of(cga_long));
  CHECK(median_of(ggt_short) > median_of(ggt_long));
  CHECK(stats::mann_whitney_u(cga_short, cga_long).p_raw < 0.05);
}

TEST_CASE("planted complementarity: single channels capped, joint oracle strong") {
  // held-out evaluation: fit on the first 300, evaluate on the next 300
  const auto m = generate_cohort(600, 0.36, 4242);
  std::vector<int> y;
  for (const auto& r : m.records) y.push_back(r.label == PfsLabel::SHORT ? 1 : 0);
  const std::vector<int> y_train(y.begin(), y.begin() + 300);
  const std::vector<int> y_test(y.begin() + 300, y.end());

  // labs-only logistic model
  const double labs_auc = logistic_auroc(labs_matrix(m.records, 0, 300), y_train,
                                         labs_matrix(m.records, 300, 600), y_test);
  CHECK(labs_auc < 0.75);

  // lesion-burden threshold alone (score = burden latent)
  stats::ScoredSet burden;
  for (int i = 300; i < 600; ++i) {
    burden.scores.push_back(m.records[static_cast<size_t>(i)].latent_burden);
    burden.labels.push_back(y[static_cast<size_t>(i)]);
  }
  CHECK(stats::auroc(burden) < 0.75);

  // oracle on both latents
  stats::ScoredSet oracle;
  for (int i = 300; i < 600; ++i) {
    const auto& r = m.records[static_cast<size_t>(i)];
    oracle.scores.push_back(std::min(r.latent_burden, r.latent_marker));
    oracle.labels.push_back(y[static_cast<size_t>(i)]);
  }
  CHECK(stats::auroc(oracle) > 0.85);
}

TEST_CASE("generate_volume_pair: no lesions keeps PET below background plus 3 sigma") {
  PatientRecord r;
  r.id = "T0";
  r.latent_burden = 0.0;
  const GenerationParams params;
  auto [pet, ct] = generate_volume_pair(r, 31, params);
  const Volume h = harmonize(pet);
  const double sigma = params.pet_noise_amplitude / std::sqrt(3.0);
  const float peak = *std::max_element(h.voxels.begin(), h.voxels.end());
  CHECK(peak < params.pet_body_uptake + 3.0 * sigma);
  CHECK(ct.modality == Modality::CT);
}

TEST_CASE("generate_volume_pair is deterministic and pre-aligned") {
  PatientRecord r;
  r.id = "T1";
  r.latent_burden = 0.6;
  auto [pet1, ct1] = generate_volume_pair(r, 55);
  auto [pet2, ct2] = generate_volume_pair(r, 55);
  CHECK(pet1.voxels == pet2.voxels);
  CHECK(ct1.voxels == ct2.voxels);
  CHECK(pet1.shape == ct1.shape);
  CHECK(pet1.spacing_mm == ct1.spacing_mm);
  auto [pet3, ct3] = generate_volume_pair(r, 56);
  CHECK(pet1.voxels != pet3.voxels);
  CHECK(ct1.voxels != ct3.voxels);
}

TEST_CASE("mean PET intensity is monotone non-decreasing in planted burden") {
  const GenerationParams params;
  std::array<double, 9> mean_by_burden{};
  for (int burden = 0; burden <= 8; ++burden) {
    double acc = 0.0;
    for (int seed = 0; seed < 20; ++seed) {
      PatientRecord r;
      r.id = "B" + std::to_string(burden);
      r.latent_burden = static_cast<double>(burden) / 8.0;
      auto [pet, ct] = generate_volume_pair(r, 1000 + seed, params);
      (void)ct;
      const Volume h = harmonize(pet);
      double m = 0.0;
      for (const float v : h.voxels) m += v;
      acc += m / static_cast<double>(h.numel());
    }
    mean_by_burden[static_cast<size_t>(burden)] = acc / 20.0;
  }
  for (int b = 1; b <= 8; ++b) {
    CHECK(mean_by_burden[static_cast<size_t>(b)] >=
          mean_by_burden[static_cast<size_t>(b - 1)] - 1e-9);
  }
}

TEST_CASE("pretraining set carries a burden-correlated lesion fraction") {
  const auto phantoms = generate_pretraining_set(24, 99);
  CHECK(phantoms.size() == 24);
  std::set<std::string> ids;
  double cov = 0.0, mb = 0.0, mf = 0.0;
  for (const auto& p : phantoms) {
    CHECK(ids.insert(p.id).second);
    mb += p.burden;
    mf += p.lesion_fraction;
  }
  mb /= 24.0;
  mf /= 24.0;
  for (const auto& p : phantoms) cov += (p.burden - mb) * (p.lesion_fraction - mf);
  CHECK(cov > 0.0);
}

TEST_CASE("cohort manifest round trip preserves records") {
  namespace fs = std::filesystem;
  const auto m = generate_cohort(24, 0.4, 11);
  const auto path = fs::temp_directory_path() / "petfuse_cohort_rt.json";
  save_cohort(m, path.string());
  const auto r = load_cohort(path.string());
  CHECK(r.seed == m.seed);
  CHECK(r.records.size() == m.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(r.records[i].id == m.records[i].id);
    CHECK(r.records[i].labs.cga_ug_per_l == doctest::Approx(m.records[i].labs.cga_ug_per_l));
    CHECK(r.records[i].pfs_months == doctest::Approx(m.records[i].pfs_months));
    CHECK(r.records[i].label == m.records[i].label);
  }
  fs::remove(path);
}

TEST_CASE("cohort_summary: identical strata give p = 1 on continuous rows") {
  // duplicate one group of patients into both labels
  auto m = generate_cohort(12, 0.5, 13);
  const size_t n = m.records.size();
  for (size_t i = 0; i < n / 2; ++i) {
    m.records[i + n / 2].labs = m.records[i].labs;
    m.records[i + n / 2].sex = m.records[i].sex;
  }
  // force labels: first half SHORT, duplicated half LONG
  for (size_t i = 0; i < n; ++i) {
    m.records[i].label = i < n / 2 ? PfsLabel::SHORT : PfsLabel::LONG;
    m.records[i].pfs_months = i < n / 2 ? 6.0 : 20.0;
  }
  const auto rows = cohort_summary(m);
  for (const auto& row : rows) {
    if (row.test == "mann-whitney") CHECK(row.p_value == doctest::Approx(1.0));
  }
}

TEST_CASE("cohort_summary detects the planted CgA shift at n=200") {
  const auto m = generate_cohort(200, 0.36, 9);
  const auto rows = cohort_summary(m);
  bool found = false;
  for (const auto& row : rows) {
    if (row.variable.rfind("CgA", 0) == 0) {
      found = true;
      CHECK(row.p_value < 0.05);
    }
  }
  CHECK(found);
}

TEST_CASE("cohort_summary rejects single-stratum cohorts") {
  auto m = generate_cohort(12, 0.5, 14);
  for (auto& r : m.records) {
    r.label = PfsLabel::LONG;
    r.pfs_months = 20.0;
  }
  CHECK_THROWS_AS(cohort_summary(m), ValidationError);
}

TEST_CASE("summary csv shape") {
  const auto m = generate_cohort(20, 0.4, 15);
  const auto rows = cohort_summary(m);
  const std::string csv = summary_to_csv(rows);
  CHECK(csv.rfind("variable,total,pfs_short,pfs_long,p_value,test\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<int64_t>(rows.size()) + 1);
}
