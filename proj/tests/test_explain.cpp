#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "petfuse/explain.hpp"
#include "support/oracles.hpp"
#include "support/testutil.hpp"

using namespace petfuse;
using namespace petfuse::test;
namespace ex = petfuse::explain;

namespace {

constexpr std::array<int, 3> kTinyShape{8, 8, 8};

std::vector<float> random_voxels(std::array<int, 3> shape, uint64_t seed) {
  std::vector<float> v(static_cast<size_t>(shape[0]) * shape[1] * shape[2]);
  Rng rng(seed);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}

Model fusion_model(uint64_t seed) {
  ModelSpec s;
  s.kind = ModelKind::PETCT_FUSION;
  s.seed = seed;
  Model m = Model::build(s, kTinyShape);
  // untrained models carry a zero output layer; give the head a live path so
  // input gradients are nontrivial
  Rng rng(seed + 1);
  for (Param* p : m.parameters()) {
    if (p->name == "head.fc3.w") {
      for (float& v : p->tensor.values) v = static_cast<float>(rng.normal() * 0.2);
    }
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

TEST_CASE("saliency is max-normalized and a dead branch is identically zero") {
  Model m = fusion_model(3);
  // silence the CT branch: constant embedding regardless of the input
  for (Param* p : m.parameters()) {
    if (p->name == "ct_enc.conv1.w") {
      std::fill(p->tensor.values.begin(), p->tensor.values.end(), 0.0f);
    }
  }
  const auto pet = random_voxels(kTinyShape, 10);
  const auto ct = random_voxels(kTinyShape, 11);
  ModelInput item;
  item.id = "S1";
  item.pet = &pet;
  item.ct = &ct;
  item.labs = {0.3f, -0.2f, 1.0f, 0.1f};

  const auto sal = ex::input_gradient_saliency(m, item);
  REQUIRE(sal.size() == 2);
  const auto& pet_sal = sal[0].second;
  const auto& ct_sal = sal[1].second;
  CHECK(sal[0].first == Modality::PET);
  CHECK(sal[1].first == Modality::CT);

  CHECK(!pet_sal.degenerate);
  float peak = 0.0f;
  for (const float v : pet_sal.values) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
    peak = std::max(peak, v);
  }
  CHECK(peak == doctest::Approx(1.0f));

  CHECK(ct_sal.degenerate);
  for (const float v : ct_sal.values) CHECK(v == 0.0f);
}

TEST_CASE("top saliency voxels respond at least as strongly as the median voxel") {
  Model m = fusion_model(5);
  const auto pet = random_voxels(kTinyShape, 12);
  const auto ct = random_voxels(kTinyShape, 13);
  ModelInput item;
  item.id = "S2";
  item.pet = &pet;
  item.ct = &ct;
  item.labs = {0.0f, 0.0f, 0.0f, 0.0f};
  const auto sal = ex::input_gradient_saliency(m, item)[0].second;

  // logit response to single-voxel perturbation, |f(x+h) - f(x-h)|
  const auto logit_at = [&](std::vector<float> vox) {
    ModelInput probe = item;
    probe.pet = &vox;
    return m.input_gradients(probe).logit;
  };
  const auto response = [&](size_t voxel) {
    std::vector<float> up = pet, down = pet;
    up[voxel] += 0.05f;
    down[voxel] -= 0.05f;
    return std::abs(logit_at(up) - logit_at(down));
  };

  std::vector<size_t> order(pet.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return sal.values[a] > sal.values[b]; });
  const double median_resp = response(order[order.size() / 2]);
  for (int k = 0; k < 5; ++k) {
    CHECK(response(order[static_cast<size_t>(k)]) >= median_resp - 1e-6);
  }
}

// ---------------------------------------------------------------------------
// overlays
// ---------------------------------------------------------------------------

namespace {

Volume gray_base(std::array<int, 3> shape) {
  Volume v;
  v.modality = Modality::PET;
  v.shape = shape;
  v.spacing_mm = {1, 1, 1};
  v.voxels.resize(static_cast<size_t>(v.numel()));
  Rng rng(77);
  for (float& x : v.voxels) x = static_cast<float>(rng.uniform());
  return v;
}

}  // namespace

TEST_CASE("render_slices transparency and opacity limits") {
  const Volume base = gray_base({6, 6, 6});
  ex::SaliencyVolume s;
  s.shape = base.shape;
  s.values.assign(base.voxels.size(), 0.1f);  // everywhere below v_min

  const auto planes = ex::render_slices(s, base, 0.3f);
  // transparent overlay reproduces the grayscale base slice
  ex::SaliencyVolume zero = s;
  std::fill(zero.values.begin(), zero.values.end(), 0.0f);
  const auto plain = ex::render_slices(zero, base, 0.3f);
  for (int p = 0; p < 3; ++p) {
    CHECK(planes[static_cast<size_t>(p)].rgb == plain[static_cast<size_t>(p)].rgb);
  }

  std::fill(s.values.begin(), s.values.end(), 1.0f);  // fully hot
  const auto hot = ex::render_slices(s, base, 0.3f);
  for (const auto& img : hot) {
    for (size_t i = 0; i < img.rgb.size(); i += 3) {
      CHECK(static_cast<int>(img.rgb[i]) == 255);      // heat(1) is white
      CHECK(static_cast<int>(img.rgb[i + 1]) == 255);
      CHECK(static_cast<int>(img.rgb[i + 2]) == 255);
    }
  }
}

TEST_CASE("a single hot voxel lights exactly one pixel per central plane") {
  const std::array<int, 3> shape{7, 7, 7};
  const Volume base = gray_base(shape);
  ex::SaliencyVolume s;
  s.shape = shape;
  s.values.assign(base.voxels.size(), 0.0f);
  const int c = 3;
  s.values[(static_cast<size_t>(c) * 7 + c) * 7 + c] = 1.0f;  // center voxel

  const auto with = ex::render_slices(s, base, 0.3f);
  ex::SaliencyVolume zero = s;
  std::fill(zero.values.begin(), zero.values.end(), 0.0f);
  const auto without = ex::render_slices(zero, base, 0.3f);
  for (int p = 0; p < 3; ++p) {
    int differing = 0;
    const auto& a = with[static_cast<size_t>(p)].rgb;
    const auto& b = without[static_cast<size_t>(p)].rgb;
    for (size_t i = 0; i < a.size(); i += 3) {
      if (a[i] != b[i] || a[i + 1] != b[i + 1] || a[i + 2] != b[i + 2]) ++differing;
    }
    CHECK(differing == 1);
  }

  ex::SaliencyVolume wrong;
  wrong.shape = {3, 3, 3};
  wrong.values.assign(27, 0.0f);
  CHECK_THROWS_AS(ex::render_slices(wrong, base), ValidationError);
}

TEST_CASE("ppm writer emits a P6 header") {
  namespace fs = std::filesystem;
  ex::OverlayImage img;
  img.width = 2;
  img.height = 2;
  img.rgb = {255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 9, 9};
  const auto path = fs::temp_directory_path() / "petfuse_img.ppm";
  ex::write_ppm(img, path.string());
  std::ifstream f(path, std::ios::binary);
  std::string header;
  std::getline(f, header);
  CHECK(header == "P6");
  fs::remove(path);
}

// ---------------------------------------------------------------------------
// histograms and distances
// ---------------------------------------------------------------------------

TEST_CASE("gradient_distribution pools and adds") {
  ex::SaliencyVolume uniform;
  uniform.shape = {2, 2, 2};
  uniform.values.assign(8, 1.0f);
  const auto h = ex::gradient_distribution({uniform});
  CHECK(h.total == 8);
  CHECK(h.counts[49] == 8);  // everything in the top bin

  ex::SaliencyVolume other;
  other.shape = {2, 2, 2};
  other.values.assign(8, 0.25f);
  const auto ha = ex::gradient_distribution({uniform});
  const auto hb = ex::gradient_distribution({other});
  const auto hsum = ex::gradient_distribution({uniform, other});
  for (int i = 0; i < 50; ++i) {
    CHECK(hsum.counts[static_cast<size_t>(i)] ==
          ha.counts[static_cast<size_t>(i)] + hb.counts[static_cast<size_t>(i)]);
  }
  CHECK_THROWS_AS(ex::gradient_distribution({}), ValidationError);
}

TEST_CASE("uniform random values spread across bins within the multinomial bound") {
  Rng rng(123);
  std::vector<float> samples(10000);
  for (float& v : samples) v = static_cast<float>(rng.uniform());
  const auto h = ex::histogram_from_samples(samples);
  const double expect = 10000.0 / 50.0;
  const double sigma = std::sqrt(10000.0 * (1.0 / 50.0) * (49.0 / 50.0));
  for (const int64_t c : h.counts) {
    CHECK(std::abs(static_cast<double>(c) - expect) < 5.0 * sigma);
  }
}

TEST_CASE("distribution_distances identity and disjoint point masses") {
  Rng rng(9);
  std::vector<float> a(500);
  for (float& v : a) v = static_cast<float>(rng.uniform());
  const auto same = ex::distribution_distances(a, a);
  CHECK(same.wasserstein == doctest::Approx(0.0));
  CHECK(same.ks_statistic == doctest::Approx(0.0));
  CHECK(same.ks_p == doctest::Approx(1.0));
  CHECK(same.jensen_shannon == doctest::Approx(0.0));
  CHECK(same.energy == doctest::Approx(0.0));
  CHECK(same.bhattacharyya == doctest::Approx(0.0));
  CHECK(same.histogram_overlap == doctest::Approx(1.0));

  const std::vector<float> zeros(200, 0.0f), ones(200, 1.0f);
  const auto far = ex::distribution_distances(zeros, ones);
  CHECK(far.wasserstein == doctest::Approx(1.0));
  CHECK(far.ks_statistic == doctest::Approx(1.0));
  CHECK(far.ks_p < 1e-6);
  CHECK(far.jensen_shannon == doctest::Approx(1.0));
  CHECK(far.histogram_overlap == doctest::Approx(0.0));
  CHECK(std::isinf(far.bhattacharyya));
}

TEST_CASE("wasserstein equals the sorted-difference formula on equal sizes") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> a(200), b(200);
    for (float& v : a) v = static_cast<float>(rng.uniform());
    for (float& v : b) v = static_cast<float>(std::pow(rng.uniform(), 1.5));
    const auto r = ex::distribution_distances(a, b);

    std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    double want = 0.0;
    for (size_t i = 0; i < sa.size(); ++i) want += std::abs(sa[i] - sb[i]);
    want /= static_cast<double>(sa.size());
    CHECK(std::abs(r.wasserstein - want) < 1e-9);

    CHECK(std::abs(r.energy - energy_distance_pairs(sa, sb)) < 1e-9);
  }
}

TEST_CASE("all six distances are symmetric") {
  Rng rng(11);
  std::vector<float> a(150), b(150);
  for (float& v : a) v = static_cast<float>(rng.uniform() * 0.8);
  for (float& v : b) v = static_cast<float>(0.2 + rng.uniform() * 0.8);
  const auto ab = ex::distribution_distances(a, b);
  const auto ba = ex::distribution_distances(b, a);
  CHECK(ab.wasserstein == doctest::Approx(ba.wasserstein).epsilon(1e-12));
  CHECK(ab.ks_statistic == doctest::Approx(ba.ks_statistic).epsilon(1e-12));
  CHECK(ab.ks_p == doctest::Approx(ba.ks_p).epsilon(1e-9));
  CHECK(ab.jensen_shannon == doctest::Approx(ba.jensen_shannon).epsilon(1e-12));
  CHECK(ab.energy == doctest::Approx(ba.energy).epsilon(1e-9));
  CHECK(ab.bhattacharyya == doctest::Approx(ba.bhattacharyya).epsilon(1e-12));
  CHECK(ab.histogram_overlap == doctest::Approx(ba.histogram_overlap).epsilon(1e-12));
}

TEST_CASE("overlap plus total variation equals one") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> a(300), b(300);
    for (float& v : a) v = static_cast<float>(rng.uniform());
    for (float& v : b) v = static_cast<float>(rng.uniform() * rng.uniform());
    const auto pa = ex::histogram_from_samples(a);
    const auto qb = ex::histogram_from_samples(b);
    const auto r = ex::distribution_distances(pa, qb, a, b);
    double tv = 0.0;
    for (int i = 0; i < 50; ++i) {
      tv += std::abs(static_cast<double>(pa.counts[static_cast<size_t>(i)]) / pa.total -
                     static_cast<double>(qb.counts[static_cast<size_t>(i)]) / qb.total);
    }
    CHECK(r.histogram_overlap + tv / 2.0 == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("jsd is bounded and zero only on identical histograms") {
  Rng rng(13);
  std::vector<float> a(300), b(300);
  for (float& v : a) v = static_cast<float>(rng.uniform());
  for (float& v : b) v = static_cast<float>(rng.uniform());
  const auto r = ex::distribution_distances(a, b);
  CHECK(r.jensen_shannon >= 0.0);
  CHECK(r.jensen_shannon <= 1.0);
  CHECK(r.jensen_shannon > 0.0);
}

TEST_CASE("ks asymptotic p stays near the exact enumeration at n = 10") {
  Rng rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> ad, bd;
    std::vector<float> af, bf;
    for (int i = 0; i < 10; ++i) {
      const double x = rng.uniform();
      ad.push_back(x);
      af.push_back(static_cast<float>(x));
    }
    for (int i = 0; i < 10; ++i) {
      const double x = std::min(1.0, rng.uniform() + 0.25);
      bd.push_back(x);
      bf.push_back(static_cast<float>(x));
    }
    const auto r = ex::distribution_distances(af, bf);
    const double exact = ks_enumerate(ad, bd);
    CHECK(std::abs(r.ks_p - exact) < 0.12);
  }
}

TEST_CASE("distribution_distances validates inputs") {
  std::vector<float> a(10, 0.5f);
  CHECK_THROWS_AS(ex::distribution_distances({}, a), ValidationError);
  auto pa = ex::histogram_from_samples(a);
  auto qb = pa;
  qb.bin_edges[3] += 0.01;
  CHECK_THROWS_AS(ex::distribution_distances(pa, qb, a, a), ValidationError);
}

// ---------------------------------------------------------------------------
// lab gradient importance
// ---------------------------------------------------------------------------

TEST_CASE("lab gradient importance: zeroed lab path and constructed linear head") {
  ModelSpec spec;
  spec.kind = ModelKind::PET_FUSION;
  spec.seed = 4;
  Model m = Model::build_labs_mlp(spec);

  const auto zero_head = [&](Model& model) {
    for (Param* p : model.parameters()) {
      std::fill(p->tensor.values.begin(), p->tensor.values.end(), 0.0f);
    }
  };

  std::vector<ModelInput> items(4);
  std::vector<const ModelInput*> ptrs;
  Rng rng(5);
  for (size_t i = 0; i < items.size(); ++i) {
    items[i].id = "G" + std::to_string(i);
    items[i].labs = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                     0.5f + static_cast<float>(rng.uniform()),  // CgA positive
                     static_cast<float>(rng.normal())};
    ptrs.push_back(&items[i]);
  }

  Model dead = m;
  zero_head(dead);
  const auto zero_imp = ex::lab_gradient_importance(dead, ptrs);
  for (const double v : zero_imp) CHECK(v == doctest::Approx(0.0));

  // head computing logit = 3 * CgA exactly: fc1 row0 = (0,0,3,0), identity taps
  Model linear = m;
  zero_head(linear);
  for (Param* p : linear.parameters()) {
    if (p->name == "head.fc1.w") p->tensor.values[2] = 3.0f;      // row 0, CgA column
    if (p->name == "head.fc2.w") p->tensor.values[0] = 1.0f;      // row 0 taps hidden 0
    if (p->name == "head.fc3.w") p->tensor.values[0] = 1.0f;
  }
  const auto imp = ex::lab_gradient_importance(linear, ptrs);
  CHECK(imp[0] == doctest::Approx(0.0));
  CHECK(imp[1] == doctest::Approx(0.0));
  CHECK(imp[2] == doctest::Approx(3.0));
  CHECK(imp[3] == doctest::Approx(0.0));

  ModelSpec petspec;
  petspec.kind = ModelKind::PET_ONLY;
  petspec.seed = 6;
  const Model no_labs = Model::build(petspec, kTinyShape);
  CHECK_THROWS_AS(ex::lab_gradient_importance(no_labs, ptrs), ValidationError);
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

TEST_CASE("pca: collinear data has a vanishing second component") {
  Rng rng(21);
  Matrix x(40, 5);
  for (int i = 0; i < 40; ++i) {
    const double t = rng.normal();
    for (int j = 0; j < 5; ++j) x.at(i, j) = t * (j + 1.0);
  }
  const auto r = ex::pca_projection(x);
  CHECK(r.eigenvalues[1] < 1e-9 * r.eigenvalues[0]);
}

TEST_CASE("pca: isotropic gaussian splits variance evenly") {
  Rng rng(22);
  Matrix x(10000, 2);
  for (double& v : x.data) v = rng.normal();
  const auto r = ex::pca_projection(x);
  CHECK(std::abs(r.explained_ratio[0] - 0.5) < 0.02);
  CHECK(std::abs(r.explained_ratio[1] - 0.5) < 0.02);
}

TEST_CASE("pca: planted clusters separate with silhouette above 0.5") {
  Rng rng(23);
  Matrix x(60, 6);
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    const int c = i % 2;
    labels.push_back(c);
    for (int j = 0; j < 6; ++j) {
      x.at(i, j) = rng.normal() * 0.4 + (c == 1 ? 3.0 : -3.0) * (j < 3 ? 1.0 : 0.2);
    }
  }
  const auto r = ex::pca_projection(x);
  std::vector<std::array<double, 2>> pts;
  for (int i = 0; i < 60; ++i) pts.push_back({r.coords.at(i, 0), r.coords.at(i, 1)});
  CHECK(silhouette2d(pts, labels) > 0.5);
}

TEST_CASE("pca: shift invariance and degenerate input") {
  Rng rng(24);
  Matrix x(30, 4);
  for (double& v : x.data) v = rng.normal();
  Matrix shifted = x;
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 4; ++j) shifted.at(i, j) += 5.0 * (j + 1.0);
  }
  const auto a = ex::pca_projection(x);
  const auto b = ex::pca_projection(shifted);
  for (int i = 0; i < 30; ++i) {
    for (int c = 0; c < 2; ++c) {
      CHECK(std::abs(std::abs(a.coords.at(i, c)) - std::abs(b.coords.at(i, c))) < 1e-6);
    }
  }

  Matrix flat(5, 3);  // all-zero: rank 0
  CHECK_THROWS_AS(ex::pca_projection(flat), ValidationError);
  CHECK_THROWS_AS(ex::pca_projection(Matrix(2, 4)), ValidationError);
}
