#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "petfuse/checkpoint.hpp"
#include "petfuse/models.hpp"
#include "support/testutil.hpp"

using namespace petfuse;
using namespace petfuse::test;

namespace {

// volumes are shrunk in unit tests; the architecture is shape-generic
constexpr std::array<int, 3> kTinyShape{8, 8, 8};

std::vector<float> random_voxels(std::array<int, 3> shape, uint64_t seed) {
  std::vector<float> v(static_cast<size_t>(shape[0]) * shape[1] * shape[2]);
  Rng rng(seed);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}

ModelSpec spec_of(ModelKind kind, uint64_t seed = 7) {
  ModelSpec s;
  s.kind = kind;
  s.seed = seed;
  return s;
}

// Synthetic lab-signal dataset for the head-only model.
Dataset separable_labs(int n, uint64_t seed) {
  Dataset d;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    ModelInput s;
    s.id = "L" + std::to_string(i);
    s.label = i % 2 == 0 ? 1.0f : 0.0f;
    const float base = s.label == 1.0f ? 1.5f : -1.5f;
    s.labs = {base + static_cast<float>(rng.normal() * 0.1f),
              static_cast<float>(rng.normal() * 0.1f),
              static_cast<float>(rng.normal() * 0.1f),
              static_cast<float>(rng.normal() * 0.1f)};
    d.items.push_back(s);
  }
  return d;
}

}  // namespace

TEST_CASE("build_model instantiates exactly the branches the kind requires") {
  const Model pet = Model::build(spec_of(ModelKind::PET_ONLY), kTinyShape);
  CHECK(pet.has_pet());
  CHECK(!pet.has_ct());
  CHECK(!pet.has_labs());
  CHECK(pet.head_input_width() == pet.embedding_dim());

  const Model petct = Model::build(spec_of(ModelKind::PETCT_FUSION), kTinyShape);
  CHECK(petct.has_pet());
  CHECK(petct.has_ct());
  CHECK(petct.has_labs());
  CHECK(petct.head_input_width() == 2 * petct.embedding_dim() + 4);

  const Model rf = Model::build(spec_of(ModelKind::RF_LABS), kTinyShape);
  CHECK(rf.is_forest());
  CHECK(!rf.has_pet());
}

TEST_CASE("embedding dim follows the conv stack at the reference input shape") {
  CHECK(Encoder3D::embedding_dim_for({75, 50, 50}) == 64 * 5 * 4 * 4);
  CHECK(Encoder3D::embedding_dim_for(kTinyShape) == 64 * 1 * 1 * 1);
}

TEST_CASE("identical spec and seed give identical initial parameters") {
  Model a = Model::build(spec_of(ModelKind::PET_FUSION, 99), kTinyShape);
  Model b = Model::build(spec_of(ModelKind::PET_FUSION, 99), kTinyShape);
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].first == tb[i].first);
    CHECK(ta[i].second->values == tb[i].second->values);
  }
  Model c = Model::build(spec_of(ModelKind::PET_FUSION, 100), kTinyShape);
  CHECK(c.named_tensors()[0].second->values != ta[0].second->values);
}

TEST_CASE("standardize_labs z-scores with the log-CgA transform") {
  std::vector<PatientRecord> recs(8);
  Rng rng(3);
  for (size_t i = 0; i < recs.size(); ++i) {
    recs[i].id = "P" + std::to_string(i);
    recs[i].labs = make_lab_panel(20.0 + rng.uniform() * 30.0, 15.0 + rng.uniform() * 30.0,
                                  30.0 + rng.uniform() * 60.0, 100.0 + rng.uniform() * 900.0);
  }
  std::vector<const PatientRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const LabStats stats = fit_lab_stats(ptrs);
  CHECK(stats.fit_on.size() == 8);

  // standardizing the training set recovers zero mean and unit deviation
  std::array<double, 4> mean{}, ss{};
  for (const auto& r : recs) {
    const auto z = standardize_labs(r.labs, stats);
    for (int j = 0; j < 4; ++j) mean[static_cast<size_t>(j)] += z[static_cast<size_t>(j)];
  }
  for (double& m : mean) m /= 8.0;
  for (const auto& r : recs) {
    const auto z = standardize_labs(r.labs, stats);
    for (int j = 0; j < 4; ++j) {
      const double d = z[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
      ss[static_cast<size_t>(j)] += d * d;
    }
  }
  for (int j = 0; j < 4; ++j) {
    CHECK(std::abs(mean[static_cast<size_t>(j)]) < 1e-4);
    CHECK(std::abs(std::sqrt(ss[static_cast<size_t>(j)] / 8.0) - 1.0) < 1e-4);
  }

  // a panel exactly at the training means maps to the zero vector
  LabPanel at_mean = make_lab_panel(stats.mean[0], stats.mean[1], stats.mean[3],
                                    std::exp(stats.mean[2]));
  const auto z0 = standardize_labs(at_mean, stats);
  for (const float v : z0) CHECK(std::abs(v) < 1e-4f);
}

TEST_CASE("standardize_labs floors constant features and rejects non-positive values") {
  std::vector<PatientRecord> recs(4);
  for (size_t i = 0; i < recs.size(); ++i) {
    recs[i].id = "C" + std::to_string(i);
    recs[i].labs = make_lab_panel(30.0, 25.0 + static_cast<double>(i), 60.0, 400.0);
  }
  std::vector<const PatientRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  const LabStats stats = fit_lab_stats(ptrs);
  CHECK(stats.std[0] == doctest::Approx(1e-6));  // constant AST floored
  const auto z = standardize_labs(recs[0].labs, stats);
  CHECK(z[0] == doctest::Approx(0.0f));

  LabPanel bad = recs[0].labs;
  bad.ast_u_per_l = -3.0;
  CHECK_THROWS_AS(standardize_labs(bad, stats), ValidationError);
}

TEST_CASE("forward: reproducible logits, batch consistency, bias-only head") {
  Model m = Model::build(spec_of(ModelKind::PET_ONLY, 21), kTinyShape);
  const auto vox = random_voxels(kTinyShape, 5);
  ModelInput item;
  item.id = "X";
  item.pet = &vox;

  const double p1 = m.predict_proba_one(item);
  const double p2 = m.predict_proba_one(item);
  CHECK(p1 == doctest::Approx(p2).epsilon(1e-12));  // eval idempotence

  // duplicate rows in one batch produce identical outputs
  const auto batch = m.predict_proba({&item, &item, &item});
  CHECK(batch[0] == doctest::Approx(batch[1]).epsilon(1e-12));
  CHECK(batch[2] == doctest::Approx(p1).epsilon(1e-6));

  // zeroing the final layer leaves exactly the bias
  for (Param* p : m.parameters()) {
    if (p->name == "head.fc3.w") std::fill(p->tensor.values.begin(), p->tensor.values.end(), 0.0f);
    if (p->name == "head.fc3.b") p->tensor.values[0] = 0.0f;
  }
  CHECK(m.predict_proba_one(item) == doctest::Approx(0.5));  // logit 0 -> 0.5
  for (Param* p : m.parameters()) {
    if (p->name == "head.fc3.b") p->tensor.values[0] = 2.0f;
  }
  CHECK(m.predict_proba_one(item) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("forward rejects missing or extra modalities") {
  Model m = Model::build(spec_of(ModelKind::PET_ONLY, 22), kTinyShape);
  ModelInput missing;
  missing.id = "bad";
  CHECK_THROWS_AS(m.predict_proba({&missing}), ValidationError);

  Model fusion = Model::build(spec_of(ModelKind::PETCT_FUSION, 23), kTinyShape);
  const auto vox = random_voxels(kTinyShape, 6);
  ModelInput pet_only;
  pet_only.id = "bad2";
  pet_only.pet = &vox;
  CHECK_THROWS_AS(fusion.predict_proba({&pet_only}), ValidationError);
}

TEST_CASE("train: separable lab toy set reaches a small loss") {
  ModelSpec spec = spec_of(ModelKind::PET_FUSION, 31);
  spec.epochs = 200;
  spec.batch_size = 10;
  spec.weight_decay = 0.0f;
  Model m = Model::build_labs_mlp(spec);
  const Dataset d = separable_labs(20, 8);
  const auto trace = train(m, d, spec);
  REQUIRE(trace.size() == 200);
  CHECK(trace.back() < 0.1);
}

TEST_CASE("train: zero epochs leaves parameters unchanged") {
  ModelSpec spec = spec_of(ModelKind::PET_FUSION, 32);
  spec.epochs = 0;
  Model m = Model::build_labs_mlp(spec);
  const auto before = m.named_tensors();
  std::vector<std::vector<float>> snapshot;
  for (const auto& [name, t] : before) snapshot.push_back(t->values);
  const auto trace = train(m, separable_labs(12, 9), spec);
  CHECK(trace.empty());
  const auto after = m.named_tensors();
  for (size_t i = 0; i < after.size(); ++i) CHECK(after[i].second->values == snapshot[i]);
}

TEST_CASE("train: loss trace decreases on its 5-epoch moving average") {
  ModelSpec spec = spec_of(ModelKind::PET_FUSION, 33);
  spec.epochs = 40;
  spec.batch_size = 8;
  Model m = Model::build_labs_mlp(spec);
  const auto trace = train(m, separable_labs(24, 10), spec);
  const auto avg = [&](size_t from) {
    double acc = 0.0;
    for (size_t i = from; i < from + 5; ++i) acc += trace[i];
    return acc / 5.0;
  };
  CHECK(avg(trace.size() - 5) < avg(0));
}

TEST_CASE("train rejects single-class data and reports divergence") {
  ModelSpec spec = spec_of(ModelKind::PET_FUSION, 34);
  spec.epochs = 3;
  Model m = Model::build_labs_mlp(spec);
  Dataset one_class = separable_labs(10, 11);
  for (auto& s : one_class.items) s.label = 1.0f;
  CHECK_THROWS_AS(train(m, one_class, spec), ValidationError);

  // absurd learning rate drives the loss to non-finite values
  ModelSpec wild = spec_of(ModelKind::PET_FUSION, 35);
  wild.epochs = 60;
  wild.lr = 1e18f;
  Model m2 = Model::build_labs_mlp(wild);
  CHECK_THROWS_AS(train(m2, separable_labs(10, 12), wild), TrainingDiverged);
}

TEST_CASE("train: deterministic parameters given spec, seed and data") {
  ModelSpec spec = spec_of(ModelKind::PET_ONLY, 36);
  spec.epochs = 2;
  spec.batch_size = 3;
  Dataset d;
  d.volume_shape = kTinyShape;
  std::vector<std::vector<float>> store;
  for (int i = 0; i < 6; ++i) store.push_back(random_voxels(kTinyShape, 100 + i));
  for (int i = 0; i < 6; ++i) {
    ModelInput s;
    s.id = "D" + std::to_string(i);
    s.pet = &store[static_cast<size_t>(i)];
    s.label = i % 2 == 0 ? 1.0f : 0.0f;
    d.items.push_back(s);
  }
  Model a = Model::build(spec, kTinyShape);
  Model b = Model::build(spec, kTinyShape);
  const auto ta = train(a, d, spec);
  const auto tb = train(b, d, spec);
  CHECK(ta == tb);
  const auto na = a.named_tensors();
  const auto nb = b.named_tensors();
  for (size_t i = 0; i < na.size(); ++i) CHECK(na[i].second->values == nb[i].second->values);
}

TEST_CASE("train: RF_LABS delegates to the forest module") {
  ModelSpec spec = spec_of(ModelKind::RF_LABS, 37);
  Model m = Model::build(spec, kTinyShape);
  const Dataset d = separable_labs(24, 13);
  train(m, d, spec);
  std::vector<const ModelInput*> ptrs;
  for (const auto& s : d.items) ptrs.push_back(&s);
  const auto probs = m.predict_proba(ptrs);
  double correct = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    correct += (probs[i] >= 0.5 ? 1.0f : 0.0f) == d.items[i].label ? 1 : 0;
  }
  CHECK(correct / static_cast<double>(probs.size()) > 0.9);
}

TEST_CASE("pretraining moves the encoder and improves the auxiliary loss") {
  GenerationParams params;
  params.volume_shape = {24, 20, 20};  // small phantoms keep the test quick
  const auto phantoms = generate_pretraining_set(12, 55, params);

  Rng rng_a(1), rng_b(1);
  Encoder3D before("ct_enc", kTinyShape, rng_a);
  Encoder3D encoder("ct_enc", kTinyShape, rng_b);
  PretrainOptions opts;
  opts.epochs = 6;
  opts.seed = 77;
  const PretrainResult r = pretrain_ct_encoder(encoder, phantoms, kTinyShape, opts);
  CHECK(r.val_mse_after < r.val_mse_before);

  double l2 = 0.0;
  for (size_t p = 0; p < encoder.params().size(); ++p) {
    const auto& a = before.params()[p].tensor.values;
    const auto& b = encoder.params()[p].tensor.values;
    for (size_t i = 0; i < a.size(); ++i) l2 += (a[i] - b[i]) * (a[i] - b[i]);
  }
  CHECK(l2 > 0.0);
}

TEST_CASE("checkpoint round trip restores model tensors") {
  namespace fs = std::filesystem;
  Model m = Model::build(spec_of(ModelKind::PET_FUSION, 41), kTinyShape);
  const auto dir = fs::temp_directory_path() / "petfuse_ck";
  fs::create_directories(dir);
  const std::string base = (dir / "model").string();
  save_checkpoint(base, m.named_tensors());

  Model fresh = Model::build(spec_of(ModelKind::PET_FUSION, 999), kTinyShape);
  fresh.load_tensors(load_checkpoint(base));
  const auto na = m.named_tensors();
  const auto nb = fresh.named_tensors();
  for (size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].second->values == nb[i].second->values);
  }
  fs::remove_all(dir);
}
