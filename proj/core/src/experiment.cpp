#include "petfuse/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "petfuse/checkpoint.hpp"
#include "petfuse/explain.hpp"
#include "petfuse/forest.hpp"

namespace petfuse::exp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// fold planning
// ---------------------------------------------------------------------------

FoldPlan make_fold_plan(const std::vector<std::string>& ids,
                        const std::vector<PfsLabel>& labels, uint64_t seed) {
  if (ids.size() != labels.size()) throw ValidationError("make_fold_plan: length mismatch");
  if (ids.size() < 6) throw ValidationError("make_fold_plan: need at least 6 patients");
  int n_short = 0, n_long = 0;
  for (const PfsLabel l : labels) {
    (l == PfsLabel::SHORT ? n_short : n_long)++;
  }
  if (n_short < kFolds || n_long < kFolds) {
    throw ValidationError("make_fold_plan: each class needs at least one patient per fold");
  }

  FoldPlan plan;
  plan.seed = seed;
  for (int rep = 0; rep < kRepetitions; ++rep) {
    Rng rng(Rng::derive(seed, "fold-plan/" + std::to_string(rep)));
    std::vector<int> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    std::map<std::string, int> assign;
    int next_short = 0, next_long = 0;
    for (const int i : order) {
      int& counter = labels[static_cast<size_t>(i)] == PfsLabel::SHORT ? next_short : next_long;
      assign[ids[static_cast<size_t>(i)]] = counter % kFolds;
      ++counter;
    }
    plan.assignments.push_back(std::move(assign));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// config I/O
// ---------------------------------------------------------------------------

namespace {

std::string save_checkpoints_name(SaveCheckpoints s) {
  switch (s) {
    case SaveCheckpoints::kNone: return "none";
    case SaveCheckpoints::kFirstRepetition: return "first";
    case SaveCheckpoints::kAll: return "all";
  }
  return "first";
}

SaveCheckpoints save_checkpoints_from(const std::string& s) {
  if (s == "none") return SaveCheckpoints::kNone;
  if (s == "first") return SaveCheckpoints::kFirstRepetition;
  if (s == "all") return SaveCheckpoints::kAll;
  throw ValidationError("unknown save_checkpoints policy: " + s);
}

}  // namespace

std::string config_to_json(const ExperimentConfig& c) {
  json models = json::array();
  for (const ModelKind k : c.models) models.push_back(to_string(k));
  const json j = {{"cohort_path", c.cohort_path},
                  {"models", models},
                  {"master_seed", c.master_seed},
                  {"epochs", c.epochs},
                  {"batch_size", c.batch_size},
                  {"out_dir", c.out_dir},
                  {"jobs", c.jobs},
                  {"save_checkpoints", save_checkpoints_name(c.save_checkpoints)},
                  {"pretrain_phantoms", c.pretrain_phantoms},
                  {"pretrain_epochs", c.pretrain_epochs},
                  {"km_model", to_string(c.km_model)}};
  return j.dump(2);
}

ExperimentConfig config_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed config: " + std::string(e.what()));
  }
  ExperimentConfig c;
  if (j.contains("cohort_path")) c.cohort_path = j.at("cohort_path").get<std::string>();
  if (j.contains("models")) {
    c.models.clear();
    for (const auto& m : j.at("models")) c.models.push_back(model_kind_from_string(m));
  }
  if (j.contains("master_seed")) c.master_seed = j.at("master_seed").get<uint64_t>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("jobs")) c.jobs = j.at("jobs").get<int>();
  if (j.contains("save_checkpoints")) {
    c.save_checkpoints = save_checkpoints_from(j.at("save_checkpoints").get<std::string>());
  }
  if (j.contains("pretrain_phantoms")) c.pretrain_phantoms = j.at("pretrain_phantoms").get<int>();
  if (j.contains("pretrain_epochs")) c.pretrain_epochs = j.at("pretrain_epochs").get<int>();
  if (j.contains("km_model")) c.km_model = model_kind_from_string(j.at("km_model").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

namespace {

struct PreparedCohort {
  CohortManifest manifest;
  std::map<std::string, Volume> clipped_pet;  // harmonize + clip applied
  std::map<std::string, Volume> clipped_ct;
};

PreparedCohort prepare_cohort(const ExperimentConfig& config, bool need_pet, bool need_ct) {
  PreparedCohort out;
  out.manifest = load_cohort(config.cohort_path);
  const fs::path base = fs::path(config.cohort_path).parent_path();
  for (const auto& r : out.manifest.records) {
    if (need_pet) {
      if (r.pet_path.empty()) throw IoError("record " + r.id + " has no PET volume path");
      Volume v = load_volume((base / r.pet_path).string());
      out.clipped_pet.emplace(r.id, clip_artifacts(harmonize(std::move(v))));
    }
    if (need_ct) {
      if (r.ct_path.empty()) throw IoError("record " + r.id + " has no CT volume path");
      Volume v = load_volume((base / r.ct_path).string());
      out.clipped_ct.emplace(r.id, clip_artifacts(harmonize(std::move(v))));
    }
  }
  return out;
}

struct TaskOutput {
  FoldResult result;
  std::vector<std::string> leakage_notes;
  bool leakage_ok = true;
};

std::string task_tag(ModelKind kind, int rep, int fold) {
  return to_string(kind) + "/rep" + std::to_string(rep) + "/fold" + std::to_string(fold);
}

// Intersection of fitted-statistic ids with the test fold must be empty.
bool audit_fit(const std::vector<std::string>& fit_ids, const std::set<std::string>& test_ids,
               const std::string& component, const std::string& tag,
               std::vector<std::string>& notes) {
  for (const auto& id : fit_ids) {
    if (test_ids.count(id) > 0) {
      notes.push_back("LEAK " + tag + " " + component + " saw test id " + id);
      return false;
    }
  }
  notes.push_back("ok " + tag + " " + component + " fit on " + std::to_string(fit_ids.size()) +
                  " train ids");
  return true;
}

TaskOutput run_task(const ExperimentConfig& config, const PreparedCohort& cohort,
                    const FoldPlan& plan, ModelKind kind, int rep, int fold,
                    const std::vector<std::pair<std::string, Tensor>>* pretrained_ct) {
  TaskOutput out;
  out.result.kind = kind;
  out.result.rep = rep;
  out.result.fold = fold;
  const std::string tag = task_tag(kind, rep, fold);
  const uint64_t task_seed = Rng::derive(config.master_seed, tag);

  const auto& assign = plan.assignments[static_cast<size_t>(rep)];
  std::vector<const PatientRecord*> train_recs, test_recs;
  std::set<std::string> test_ids;
  for (const auto& r : cohort.manifest.records) {
    if (assign.at(r.id) == fold) {
      test_recs.push_back(&r);
      test_ids.insert(r.id);
    } else {
      train_recs.push_back(&r);
    }
  }

  const bool use_pet = kind_uses_pet(kind);
  const bool use_ct = kind_uses_ct(kind);
  const bool use_labs = kind_uses_labs(kind);

  // preprocessing fitted on training folds only
  Normalizer pet_norm, ct_norm;
  if (use_pet) {
    std::vector<const Volume*> train_vols;
    std::vector<std::string> fit_ids;
    for (const auto* r : train_recs) {
      train_vols.push_back(&cohort.clipped_pet.at(r->id));
      fit_ids.push_back(r->id);
    }
    pet_norm = fit_normalizer(train_vols, Modality::PET, fit_ids);
    out.leakage_ok &= audit_fit(pet_norm.fit_on, test_ids, "pet-normalizer", tag, out.leakage_notes);
  }
  if (use_ct) {
    std::vector<const Volume*> train_vols;
    std::vector<std::string> fit_ids;
    for (const auto* r : train_recs) {
      train_vols.push_back(&cohort.clipped_ct.at(r->id));
      fit_ids.push_back(r->id);
    }
    ct_norm = fit_normalizer(train_vols, Modality::CT, fit_ids);
    out.leakage_ok &= audit_fit(ct_norm.fit_on, test_ids, "ct-normalizer", tag, out.leakage_notes);
  }
  LabStats lab_stats;
  if (use_labs) {
    lab_stats = fit_lab_stats(train_recs);
    out.leakage_ok &= audit_fit(lab_stats.fit_on, test_ids, "lab-standardizer", tag, out.leakage_notes);
  }
  if (pretrained_ct != nullptr) {
    // phantom pretraining set must not contain cohort test patients
    std::vector<std::string> phantom_ids;
    for (int i = 0; i < config.pretrain_phantoms; ++i) {
      char buf[24];
      std::snprintf(buf, sizeof(buf), "PHANTOM%04d", i + 1);
      phantom_ids.emplace_back(buf);
    }
    out.leakage_ok &= audit_fit(phantom_ids, test_ids, "pretraining-set", tag, out.leakage_notes);
  }

  // fold-local inputs: resize(normalize(clipped))
  std::map<std::string, std::vector<float>> pet_in, ct_in;
  for (const auto& r : cohort.manifest.records) {
    if (use_pet) {
      pet_in[r.id] = resize_volume(apply_normalizer(cohort.clipped_pet.at(r.id), pet_norm)).voxels;
    }
    if (use_ct) {
      ct_in[r.id] = resize_volume(apply_normalizer(cohort.clipped_ct.at(r.id), ct_norm)).voxels;
    }
  }

  const auto make_input = [&](const PatientRecord& r) {
    ModelInput s;
    s.id = r.id;
    s.label = r.label == PfsLabel::LONG ? 1.0f : 0.0f;
    if (use_pet) s.pet = &pet_in.at(r.id);
    if (use_ct) s.ct = &ct_in.at(r.id);
    if (use_labs) s.labs = standardize_labs(r.labs, lab_stats);
    return s;
  };

  Dataset train_set;
  for (const auto* r : train_recs) train_set.items.push_back(make_input(*r));
  std::vector<ModelInput> test_items;
  for (const auto* r : test_recs) test_items.push_back(make_input(*r));

  ModelSpec spec;
  spec.kind = kind;
  spec.epochs = config.epochs;
  spec.batch_size = config.batch_size;
  spec.seed = task_seed;

  Model model = Model::build(spec);
  if (kind == ModelKind::PETCT_FUSION_PRETRAINED) {
    if (pretrained_ct == nullptr) {
      throw ValidationError("PETCT_FUSION_PRETRAINED requires a pretrained CT encoder");
    }
    model.load_tensors(*pretrained_ct);
  }

  try {
    train(model, train_set, spec);
  } catch (const TrainingDiverged& e) {
    out.result.failed = true;
    out.result.failure = e.what();
    return out;
  }

  std::vector<const ModelInput*> test_ptrs;
  for (const auto& s : test_items) test_ptrs.push_back(&s);
  const std::vector<double> probs = model.predict_proba(test_ptrs);

  stats::ScoredSet scored;
  for (size_t i = 0; i < test_items.size(); ++i) {
    scored.scores.push_back(probs[i]);
    scored.labels.push_back(test_items[i].label == 1.0f ? 1 : 0);
    out.result.predictions.emplace_back(test_items[i].id, scored.labels.back(), probs[i]);
  }
  out.result.auroc = stats::auroc(scored);
  out.result.auprc = stats::auprc(scored);
  out.result.accuracy = stats::accuracy(scored);

  const bool save = config.save_checkpoints == SaveCheckpoints::kAll ||
                    (config.save_checkpoints == SaveCheckpoints::kFirstRepetition && rep == 0);
  if (save && !config.out_dir.empty()) {
    const fs::path ck_dir = fs::path(config.out_dir) / "checkpoints";
    fs::create_directories(ck_dir);
    const std::string base =
        (ck_dir / (to_string(kind) + "_rep" + std::to_string(rep) + "_fold" + std::to_string(fold)))
            .string();
    if (model.is_forest()) {
      std::ofstream f(base + ".forest.json");
      f << forest::forest_to_json(model.forest());
    } else {
      save_checkpoint(base, model.named_tensors());
    }
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<double> fold_metric(const ResultBundle& bundle, ModelKind kind,
                                const std::string& metric) {
  std::vector<double> values(static_cast<size_t>(kRepetitions * kFolds),
                             std::numeric_limits<double>::quiet_NaN());
  for (const auto& fr : bundle.fold_results) {
    if (fr.kind != kind || fr.failed) continue;
    double v = fr.auroc;
    if (metric == "auprc") v = fr.auprc;
    if (metric == "accuracy") v = fr.accuracy;
    values[static_cast<size_t>(fr.rep * kFolds + fr.fold)] = v;
  }
  for (const double v : values) {
    if (std::isnan(v)) {
      throw ValidationError("fold_metric: missing folds for " + to_string(kind));
    }
  }
  return values;
}

std::string metrics_csv(const ResultBundle& bundle) {
  std::ostringstream os;
  os << "model,auroc_mean,auroc_se,auprc_mean,auprc_se,accuracy_mean,accuracy_se\n";
  for (const ModelKind kind : bundle.config.models) {
    try {
      const auto a = stats::summarize_cv(fold_metric(bundle, kind, "auroc"));
      const auto p = stats::summarize_cv(fold_metric(bundle, kind, "auprc"));
      const auto c = stats::summarize_cv(fold_metric(bundle, kind, "accuracy"));
      os << to_string(kind) << "," << format_double(a.mean) << "," << format_double(a.std_error)
         << "," << format_double(p.mean) << "," << format_double(p.std_error) << ","
         << format_double(c.mean) << "," << format_double(c.std_error) << "\n";
    } catch (const ValidationError&) {
      os << to_string(kind) << ",failed,failed,failed,failed,failed,failed\n";
    }
  }
  return os.str();
}

ResultBundle run_experiment(const ExperimentConfig& config) {
  if (config.models.empty()) throw ValidationError("run_experiment: no models configured");
  if (config.epochs < 0 || config.batch_size < 1 || config.jobs < 1) {
    throw ValidationError("run_experiment: invalid epochs/batch_size/jobs");
  }

  bool need_pet = false, need_ct = false;
  bool need_pretrain = false;
  for (const ModelKind k : config.models) {
    need_pet |= kind_uses_pet(k);
    need_ct |= kind_uses_ct(k);
    need_pretrain |= k == ModelKind::PETCT_FUSION_PRETRAINED;
  }

  const PreparedCohort cohort = prepare_cohort(config, need_pet, need_ct);

  std::vector<std::string> ids;
  std::vector<PfsLabel> labels;
  std::map<std::string, double> pfs_by_id;
  for (const auto& r : cohort.manifest.records) {
    ids.push_back(r.id);
    labels.push_back(r.label);
    pfs_by_id[r.id] = r.pfs_months;
  }

  ResultBundle bundle;
  bundle.config = config;
  bundle.plan = make_fold_plan(ids, labels, config.master_seed);

  // one-time CT encoder pretraining on a disjoint phantom set
  std::vector<std::pair<std::string, Tensor>> pretrained_ct;
  if (need_pretrain) {
    const auto phantoms = generate_pretraining_set(
        config.pretrain_phantoms, Rng::derive(config.master_seed, "pretrain"),
        cohort.manifest.generation_params);
    Rng enc_rng(Rng::derive(config.master_seed, "pretrain-init"));
    Encoder3D encoder("ct_enc", kModelVolumeShape, enc_rng);
    PretrainOptions opts;
    opts.epochs = config.pretrain_epochs;
    opts.seed = Rng::derive(config.master_seed, "pretrain-train");
    pretrain_ct_encoder(encoder, phantoms, kModelVolumeShape, opts);
    for (const Param& p : encoder.params()) pretrained_ct.emplace_back(p.name, p.tensor);
  }

  // task list in deterministic order; workers fill indexed slots
  struct Task {
    ModelKind kind;
    int rep, fold;
  };
  std::vector<Task> tasks;
  for (const ModelKind k : config.models) {
    for (int rep = 0; rep < kRepetitions; ++rep) {
      for (int fold = 0; fold < kFolds; ++fold) tasks.push_back({k, rep, fold});
    }
  }
  std::vector<TaskOutput> outputs(tasks.size());
  std::atomic<size_t> next{0};
  std::vector<std::string> errors;
  std::mutex error_mutex;

  const auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      try {
        outputs[i] = run_task(config, cohort, bundle.plan, t.kind, t.rep, t.fold,
                              need_pretrain && t.kind == ModelKind::PETCT_FUSION_PRETRAINED
                                  ? &pretrained_ct
                                  : nullptr);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        errors.push_back(task_tag(t.kind, t.rep, t.fold) + ": " + e.what());
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(config.jobs, static_cast<int>(tasks.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (!errors.empty()) {
    std::string msg = "experiment tasks failed:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ValidationError(msg);
  }

  for (auto& o : outputs) {
    bundle.fold_results.push_back(std::move(o.result));
    bundle.leakage_audit_ok &= o.leakage_ok;
    for (auto& note : o.leakage_notes) bundle.leakage_notes.push_back(std::move(note));
    if (bundle.fold_results.back().failed) ++bundle.failed_folds;
  }

  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    const fs::path out(config.out_dir);

    std::ofstream fm(out / "fold_metrics.csv");
    fm << "model,rep,fold,failed,auroc,auprc,accuracy\n";
    for (const auto& fr : bundle.fold_results) {
      fm << to_string(fr.kind) << "," << fr.rep << "," << fr.fold << "," << (fr.failed ? 1 : 0)
         << "," << format_double(fr.auroc) << "," << format_double(fr.auprc) << ","
         << format_double(fr.accuracy) << "\n";
    }

    std::ofstream pm(out / "predictions.csv");
    pm << "model,rep,fold,patient_id,y_true,y_hat\n";
    for (const auto& fr : bundle.fold_results) {
      for (const auto& [id, y, p] : fr.predictions) {
        pm << to_string(fr.kind) << "," << fr.rep << "," << fr.fold << "," << id << "," << y << ","
           << format_double(p) << "\n";
      }
    }

    std::ofstream mc(out / "metrics.csv");
    mc << metrics_csv(bundle);

    json manifest = {{"version", kVersion},
                     {"config", json::parse(config_to_json(config))},
                     {"failed_folds", bundle.failed_folds},
                     {"leakage_audit_ok", bundle.leakage_audit_ok},
                     {"leakage_notes", bundle.leakage_notes},
                     {"family_sampling_unit", "fold-level AUROC, 15 per model"}};
    std::ofstream mf(out / "manifest.json");
    mf << manifest.dump(2) << "\n";
  }
  return bundle;
}

ResultBundle load_bundle(const std::string& run_dir) {
  const fs::path dir(run_dir);
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot open run manifest in " + run_dir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed run manifest: " + std::string(e.what()));
  }
  ResultBundle bundle;
  {
    const std::string cfg = manifest.at("config").dump();
    std::istringstream is(cfg);
    json j;
    is >> j;
    ExperimentConfig c;
    c.cohort_path = j.at("cohort_path").get<std::string>();
    c.models.clear();
    for (const auto& m : j.at("models")) c.models.push_back(model_kind_from_string(m));
    c.master_seed = j.at("master_seed").get<uint64_t>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.jobs = j.at("jobs").get<int>();
    c.save_checkpoints = save_checkpoints_from(j.at("save_checkpoints").get<std::string>());
    c.pretrain_phantoms = j.at("pretrain_phantoms").get<int>();
    c.pretrain_epochs = j.at("pretrain_epochs").get<int>();
    c.km_model = model_kind_from_string(j.at("km_model").get<std::string>());
    bundle.config = c;
  }
  bundle.failed_folds = manifest.at("failed_folds").get<int>();
  bundle.leakage_audit_ok = manifest.at("leakage_audit_ok").get<bool>();

  std::ifstream fm(dir / "fold_metrics.csv");
  if (!fm) throw IoError("cannot open fold_metrics.csv in " + run_dir);
  std::string line;
  std::getline(fm, line);  // header
  std::map<std::string, FoldResult*> index;
  while (std::getline(fm, line)) {
    std::istringstream is(line);
    std::string kind_s, rep_s, fold_s, failed_s, a, p, c;
    std::getline(is, kind_s, ',');
    std::getline(is, rep_s, ',');
    std::getline(is, fold_s, ',');
    std::getline(is, failed_s, ',');
    std::getline(is, a, ',');
    std::getline(is, p, ',');
    std::getline(is, c, ',');
    FoldResult fr;
    fr.kind = model_kind_from_string(kind_s);
    fr.rep = std::stoi(rep_s);
    fr.fold = std::stoi(fold_s);
    fr.failed = failed_s == "1";
    fr.auroc = std::stod(a);
    fr.auprc = std::stod(p);
    fr.accuracy = std::stod(c);
    bundle.fold_results.push_back(fr);
  }
  for (auto& fr : bundle.fold_results) {
    index[task_tag(fr.kind, fr.rep, fr.fold)] = &fr;
  }

  std::ifstream pm(dir / "predictions.csv");
  if (pm) {
    std::getline(pm, line);
    while (std::getline(pm, line)) {
      std::istringstream is(line);
      std::string kind_s, rep_s, fold_s, id, y_s, p_s;
      std::getline(is, kind_s, ',');
      std::getline(is, rep_s, ',');
      std::getline(is, fold_s, ',');
      std::getline(is, id, ',');
      std::getline(is, y_s, ',');
      std::getline(is, p_s, ',');
      const auto it = index.find(kind_s + "/rep" + rep_s + "/fold" + fold_s);
      if (it != index.end()) {
        it->second->predictions.emplace_back(id, std::stoi(y_s), std::stod(p_s));
      }
    }
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// family comparisons
// ---------------------------------------------------------------------------

std::string to_string(Family f) {
  switch (f) {
    case Family::kUnimodal: return "UNIMODAL";
    case Family::kOneImageFusion: return "ONE_IMAGE_FUSION";
    case Family::kDualFusion: return "DUAL_FUSION";
  }
  return "UNIMODAL";
}

Family family_of(ModelKind k) {
  switch (k) {
    case ModelKind::RF_LABS:
    case ModelKind::PET_ONLY:
    case ModelKind::CT_ONLY:
      return Family::kUnimodal;
    case ModelKind::PET_FUSION:
    case ModelKind::CT_FUSION:
      return Family::kOneImageFusion;
    case ModelKind::PETCT_FUSION:
    case ModelKind::PETCT_FUSION_PRETRAINED:
      return Family::kDualFusion;
  }
  return Family::kUnimodal;
}

std::vector<FamilyComparison> compare_families(const ResultBundle& bundle) {
  std::set<ModelKind> present;
  for (const auto& fr : bundle.fold_results) present.insert(fr.kind);
  for (const ModelKind k : all_model_kinds()) {
    if (present.count(k) == 0) {
      throw ValidationError("compare_families requires all seven kinds; missing " + to_string(k));
    }
  }

  std::map<Family, std::vector<double>> samples;
  for (const auto& fr : bundle.fold_results) {
    if (fr.failed) continue;
    samples[family_of(fr.kind)].push_back(fr.auroc);
  }

  const std::vector<std::pair<Family, Family>> pairs = {
      {Family::kOneImageFusion, Family::kUnimodal},
      {Family::kDualFusion, Family::kOneImageFusion},
  };
  std::vector<double> raw_ps;
  std::vector<FamilyComparison> out;
  for (const auto& [hi, lo] : pairs) {
    FamilyComparison fc;
    fc.higher = hi;
    fc.lower = lo;
    fc.higher_samples = samples.at(hi);
    fc.lower_samples = samples.at(lo);
    fc.mann_whitney = stats::mann_whitney_u(fc.higher_samples, fc.lower_samples);
    fc.cliffs = stats::cliffs_delta(fc.higher_samples, fc.lower_samples);
    raw_ps.push_back(fc.mann_whitney.p_raw);
    out.push_back(std::move(fc));
  }
  const auto adjusted = stats::bonferroni(raw_ps, static_cast<int>(raw_ps.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].mann_whitney.p_adjusted = adjusted[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// KM stratification
// ---------------------------------------------------------------------------

KmStratification km_stratify(const std::vector<std::pair<std::string, double>>& yhat,
                             const std::map<std::string, double>& pfs_by_id, double threshold) {
  if (yhat.empty()) throw ValidationError("km_stratify: no predictions");
  std::vector<double> low_times, high_times;
  for (const auto& [id, p] : yhat) {
    const auto it = pfs_by_id.find(id);
    if (it == pfs_by_id.end()) throw ValidationError("km_stratify: unknown patient id " + id);
    (p < threshold ? low_times : high_times).push_back(it->second);
  }
  KmStratification s;
  if (low_times.empty() || high_times.empty()) {
    s.stratifiable = false;  // single stratum; no test run
    return s;
  }
  s.stratifiable = true;
  s.low = stats::kaplan_meier(low_times);
  s.high = stats::kaplan_meier(high_times);
  s.median_low = stats::km_median(s.low);
  s.median_high = stats::km_median(s.high);
  s.logrank = stats::logrank_test(low_times, high_times);
  return s;
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

namespace {

void write_km_csv(const stats::SurvivalCurve& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write KM curve: " + path);
  f << "time_months,survival,at_risk\n";
  for (size_t i = 0; i < c.event_times.size(); ++i) {
    f << format_double(c.event_times[i]) << "," << format_double(c.survival[i]) << ","
      << c.at_risk[i] << "\n";
  }
}

json test_result_json(const stats::TestResult& t) {
  json j = {{"method", t.method}, {"statistic", t.statistic}, {"p_raw", t.p_raw}};
  if (t.p_adjusted) j["p_adjusted"] = *t.p_adjusted;
  if (t.effect_size) j["effect_size"] = *t.effect_size;
  if (t.effect_band) j["effect_band"] = stats::to_string(*t.effect_band);
  return j;
}

}  // namespace

void export_reports(const ResultBundle& bundle, const CohortManifest& cohort,
                    const std::string& outdir) {
  fs::create_directories(outdir);
  const fs::path out(outdir);

  json manifest = {{"version", kVersion},
                   {"config", json::parse(config_to_json(bundle.config))},
                   {"failed_folds", bundle.failed_folds},
                   {"leakage_audit_ok", bundle.leakage_audit_ok}};

  if (!bundle.fold_results.empty()) {
    std::ofstream mc(out / "metrics.csv");
    mc << metrics_csv(bundle);

    std::ofstream cs(out / "cohort_summary.csv");
    const auto rows = cohort_summary(cohort);
    cs << summary_to_csv(rows);
    std::ofstream ct(out / "cohort_summary.txt");
    ct << summary_to_text(rows);

    // family comparisons, when every kind is present
    try {
      const auto comparisons = compare_families(bundle);
      json fam = json::array();
      for (const auto& fc : comparisons) {
        fam.push_back({{"higher", to_string(fc.higher)},
                       {"lower", to_string(fc.lower)},
                       {"mann_whitney", test_result_json(fc.mann_whitney)},
                       {"cliffs_delta", test_result_json(fc.cliffs)}});
      }
      std::ofstream ff(out / "family_comparisons.json");
      ff << fam.dump(2) << "\n";
    } catch (const ValidationError&) {
      // partial model set: family testing not applicable
    }

    // KM stratification from the configured model's first repetition
    std::map<std::string, double> pfs_by_id;
    for (const auto& r : cohort.records) pfs_by_id[r.id] = r.pfs_months;
    std::vector<std::pair<std::string, double>> yhat;
    for (const auto& fr : bundle.fold_results) {
      if (fr.kind != bundle.config.km_model || fr.rep != 0 || fr.failed) continue;
      for (const auto& [id, y, p] : fr.predictions) {
        (void)y;
        yhat.emplace_back(id, p);
      }
    }
    if (!yhat.empty()) {
      const KmStratification s = km_stratify(yhat, pfs_by_id);
      json kj = {{"model", to_string(bundle.config.km_model)},
                 {"stratifiable", s.stratifiable}};
      if (s.stratifiable) {
        write_km_csv(s.low, (out / "km_pred_low.csv").string());
        write_km_csv(s.high, (out / "km_pred_high.csv").string());
        kj["median_low"] = s.median_low;
        kj["median_high"] = s.median_high;
        kj["logrank"] = test_result_json(s.logrank);
      }
      std::ofstream kf(out / "km_stratification.json");
      kf << kj.dump(2) << "\n";
    }

    // cohort-wide KM curve
    std::vector<double> all_times;
    for (const auto& r : cohort.records) all_times.push_back(r.pfs_months);
    write_km_csv(stats::kaplan_meier(all_times), (out / "km_cohort.csv").string());

    manifest["reports"] = {"metrics.csv",      "cohort_summary.csv", "cohort_summary.txt",
                           "km_cohort.csv",    "km_stratification.json",
                           "family_comparisons.json"};
  }

  std::ofstream mf(out / "report_manifest.json");
  mf << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// explainability artifacts
// ---------------------------------------------------------------------------

void write_explain_artifacts(const ResultBundle& bundle, const CohortManifest& cohort,
                             const std::string& run_dir, const std::string& outdir) {
  fs::create_directories(outdir);
  const fs::path out(outdir);
  const fs::path ck_dir = fs::path(run_dir) / "checkpoints";
  const fs::path cohort_base = fs::path(bundle.config.cohort_path).parent_path();

  // rebuild fold-0 preprocessing for repetition 0 to evaluate saved models
  std::vector<std::string> ids;
  std::vector<PfsLabel> labels;
  for (const auto& r : cohort.records) {
    ids.push_back(r.id);
    labels.push_back(r.label);
  }
  const FoldPlan plan = make_fold_plan(ids, labels, bundle.config.master_seed);

  const auto load_model = [&](ModelKind kind, int rep, int fold) {
    ModelSpec spec;
    spec.kind = kind;
    spec.seed = Rng::derive(bundle.config.master_seed, task_tag(kind, rep, fold));
    Model m = Model::build(spec);
    const std::string base =
        (ck_dir / (to_string(kind) + "_rep" + std::to_string(rep) + "_fold" + std::to_string(fold)))
            .string();
    m.load_tensors(load_checkpoint(base));
    return m;
  };

  // Gradient saliency over every rep-0 test patient for the two PET models.
  const std::vector<ModelKind> grad_kinds = {ModelKind::PET_ONLY, ModelKind::PET_FUSION};
  std::map<ModelKind, std::vector<float>> pooled_samples;
  std::map<ModelKind, std::vector<explain::SaliencyVolume>> pooled_vols;

  for (const ModelKind kind : grad_kinds) {
    bool have_kind = false;
    for (const auto& fr : bundle.fold_results) have_kind |= fr.kind == kind;
    if (!have_kind) continue;

    for (int fold = 0; fold < kFolds; ++fold) {
      Model model = load_model(kind, 0, fold);

      // training-fold preprocessing for this fold
      std::vector<const PatientRecord*> train_recs, test_recs;
      for (const auto& r : cohort.records) {
        (plan.assignments[0].at(r.id) == fold ? test_recs : train_recs).push_back(&r);
      }
      std::map<std::string, Volume> clipped;
      for (const auto& r : cohort.records) {
        Volume v = load_volume((cohort_base / r.pet_path).string());
        clipped.emplace(r.id, clip_artifacts(harmonize(std::move(v))));
      }
      std::vector<const Volume*> train_vols;
      std::vector<std::string> fit_ids;
      for (const auto* r : train_recs) {
        train_vols.push_back(&clipped.at(r->id));
        fit_ids.push_back(r->id);
      }
      const Normalizer norm = fit_normalizer(train_vols, Modality::PET, fit_ids);
      LabStats lab_stats;
      if (kind_uses_labs(kind)) lab_stats = fit_lab_stats(train_recs);

      for (const auto* r : test_recs) {
        const std::vector<float> pet =
            resize_volume(apply_normalizer(clipped.at(r->id), norm)).voxels;
        ModelInput item;
        item.id = r->id;
        item.pet = &pet;
        if (kind_uses_labs(kind)) item.labs = standardize_labs(r->labs, lab_stats);
        const auto sal = explain::input_gradient_saliency(model, item);
        for (const auto& [mod, sv] : sal) {
          if (mod != Modality::PET) continue;
          pooled_samples[kind].insert(pooled_samples[kind].end(), sv.values.begin(),
                                      sv.values.end());
          pooled_vols[kind].push_back(sv);
        }
      }
    }
  }

  if (pooled_samples.count(ModelKind::PET_ONLY) > 0 &&
      pooled_samples.count(ModelKind::PET_FUSION) > 0) {
    const auto report = explain::distribution_distances(pooled_samples[ModelKind::PET_ONLY],
                                                        pooled_samples[ModelKind::PET_FUSION]);
    std::ofstream f(out / "gradient_distances.json");
    f << explain::distance_report_to_json(report) << "\n";
  }

  // overlays for the first rep-0/fold-0 test patient of each PET model
  for (const ModelKind kind : grad_kinds) {
    if (pooled_vols[kind].empty()) continue;
    const explain::SaliencyVolume& sv = pooled_vols[kind].front();
    // base: the patient's preprocessed PET volume, resized to model shape
    for (const auto& r : cohort.records) {
      if (r.id != sv.patient_id) continue;
      Volume v = load_volume((cohort_base / r.pet_path).string());
      const Volume base_vol = resize_volume(clip_artifacts(harmonize(std::move(v))));
      const auto planes = explain::render_slices(sv, base_vol);
      const std::array<std::string, 3> names = {"axial", "coronal", "sagittal"};
      for (int i = 0; i < 3; ++i) {
        explain::write_ppm(planes[static_cast<size_t>(i)],
                           (out / (to_string(kind) + "_" + sv.patient_id + "_" +
                                   names[static_cast<size_t>(i)] + ".ppm"))
                               .string());
      }
      break;
    }
  }
}

}  // namespace petfuse::exp
