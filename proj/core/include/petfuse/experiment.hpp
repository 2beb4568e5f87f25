// Experiment orchestration: stratified repeated-CV fold planning, the
// seven-model benchmark, model-family significance testing, Kaplan-Meier
// stratification by prediction, and report export.
//
// Every stochastic choice derives from the master seed before any task is
// dispatched, so results are identical for any worker count.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "petfuse/models.hpp"
#include "petfuse/stats.hpp"
#include "petfuse/synthcohort.hpp"

namespace petfuse::exp {

inline constexpr int kRepetitions = 5;
inline constexpr int kFolds = 3;

struct FoldPlan {
  uint64_t seed = 0;
  // one map per repetition: patient id -> fold in {0,1,2}
  std::vector<std::map<std::string, int>> assignments;
};

// Stratified shuffled round-robin: class ratio per fold within +/-1, fold
// sizes within +/-1, every patient in exactly one fold per repetition.
FoldPlan make_fold_plan(const std::vector<std::string>& ids,
                        const std::vector<PfsLabel>& labels, uint64_t seed);

enum class SaveCheckpoints { kNone, kFirstRepetition, kAll };

struct ExperimentConfig {
  std::string cohort_path;  // cohort.json; volume paths resolve relative to it
  std::vector<ModelKind> models = all_model_kinds();
  uint64_t master_seed = 42;
  int epochs = kDefaultEpochs;
  int batch_size = kDefaultBatchSize;
  std::string out_dir = "runout";
  int jobs = 1;
  SaveCheckpoints save_checkpoints = SaveCheckpoints::kFirstRepetition;
  int pretrain_phantoms = 24;
  int pretrain_epochs = 8;
  ModelKind km_model = ModelKind::PET_FUSION;  // Kaplan-Meier stratification source
};

ExperimentConfig config_from_json_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& c);

struct FoldResult {
  ModelKind kind = ModelKind::RF_LABS;
  int rep = 0;
  int fold = 0;
  bool failed = false;
  std::string failure;
  double auroc = 0.0;
  double auprc = 0.0;
  double accuracy = 0.0;
  // test-fold predictions: (patient id, true label, predicted probability)
  std::vector<std::tuple<std::string, int, double>> predictions;
};

struct ResultBundle {
  ExperimentConfig config;
  FoldPlan plan;
  std::vector<FoldResult> fold_results;
  int failed_folds = 0;
  bool leakage_audit_ok = true;
  std::vector<std::string> leakage_notes;
};

// Full benchmark: per (kind, repetition, fold): fit preprocessing on the
// training folds, train, score the test fold; writes fold_metrics.csv,
// metrics.csv, predictions.csv, manifest.json and checkpoints under
// config.out_dir. Training divergence fails the fold, not the run.
ResultBundle run_experiment(const ExperimentConfig& config);

// Reads a run directory written by run_experiment back into a bundle.
ResultBundle load_bundle(const std::string& run_dir);

// Fold-level metric values for one kind in repetition-major order; requires
// all 15 folds present (throws on failures).
std::vector<double> fold_metric(const ResultBundle& bundle, ModelKind kind,
                                const std::string& metric);

enum class Family { kUnimodal, kOneImageFusion, kDualFusion };
std::string to_string(Family f);
Family family_of(ModelKind k);

struct FamilyComparison {
  Family higher = Family::kDualFusion;  // hypothesized stronger family
  Family lower = Family::kUnimodal;
  std::vector<double> higher_samples;   // pooled fold-level AUROC
  std::vector<double> lower_samples;
  stats::TestResult mann_whitney;       // p_adjusted carries the Bonferroni value
  stats::TestResult cliffs;
};

// One-image fusion vs unimodal, then dual fusion vs one-image fusion;
// Bonferroni over the two comparisons. Requires all seven kinds in the
// bundle.
std::vector<FamilyComparison> compare_families(const ResultBundle& bundle);

struct KmStratification {
  bool stratifiable = false;
  stats::SurvivalCurve low;    // yhat < threshold
  stats::SurvivalCurve high;   // yhat >= threshold
  double median_low = 0.0;
  double median_high = 0.0;
  stats::TestResult logrank;
};

KmStratification km_stratify(const std::vector<std::pair<std::string, double>>& yhat,
                             const std::map<std::string, double>& pfs_by_id,
                             double threshold = 0.5);

// Writes the Table-2 style metrics CSV, cohort summary CSV/text, KM step
// CSVs with the log-rank result, family comparison JSON and the run
// manifest into outdir. An empty bundle produces the manifest only.
void export_reports(const ResultBundle& bundle, const CohortManifest& cohort,
                    const std::string& outdir);

// Saliency volumes/overlays, pooled gradient histograms and the distance
// report comparing PET_ONLY against PET_FUSION, plus feature importances;
// needs the checkpoints saved by run_experiment.
void write_explain_artifacts(const ResultBundle& bundle, const CohortManifest& cohort,
                             const std::string& run_dir, const std::string& outdir);

// metrics.csv content (model, auroc_mean, auroc_se, auprc_mean, auprc_se,
// accuracy_mean, accuracy_se), rows in config model order.
std::string metrics_csv(const ResultBundle& bundle);

}  // namespace petfuse::exp
