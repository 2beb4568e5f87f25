// Command-line driver: generate synthetic cohorts, run the cross-validated
// benchmark, print cohort/family statistics, compute explainability
// artifacts, and export reports.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "petfuse/experiment.hpp"
#include "petfuse/explain.hpp"
#include "petfuse/synthcohort.hpp"

namespace fs = std::filesystem;
using namespace petfuse;

namespace {

std::vector<ModelKind> parse_models(const std::string& csv) {
  if (csv == "all" || csv.empty()) return all_model_kinds();
  std::vector<ModelKind> kinds;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) kinds.push_back(model_kind_from_string(item));
  return kinds;
}

int cmd_generate(const std::string& out_dir, int n, double short_fraction, uint64_t seed) {
  fs::create_directories(fs::path(out_dir) / "volumes");
  CohortManifest cohort = generate_cohort(n, short_fraction, seed);
  for (auto& r : cohort.records) {
    auto [pet, ct] =
        generate_volume_pair(r, Rng::derive(seed, r.id + "/vol"), cohort.generation_params);
    r.pet_path = "volumes/" + r.id + "_pet";
    r.ct_path = "volumes/" + r.id + "_ct";
    save_volume(pet, (fs::path(out_dir) / r.pet_path).string());
    save_volume(ct, (fs::path(out_dir) / r.ct_path).string());
  }
  save_cohort(cohort, (fs::path(out_dir) / "cohort.json").string());
  int n_short = 0;
  for (const auto& r : cohort.records) n_short += r.label == PfsLabel::SHORT ? 1 : 0;
  std::cout << "cohort written to " << out_dir << ": " << cohort.records.size() << " patients, "
            << n_short << " SHORT / " << cohort.records.size() - n_short << " LONG\n";
  return 0;
}

exp::ExperimentConfig make_run_config(const std::string& config_path, const std::string& cohort,
                                      const std::string& models_csv, uint64_t seed,
                                      const std::string& out, int epochs, int batch_size,
                                      int jobs, const std::string& save_ckpt) {
  exp::ExperimentConfig c;
  if (!config_path.empty()) c = exp::config_from_json_file(config_path);
  if (!cohort.empty()) c.cohort_path = cohort;
  if (!models_csv.empty()) c.models = parse_models(models_csv);
  if (seed != 0) c.master_seed = seed;
  if (!out.empty()) c.out_dir = out;
  if (epochs >= 0) c.epochs = epochs;
  if (batch_size > 0) c.batch_size = batch_size;
  if (jobs > 0) c.jobs = jobs;
  if (!save_ckpt.empty()) {
    if (save_ckpt == "none") c.save_checkpoints = exp::SaveCheckpoints::kNone;
    else if (save_ckpt == "first") c.save_checkpoints = exp::SaveCheckpoints::kFirstRepetition;
    else if (save_ckpt == "all") c.save_checkpoints = exp::SaveCheckpoints::kAll;
    else throw ValidationError("--save-checkpoints must be none|first|all");
  }
  if (c.cohort_path.empty()) throw ValidationError("run: a cohort path is required");
  return c;
}

int cmd_run(const exp::ExperimentConfig& config) {
  const auto bundle = exp::run_experiment(config);
  std::cout << exp::metrics_csv(bundle);
  if (bundle.failed_folds > 0) {
    std::cout << "warning: " << bundle.failed_folds << " folds failed (see manifest)\n";
  }
  std::cout << "leakage audit: " << (bundle.leakage_audit_ok ? "ok" : "FAILED") << "\n";
  std::cout << "outputs in " << config.out_dir << "\n";
  return 0;
}

int cmd_stats(const std::string& cohort_path, const std::string& run_dir) {
  if (!cohort_path.empty()) {
    const auto cohort = load_cohort(cohort_path);
    std::cout << summary_to_text(cohort_summary(cohort));
  }
  if (!run_dir.empty()) {
    const auto bundle = exp::load_bundle(run_dir);
    const auto comparisons = exp::compare_families(bundle);
    for (const auto& fc : comparisons) {
      std::printf("%s vs %s: U=%.1f p=%.4g p_adj=%.4g delta=%.3f (%s)\n",
                  exp::to_string(fc.higher).c_str(), exp::to_string(fc.lower).c_str(),
                  fc.mann_whitney.statistic, fc.mann_whitney.p_raw,
                  fc.mann_whitney.p_adjusted.value_or(1.0), fc.cliffs.effect_size.value_or(0.0),
                  stats::to_string(*fc.cliffs.effect_band).c_str());
    }
  }
  if (cohort_path.empty() && run_dir.empty()) {
    throw ValidationError("stats: provide --cohort and/or --run");
  }
  return 0;
}

int cmd_explain(const std::string& run_dir, const std::string& out) {
  const auto bundle = exp::load_bundle(run_dir);
  const auto cohort = load_cohort(bundle.config.cohort_path);
  exp::write_explain_artifacts(bundle, cohort, run_dir, out.empty() ? run_dir : out);
  std::cout << "explainability artifacts written to " << (out.empty() ? run_dir : out) << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out) {
  const auto bundle = exp::load_bundle(run_dir);
  const auto cohort = load_cohort(bundle.config.cohort_path);
  exp::export_reports(bundle, cohort, out.empty() ? run_dir : out);
  std::cout << "reports written to " << (out.empty() ? run_dir : out) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"petfuse: multimodal PFS prediction benchmark on synthetic PET/CT phantoms"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic cohort with volumes");
  std::string gen_out = "cohort";
  int gen_n = 116;
  double gen_frac = 0.36;
  uint64_t gen_seed = 42;
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--n", gen_n, "Number of patients");
  gen->add_option("--short-fraction", gen_frac, "Fraction with PFS <= 12 months");
  gen->add_option("--seed", gen_seed, "Master seed");

  // run
  auto* run = app.add_subcommand("run", "Run the repeated-CV benchmark");
  std::string run_config, run_cohort, run_models, run_out, run_ckpt;
  uint64_t run_seed = 0;
  int run_epochs = -1, run_batch = 0, run_jobs = 0;
  run->add_option("--config", run_config, "Experiment config JSON");
  run->add_option("--cohort", run_cohort, "cohort.json path");
  run->add_option("--models", run_models, "Comma list of model kinds, or 'all'");
  run->add_option("--seed", run_seed, "Master seed (overrides config)");
  run->add_option("--out", run_out, "Output directory");
  run->add_option("--epochs", run_epochs, "Training epochs");
  run->add_option("--batch-size", run_batch, "Mini-batch size");
  run->add_option("--jobs", run_jobs, "Parallel fold workers");
  run->add_option("--save-checkpoints", run_ckpt, "none|first|all");

  // stats
  auto* st = app.add_subcommand("stats", "Cohort summary and family significance tests");
  std::string st_cohort, st_run;
  st->add_option("--cohort", st_cohort, "cohort.json path");
  st->add_option("--run", st_run, "Run directory (for family tests)");

  // explain
  auto* ex = app.add_subcommand("explain", "Saliency, gradient distances, importances");
  std::string ex_run, ex_out;
  ex->add_option("--run", ex_run, "Run directory")->required();
  ex->add_option("--out", ex_out, "Output directory (defaults to run dir)");

  // report
  auto* rp = app.add_subcommand("report", "Export metric/cohort/KM reports");
  std::string rp_run, rp_out;
  rp->add_option("--run", rp_run, "Run directory")->required();
  rp->add_option("--out", rp_out, "Output directory (defaults to run dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(gen_out, gen_n, gen_frac, gen_seed);
    if (run->parsed()) {
      return cmd_run(make_run_config(run_config, run_cohort, run_models, run_seed, run_out,
                                     run_epochs, run_batch, run_jobs, run_ckpt));
    }
    if (st->parsed()) return cmd_stats(st_cohort, st_run);
    if (ex->parsed()) return cmd_explain(ex_run, ex_out);
    if (rp->parsed()) return cmd_report(rp_run, rp_out);
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
