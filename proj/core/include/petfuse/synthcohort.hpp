// Synthetic cohort generator with planted, complementary lab/imaging signal,
// plus the stratified cohort summary table.
//
// Outcome rule: each patient carries two latent axes, lesion burden and a
// tumor-marker level. A patient is SHORT (progression within a year) when
// both latents are high, up to a noise term; the latents are negatively
// correlated, so neither laboratory values alone nor imaging alone recovers
// the outcome well, while their combination does. generate_cohort assigns
// exactly round(n * short_fraction) SHORT labels by ranking the noisy
// interaction score.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "petfuse/volume.hpp"

namespace petfuse {

struct LabPanel {
  double ast_u_per_l = 0.0;
  double alt_u_per_l = 0.0;
  double ggt_u_per_l = 0.0;
  double cga_ug_per_l = 0.0;
  double de_ritis = 0.0;  // ast/alt, kept consistent by make_lab_panel

  void validate() const;
};

LabPanel make_lab_panel(double ast, double alt, double ggt, double cga);

enum class PfsLabel { SHORT, LONG };  // SHORT: pfs <= 12 months
enum class Sex { kMale, kFemale };

std::string to_string(PfsLabel l);
std::string to_string(Sex s);

struct PatientRecord {
  std::string id;
  Sex sex = Sex::kMale;
  LabPanel labs;
  double pfs_months = 0.0;
  bool event = true;  // every patient progresses; no censoring
  PfsLabel label = PfsLabel::LONG;
  double latent_burden = 0.0;  // [0,1], combined disease burden (outcome-relevant)
  double latent_marker = 0.0;  // [0,1], drives CgA/GGT
  // Burden splits into a PET-expressed and a CT-expressed component; when
  // negative (hand-built records) the combined latent drives both modalities.
  double latent_burden_pet = -1.0;
  double latent_burden_ct = -1.0;
  std::string pet_path;        // .vol path bases, empty until volumes exist
  std::string ct_path;
};

struct GenerationParams {
  // outcome rule
  double latent_anticorrelation = 0.4;  // shared-factor weight between axes
  double outcome_noise = 0.14;          // eta on the interaction score
  double marker_shift = 0.05;           // loosens the marker arm of the AND rule
  double pfs_threshold_months = 12.0;

  // laboratory log-normal parameters and their coupling to the marker latent
  double cga_log_mu = 6.04, cga_log_sigma = 1.45, cga_marker_weight = 0.85;
  double ggt_log_mu = 4.11, ggt_log_sigma = 0.85, ggt_marker_weight = 0.45;
  double ast_log_mu = 3.33, ast_log_sigma = 0.45, ast_marker_weight = 0.20;
  double alt_log_mu = 3.33, alt_log_sigma = 0.55;
  double male_fraction = 0.59;

  // phantom geometry (generated at this shape, resized downstream)
  std::array<int, 3> volume_shape{96, 64, 64};
  std::array<double, 3> spacing_mm{4.0, 4.0, 4.0};
  int max_lesions = 8;
  double lesion_sigma_min_vox = 2.5, lesion_sigma_max_vox = 4.0;
  double pet_body_uptake = 0.5;      // background level inside the body
  double pet_outside_uptake = 0.05;
  double pet_noise_amplitude = 0.1;  // uniform +/- amplitude (bounded)
  double pet_lesion_peak_base = 0.7, pet_lesion_peak_burden_gain = 1.6;
  double ct_lesion_contrast_min = 150.0, ct_lesion_contrast_max = 300.0;
  double ct_noise_amplitude = 5.0;
};

struct CohortManifest {
  uint64_t seed = 0;
  std::vector<PatientRecord> records;
  GenerationParams generation_params;
};

// Deterministic given seed; n >= 6, 0 < short_fraction < 1, both labels
// guaranteed present.
CohortManifest generate_cohort(int n, double short_fraction, uint64_t seed,
                               const GenerationParams& params = {});

// Pre-aligned PET/CT phantom pair for one patient. CT is an ellipsoidal body
// with organ-like intensity bands; PET is low background plus K Gaussian
// lesion blobs whose count and peak encode latent_burden. Volumes are
// returned in stored units with non-trivial rescale metadata.
std::pair<Volume, Volume> generate_volume_pair(const PatientRecord& record, uint64_t seed,
                                               const GenerationParams& params = {});

// CT phantom plus its lesion voxel fraction, for encoder pretraining.
struct PhantomSample {
  std::string id;
  Volume ct;
  double lesion_fraction = 0.0;
  double burden = 0.0;
};

std::vector<PhantomSample> generate_pretraining_set(int count, uint64_t seed,
                                                    const GenerationParams& params = {});

// cohort.json round trip
void save_cohort(const CohortManifest& m, const std::string& path);
CohortManifest load_cohort(const std::string& path);

// One row of the Table-1 style summary: formatted per-stratum cells plus the
// p-value of the appropriate test (Fisher for categorical, Mann-Whitney for
// continuous).
struct SummaryRow {
  std::string variable;
  std::string total;
  std::string group_short;
  std::string group_long;
  double p_value = 1.0;
  std::string test;
};

std::vector<SummaryRow> cohort_summary(const CohortManifest& m);
std::string summary_to_csv(const std::vector<SummaryRow>& rows);
std::string summary_to_text(const std::vector<SummaryRow>& rows);

}  // namespace petfuse
