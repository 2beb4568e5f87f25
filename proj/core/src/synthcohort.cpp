#include "petfuse/synthcohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "petfuse/rng.hpp"
#include "petfuse/stats.hpp"

namespace petfuse {

using nlohmann::json;

namespace {

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Acklam's rational approximation of the probit function, refined with one
// Halley step; ample for latent-view sampling.
double probit(double p) {
  p = std::min(std::max(p, 1e-12), 1.0 - 1e-12);
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= phigh) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

struct LatentDraw {
  double z_burden, z_marker, score;
};

}  // namespace

void LabPanel::validate() const {
  if (!(ast_u_per_l > 0.0 && alt_u_per_l > 0.0 && ggt_u_per_l > 0.0 && cga_ug_per_l > 0.0)) {
    throw ValidationError("lab panel values must be positive");
  }
  if (std::abs(de_ritis - ast_u_per_l / alt_u_per_l) > 1e-9) {
    throw ValidationError("de_ritis must equal ast/alt");
  }
}

LabPanel make_lab_panel(double ast, double alt, double ggt, double cga) {
  LabPanel p;
  p.ast_u_per_l = ast;
  p.alt_u_per_l = alt;
  p.ggt_u_per_l = ggt;
  p.cga_ug_per_l = cga;
  p.de_ritis = ast / alt;
  p.validate();
  return p;
}

std::string to_string(PfsLabel l) { return l == PfsLabel::SHORT ? "SHORT" : "LONG"; }
std::string to_string(Sex s) { return s == Sex::kMale ? "M" : "F"; }

CohortManifest generate_cohort(int n, double short_fraction, uint64_t seed,
                               const GenerationParams& params) {
  if (n < 6) throw ValidationError("generate_cohort: n must be >= 6");
  if (!(short_fraction > 0.0 && short_fraction < 1.0)) {
    throw ValidationError("generate_cohort: short_fraction must lie in (0, 1)");
  }
  const int n_short = static_cast<int>(std::llround(n * short_fraction));
  if (n_short < 1 || n_short >= n) {
    throw ValidationError("generate_cohort: short_fraction leaves an empty class");
  }

  CohortManifest m;
  m.seed = seed;
  m.generation_params = params;
  m.records.resize(static_cast<size_t>(n));

  const double lam = params.latent_anticorrelation;
  const double w_shared = std::sqrt(lam);
  const double w_own = std::sqrt(1.0 - lam);

  std::vector<LatentDraw> latents(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    PatientRecord& r = m.records[static_cast<size_t>(i)];
    char buf[16];
    std::snprintf(buf, sizeof(buf), "P%04d", i + 1);
    r.id = buf;
    Rng rng(Rng::derive(seed, r.id));

    const double g = rng.normal();
    // burden = combination of a PET-expressed and a CT-expressed component,
    // so each modality carries an irreplaceable share of the signal
    const double e_pet = rng.normal();
    const double e_ct = rng.normal();
    const double zb = w_own * (e_pet + e_ct) / std::sqrt(2.0) - w_shared * g;
    const double zc = w_own * rng.normal() + w_shared * g;
    const double joint =
        std::min(phi(zb), std::min(1.0, phi(zc) + params.marker_shift));
    latents[static_cast<size_t>(i)] = {zb, zc, joint + params.outcome_noise * rng.normal()};
    r.latent_burden = phi(zb);
    r.latent_marker = phi(zc);
    r.latent_burden_pet = phi(e_pet);
    r.latent_burden_ct = phi(e_ct);
    r.sex = rng.uniform() < params.male_fraction ? Sex::kMale : Sex::kFemale;

    const auto coupled = [&](double weight, double mu, double sigma) {
      const double z = weight * zc + std::sqrt(1.0 - weight * weight) * rng.normal();
      return std::exp(mu + sigma * z);
    };
    const double cga = coupled(params.cga_marker_weight, params.cga_log_mu, params.cga_log_sigma);
    const double ggt = coupled(params.ggt_marker_weight, params.ggt_log_mu, params.ggt_log_sigma);
    const double ast = coupled(params.ast_marker_weight, params.ast_log_mu, params.ast_log_sigma);
    const double alt = rng.lognormal(params.alt_log_mu, params.alt_log_sigma);
    r.labs = make_lab_panel(ast, alt, ggt, cga);
  }

  // Exactly n_short SHORT labels: rank by the noisy interaction score.
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return latents[static_cast<size_t>(a)].score > latents[static_cast<size_t>(b)].score;
  });
  for (int k = 0; k < n; ++k) {
    m.records[static_cast<size_t>(order[static_cast<size_t>(k)])].label =
        k < n_short ? PfsLabel::SHORT : PfsLabel::LONG;
  }

  // PFS months conditional on the label, straddling the 12-month threshold.
  const double thr = params.pfs_threshold_months;
  for (auto& r : m.records) {
    Rng rng(Rng::derive(Rng::derive(seed, r.id), "pfs"));
    if (r.label == PfsLabel::SHORT) {
      const double u = rng.uniform();
      r.pfs_months = thr * (0.12 + 0.88 * u);
    } else {
      r.pfs_months = thr + 6.0 * std::exp(0.75 * rng.normal());
    }
    r.event = true;
  }
  return m;
}

// ---------------------------------------------------------------------------
// phantom volumes
// ---------------------------------------------------------------------------

namespace {

struct Ellipsoid {
  double cz, cy, cx;  // center, voxel units
  double rz, ry, rx;  // semi-axes
  bool contains(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c <= 1.0;
  }
};

struct Lesion {
  double cz, cy, cx;
  double sigma;
  double pet_peak;
  double ct_contrast;
};

}  // namespace

namespace {
struct PhantomPair {
  Volume pet;
  Volume ct;
  double lesion_fraction = 0.0;  // voxels within the half-peak radius of any lesion
};

PhantomPair make_phantom(double burden_pet, double burden_ct, uint64_t seed,
                         const GenerationParams& params);
}  // namespace

std::pair<Volume, Volume> generate_volume_pair(const PatientRecord& record, uint64_t seed,
                                               const GenerationParams& params) {
  const double bp = record.latent_burden_pet >= 0.0 ? record.latent_burden_pet
                                                    : record.latent_burden;
  const double bc = record.latent_burden_ct >= 0.0 ? record.latent_burden_ct
                                                   : record.latent_burden;
  PhantomPair p = make_phantom(bp, bc, seed, params);
  return {std::move(p.pet), std::move(p.ct)};
}

namespace {
PhantomPair make_phantom(double burden_pet, double burden_ct, uint64_t seed,
                         const GenerationParams& params) {
  Rng rng(Rng::derive(seed, "volumes"));
  const int D = params.volume_shape[0], H = params.volume_shape[1], W = params.volume_shape[2];

  Volume pet, ct;
  pet.modality = Modality::PET;
  ct.modality = Modality::CT;
  pet.shape = ct.shape = params.volume_shape;
  pet.spacing_mm = ct.spacing_mm = params.spacing_mm;
  pet.voxels.assign(static_cast<size_t>(pet.numel()), 0.0f);
  ct.voxels.assign(static_cast<size_t>(ct.numel()), 0.0f);

  // Body and organs with mild per-patient jitter.
  const double jz = rng.normal(0.0, 1.0), jy = rng.normal(0.0, 0.8), jx = rng.normal(0.0, 0.8);
  const Ellipsoid body{D * 0.5 + jz, H * 0.5 + jy, W * 0.5 + jx,
                       D * 0.46, H * 0.40, W * 0.38};
  const Ellipsoid lung_l{D * 0.72, H * 0.45, W * 0.34, D * 0.14, H * 0.18, W * 0.12};
  const Ellipsoid lung_r{D * 0.72, H * 0.45, W * 0.66, D * 0.14, H * 0.18, W * 0.12};
  const Ellipsoid liver{D * 0.45 + 0.3 * jz, H * 0.52, W * 0.40, D * 0.16, H * 0.22, W * 0.22};
  const Ellipsoid spine{body.cz, H * 0.78, W * 0.5, D * 0.46, H * 0.05, W * 0.05};

  const int n_pet = static_cast<int>(std::llround(burden_pet * params.max_lesions));
  const int n_ct = static_cast<int>(std::llround(burden_ct * params.max_lesions));
  const int n_lesions = std::max(n_pet, n_ct);
  std::vector<Lesion> lesions;
  lesions.reserve(static_cast<size_t>(n_lesions));
  for (int k = 0; k < n_lesions; ++k) {
    // rejection-sample a center inside the liver
    double cz = liver.cz, cy = liver.cy, cx = liver.cx;
    for (int tries = 0; tries < 64; ++tries) {
      const double z = liver.cz + (2.0 * rng.uniform() - 1.0) * liver.rz;
      const double y = liver.cy + (2.0 * rng.uniform() - 1.0) * liver.ry;
      const double x = liver.cx + (2.0 * rng.uniform() - 1.0) * liver.rx;
      if (liver.contains(z, y, x)) {
        cz = z; cy = y; cx = x;
        break;
      }
    }
    Lesion l;
    l.cz = cz; l.cy = cy; l.cx = cx;
    l.sigma = params.lesion_sigma_min_vox +
              rng.uniform() * (params.lesion_sigma_max_vox - params.lesion_sigma_min_vox);
    // lesion k is PET-avid and/or CT-visible according to the modality views
    const double pet_vis = k < n_pet ? 1.0 : 0.0;
    const double ct_vis = k < n_ct ? 1.0 : 0.0;
    l.pet_peak = pet_vis *
                 (params.pet_lesion_peak_base +
                  params.pet_lesion_peak_burden_gain * burden_pet) *
                 (0.75 + 0.5 * rng.uniform());
    l.ct_contrast = ct_vis * (params.ct_lesion_contrast_min +
                              rng.uniform() * (params.ct_lesion_contrast_max -
                                               params.ct_lesion_contrast_min));
    lesions.push_back(l);
  }

  int64_t lesion_voxels = 0;
  int64_t idx = 0;
  for (int z = 0; z < D; ++z) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x, ++idx) {
        const double zz = z, yy = y, xx = x;
        double hu;
        double uptake;
        if (!body.contains(zz, yy, xx)) {
          hu = -1000.0;
          uptake = params.pet_outside_uptake;
        } else {
          hu = 40.0;
          uptake = params.pet_body_uptake;
          if (lung_l.contains(zz, yy, xx) || lung_r.contains(zz, yy, xx)) hu = -700.0;
          if (spine.contains(zz, yy, xx)) hu = 250.0;
          if (liver.contains(zz, yy, xx)) hu = 60.0;
        }
        bool inside_lesion = false;
        for (const Lesion& l : lesions) {
          const double dz = zz - l.cz, dy = yy - l.cy, dx = xx - l.cx;
          const double d2 = dz * dz + dy * dy + dx * dx;
          const double s2 = l.sigma * l.sigma;
          if (d2 < 16.0 * s2) {
            const double g = std::exp(-0.5 * d2 / s2);
            uptake += l.pet_peak * g;
            hu += l.ct_contrast * g;
            if (g >= 0.5 && l.ct_contrast > 0.0) inside_lesion = true;  // half-peak radius
          }
        }
        if (inside_lesion) ++lesion_voxels;
        pet.voxels[static_cast<size_t>(idx)] = static_cast<float>(uptake);
        ct.voxels[static_cast<size_t>(idx)] = static_cast<float>(hu);
      }
    }
  }

  // Bounded uniform noise so background maxima stay within 3 sigma.
  for (float& v : pet.voxels) {
    v += static_cast<float>((2.0 * rng.uniform() - 1.0) * params.pet_noise_amplitude);
  }
  for (float& v : ct.voxels) {
    v += static_cast<float>((2.0 * rng.uniform() - 1.0) * params.ct_noise_amplitude);
  }

  // Stored units with DICOM-style rescale metadata; harmonize() undoes this.
  for (float& v : pet.voxels) v *= 100.0f;  // counts at slope 0.01
  pet.rescale_slope = 0.01;
  pet.rescale_intercept = 0.0;
  for (float& v : ct.voxels) v += 1024.0f;  // unsigned storage at intercept -1024
  ct.rescale_slope = 1.0;
  ct.rescale_intercept = -1024.0;

  PhantomPair out;
  out.pet = std::move(pet);
  out.ct = std::move(ct);
  out.lesion_fraction =
      static_cast<double>(lesion_voxels) / static_cast<double>(out.ct.numel());
  return out;
}
}  // namespace

std::vector<PhantomSample> generate_pretraining_set(int count, uint64_t seed,
                                                    const GenerationParams& params) {
  if (count < 1) throw ValidationError("generate_pretraining_set: count must be >= 1");
  std::vector<PhantomSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    PhantomSample s;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "PHANTOM%04d", i + 1);
    s.id = buf;
    Rng rng(Rng::derive(seed, s.id));
    s.burden = rng.uniform();

    PhantomPair p = make_phantom(s.burden, s.burden, Rng::derive(seed, s.id), params);
    s.lesion_fraction = p.lesion_fraction;
    s.ct = std::move(p.ct);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// manifest I/O
// ---------------------------------------------------------------------------

namespace {

json params_to_json(const GenerationParams& p) {
  return json{{"latent_anticorrelation", p.latent_anticorrelation},
              {"outcome_noise", p.outcome_noise},
              {"marker_shift", p.marker_shift},
              {"pfs_threshold_months", p.pfs_threshold_months},
              {"cga_log_mu", p.cga_log_mu},
              {"cga_log_sigma", p.cga_log_sigma},
              {"cga_marker_weight", p.cga_marker_weight},
              {"ggt_log_mu", p.ggt_log_mu},
              {"ggt_log_sigma", p.ggt_log_sigma},
              {"ggt_marker_weight", p.ggt_marker_weight},
              {"ast_log_mu", p.ast_log_mu},
              {"ast_log_sigma", p.ast_log_sigma},
              {"ast_marker_weight", p.ast_marker_weight},
              {"alt_log_mu", p.alt_log_mu},
              {"alt_log_sigma", p.alt_log_sigma},
              {"male_fraction", p.male_fraction},
              {"volume_shape", p.volume_shape},
              {"spacing_mm", p.spacing_mm},
              {"max_lesions", p.max_lesions},
              {"lesion_sigma_min_vox", p.lesion_sigma_min_vox},
              {"lesion_sigma_max_vox", p.lesion_sigma_max_vox},
              {"pet_body_uptake", p.pet_body_uptake},
              {"pet_outside_uptake", p.pet_outside_uptake},
              {"pet_noise_amplitude", p.pet_noise_amplitude},
              {"pet_lesion_peak_base", p.pet_lesion_peak_base},
              {"pet_lesion_peak_burden_gain", p.pet_lesion_peak_burden_gain},
              {"ct_lesion_contrast_min", p.ct_lesion_contrast_min},
              {"ct_lesion_contrast_max", p.ct_lesion_contrast_max},
              {"ct_noise_amplitude", p.ct_noise_amplitude}};
}

GenerationParams params_from_json(const json& j) {
  GenerationParams p;
  p.latent_anticorrelation = j.at("latent_anticorrelation").get<double>();
  p.outcome_noise = j.at("outcome_noise").get<double>();
  p.marker_shift = j.at("marker_shift").get<double>();
  p.pfs_threshold_months = j.at("pfs_threshold_months").get<double>();
  p.cga_log_mu = j.at("cga_log_mu").get<double>();
  p.cga_log_sigma = j.at("cga_log_sigma").get<double>();
  p.cga_marker_weight = j.at("cga_marker_weight").get<double>();
  p.ggt_log_mu = j.at("ggt_log_mu").get<double>();
  p.ggt_log_sigma = j.at("ggt_log_sigma").get<double>();
  p.ggt_marker_weight = j.at("ggt_marker_weight").get<double>();
  p.ast_log_mu = j.at("ast_log_mu").get<double>();
  p.ast_log_sigma = j.at("ast_log_sigma").get<double>();
  p.ast_marker_weight = j.at("ast_marker_weight").get<double>();
  p.alt_log_mu = j.at("alt_log_mu").get<double>();
  p.alt_log_sigma = j.at("alt_log_sigma").get<double>();
  p.male_fraction = j.at("male_fraction").get<double>();
  p.volume_shape = j.at("volume_shape").get<std::array<int, 3>>();
  p.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
  p.max_lesions = j.at("max_lesions").get<int>();
  p.lesion_sigma_min_vox = j.at("lesion_sigma_min_vox").get<double>();
  p.lesion_sigma_max_vox = j.at("lesion_sigma_max_vox").get<double>();
  p.pet_body_uptake = j.at("pet_body_uptake").get<double>();
  p.pet_outside_uptake = j.at("pet_outside_uptake").get<double>();
  p.pet_noise_amplitude = j.at("pet_noise_amplitude").get<double>();
  p.pet_lesion_peak_base = j.at("pet_lesion_peak_base").get<double>();
  p.pet_lesion_peak_burden_gain = j.at("pet_lesion_peak_burden_gain").get<double>();
  p.ct_lesion_contrast_min = j.at("ct_lesion_contrast_min").get<double>();
  p.ct_lesion_contrast_max = j.at("ct_lesion_contrast_max").get<double>();
  p.ct_noise_amplitude = j.at("ct_noise_amplitude").get<double>();
  return p;
}

}  // namespace

void save_cohort(const CohortManifest& m, const std::string& path) {
  json recs = json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"id", r.id},
                    {"sex", to_string(r.sex)},
                    {"ast_u_per_l", r.labs.ast_u_per_l},
                    {"alt_u_per_l", r.labs.alt_u_per_l},
                    {"ggt_u_per_l", r.labs.ggt_u_per_l},
                    {"cga_ug_per_l", r.labs.cga_ug_per_l},
                    {"de_ritis", r.labs.de_ritis},
                    {"pfs_months", r.pfs_months},
                    {"event", r.event},
                    {"label", to_string(r.label)},
                    {"latent_burden", r.latent_burden},
                    {"latent_marker", r.latent_marker},
                    {"latent_burden_pet", r.latent_burden_pet},
                    {"latent_burden_ct", r.latent_burden_ct},
                    {"pet_path", r.pet_path},
                    {"ct_path", r.ct_path}});
  }
  const json j = {{"seed", m.seed},
                  {"generation_params", params_to_json(m.generation_params)},
                  {"records", recs}};
  std::ofstream f(path);
  if (!f) throw IoError("cannot write cohort manifest: " + path);
  f << j.dump(2) << "\n";
}

CohortManifest load_cohort(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open cohort manifest: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed cohort manifest: " + std::string(e.what()));
  }
  CohortManifest m;
  m.seed = j.at("seed").get<uint64_t>();
  m.generation_params = params_from_json(j.at("generation_params"));
  for (const auto& rj : j.at("records")) {
    PatientRecord r;
    r.id = rj.at("id").get<std::string>();
    r.sex = rj.at("sex").get<std::string>() == "M" ? Sex::kMale : Sex::kFemale;
    r.labs = make_lab_panel(rj.at("ast_u_per_l").get<double>(), rj.at("alt_u_per_l").get<double>(),
                            rj.at("ggt_u_per_l").get<double>(), rj.at("cga_ug_per_l").get<double>());
    r.pfs_months = rj.at("pfs_months").get<double>();
    r.event = rj.at("event").get<bool>();
    r.label = rj.at("label").get<std::string>() == "SHORT" ? PfsLabel::SHORT : PfsLabel::LONG;
    r.latent_burden = rj.at("latent_burden").get<double>();
    r.latent_marker = rj.at("latent_marker").get<double>();
    r.latent_burden_pet = rj.at("latent_burden_pet").get<double>();
    r.latent_burden_ct = rj.at("latent_burden_ct").get<double>();
    r.pet_path = rj.at("pet_path").get<std::string>();
    r.ct_path = rj.at("ct_path").get<std::string>();
    const bool derived_short = r.pfs_months <= m.generation_params.pfs_threshold_months;
    if (derived_short != (r.label == PfsLabel::SHORT)) {
      throw ValidationError("cohort record label inconsistent with pfs_months: " + r.id);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

// ---------------------------------------------------------------------------
// summary table
// ---------------------------------------------------------------------------

namespace {

std::string fmt_median_range(const std::vector<double>& v) {
  if (v.empty()) return "-";
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  const size_t n = s.size();
  const double med = n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  std::ostringstream os;
  os.precision(3);
  os << med << " (" << s.front() << "-" << s.back() << ")";
  return os.str();
}

std::string fmt_count_pct(int64_t k, int64_t n) {
  std::ostringstream os;
  os << k << " (" << std::llround(100.0 * static_cast<double>(k) / static_cast<double>(n)) << "%)";
  return os.str();
}

}  // namespace

std::vector<SummaryRow> cohort_summary(const CohortManifest& m) {
  std::vector<const PatientRecord*> short_g, long_g;
  for (const auto& r : m.records) {
    (r.label == PfsLabel::SHORT ? short_g : long_g).push_back(&r);
  }
  if (short_g.empty() || long_g.empty()) {
    throw ValidationError("cohort_summary: both strata must be non-empty");
  }
  const int64_t n = static_cast<int64_t>(m.records.size());
  const int64_t ns = static_cast<int64_t>(short_g.size());
  const int64_t nl = static_cast<int64_t>(long_g.size());

  std::vector<SummaryRow> rows;
  rows.push_back({"Patient Count", fmt_count_pct(n, n), fmt_count_pct(ns, n),
                  fmt_count_pct(nl, n), 1.0, ""});

  const auto count_sex = [](const std::vector<const PatientRecord*>& g, Sex s) {
    return static_cast<int64_t>(
        std::count_if(g.begin(), g.end(), [&](const PatientRecord* r) { return r->sex == s; }));
  };
  const int64_t ms = count_sex(short_g, Sex::kMale), ml = count_sex(long_g, Sex::kMale);
  const auto sex_test = stats::fisher_exact_2x2({{{ms, ns - ms}, {ml, nl - ml}}});
  rows.push_back({"Male", fmt_count_pct(ms + ml, n), fmt_count_pct(ms, ns),
                  fmt_count_pct(ml, nl), sex_test.p_raw, "fisher-exact"});
  rows.push_back({"Female", fmt_count_pct(n - ms - ml, n), fmt_count_pct(ns - ms, ns),
                  fmt_count_pct(nl - ml, nl), sex_test.p_raw, "fisher-exact"});

  const auto continuous_row = [&](const std::string& name, auto getter) {
    std::vector<double> all, vs, vl;
    for (const auto& r : m.records) all.push_back(getter(r));
    for (const auto* r : short_g) vs.push_back(getter(*r));
    for (const auto* r : long_g) vl.push_back(getter(*r));
    const auto t = stats::mann_whitney_u(vs, vl);
    rows.push_back({name, fmt_median_range(all), fmt_median_range(vs), fmt_median_range(vl),
                    t.p_raw, "mann-whitney"});
  };
  continuous_row("CgA ug/l", [](const PatientRecord& r) { return r.labs.cga_ug_per_l; });
  continuous_row("AST U/l", [](const PatientRecord& r) { return r.labs.ast_u_per_l; });
  continuous_row("ALT U/l", [](const PatientRecord& r) { return r.labs.alt_u_per_l; });
  continuous_row("GGT U/l", [](const PatientRecord& r) { return r.labs.ggt_u_per_l; });
  continuous_row("De Ritis ratio", [](const PatientRecord& r) { return r.labs.de_ritis; });
  return rows;
}

std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "variable,total,pfs_short,pfs_long,p_value,test\n";
  for (const auto& r : rows) {
    os << '"' << r.variable << "\",\"" << r.total << "\",\"" << r.group_short << "\",\""
       << r.group_long << "\",";
    os.precision(6);
    os << r.p_value << "," << r.test << "\n";
  }
  return os.str();
}

std::string summary_to_text(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "Cohort summary (SHORT: PFS <= 12 months, LONG: PFS > 12 months)\n";
  for (const auto& r : rows) {
    os << "  " << r.variable << ": total " << r.total << " | short " << r.group_short
       << " | long " << r.group_long;
    if (!r.test.empty()) {
      os.precision(4);
      os << " | p = " << r.p_value << " (" << r.test << ")";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace petfuse
