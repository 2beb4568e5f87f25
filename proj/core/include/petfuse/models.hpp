// The seven model configurations and their training loop.
//
// Image branches are four conv blocks (conv3d -> relu -> maxpool) with
// channel widths 8/16/32/64 feeding a flattened embedding; active embeddings
// and the four standardized laboratory features are fused by concatenation
// into a three-layer fully connected head that emits a single logit.
// sigmoid(logit) is the predicted probability of long PFS (label 1 = PFS
// > 12 months). RF_LABS is served by the forest module behind the same
// train/predict surface.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "petfuse/forest.hpp"
#include "petfuse/preprocess.hpp"
#include "petfuse/synthcohort.hpp"
#include "petfuse/tensor.hpp"

namespace petfuse {

enum class ModelKind {
  RF_LABS,
  PET_ONLY,
  CT_ONLY,
  PET_FUSION,
  CT_FUSION,
  PETCT_FUSION,
  PETCT_FUSION_PRETRAINED,
};

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);
const std::vector<ModelKind>& all_model_kinds();

bool kind_uses_pet(ModelKind k);
bool kind_uses_ct(ModelKind k);
bool kind_uses_labs(ModelKind k);

// Training fails a fold rather than aborting the run.
class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr int kDefaultEpochs = 12;
inline constexpr int kDefaultBatchSize = 4;

struct ModelSpec {
  ModelKind kind = ModelKind::PETCT_FUSION;
  float lr = 0.01f;
  float dropout = 0.1f;
  float weight_decay = 0.2f;
  int epochs = kDefaultEpochs;
  int batch_size = kDefaultBatchSize;
  uint64_t seed = 0;
};

struct Param {
  std::string name;
  Tensor tensor;
};

// Four conv blocks; embedding length is fixed by the input volume shape and
// identical for the PET and CT branches.
class Encoder3D {
 public:
  static constexpr std::array<int, 4> kChannels{8, 16, 32, 64};

  Encoder3D() = default;
  Encoder3D(const std::string& prefix, std::array<int, 3> vol_shape, Rng& init_rng);

  // x is a [N,1,D,H,W] leaf; returns the [N,embedding_dim] node.
  NodeId forward(Graph& g, NodeId x, const std::map<std::string, NodeId>& bound) const;

  // Registers parameters as graph leaves; fills name -> NodeId into `bound`.
  void bind(Graph& g, bool requires_grad, std::map<std::string, NodeId>& bound) const;

  int embedding_dim() const { return embedding_dim_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  static int embedding_dim_for(std::array<int, 3> vol_shape);

 private:
  std::vector<Param> params_;  // conv1.w, conv1.b, ..., conv4.b
  std::string prefix_;
  int embedding_dim_ = 0;
};

// Laboratory standardization statistics, fitted on training folds only.
struct LabStats {
  std::array<double, 4> mean{};  // order: AST, ALT, CgA(log), GGT
  std::array<double, 4> std{};
  std::vector<std::string> fit_on;
};

LabStats fit_lab_stats(const std::vector<const PatientRecord*>& training);

// (AST, ALT, CgA, GGT) z-scored; CgA is log-transformed first.
std::array<float, 4> standardize_labs(const LabPanel& panel, const LabStats& stats);

// One already-preprocessed patient as the model consumes it.
struct ModelInput {
  const std::vector<float>* pet = nullptr;  // normalized resized voxels or null
  const std::vector<float>* ct = nullptr;
  std::array<float, 4> labs{};
  float label = 0.0f;  // 1 = long PFS
  std::string id;
};

struct Dataset {
  std::array<int, 3> volume_shape = kModelVolumeShape;
  std::vector<ModelInput> items;
};

class Model {
 public:
  // build_model: instantiates exactly the branches the kind requires with
  // He-uniform initialization from spec.seed.
  static Model build(const ModelSpec& spec, std::array<int, 3> vol_shape = kModelVolumeShape);

  // Head-only variant (labs straight into the head); used by tests and
  // pretraining probes, not one of the seven benchmark kinds.
  static Model build_labs_mlp(const ModelSpec& spec);

  ModelKind kind() const { return spec_.kind; }
  const ModelSpec& spec() const { return spec_; }
  bool is_forest() const { return spec_.kind == ModelKind::RF_LABS; }
  bool has_pet() const { return pet_encoder_.has_value(); }
  bool has_ct() const { return ct_encoder_.has_value(); }
  bool has_labs() const { return use_labs_; }
  int head_input_width() const { return head_input_width_; }
  int embedding_dim() const;
  std::array<int, 3> volume_shape() const { return vol_shape_; }

  Encoder3D& ct_encoder();
  Encoder3D& pet_encoder();

  // All trainable parameters (encoders + head), stable order.
  std::vector<Param*> parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  void load_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors);

  // Forward/training mode: eval (no dropout, frozen parameters), head-only
  // (encoders frozen; their heavy backward is skipped entirely), or full.
  enum class Mode { kEval, kHeadOnly, kFull };

  // Single-batch forward on an existing graph. Inputs must match the kind.
  // Returns the [N] logit node; `bound` maps parameter names to leaf ids.
  NodeId forward(Graph& g, const std::vector<const ModelInput*>& batch, Mode mode,
                 Rng& dropout_rng, std::map<std::string, NodeId>& bound,
                 std::vector<NodeId>* input_leaves = nullptr,
                 bool inputs_require_grad = false) const;

  // Eval-mode probabilities, dropout off; deterministic.
  std::vector<double> predict_proba(const std::vector<const ModelInput*>& batch) const;
  double predict_proba_one(const ModelInput& item) const;

  // Fused head input (concatenated embeddings + labs) for one sample.
  std::vector<float> fused_embedding(const ModelInput& item) const;

  // |d logit / d input| per active branch, plus lab gradients, eval mode.
  struct InputGradients {
    std::vector<float> pet;  // empty when branch absent
    std::vector<float> ct;
    std::array<float, 4> labs{};
    float logit = 0.0f;
  };
  InputGradients input_gradients(const ModelInput& item) const;

  // Forest access for RF_LABS.
  forest::Forest& forest();
  const forest::Forest& forest() const;
  void set_forest(forest::Forest f) { forest_ = std::move(f); }

 private:
  void validate_batch(const std::vector<const ModelInput*>& batch) const;

  ModelSpec spec_;
  std::array<int, 3> vol_shape_ = kModelVolumeShape;
  std::optional<Encoder3D> pet_encoder_;
  std::optional<Encoder3D> ct_encoder_;
  bool use_labs_ = false;
  std::vector<Param> head_params_;  // fc1.w/b, fc2.w/b, fc3.w/b
  int head_input_width_ = 0;
  std::optional<forest::Forest> forest_;
};

// Mini-batch Adam over BCE for spec.epochs; shuffling, dropout and (for
// RF_LABS) the bootstrap all derive from spec.seed. Image models train in
// two phases: the head first against frozen encoder features, then the whole
// network; from-scratch volumetric branches otherwise collapse into the
// class-prior basin before their features carry any signal. Returns the
// per-epoch mean training loss (empty for the forest path). Throws
// ValidationError on a single-class training set and TrainingDiverged on a
// non-finite loss.
std::vector<double> train(Model& model, const Dataset& data, const ModelSpec& spec);

struct PretrainOptions {
  int epochs = 10;
  int batch_size = 4;
  float lr = 0.003f;
  uint64_t seed = 0;
  double validation_fraction = 0.25;
};

struct PretrainResult {
  double val_mse_before = 0.0;
  double val_mse_after = 0.0;
};

// Auxiliary-task pretraining of a CT encoder: regression of the (z-scored)
// lesion voxel fraction with a temporary linear head and MSE loss.
PretrainResult pretrain_ct_encoder(Encoder3D& encoder, const std::vector<PhantomSample>& phantoms,
                                   std::array<int, 3> vol_shape, const PretrainOptions& opts);

}  // namespace petfuse
