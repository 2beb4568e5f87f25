#include "petfuse/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace petfuse {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::RF_LABS: return "RF_LABS";
    case ModelKind::PET_ONLY: return "PET_ONLY";
    case ModelKind::CT_ONLY: return "CT_ONLY";
    case ModelKind::PET_FUSION: return "PET_FUSION";
    case ModelKind::CT_FUSION: return "CT_FUSION";
    case ModelKind::PETCT_FUSION: return "PETCT_FUSION";
    case ModelKind::PETCT_FUSION_PRETRAINED: return "PETCT_FUSION_PRETRAINED";
  }
  return "RF_LABS";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (const ModelKind k : all_model_kinds()) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown model kind: " + s);
}

const std::vector<ModelKind>& all_model_kinds() {
  static const std::vector<ModelKind> kinds = {
      ModelKind::RF_LABS,      ModelKind::PET_ONLY,     ModelKind::CT_ONLY,
      ModelKind::PET_FUSION,   ModelKind::CT_FUSION,    ModelKind::PETCT_FUSION,
      ModelKind::PETCT_FUSION_PRETRAINED};
  return kinds;
}

bool kind_uses_pet(ModelKind k) {
  return k == ModelKind::PET_ONLY || k == ModelKind::PET_FUSION ||
         k == ModelKind::PETCT_FUSION || k == ModelKind::PETCT_FUSION_PRETRAINED;
}

bool kind_uses_ct(ModelKind k) {
  return k == ModelKind::CT_ONLY || k == ModelKind::CT_FUSION ||
         k == ModelKind::PETCT_FUSION || k == ModelKind::PETCT_FUSION_PRETRAINED;
}

bool kind_uses_labs(ModelKind k) {
  return k == ModelKind::RF_LABS || k == ModelKind::PET_FUSION || k == ModelKind::CT_FUSION ||
         k == ModelKind::PETCT_FUSION || k == ModelKind::PETCT_FUSION_PRETRAINED;
}

namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, uint64_t seed, const std::string& name,
                  float gain = 1.0f) {
  Tensor t(std::move(shape));
  Rng rng(Rng::derive(seed, name));
  const float bound = gain * std::sqrt(6.0f / static_cast<float>(fan_in));
  for (float& v : t.values) {
    v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  }
  return t;
}



float sigmoid(float z) {
  if (z >= 0.0f) return 1.0f / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return e / (1.0f + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder3D
// ---------------------------------------------------------------------------

int Encoder3D::embedding_dim_for(std::array<int, 3> vol_shape) {
  int d = vol_shape[0], h = vol_shape[1], w = vol_shape[2];
  for (int block = 0; block < 4; ++block) {
    d = (d + 1) / 2;
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return kChannels[3] * d * h * w;
}

Encoder3D::Encoder3D(const std::string& prefix, std::array<int, 3> vol_shape, Rng& init_rng) {
  prefix_ = prefix;
  embedding_dim_ = embedding_dim_for(vol_shape);
  const uint64_t seed = init_rng.next_u64();
  int in_ch = 1;
  for (int block = 0; block < 4; ++block) {
    const int out_ch = kChannels[static_cast<size_t>(block)];
    const std::string w_name = prefix + ".conv" + std::to_string(block + 1) + ".w";
    const std::string b_name = prefix + ".conv" + std::to_string(block + 1) + ".b";
    params_.push_back({w_name, he_uniform({out_ch, in_ch, 3, 3, 3}, in_ch * 27, seed, w_name)});
    params_.push_back({b_name, Tensor({out_ch}, 0.0f)});
    in_ch = out_ch;
  }
}

void Encoder3D::bind(Graph& g, bool requires_grad, std::map<std::string, NodeId>& bound) const {
  for (const Param& p : params_) {
    Tensor t = p.tensor;
    t.requires_grad = requires_grad;
    bound[p.name] = g.leaf(std::move(t));
  }
}

NodeId Encoder3D::forward(Graph& g, NodeId x, const std::map<std::string, NodeId>& bound) const {
  NodeId cur = x;
  for (int block = 0; block < 4; ++block) {
    const std::string base = prefix_ + ".conv" + std::to_string(block + 1);
    cur = g.conv3d(cur, bound.at(base + ".w"), bound.at(base + ".b"));
    cur = g.relu(cur);
    cur = g.maxpool3d(cur);
  }
  const Tensor& t = g.value(cur);
  const NodeId flat = g.reshape(cur, {t.dim(0), static_cast<int>(t.numel() / t.dim(0))});
  // 1/sqrt(E) fusion normalization: keeps the wide embedding from dominating
  // the head update scale at the shared learning rate
  return g.scale(flat, 1.0f / std::sqrt(static_cast<float>(embedding_dim_)));
}

// ---------------------------------------------------------------------------
// laboratory standardization
// ---------------------------------------------------------------------------

namespace {

std::array<double, 4> lab_feature_vector(const LabPanel& p) {
  p.validate();
  // CgA spans four decades; log-transform it before z-scoring.
  return {p.ast_u_per_l, p.alt_u_per_l, std::log(p.cga_ug_per_l), p.ggt_u_per_l};
}

}  // namespace

LabStats fit_lab_stats(const std::vector<const PatientRecord*>& training) {
  if (training.empty()) throw ValidationError("fit_lab_stats: empty training set");
  LabStats s;
  for (const PatientRecord* r : training) {
    const auto f = lab_feature_vector(r->labs);
    for (int j = 0; j < 4; ++j) s.mean[static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
    s.fit_on.push_back(r->id);
  }
  const double n = static_cast<double>(training.size());
  for (double& m : s.mean) m /= n;
  for (const PatientRecord* r : training) {
    const auto f = lab_feature_vector(r->labs);
    for (int j = 0; j < 4; ++j) {
      const double d = f[static_cast<size_t>(j)] - s.mean[static_cast<size_t>(j)];
      s.std[static_cast<size_t>(j)] += d * d;
    }
  }
  for (double& v : s.std) v = std::max(std::sqrt(v / n), 1e-6);
  return s;
}

std::array<float, 4> standardize_labs(const LabPanel& panel, const LabStats& stats) {
  const auto f = lab_feature_vector(panel);
  std::array<float, 4> out{};
  for (int j = 0; j < 4; ++j) {
    out[static_cast<size_t>(j)] = static_cast<float>(
        (f[static_cast<size_t>(j)] - stats.mean[static_cast<size_t>(j)]) /
        stats.std[static_cast<size_t>(j)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {
constexpr int kHeadHidden1 = 128;
constexpr int kHeadHidden2 = 32;
}  // namespace

Model Model::build(const ModelSpec& spec, std::array<int, 3> vol_shape) {
  Model m;
  m.spec_ = spec;
  m.vol_shape_ = vol_shape;
  if (spec.kind == ModelKind::RF_LABS) {
    m.use_labs_ = true;
    m.head_input_width_ = 4;
    return m;  // forest is fitted by train()
  }
  Rng init_rng(Rng::derive(spec.seed, "init"));
  int width = 0;
  if (kind_uses_pet(spec.kind)) {
    m.pet_encoder_.emplace("pet_enc", vol_shape, init_rng);
    width += m.pet_encoder_->embedding_dim();
  }
  if (kind_uses_ct(spec.kind)) {
    m.ct_encoder_.emplace("ct_enc", vol_shape, init_rng);
    width += m.ct_encoder_->embedding_dim();
  }
  if (kind_uses_labs(spec.kind)) {
    m.use_labs_ = true;
    width += 4;
  }
  m.head_input_width_ = width;

  const uint64_t hs = Rng::derive(spec.seed, "head");
  m.head_params_.push_back({"head.fc1.w", he_uniform({kHeadHidden1, width}, width, hs, "head.fc1.w")});
  m.head_params_.push_back({"head.fc1.b", Tensor({kHeadHidden1}, 0.0f)});
  m.head_params_.push_back(
      {"head.fc2.w", he_uniform({kHeadHidden2, kHeadHidden1}, kHeadHidden1, hs, "head.fc2.w")});
  m.head_params_.push_back({"head.fc2.b", Tensor({kHeadHidden2}, 0.0f)});
  // the output layer starts at zero so initial logits are exactly 0; deep
  // volumetric branches otherwise saturate the loss at initialization
  m.head_params_.push_back({"head.fc3.w", Tensor({1, kHeadHidden2}, 0.0f)});
  m.head_params_.push_back({"head.fc3.b", Tensor({1}, 0.0f)});
  return m;
}

Model Model::build_labs_mlp(const ModelSpec& spec) {
  Model m;
  m.spec_ = spec;
  m.spec_.kind = ModelKind::PET_FUSION;  // placeholder kind; branches define behavior
  m.use_labs_ = true;
  m.head_input_width_ = 4;
  const uint64_t hs = Rng::derive(spec.seed, "head");
  m.head_params_.push_back({"head.fc1.w", he_uniform({kHeadHidden1, 4}, 4, hs, "head.fc1.w")});
  m.head_params_.push_back({"head.fc1.b", Tensor({kHeadHidden1}, 0.0f)});
  m.head_params_.push_back(
      {"head.fc2.w", he_uniform({kHeadHidden2, kHeadHidden1}, kHeadHidden1, hs, "head.fc2.w")});
  m.head_params_.push_back({"head.fc2.b", Tensor({kHeadHidden2}, 0.0f)});
  m.head_params_.push_back({"head.fc3.w", Tensor({1, kHeadHidden2}, 0.0f)});
  m.head_params_.push_back({"head.fc3.b", Tensor({1}, 0.0f)});
  return m;
}

int Model::embedding_dim() const {
  if (pet_encoder_) return pet_encoder_->embedding_dim();
  if (ct_encoder_) return ct_encoder_->embedding_dim();
  return 0;
}

Encoder3D& Model::pet_encoder() {
  if (!pet_encoder_) throw ValidationError("model has no PET branch");
  return *pet_encoder_;
}

Encoder3D& Model::ct_encoder() {
  if (!ct_encoder_) throw ValidationError("model has no CT branch");
  return *ct_encoder_;
}

forest::Forest& Model::forest() {
  if (!forest_) throw ValidationError("model has no fitted forest");
  return *forest_;
}

const forest::Forest& Model::forest() const {
  if (!forest_) throw ValidationError("model has no fitted forest");
  return *forest_;
}

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out;
  if (pet_encoder_) {
    for (Param& p : pet_encoder_->params()) out.push_back(&p);
  }
  if (ct_encoder_) {
    for (Param& p : ct_encoder_->params()) out.push_back(&p);
  }
  for (Param& p : head_params_) out.push_back(&p);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  if (pet_encoder_) {
    for (const Param& p : pet_encoder_->params()) out.emplace_back(p.name, &p.tensor);
  }
  if (ct_encoder_) {
    for (const Param& p : ct_encoder_->params()) out.emplace_back(p.name, &p.tensor);
  }
  for (const Param& p : head_params_) out.emplace_back(p.name, &p.tensor);
  return out;
}

void Model::load_tensors(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (const auto& [name, t] : tensors) {
    for (Param* p : parameters()) {
      if (p->name == name) {
        if (p->tensor.shape != t.shape) {
          throw ValidationError("checkpoint shape mismatch for " + name);
        }
        p->tensor.values = t.values;
      }
    }
  }
}

void Model::validate_batch(const std::vector<const ModelInput*>& batch) const {
  if (batch.empty()) throw ValidationError("empty batch");
  for (const ModelInput* s : batch) {
    if (has_pet() != (s->pet != nullptr)) {
      throw ValidationError("batch item " + s->id + ": PET input presence does not match model");
    }
    if (has_ct() != (s->ct != nullptr)) {
      throw ValidationError("batch item " + s->id + ": CT input presence does not match model");
    }
  }
}

NodeId Model::forward(Graph& g, const std::vector<const ModelInput*>& batch, Mode mode,
                      Rng& dropout_rng, std::map<std::string, NodeId>& bound,
                      std::vector<NodeId>* input_leaves, bool inputs_require_grad) const {
  if (is_forest()) throw ValidationError("forward is undefined for the forest model");
  validate_batch(batch);
  const bool training = mode != Mode::kEval;
  const bool train_encoders = mode == Mode::kFull;
  const int b = static_cast<int>(batch.size());
  const int64_t vox = static_cast<int64_t>(vol_shape_[0]) * vol_shape_[1] * vol_shape_[2];

  const auto make_volume_leaf = [&](bool pet_branch) {
    Tensor t({b, 1, vol_shape_[0], vol_shape_[1], vol_shape_[2]});
    for (int i = 0; i < b; ++i) {
      const std::vector<float>* src = pet_branch ? batch[static_cast<size_t>(i)]->pet
                                                 : batch[static_cast<size_t>(i)]->ct;
      if (static_cast<int64_t>(src->size()) != vox) {
        throw ValidationError("volume buffer does not match the model volume shape");
      }
      std::memcpy(t.values.data() + static_cast<int64_t>(i) * vox, src->data(),
                  sizeof(float) * static_cast<size_t>(vox));
    }
    t.requires_grad = inputs_require_grad;
    return g.leaf(std::move(t));
  };

  if (pet_encoder_) pet_encoder_->bind(g, train_encoders, bound);
  if (ct_encoder_) ct_encoder_->bind(g, train_encoders, bound);
  for (const Param& p : head_params_) {
    Tensor t = p.tensor;
    t.requires_grad = training;
    bound[p.name] = g.leaf(std::move(t));
  }

  std::vector<NodeId> parts;
  if (pet_encoder_) {
    const NodeId x = make_volume_leaf(true);
    if (input_leaves) input_leaves->push_back(x);
    parts.push_back(pet_encoder_->forward(g, x, bound));
  }
  if (ct_encoder_) {
    const NodeId x = make_volume_leaf(false);
    if (input_leaves) input_leaves->push_back(x);
    parts.push_back(ct_encoder_->forward(g, x, bound));
  }
  if (use_labs_) {
    Tensor labs({b, 4});
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < 4; ++j) {
        labs.values[static_cast<size_t>(i * 4 + j)] =
            batch[static_cast<size_t>(i)]->labs[static_cast<size_t>(j)];
      }
    }
    labs.requires_grad = inputs_require_grad;
    const NodeId l = g.leaf(std::move(labs));
    if (input_leaves) input_leaves->push_back(l);
    parts.push_back(l);
  }

  NodeId fused = parts.size() == 1 ? parts[0] : g.concat(parts);
  bound["__fused__"] = fused;

  NodeId h = g.linear(fused, bound.at("head.fc1.w"), bound.at("head.fc1.b"));
  h = g.relu(h);
  h = g.dropout(h, spec_.dropout, training, dropout_rng);
  h = g.linear(h, bound.at("head.fc2.w"), bound.at("head.fc2.b"));
  h = g.relu(h);
  h = g.dropout(h, spec_.dropout, training, dropout_rng);
  h = g.linear(h, bound.at("head.fc3.w"), bound.at("head.fc3.b"));
  return g.reshape(h, {b});
}

std::vector<double> Model::predict_proba(const std::vector<const ModelInput*>& batch) const {
  if (is_forest()) {
    std::vector<double> out;
    out.reserve(batch.size());
    for (const ModelInput* s : batch) {
      out.push_back(forest::forest_predict_proba(
          forest(), {s->labs[0], s->labs[1], s->labs[2], s->labs[3]}));
    }
    return out;
  }
  std::vector<double> out;
  out.reserve(batch.size());
  Rng unused(0);
  const int chunk = std::max(1, spec_.batch_size);
  for (size_t start = 0; start < batch.size(); start += static_cast<size_t>(chunk)) {
    const size_t end = std::min(batch.size(), start + static_cast<size_t>(chunk));
    std::vector<const ModelInput*> sub(batch.begin() + static_cast<int64_t>(start),
                                       batch.begin() + static_cast<int64_t>(end));
    Graph g;
    std::map<std::string, NodeId> bound;
    const NodeId logits = forward(g, sub, Mode::kEval, unused, bound);
    for (const float z : g.value(logits).values) out.push_back(sigmoid(z));
  }
  return out;
}

double Model::predict_proba_one(const ModelInput& item) const {
  return predict_proba({&item})[0];
}

std::vector<float> Model::fused_embedding(const ModelInput& item) const {
  Graph g;
  std::map<std::string, NodeId> bound;
  Rng unused(0);
  forward(g, {&item}, Mode::kEval, unused, bound);
  return g.value(bound.at("__fused__")).values;
}

Model::InputGradients Model::input_gradients(const ModelInput& item) const {
  Graph g;
  std::map<std::string, NodeId> bound;
  std::vector<NodeId> leaves;
  Rng unused(0);
  const NodeId logit =
      forward(g, {&item}, Mode::kEval, unused, bound, &leaves, /*inputs_require_grad=*/true);
  g.backward(logit);

  InputGradients out;
  out.logit = g.value(logit).values[0];
  size_t li = 0;
  if (has_pet()) {
    out.pet = g.value(leaves[li++]).grad;
  }
  if (has_ct()) {
    out.ct = g.value(leaves[li++]).grad;
  }
  if (has_labs()) {
    const auto& lg = g.value(leaves[li]).grad;
    for (int j = 0; j < 4; ++j) out.labs[static_cast<size_t>(j)] = lg[static_cast<size_t>(j)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

std::vector<double> train(Model& model, const Dataset& data, const ModelSpec& spec) {
  if (data.items.empty()) throw ValidationError("train: empty training set");
  int64_t pos = 0;
  for (const auto& s : data.items) {
    if (s.label != 0.0f && s.label != 1.0f) throw ValidationError("train: labels must be 0/1");
    pos += s.label == 1.0f ? 1 : 0;
  }
  if (pos == 0 || pos == static_cast<int64_t>(data.items.size())) {
    throw ValidationError("train: both classes must be present in the training set");
  }

  if (model.is_forest()) {
    Matrix x(static_cast<int>(data.items.size()), 4);
    std::vector<int> y(data.items.size());
    for (size_t i = 0; i < data.items.size(); ++i) {
      for (int j = 0; j < 4; ++j) {
        x.at(static_cast<int>(i), j) = data.items[i].labs[static_cast<size_t>(j)];
      }
      y[i] = data.items[i].label == 1.0f ? 1 : 0;
    }
    forest::ForestSpec fs;
    fs.seed = spec.seed;
    model.set_forest(forest::fit_forest(x, y, fs));
    return {};
  }

  auto params = model.parameters();
  std::map<std::string, AdamState> states;
  for (Param* p : params) {
    AdamState st;
    st.learning_rate = spec.lr;
    st.weight_decay = spec.weight_decay;
    states.emplace(p->name, std::move(st));
  }

  Rng shuffle_rng(Rng::derive(spec.seed, "shuffle"));
  Rng dropout_rng(Rng::derive(spec.seed, "dropout"));
  const int n = static_cast<int>(data.items.size());
  const int batch_size = std::max(1, spec.batch_size);
  const int steps_per_epoch = (n + batch_size - 1) / batch_size;

  // Linear warmup into the configured rate; full-rate first steps kill the
  // head's relu units on the wide image embeddings.
  const int warmup_steps = std::min(2 * steps_per_epoch, 40);
  int step = 0;

  // Image models: first fit the head against frozen encoder features, then
  // fine-tune everything.
  const bool has_encoders = model.has_pet() || model.has_ct();
  const int head_only_epochs = has_encoders ? (spec.epochs + 1) / 2 : 0;

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(std::max(0, spec.epochs)));
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const Model::Mode mode =
        epoch < head_only_epochs ? Model::Mode::kHeadOnly : Model::Mode::kFull;
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += batch_size) {
      const int end = std::min(n, start + batch_size);
      std::vector<const ModelInput*> batch;
      Tensor labels({end - start});
      for (int i = start; i < end; ++i) {
        const ModelInput& s = data.items[static_cast<size_t>(order[static_cast<size_t>(i)])];
        batch.push_back(&s);
        labels.values[static_cast<size_t>(i - start)] = s.label;
      }
      Graph g;
      std::map<std::string, NodeId> bound;
      const NodeId logits = model.forward(g, batch, mode, dropout_rng, bound);
      const NodeId label_leaf = g.leaf(std::move(labels));
      const NodeId loss = g.bce_with_logits(logits, label_leaf);
      g.backward(loss);
      epoch_loss += static_cast<double>(g.value(loss).values[0]) * (end - start);

      ++step;
      const float lr_now =
          step < warmup_steps ? spec.lr * static_cast<float>(step) / warmup_steps : spec.lr;
      // encoders ramp in over their first epoch of fine-tuning
      const int ft_step = step - head_only_epochs * steps_per_epoch;
      const float lr_encoder =
          ft_step < steps_per_epoch
              ? lr_now * static_cast<float>(std::max(ft_step, 0)) / steps_per_epoch
              : lr_now;
      for (Param* p : params) {
        const Tensor& leaf = g.value(bound.at(p->name));
        if (leaf.grad.empty()) continue;
        AdamState& st = states.at(p->name);
        const bool is_encoder = p->name.rfind("head.", 0) != 0;
        st.learning_rate = is_encoder ? lr_encoder : lr_now;
        adam_step(p->tensor.values, leaf.grad, st);
      }
    }
    const double mean_loss = epoch_loss / n;
    if (!std::isfinite(mean_loss)) {
      throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch));
    }
    trace.push_back(mean_loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// CT encoder pretraining
// ---------------------------------------------------------------------------

PretrainResult pretrain_ct_encoder(Encoder3D& encoder, const std::vector<PhantomSample>& phantoms,
                                   std::array<int, 3> vol_shape, const PretrainOptions& opts) {
  if (phantoms.size() < 4) {
    throw ValidationError("pretrain_ct_encoder: need at least 4 phantoms");
  }
  const int n = static_cast<int>(phantoms.size());
  const int n_val = std::max(1, static_cast<int>(std::llround(n * opts.validation_fraction)));
  const int n_train = n - n_val;
  if (n_train < 1) throw ValidationError("pretrain_ct_encoder: validation split too large");

  // Normalizer fitted on the training phantoms only.
  std::vector<Volume> clipped;
  clipped.reserve(static_cast<size_t>(n));
  for (const auto& p : phantoms) clipped.push_back(clip_artifacts(harmonize(p.ct)));
  std::vector<const Volume*> train_ptrs;
  for (int i = 0; i < n_train; ++i) train_ptrs.push_back(&clipped[static_cast<size_t>(i)]);
  const Normalizer norm = fit_normalizer(train_ptrs, Modality::CT);

  std::vector<std::vector<float>> inputs;
  inputs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    inputs.push_back(
        resize_volume(apply_normalizer(clipped[static_cast<size_t>(i)], norm), vol_shape).voxels);
  }

  // z-scored regression target from the training split
  double mu = 0.0;
  for (int i = 0; i < n_train; ++i) mu += phantoms[static_cast<size_t>(i)].lesion_fraction;
  mu /= n_train;
  double sd = 0.0;
  for (int i = 0; i < n_train; ++i) {
    const double d = phantoms[static_cast<size_t>(i)].lesion_fraction - mu;
    sd += d * d;
  }
  sd = std::max(std::sqrt(sd / n_train), 1e-9);
  std::vector<float> targets(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    targets[static_cast<size_t>(i)] =
        static_cast<float>((phantoms[static_cast<size_t>(i)].lesion_fraction - mu) / sd);
  }

  const int e = encoder.embedding_dim();
  Param aux_w{"aux.w", he_uniform({1, e}, e, Rng::derive(opts.seed, "aux"), "aux.w")};
  Param aux_b{"aux.b", Tensor({1}, 0.0f)};

  const auto forward_batch = [&](const std::vector<int>& ids, bool training,
                                 std::map<std::string, NodeId>& bound, Graph& g) {
    const int b = static_cast<int>(ids.size());
    const int64_t vox = static_cast<int64_t>(vol_shape[0]) * vol_shape[1] * vol_shape[2];
    Tensor x({b, 1, vol_shape[0], vol_shape[1], vol_shape[2]});
    Tensor t({b});
    for (int i = 0; i < b; ++i) {
      std::memcpy(x.values.data() + static_cast<int64_t>(i) * vox,
                  inputs[static_cast<size_t>(ids[static_cast<size_t>(i)])].data(),
                  sizeof(float) * static_cast<size_t>(vox));
      t.values[static_cast<size_t>(i)] = targets[static_cast<size_t>(ids[static_cast<size_t>(i)])];
    }
    encoder.bind(g, training, bound);
    Tensor w = aux_w.tensor;
    w.requires_grad = training;
    Tensor bb = aux_b.tensor;
    bb.requires_grad = training;
    bound["aux.w"] = g.leaf(std::move(w));
    bound["aux.b"] = g.leaf(std::move(bb));
    const NodeId emb = encoder.forward(g, g.leaf(std::move(x)), bound);
    const NodeId pred = g.reshape(g.linear(emb, bound.at("aux.w"), bound.at("aux.b")), {b});
    return std::make_pair(pred, g.leaf(std::move(t)));
  };

  const auto val_mse = [&]() {
    double acc = 0.0;
    for (int i = n_train; i < n; ++i) {
      Graph g;
      std::map<std::string, NodeId> bound;
      const auto [pred, target] = forward_batch({i}, false, bound, g);
      const NodeId loss = g.mse_loss(pred, target);
      acc += g.value(loss).values[0];
    }
    return acc / n_val;
  };

  PretrainResult result;
  result.val_mse_before = val_mse();

  std::map<std::string, AdamState> states;
  std::vector<Param*> params;
  for (Param& p : encoder.params()) params.push_back(&p);
  params.push_back(&aux_w);
  params.push_back(&aux_b);
  for (Param* p : params) {
    AdamState st;
    st.learning_rate = opts.lr;
    st.weight_decay = 0.0f;
    states.emplace(p->name, std::move(st));
  }

  Rng shuffle_rng(Rng::derive(opts.seed, "shuffle"));
  std::vector<int> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int start = 0; start < n_train; start += opts.batch_size) {
      const int end = std::min(n_train, start + opts.batch_size);
      std::vector<int> ids(order.begin() + start, order.begin() + end);
      Graph g;
      std::map<std::string, NodeId> bound;
      const auto [pred, target] = forward_batch(ids, true, bound, g);
      const NodeId loss = g.mse_loss(pred, target);
      g.backward(loss);
      if (!std::isfinite(g.value(loss).values[0])) {
        throw TrainingDiverged("pretraining loss diverged");
      }
      for (Param* p : params) {
        const Tensor& leaf = g.value(bound.at(p->name));
        if (leaf.grad.empty()) continue;
        adam_step(p->tensor.values, leaf.grad, states.at(p->name));
      }
    }
  }
  result.val_mse_after = val_mse();
  return result;
}

}  // namespace petfuse
