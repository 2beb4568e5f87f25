// Minimal reverse-mode automatic differentiation engine.
//
// A Graph is a tape of operation nodes in insertion order; insertion order is
// the topological order, so backward() is a single reverse sweep that visits
// each node exactly once. Tensors are dense row-major float32 arrays. The op
// set is exactly what the model zoo needs: conv3d (3x3x3, stride 1, pad 1),
// maxpool3d (2x2x2, ceil mode), linear, relu, dropout, the two losses, and
// two reduction helpers (sum, square) used by gradient tests.
//
// Graphs are single-threaded; independent graphs may run on separate threads.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "petfuse/common.hpp"
#include "petfuse/rng.hpp"

namespace petfuse {

struct Tensor {
  std::vector<int> shape;     // positive dims, row-major layout
  std::vector<float> values;  // length == product(shape)
  bool requires_grad = false;
  std::vector<float> grad;    // empty until backward touches this tensor

  Tensor() = default;
  Tensor(std::vector<int> shape_in, float fill = 0.0f);
  static Tensor from(std::vector<int> shape_in, std::vector<float> values_in);

  int64_t numel() const;
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool all_finite() const;
};

using NodeId = int;

enum class OpKind {
  kLeaf,
  kConv3d,
  kMaxPool3d,
  kLinear,
  kRelu,
  kDropout,
  kBceWithLogits,
  kMseLoss,
  kSum,
  kSquare,
  kReshape,
  kConcat,
  kScale,
};

class Graph {
 public:
  // Registers an input or parameter tensor as a leaf node.
  NodeId leaf(Tensor t);

  // input [N,C,D,H,W], kernel [F,C,3,3,3], bias [F] -> [N,F,D,H,W].
  // Cross-correlation, stride 1, zero padding 1 (same-size output).
  NodeId conv3d(NodeId input, NodeId kernel, NodeId bias);

  // input [N,C,D,H,W] -> [N,C,ceil(D/2),ceil(H/2),ceil(W/2)], window 2,
  // stride 2, ceil mode. Gradient routes to the argmax voxel; ties go to the
  // lowest flat index.
  NodeId maxpool3d(NodeId input);

  // input [N,K], weight [M,K], bias [M] -> input * weight^T + bias.
  NodeId linear(NodeId input, NodeId weight, NodeId bias);

  NodeId relu(NodeId input);

  // Inverted dropout: in training, elements are zeroed with probability
  // `rate` and survivors scaled by 1/(1-rate); in eval mode this is the
  // identity. rate must lie in [0, 1).
  NodeId dropout(NodeId input, float rate, bool training, Rng& rng);

  // Numerically stable binary cross entropy on logits; labels must be
  // exactly 0 or 1. Returns the mean over all elements as a scalar tensor.
  NodeId bce_with_logits(NodeId logits, NodeId labels);

  // Mean squared error, mean over all elements (pretraining regression loss).
  NodeId mse_loss(NodeId prediction, NodeId target);

  NodeId sum(NodeId input);
  NodeId square(NodeId input);

  // View with a new shape; numel must be preserved.
  NodeId reshape(NodeId input, std::vector<int> new_shape);

  // Multiplication by a fixed scalar (embedding normalization).
  NodeId scale(NodeId input, float factor);

  // Concatenates 2-d tensors along axis 1 (the fusion join for embeddings
  // and laboratory features).
  NodeId concat(const std::vector<NodeId>& parts);

  // Reverse accumulation from a scalar loss. Populates .grad on every tensor
  // reachable from `loss` that requires gradients.
  void backward(NodeId loss);

  Tensor& value(NodeId id);
  const Tensor& value(NodeId id) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::array<NodeId, 3> inputs{-1, -1, -1};
    int n_inputs = 0;
    Tensor t;
    bool needs_grad = false;         // this node or an ancestor requires grad
    std::vector<int32_t> arg;        // maxpool argmax indices
    std::vector<float> mask;         // dropout mask (0 or keep-scale)
  };

  NodeId push(Node n);
  Node& node(NodeId id);
  void ensure_grad(NodeId id);
  void check_id(NodeId id) const;

  void backward_conv3d(Node& n);
  void backward_maxpool3d(Node& n);
  void backward_linear(Node& n);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.
// ---------------------------------------------------------------------------

struct AdamState {
  int64_t step_count = 0;
  std::vector<float> m;  // first moment, sized on first step
  std::vector<float> v;  // second moment
  float learning_rate = 0.01f;
  float weight_decay = 0.2f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

// One optimizer step on a flat parameter array. Weight decay is decoupled:
// theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(std::vector<float>& param, const std::vector<float>& grad, AdamState& state);

}  // namespace petfuse
