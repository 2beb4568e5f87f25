#include "petfuse/tensor.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <limits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace petfuse {

namespace {

#if defined(__GLIBC__)
// Training allocates and frees the same large activation buffers every step;
// keeping them on the heap instead of per-call mmap avoids refaulting zeroed
// pages in the hot loop.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int64_t product(const std::vector<int>& shape) {
  int64_t p = 1;
  for (const int d : shape) p *= d;
  return p;
}

float sigmoidf(float z) {
  if (z >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-z));
  }
  const float e = std::exp(z);
  return e / (1.0f + e);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape_in, float fill)
    : shape(std::move(shape_in)) {
  for (const int d : shape) {
    if (d <= 0) throw ValidationError("tensor dimensions must be positive");
  }
  values.assign(static_cast<size_t>(product(shape)), fill);
}

Tensor Tensor::from(std::vector<int> shape_in, std::vector<float> values_in) {
  Tensor t;
  t.shape = std::move(shape_in);
  for (const int d : t.shape) {
    if (d <= 0) throw ValidationError("tensor dimensions must be positive");
  }
  if (product(t.shape) != static_cast<int64_t>(values_in.size())) {
    throw ValidationError("tensor value count does not match shape");
  }
  t.values = std::move(values_in);
  return t;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(values.size()); }

bool Tensor::all_finite() const {
  for (const float v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph plumbing
// ---------------------------------------------------------------------------

void Graph::check_id(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw ValidationError("node id out of range");
  }
}

Graph::Node& Graph::node(NodeId id) {
  check_id(id);
  return nodes_[static_cast<size_t>(id)];
}

Tensor& Graph::value(NodeId id) {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].t;
}

const Tensor& Graph::value(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].t;
}

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::ensure_grad(NodeId id) {
  Tensor& t = node(id).t;
  if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0f);
}

NodeId Graph::leaf(Tensor t) {
  Node n;
  n.op = OpKind::kLeaf;
  n.needs_grad = t.requires_grad;
  n.t = std::move(t);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// conv3d: im2col + GEMM, one sample at a time
// ---------------------------------------------------------------------------

namespace {

// Builds the column matrix for a 3x3x3 kernel with padding 1 over one sample.
// col is (C*27) x (D*H*W); row (c*27 + kd*9 + kh*3 + kw) holds the input
// shifted by (kd-1, kh-1, kw-1), zero outside the volume.
void im2col_3x3x3(const float* in, int C, int D, int H, int W, float* col) {
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t vol = static_cast<int64_t>(D) * plane;
  for (int c = 0; c < C; ++c) {
    const float* in_c = in + c * vol;
    for (int kd = 0; kd < 3; ++kd) {
      for (int kh = 0; kh < 3; ++kh) {
        for (int kw = 0; kw < 3; ++kw) {
          float* row = col + (static_cast<int64_t>(c) * 27 + kd * 9 + kh * 3 + kw) * vol;
          const int xoff = kw - 1;
          const int copy_len = W - std::abs(xoff);
          const int dst_x = xoff < 0 ? -xoff : 0;   // first written column
          const int src_x = xoff > 0 ? xoff : 0;    // first read column
          for (int z = 0; z < D; ++z) {
            const int zz = z + kd - 1;
            float* row_z = row + z * plane;
            if (zz < 0 || zz >= D) {
              std::memset(row_z, 0, sizeof(float) * plane);
              continue;
            }
            for (int y = 0; y < H; ++y) {
              const int yy = y + kh - 1;
              float* dst = row_z + static_cast<int64_t>(y) * W;
              if (yy < 0 || yy >= H) {
                std::memset(dst, 0, sizeof(float) * W);
                continue;
              }
              const float* src = in_c + zz * plane + static_cast<int64_t>(yy) * W;
              if (xoff < 0) dst[0] = 0.0f;
              if (xoff > 0) dst[W - 1] = 0.0f;
              std::memcpy(dst + dst_x, src + src_x, sizeof(float) * copy_len);
            }
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col_3x3x3: accumulates dcol into dx.
void col2im_3x3x3(const float* dcol, int C, int D, int H, int W, float* dx) {
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t vol = static_cast<int64_t>(D) * plane;
  for (int c = 0; c < C; ++c) {
    float* dx_c = dx + c * vol;
    for (int kd = 0; kd < 3; ++kd) {
      for (int kh = 0; kh < 3; ++kh) {
        for (int kw = 0; kw < 3; ++kw) {
          const float* row = dcol + (static_cast<int64_t>(c) * 27 + kd * 9 + kh * 3 + kw) * vol;
          const int xoff = kw - 1;
          const int len = W - std::abs(xoff);
          const int dst_x = xoff > 0 ? xoff : 0;   // accumulate into input
          const int src_x = xoff < 0 ? -xoff : 0;  // read from col row
          for (int z = 0; z < D; ++z) {
            const int zz = z + kd - 1;
            if (zz < 0 || zz >= D) continue;
            for (int y = 0; y < H; ++y) {
              const int yy = y + kh - 1;
              if (yy < 0 || yy >= H) continue;
              float* dst = dx_c + zz * plane + static_cast<int64_t>(yy) * W + dst_x;
              const float* src = row + z * plane + static_cast<int64_t>(y) * W + src_x;
              for (int x = 0; x < len; ++x) dst[x] += src[x];
            }
          }
        }
      }
    }
  }
}

// One graph runs per thread; the im2col scratches are reused across graphs to
// avoid refaulting fresh multi-megabyte buffers every training step.
thread_local std::vector<float> col_scratch_;
thread_local std::vector<float> dcol_scratch_;

}  // namespace

NodeId Graph::conv3d(NodeId input, NodeId kernel, NodeId bias) {
  const Tensor& x = value(input);
  const Tensor& w = value(kernel);
  const Tensor& b = value(bias);
  if (x.ndim() != 5) throw ValidationError("conv3d input must be [N,C,D,H,W]");
  if (w.ndim() != 5 || w.dim(2) != 3 || w.dim(3) != 3 || w.dim(4) != 3) {
    throw ValidationError("conv3d kernel must be [F,C,3,3,3]");
  }
  if (x.dim(1) != w.dim(1)) {
    throw ValidationError("conv3d input channels do not match kernel channels");
  }
  const int F = w.dim(0);
  if (b.numel() != F) throw ValidationError("conv3d bias length must equal filter count");

  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t vol = static_cast<int64_t>(D) * H * W;
  const int K = C * 27;

  Node n;
  n.op = OpKind::kConv3d;
  n.inputs = {input, kernel, bias};
  n.n_inputs = 3;
  n.needs_grad = node(input).needs_grad || node(kernel).needs_grad || node(bias).needs_grad;
  n.t = Tensor({N, F, D, H, W});

  col_scratch_.resize(static_cast<size_t>(K) * vol);
  ConstMapMat wm(w.values.data(), F, K);
  Eigen::Map<const Eigen::VectorXf> bv(b.values.data(), F);
  for (int s = 0; s < N; ++s) {
    im2col_3x3x3(x.values.data() + static_cast<int64_t>(s) * C * vol, C, D, H, W,
                 col_scratch_.data());
    ConstMapMat col(col_scratch_.data(), K, vol);
    MapMat out(n.t.values.data() + static_cast<int64_t>(s) * F * vol, F, vol);
    out.noalias() = wm * col;
    out.colwise() += bv;
  }
  return push(std::move(n));
}

void Graph::backward_conv3d(Node& n) {
  Node& xin = node(n.inputs[0]);
  Node& win = node(n.inputs[1]);
  Node& bin = node(n.inputs[2]);
  const Tensor& x = xin.t;
  const Tensor& w = win.t;
  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int F = w.dim(0);
  const int64_t vol = static_cast<int64_t>(D) * H * W;
  const int K = C * 27;

  if (xin.needs_grad) ensure_grad(n.inputs[0]);
  if (win.needs_grad) ensure_grad(n.inputs[1]);
  if (bin.needs_grad) ensure_grad(n.inputs[2]);

  col_scratch_.resize(static_cast<size_t>(K) * vol);
  std::vector<float>& dcol = dcol_scratch_;
  if (xin.needs_grad) dcol.resize(static_cast<size_t>(K) * vol);

  using StridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
  constexpr int64_t kPBlock = 4096;  // keeps dY/col panels in cache for dW

  ConstMapMat wm(w.values.data(), F, K);
  for (int s = 0; s < N; ++s) {
    ConstMapMat dy(n.t.grad.data() + static_cast<int64_t>(s) * F * vol, F, vol);
    if (bin.needs_grad) {
      // fixed-order reduction: Eigen's vectorized row sums peel by pointer
      // alignment, which would make rounding depend on heap addresses
      const float* dyp = n.t.grad.data() + static_cast<int64_t>(s) * F * vol;
      for (int f = 0; f < F; ++f) {
        double acc = 0.0;
        const float* row = dyp + static_cast<int64_t>(f) * vol;
        for (int64_t p = 0; p < vol; ++p) acc += row[p];
        bin.t.grad[static_cast<size_t>(f)] += static_cast<float>(acc);
      }
    }
    if (win.needs_grad) {
      im2col_3x3x3(x.values.data() + static_cast<int64_t>(s) * C * vol, C, D, H, W,
                   col_scratch_.data());
      MapMat dw(win.t.grad.data(), F, K);
      // dW += dY * col^T, blocked over the voxel axis; the full-width product
      // degenerates in the tiny-M, tiny-N, huge-K regime.
      for (int64_t p0 = 0; p0 < vol; p0 += kPBlock) {
        const int64_t len = std::min<int64_t>(kPBlock, vol - p0);
        StridedMap dyb(n.t.grad.data() + static_cast<int64_t>(s) * F * vol + p0, F, len,
                       Eigen::OuterStride<>(vol));
        StridedMap colb(col_scratch_.data() + p0, K, len, Eigen::OuterStride<>(vol));
        dw.noalias() += dyb * colb.transpose();
      }
    }
    if (xin.needs_grad) {
      MapMat dc(dcol.data(), K, vol);
      dc.noalias() = wm.transpose() * dy;
      col2im_3x3x3(dcol.data(), C, D, H, W,
                   xin.t.grad.data() + static_cast<int64_t>(s) * C * vol);
    }
  }
}

// ---------------------------------------------------------------------------
// maxpool3d
// ---------------------------------------------------------------------------

NodeId Graph::maxpool3d(NodeId input) {
  const Tensor& x = value(input);
  if (x.ndim() != 5) throw ValidationError("maxpool3d input must be [N,C,D,H,W]");
  const int N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int Do = (D + 1) / 2, Ho = (H + 1) / 2, Wo = (W + 1) / 2;

  Node n;
  n.op = OpKind::kMaxPool3d;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t = Tensor({N, C, Do, Ho, Wo});
  n.arg.resize(n.t.values.size());

  const int64_t in_plane = static_cast<int64_t>(H) * W;
  const int64_t in_vol = static_cast<int64_t>(D) * in_plane;
  int64_t o = 0;
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const float* in = x.values.data() + nc * in_vol;
    const int64_t base = nc * in_vol;
    for (int zo = 0; zo < Do; ++zo) {
      const int z0 = 2 * zo;
      const int nz = z0 + 1 < D ? 2 : 1;
      for (int yo = 0; yo < Ho; ++yo) {
        const int y0 = 2 * yo;
        const int ny = y0 + 1 < H ? 2 : 1;
        // the at most four contributing input rows, in flat-index order
        const float* rows[4];
        int64_t offs[4];
        int nrows = 0;
        for (int dz = 0; dz < nz; ++dz) {
          for (int dy = 0; dy < ny; ++dy) {
            offs[nrows] = (z0 + dz) * in_plane + static_cast<int64_t>(y0 + dy) * W;
            rows[nrows] = in + offs[nrows];
            ++nrows;
          }
        }
        for (int xo = 0; xo < Wo; ++xo, ++o) {
          const int x0 = 2 * xo;
          const int nx = x0 + 1 < W ? 2 : 1;
          float best = -std::numeric_limits<float>::infinity();
          int64_t best_idx = -1;
          for (int r = 0; r < nrows; ++r) {
            for (int dx = 0; dx < nx; ++dx) {
              const float v = rows[r][x0 + dx];
              if (v > best) {  // strict: first (lowest flat index) wins ties
                best = v;
                best_idx = offs[r] + x0 + dx;
              }
            }
          }
          n.t.values[static_cast<size_t>(o)] = best;
          n.arg[static_cast<size_t>(o)] = static_cast<int32_t>(base + best_idx);
        }
      }
    }
  }
  return push(std::move(n));
}

void Graph::backward_maxpool3d(Node& n) {
  Node& xin = node(n.inputs[0]);
  if (!xin.needs_grad) return;
  ensure_grad(n.inputs[0]);
  for (size_t i = 0; i < n.t.grad.size(); ++i) {
    xin.t.grad[static_cast<size_t>(n.arg[i])] += n.t.grad[i];
  }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

NodeId Graph::linear(NodeId input, NodeId weight, NodeId bias) {
  const Tensor& x = value(input);
  const Tensor& w = value(weight);
  const Tensor& b = value(bias);
  if (x.ndim() != 2 || w.ndim() != 2) throw ValidationError("linear expects 2-d input and weight");
  if (x.dim(1) != w.dim(1)) throw ValidationError("linear inner dimensions do not agree");
  if (b.numel() != w.dim(0)) throw ValidationError("linear bias length must equal output width");

  const int N = x.dim(0), K = x.dim(1), M = w.dim(0);
  Node n;
  n.op = OpKind::kLinear;
  n.inputs = {input, weight, bias};
  n.n_inputs = 3;
  n.needs_grad = node(input).needs_grad || node(weight).needs_grad || node(bias).needs_grad;
  n.t = Tensor({N, M});

  ConstMapMat xm(x.values.data(), N, K);
  ConstMapMat wm(w.values.data(), M, K);
  MapMat out(n.t.values.data(), N, M);
  out.noalias() = xm * wm.transpose();
  out.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.values.data(), M);
  return push(std::move(n));
}

void Graph::backward_linear(Node& n) {
  Node& xin = node(n.inputs[0]);
  Node& win = node(n.inputs[1]);
  Node& bin = node(n.inputs[2]);
  const int N = xin.t.dim(0), K = xin.t.dim(1), M = win.t.dim(0);
  ConstMapMat dy(n.t.grad.data(), N, M);
  if (xin.needs_grad) {
    ensure_grad(n.inputs[0]);
    MapMat dx(xin.t.grad.data(), N, K);
    ConstMapMat wm(win.t.values.data(), M, K);
    dx.noalias() += dy * wm;
  }
  if (win.needs_grad) {
    ensure_grad(n.inputs[1]);
    MapMat dw(win.t.grad.data(), M, K);
    ConstMapMat xm(xin.t.values.data(), N, K);
    dw.noalias() += dy.transpose() * xm;
  }
  if (bin.needs_grad) {
    ensure_grad(n.inputs[2]);
    for (int m = 0; m < M; ++m) {
      double acc = 0.0;
      for (int i = 0; i < N; ++i) acc += n.t.grad[static_cast<size_t>(i) * M + m];
      bin.t.grad[static_cast<size_t>(m)] += static_cast<float>(acc);
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise ops and losses
// ---------------------------------------------------------------------------

NodeId Graph::relu(NodeId input) {
  const Tensor& x = value(input);
  Node n;
  n.op = OpKind::kRelu;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t.shape = x.shape;
  n.t.values.resize(x.values.size());
  for (size_t i = 0; i < x.values.size(); ++i) {
    n.t.values[i] = x.values[i] > 0.0f ? x.values[i] : 0.0f;
  }
  return push(std::move(n));
}

NodeId Graph::dropout(NodeId input, float rate, bool training, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) {
    throw ValidationError("dropout rate must lie in [0, 1)");
  }
  const Tensor& x = value(input);
  Node n;
  n.op = OpKind::kDropout;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t.shape = x.shape;
  if (!training || rate == 0.0f) {
    n.t.values = x.values;  // eval mode is the exact identity
    return push(std::move(n));
  }
  const float scale = 1.0f / (1.0f - rate);
  n.mask.resize(x.values.size());
  n.t.values.resize(x.values.size());
  for (size_t i = 0; i < x.values.size(); ++i) {
    n.mask[i] = rng.uniform() < rate ? 0.0f : scale;
    n.t.values[i] = x.values[i] * n.mask[i];
  }
  return push(std::move(n));
}

NodeId Graph::bce_with_logits(NodeId logits, NodeId labels) {
  const Tensor& z = value(logits);
  const Tensor& y = value(labels);
  if (z.numel() != y.numel()) throw ValidationError("bce: logits/labels length mismatch");
  if (z.numel() == 0) throw ValidationError("bce: empty input");
  for (const float v : y.values) {
    if (v != 0.0f && v != 1.0f) throw ValidationError("bce: labels must be exactly 0 or 1");
  }
  Node n;
  n.op = OpKind::kBceWithLogits;
  n.inputs = {logits, labels, -1};
  n.n_inputs = 2;
  n.needs_grad = node(logits).needs_grad || node(labels).needs_grad;
  double acc = 0.0;
  for (size_t i = 0; i < z.values.size(); ++i) {
    const double zi = z.values[i];
    const double yi = y.values[i];
    acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
  }
  n.t = Tensor({1});
  n.t.values[0] = static_cast<float>(acc / static_cast<double>(z.numel()));
  return push(std::move(n));
}

NodeId Graph::mse_loss(NodeId prediction, NodeId target) {
  const Tensor& a = value(prediction);
  const Tensor& b = value(target);
  if (a.numel() != b.numel()) throw ValidationError("mse: length mismatch");
  if (a.numel() == 0) throw ValidationError("mse: empty input");
  Node n;
  n.op = OpKind::kMseLoss;
  n.inputs = {prediction, target, -1};
  n.n_inputs = 2;
  n.needs_grad = node(prediction).needs_grad || node(target).needs_grad;
  double acc = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    acc += d * d;
  }
  n.t = Tensor({1});
  n.t.values[0] = static_cast<float>(acc / static_cast<double>(a.numel()));
  return push(std::move(n));
}

NodeId Graph::sum(NodeId input) {
  const Tensor& x = value(input);
  Node n;
  n.op = OpKind::kSum;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  double acc = 0.0;
  for (const float v : x.values) acc += v;
  n.t = Tensor({1});
  n.t.values[0] = static_cast<float>(acc);
  return push(std::move(n));
}

NodeId Graph::square(NodeId input) {
  const Tensor& x = value(input);
  Node n;
  n.op = OpKind::kSquare;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t.shape = x.shape;
  n.t.values.resize(x.values.size());
  for (size_t i = 0; i < x.values.size(); ++i) n.t.values[i] = x.values[i] * x.values[i];
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId input, std::vector<int> new_shape) {
  const Tensor& x = value(input);
  int64_t p = 1;
  for (const int d : new_shape) {
    if (d <= 0) throw ValidationError("reshape: dimensions must be positive");
    p *= d;
  }
  if (p != x.numel()) throw ValidationError("reshape must preserve element count");
  Node n;
  n.op = OpKind::kReshape;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t.shape = std::move(new_shape);
  n.t.values = x.values;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId input, float factor) {
  const Tensor& x = value(input);
  Node n;
  n.op = OpKind::kScale;
  n.inputs = {input, -1, -1};
  n.n_inputs = 1;
  n.needs_grad = node(input).needs_grad;
  n.t.shape = x.shape;
  n.t.values.resize(x.values.size());
  n.mask.assign(1, factor);  // reuse the mask slot for the factor
  for (size_t i = 0; i < x.values.size(); ++i) n.t.values[i] = x.values[i] * factor;
  return push(std::move(n));
}

NodeId Graph::concat(const std::vector<NodeId>& parts) {
  if (parts.empty() || parts.size() > 3) {
    throw ValidationError("concat takes between 1 and 3 inputs");
  }
  int rows = -1;
  int cols = 0;
  for (const NodeId id : parts) {
    const Tensor& t = value(id);
    if (t.ndim() != 2) throw ValidationError("concat expects 2-d inputs");
    if (rows < 0) rows = t.dim(0);
    if (t.dim(0) != rows) throw ValidationError("concat: row counts must agree");
    cols += t.dim(1);
  }
  Node n;
  n.op = OpKind::kConcat;
  n.n_inputs = static_cast<int>(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) {
    n.inputs[i] = parts[i];
    n.needs_grad = n.needs_grad || node(parts[i]).needs_grad;
  }
  n.t = Tensor({rows, cols});
  int64_t col_off = 0;
  for (const NodeId id : parts) {
    const Tensor& t = value(id);
    const int w = t.dim(1);
    for (int r = 0; r < rows; ++r) {
      std::memcpy(n.t.values.data() + static_cast<int64_t>(r) * cols + col_off,
                  t.values.data() + static_cast<int64_t>(r) * w, sizeof(float) * w);
    }
    col_off += w;
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(NodeId loss) {
  check_id(loss);
  if (value(loss).numel() != 1) {
    throw ValidationError("backward requires a scalar loss");
  }
  ensure_grad(loss);
  node(loss).t.grad[0] = 1.0f;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.t.grad.empty() || n.op == OpKind::kLeaf) continue;
    switch (n.op) {
      case OpKind::kConv3d:
        backward_conv3d(n);
        break;
      case OpKind::kMaxPool3d:
        backward_maxpool3d(n);
        break;
      case OpKind::kLinear:
        backward_linear(n);
        break;
      case OpKind::kRelu: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        for (size_t i = 0; i < n.t.grad.size(); ++i) {
          if (xin.t.values[i] > 0.0f) xin.t.grad[i] += n.t.grad[i];
        }
        break;
      }
      case OpKind::kDropout: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        if (n.mask.empty()) {
          for (size_t i = 0; i < n.t.grad.size(); ++i) xin.t.grad[i] += n.t.grad[i];
        } else {
          for (size_t i = 0; i < n.t.grad.size(); ++i) xin.t.grad[i] += n.t.grad[i] * n.mask[i];
        }
        break;
      }
      case OpKind::kBceWithLogits: {
        Node& zin = node(n.inputs[0]);
        Node& yin = node(n.inputs[1]);
        const float g = n.t.grad[0];
        const float inv_n = 1.0f / static_cast<float>(zin.t.numel());
        if (zin.needs_grad) {
          ensure_grad(n.inputs[0]);
          for (size_t i = 0; i < zin.t.values.size(); ++i) {
            zin.t.grad[i] += g * (sigmoidf(zin.t.values[i]) - yin.t.values[i]) * inv_n;
          }
        }
        if (yin.needs_grad) {
          ensure_grad(n.inputs[1]);
          for (size_t i = 0; i < yin.t.values.size(); ++i) {
            yin.t.grad[i] += g * (-zin.t.values[i]) * inv_n;
          }
        }
        break;
      }
      case OpKind::kMseLoss: {
        Node& ain = node(n.inputs[0]);
        Node& bin = node(n.inputs[1]);
        const float g = n.t.grad[0];
        const float inv_n = 1.0f / static_cast<float>(ain.t.numel());
        if (ain.needs_grad) ensure_grad(n.inputs[0]);
        if (bin.needs_grad) ensure_grad(n.inputs[1]);
        for (size_t i = 0; i < ain.t.values.size(); ++i) {
          const float d = 2.0f * (ain.t.values[i] - bin.t.values[i]) * inv_n;
          if (ain.needs_grad) ain.t.grad[i] += g * d;
          if (bin.needs_grad) bin.t.grad[i] -= g * d;
        }
        break;
      }
      case OpKind::kSum: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        const float g = n.t.grad[0];
        for (size_t i = 0; i < xin.t.values.size(); ++i) xin.t.grad[i] += g;
        break;
      }
      case OpKind::kSquare: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        for (size_t i = 0; i < n.t.grad.size(); ++i) {
          xin.t.grad[i] += n.t.grad[i] * 2.0f * xin.t.values[i];
        }
        break;
      }
      case OpKind::kReshape: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        for (size_t i = 0; i < n.t.grad.size(); ++i) xin.t.grad[i] += n.t.grad[i];
        break;
      }
      case OpKind::kScale: {
        Node& xin = node(n.inputs[0]);
        if (!xin.needs_grad) break;
        ensure_grad(n.inputs[0]);
        const float factor = n.mask[0];
        for (size_t i = 0; i < n.t.grad.size(); ++i) xin.t.grad[i] += n.t.grad[i] * factor;
        break;
      }
      case OpKind::kConcat: {
        const int rows = n.t.dim(0);
        const int cols = n.t.dim(1);
        int64_t col_off = 0;
        for (int k = 0; k < n.n_inputs; ++k) {
          Node& xin = node(n.inputs[static_cast<size_t>(k)]);
          const int w = xin.t.dim(1);
          if (xin.needs_grad) {
            ensure_grad(n.inputs[static_cast<size_t>(k)]);
            for (int r = 0; r < rows; ++r) {
              const float* src = n.t.grad.data() + static_cast<int64_t>(r) * cols + col_off;
              float* dst = xin.t.grad.data() + static_cast<int64_t>(r) * w;
              for (int j = 0; j < w; ++j) dst[j] += src[j];
            }
          }
          col_off += w;
        }
        break;
      }
      case OpKind::kLeaf:
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(std::vector<float>& param, const std::vector<float>& grad, AdamState& state) {
  if (param.size() != grad.size()) {
    throw ValidationError("adam_step: parameter/gradient length mismatch");
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0f);
    state.v.assign(param.size(), 0.0f);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw ValidationError("adam_step: state length mismatch");
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), state.step_count);
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), state.step_count);
  const float lr = state.learning_rate;
  for (size_t i = 0; i < param.size(); ++i) {
    const float g = grad[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0f - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0f - state.beta2) * g * g;
    const float m_hat = state.m[i] / static_cast<float>(bc1);
    const float v_hat = state.v[i] / static_cast<float>(bc2);
    param[i] -= lr * state.weight_decay * param[i] +
                lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

}  // namespace petfuse
