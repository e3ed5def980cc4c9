// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "adepth/geometry.hpp"
#include "adepth/tensor.hpp"

namespace adepth::ad {

// Closed op set: exactly what the warping pipeline and its losses need.
enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kDivScalar,  // x / s, s is a {1} node
  kAffine,     // a*x + b, constants
  kRelu,
  kElu,
  kSigmoid,
  kAbs,
  kExp,
  kReciprocal,
  kConv2d,
  kUpsample2,   // nearest x2
  kAvgPool3,    // 3x3, stride 1, valid
  kReflectPad,  // pad 1..k on H and W
  kGridSample,  // bilinear, clamp-to-edge
  kConcatC,
  kSlice,
  kMeanAll,
  kSumAll,
  kMeanC,    // mean over channels, keepdim
  kMinC,     // min over channels, keepdim, first-wins ties
  kMeanHW,   // global average pool, (C,1,1)
  kLtMask,   // Iverson [a < b], constant w.r.t. gradients
  kBatchNorm,
  kBackproject,
  kProject,
  kRodrigues,
  kRigidTransform,
};

using NodeId = int;
inline constexpr NodeId kNoNode = -1;

struct Node {
  Op op = Op::kLeaf;
  std::array<NodeId, 3> in{kNoNode, kNoNode, kNoNode};
  int nin = 0;
  Tensor out;
  Tensor grad;  // lazily allocated accumulator, shaped like out
  bool needs_grad = false;
  bool requires_grad = false;  // leaves only

  // op parameters
  int stride = 1, pad = 0;
  double a = 0.0, b = 0.0;                  // affine coefficients
  std::array<int, 3> off{0, 0, 0};          // slice offset
  std::array<int, 3> ext{0, 0, 0};          // slice extents
  geom::CameraIntrinsics intr;              // project / backproject
  Tensor* bn_rmean = nullptr;               // running stats, owned by the model
  Tensor* bn_rvar = nullptr;
  bool bn_train = false;
  double bn_momentum = 0.1, bn_eps = 1e-5;
  Tensor aux;                               // cached intermediates for backward
  std::vector<int> iaux;                    // argmin indices / concat offsets
  const Tensor* leaf_ref = nullptr;         // non-owning leaf storage
};

// Single-threaded define-by-run tape. Ops evaluate eagerly; backward() walks
// the nodes in reverse creation order. One tape per forward pass.
class Tape {
 public:
  NodeId leaf(Tensor value, bool requires_grad = false);
  NodeId leaf_ref(const Tensor* value, bool requires_grad);

  NodeId add(NodeId x, NodeId y);
  NodeId sub(NodeId x, NodeId y);
  NodeId mul(NodeId x, NodeId y);
  NodeId div(NodeId x, NodeId y);
  NodeId div_scalar(NodeId x, NodeId s);
  NodeId affine(NodeId x, double a, double b);
  NodeId relu(NodeId x);
  NodeId elu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId abs(NodeId x);
  NodeId exp(NodeId x);
  NodeId reciprocal(NodeId x);
  NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad);  // bias may be kNoNode
  NodeId upsample_nearest2(NodeId x);
  NodeId avg_pool3(NodeId x);
  NodeId reflect_pad(NodeId x, int p);
  NodeId grid_sample(NodeId image, NodeId grid);
  NodeId concat_c(std::span<const NodeId> xs);
  NodeId slice(NodeId x, std::array<int, 3> off, std::array<int, 3> ext);
  NodeId mean_all(NodeId x);
  NodeId sum_all(NodeId x);
  NodeId mean_c(NodeId x);
  NodeId min_c(NodeId x);
  NodeId mean_hw(NodeId x);
  NodeId lt_mask(NodeId a, NodeId b);
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, Tensor* rmean, Tensor* rvar,
                    bool training, double momentum = 0.1, double eps = 1e-5);
  NodeId backproject(NodeId depth, const geom::CameraIntrinsics& k);
  NodeId project(NodeId pts, const geom::CameraIntrinsics& k);
  NodeId rodrigues(NodeId w);
  NodeId rigid_transform(NodeId pts, NodeId rot, NodeId t);

  const Tensor& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].out; }
  double scalar(NodeId id) const;
  bool has_grad(NodeId id) const;
  const Tensor& grad(NodeId id) const;

  // Reverse sweep from a scalar loss. A tape can only be consumed once.
  void backward(NodeId loss);

  size_t size() const { return nodes_.size(); }
  void clear();

  // Throw NonFiniteError as soon as an op produces a non-finite value.
  bool check_finite = true;

 private:
  NodeId push(Node n);
  Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
  const Tensor& input_val(const Node& n, int i) const;
  void accumulate(NodeId id, const Tensor& g);
  void dispatch_backward(Node& n);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// --- parameters -------------------------------------------------------------

// One of the four sub-network weight sets. Trainable tensors and
// normalization running statistics are kept apart; the latter never receive
// gradients and are only written by batch-norm forward passes in training
// mode.
struct ParameterGroup {
  std::string name;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor> norm_stats;
  bool trainable = true;
  bool norm_stats_frozen = false;
};

inline bool is_norm_param(const std::string& tensor_name) {
  return tensor_name.find(".bn.") != std::string::npos;
}

using GradMap = std::map<std::string, Tensor>;

// w <- w - lr * g for every key in grads; keys must exist in the group.
void sgd_step(ParameterGroup& params, const GradMap& grads, double lr);
void sgd_step(std::map<std::string, Tensor*>& params, const GradMap& grads, double lr);

struct AdamState {
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // m, v
  int64_t step = 0;
};

void adam_step(std::map<std::string, Tensor*>& params, const GradMap& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
void adam_step(ParameterGroup& params, const GradMap& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// --- verification oracle ----------------------------------------------------

// Builds a scalar graph from a leaf holding `point`.
using TapeFn = std::function<NodeId(Tape&, NodeId)>;

// Max over checked coordinates of |analytic - central difference| /
// max(|analytic|, |cd|, 1e-12). Checks every coordinate when `coords` is
// empty. Runs at the current precision; callers wanting the documented
// tolerances should run under Precision::f64.
double finite_difference_check(const TapeFn& fn, const Tensor& point, double eps,
                               std::span<const int64_t> coords = {});

}  // namespace adepth::ad
