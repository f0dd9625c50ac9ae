#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace corevi::ad {

using Mat = Eigen::MatrixXd;
using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

// Every value is a dense 2-D double array; scalars are 1x1. Elementwise
// binary ops broadcast over both dims NumPy-style (sizes equal or 1).
enum class Op : std::uint8_t {
  kConstant,
  kVariable,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kTranspose,
  kNegate,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kLogSigmoid,
  kSquare,
  kSqrt,
  kReciprocal,
  kStep,        // heaviside with step(0) = 0; gradient defined as zero
  kArgmaxMask,  // 1/(tie count) at per-axis maxima; gradient defined as zero
  kScale,       // x * scalar
  kAddScalar,   // x + scalar
  kReduceSum,
  kReduceMax,
  kLogSumExp,  // max-subtracted internally
  kConcat,
  kBlock,    // contiguous sub-matrix
  kReshape,  // row-major element order
};

// Reduction target: kAll -> 1x1, kRows -> 1xc (collapse rows),
// kCols -> rx1 (collapse cols). For kConcat the axis names the stacking
// direction instead: kRows stacks vertically, kCols horizontally.
enum class Axis : std::uint8_t { kAll, kRows, kCols };

struct Node {
  Op op;
  Axis axis = Axis::kAll;
  std::vector<NodeId> parents;
  double scalar = 0.0;          // kScale / kAddScalar coefficient
  std::array<int, 4> geom{0, 0, 0, 0};  // kBlock: r0,c0,rows,cols; kReshape: rows,cols
  std::string name;             // kVariable only
  Mat value;
};

// Append-only computation record. Values are computed eagerly at node
// creation, so tape order is a valid topological order. The reverse pass
// emits adjoint nodes into the same tape, which makes gradients themselves
// differentiable; that is what lets an optimizer's unrolled update chain be
// differentiated end to end.
class Tape {
 public:
  // ---- leaves ----
  NodeId constant(Mat value);
  NodeId scalar(double v) { return constant(Mat::Constant(1, 1, v)); }
  NodeId zeros(Eigen::Index r, Eigen::Index c) { return constant(Mat::Zero(r, c)); }
  NodeId ones(Eigen::Index r, Eigen::Index c) { return constant(Mat::Ones(r, c)); }
  NodeId variable(const std::string& name, Mat value);

  // ---- primitives ----
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId x);
  NodeId negate(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId tanh(NodeId x);
  NodeId relu(NodeId x);
  NodeId log_sigmoid(NodeId x);
  NodeId square(NodeId x);
  NodeId sqrt(NodeId x);
  NodeId reciprocal(NodeId x);
  NodeId step(NodeId x);
  NodeId argmax_mask(NodeId x, Axis axis);
  NodeId scale(NodeId x, double c);
  NodeId add_scalar(NodeId x, double c);
  NodeId reduce_sum(NodeId x, Axis axis = Axis::kAll);
  NodeId reduce_max(NodeId x, Axis axis = Axis::kAll);
  NodeId log_sum_exp(NodeId x, Axis axis = Axis::kAll);
  NodeId concat(std::vector<NodeId> parts, Axis axis);
  NodeId block(NodeId x, int r0, int c0, int rows, int cols);
  NodeId reshape(NodeId x, int rows, int cols);

  // ---- composites ----
  NodeId log_softmax(NodeId x, Axis axis) { return sub(x, log_sum_exp(x, axis)); }
  NodeId softmax(NodeId x, Axis axis) { return exp(log_softmax(x, axis)); }
  NodeId sigmoid(NodeId x) { return exp(log_sigmoid(x)); }
  NodeId softplus(NodeId x) { return negate(log_sigmoid(negate(x))); }
  NodeId mean(NodeId x, Axis axis = Axis::kAll);
  NodeId row(NodeId x, int r);
  NodeId col(NodeId x, int c);

  // ---- access ----
  const Mat& value(NodeId id) const;
  std::pair<Eigen::Index, Eigen::Index> shape(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const;
  NodeId lookup(const std::string& name) const;  // kNoNode if unknown
  const std::vector<std::pair<std::string, NodeId>>& variables() const { return variables_; }

  // Recompute every node's value with fresh variable bindings. All
  // registered variables must be bound; shapes must match registration.
  void evaluate(const std::map<std::string, Mat>& bindings);

  // Reverse pass from a scalar output. Emits adjoint nodes into this tape
  // and returns one adjoint id per requested node (kNoNode when the output
  // does not depend on it). The emitted subgraph is differentiable again.
  std::vector<NodeId> backward(NodeId output, std::span<const NodeId> wrt);

  // Numeric gradient: backward + copy out values + roll the tape back to
  // its pre-backward size. Zero matrices stand in for absent dependencies.
  std::vector<Mat> gradient(NodeId output, std::span<const NodeId> wrt);

  // Checkpointing for iterative training loops: mark the tape length, build
  // and differentiate a step, then truncate to release the step's nodes.
  std::size_t mark() const { return nodes_.size(); }
  void truncate(std::size_t mark);

 private:
  NodeId push(Node n);
  Mat compute(const Node& n) const;
  void check_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> variables_;
};

struct UnrolledResult {
  std::vector<Mat> grads;          // d outer_loss / d wrt, through all steps
  std::vector<NodeId> final_params;
  NodeId outer_loss = kNoNode;
};

// Differentiates an outer loss through T emitted inner update steps.
// inner_step maps (tape, params, t) to updated parameter nodes; outer_loss
// builds a scalar node from the final parameters. With T = 0 this reduces to
// a direct gradient of outer_loss(psi0).
UnrolledResult unrolled_gradient(
    Tape& tape, std::vector<NodeId> psi0, int steps,
    const std::function<std::vector<NodeId>(Tape&, const std::vector<NodeId>&, int)>& inner_step,
    const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& outer_loss,
    std::span<const NodeId> wrt);

}  // namespace corevi::ad
