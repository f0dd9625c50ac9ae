#include "corevi/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace corevi::ad {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("tape: " + msg); }

std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Broadcast-compatible result dims: each dim equal or 1.
std::pair<Eigen::Index, Eigen::Index> binary_shape(const Mat& a, const Mat& b) {
  const bool rows_ok = a.rows() == b.rows() || a.rows() == 1 || b.rows() == 1;
  const bool cols_ok = a.cols() == b.cols() || a.cols() == 1 || b.cols() == 1;
  if (!rows_ok || !cols_ok) {
    fail("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  }
  return {std::max(a.rows(), b.rows()), std::max(a.cols(), b.cols())};
}

template <class F>
Mat broadcast_binary(const Mat& a, const Mat& b, F f) {
  const auto [r, c] = binary_shape(a, b);
  Mat out(r, c);
  const Eigen::Index ar = a.rows() == 1 ? 0 : 1;
  const Eigen::Index ac = a.cols() == 1 ? 0 : 1;
  const Eigen::Index br = b.rows() == 1 ? 0 : 1;
  const Eigen::Index bc = b.cols() == 1 ? 0 : 1;
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) {
      out(i, j) = f(a(i * ar, j * ac), b(i * br, j * bc));
    }
  }
  return out;
}

double log_sigmoid_scalar(double x) {
  // Stable on both tails: -log(1 + e^-x) for x >= 0, x - log(1 + e^x) below.
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

Mat reduce(const Mat& x, Axis axis, bool want_max) {
  switch (axis) {
    case Axis::kAll: {
      Mat out(1, 1);
      out(0, 0) = want_max ? x.maxCoeff() : x.sum();
      return out;
    }
    case Axis::kRows: {
      Mat out(1, x.cols());
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        out(0, j) = want_max ? x.col(j).maxCoeff() : x.col(j).sum();
      }
      return out;
    }
    case Axis::kCols: {
      Mat out(x.rows(), 1);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        out(i, 0) = want_max ? x.row(i).maxCoeff() : x.row(i).sum();
      }
      return out;
    }
  }
  fail("bad axis");
}

Mat log_sum_exp_impl(const Mat& x, Axis axis) {
  const Mat mx = reduce(x, axis, /*want_max=*/true);
  if (!mx.allFinite()) {
    // A -inf row/column (or any NaN) has no meaningful normalizer.
    fail("log_sum_exp over a degenerate (all -inf or NaN) slice");
  }
  const Eigen::Index mr = mx.rows() == 1 ? 0 : 1;
  const Eigen::Index mc = mx.cols() == 1 ? 0 : 1;
  Mat shifted(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      shifted(i, j) = std::exp(x(i, j) - mx(i * mr, j * mc));
    }
  }
  Mat out = reduce(shifted, axis, /*want_max=*/false);
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      out(i, j) = mx(i, j) + std::log(out(i, j));
    }
  }
  return out;
}

Mat argmax_mask_impl(const Mat& x, Axis axis) {
  const Mat mx = reduce(x, axis, /*want_max=*/true);
  const Eigen::Index mr = mx.rows() == 1 ? 0 : 1;
  const Eigen::Index mc = mx.cols() == 1 ? 0 : 1;
  Mat mask = Mat::Zero(x.rows(), x.cols());
  Mat counts = Mat::Zero(mx.rows(), mx.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (x(i, j) == mx(i * mr, j * mc)) counts(i * mr, j * mc) += 1.0;
    }
  }
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (x(i, j) == mx(i * mr, j * mc)) mask(i, j) = 1.0 / counts(i * mr, j * mc);
    }
  }
  return mask;
}

Mat reshape_row_major(const Mat& x, Eigen::Index rows, Eigen::Index cols) {
  Mat out(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out(k / cols, k % cols) = x(i, j);
      ++k;
    }
  }
  return out;
}

}  // namespace

void Tape::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    fail("node id " + std::to_string(id) + " is not on the tape");
  }
}

NodeId Tape::push(Node n) {
  n.value = compute(n);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Mat& Tape::value(NodeId id) const {
  check_id(id);
  return nodes_[id].value;
}

std::pair<Eigen::Index, Eigen::Index> Tape::shape(NodeId id) const {
  const Mat& v = value(id);
  return {v.rows(), v.cols()};
}

const Node& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

NodeId Tape::lookup(const std::string& name) const {
  for (auto it = variables_.rbegin(); it != variables_.rend(); ++it) {
    if (it->first == name) return it->second;
  }
  return kNoNode;
}

NodeId Tape::constant(Mat value) {
  if (!value.allFinite()) fail("non-finite constant");
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::variable(const std::string& name, Mat value) {
  if (!value.allFinite()) fail("non-finite value for variable '" + name + "'");
  if (name.empty()) fail("variable needs a name");
  Node n;
  n.op = Op::kVariable;
  n.name = name;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  variables_.emplace_back(name, id);
  return id;
}

Mat Tape::compute(const Node& n) const {
  auto p = [&](int i) -> const Mat& { return nodes_[n.parents[i]].value; };
  switch (n.op) {
    case Op::kConstant:
    case Op::kVariable:
      return n.value;
    case Op::kAdd:
      return broadcast_binary(p(0), p(1), [](double a, double b) { return a + b; });
    case Op::kSub:
      return broadcast_binary(p(0), p(1), [](double a, double b) { return a - b; });
    case Op::kMul:
      return broadcast_binary(p(0), p(1), [](double a, double b) { return a * b; });
    case Op::kDiv:
      return broadcast_binary(p(0), p(1), [](double a, double b) { return a / b; });
    case Op::kMatmul:
      return p(0) * p(1);
    case Op::kTranspose:
      return p(0).transpose();
    case Op::kNegate:
      return -p(0);
    case Op::kExp:
      return p(0).array().exp().matrix();
    case Op::kLog:
      return p(0).array().log().matrix();
    case Op::kTanh:
      return p(0).array().tanh().matrix();
    case Op::kRelu:
      return p(0).array().max(0.0).matrix();
    case Op::kLogSigmoid:
      return p(0).unaryExpr([](double x) { return log_sigmoid_scalar(x); });
    case Op::kSquare:
      return p(0).array().square().matrix();
    case Op::kSqrt:
      return p(0).array().sqrt().matrix();
    case Op::kReciprocal:
      return p(0).array().inverse().matrix();
    case Op::kStep:
      return p(0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Op::kArgmaxMask:
      return argmax_mask_impl(p(0), n.axis);
    case Op::kScale:
      return p(0) * n.scalar;
    case Op::kAddScalar:
      return (p(0).array() + n.scalar).matrix();
    case Op::kReduceSum:
      return reduce(p(0), n.axis, /*want_max=*/false);
    case Op::kReduceMax:
      return reduce(p(0), n.axis, /*want_max=*/true);
    case Op::kLogSumExp:
      return log_sum_exp_impl(p(0), n.axis);
    case Op::kConcat: {
      Eigen::Index total = 0;
      for (NodeId pid : n.parents) {
        total += n.axis == Axis::kRows ? nodes_[pid].value.rows() : nodes_[pid].value.cols();
      }
      const Mat& first = nodes_[n.parents[0]].value;
      Mat out = n.axis == Axis::kRows ? Mat(total, first.cols()) : Mat(first.rows(), total);
      Eigen::Index at = 0;
      for (NodeId pid : n.parents) {
        const Mat& part = nodes_[pid].value;
        if (n.axis == Axis::kRows) {
          out.middleRows(at, part.rows()) = part;
          at += part.rows();
        } else {
          out.middleCols(at, part.cols()) = part;
          at += part.cols();
        }
      }
      return out;
    }
    case Op::kBlock:
      return p(0).block(n.geom[0], n.geom[1], n.geom[2], n.geom[3]);
    case Op::kReshape:
      return reshape_row_major(p(0), n.geom[0], n.geom[1]);
  }
  fail("bad op");
}

// ---- op builders ----

namespace {
Node make(Op op, std::vector<NodeId> parents) {
  Node n;
  n.op = op;
  n.parents = std::move(parents);
  return n;
}
}  // namespace

NodeId Tape::add(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  binary_shape(value(a), value(b));
  return push(make(Op::kAdd, {a, b}));
}
NodeId Tape::sub(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  binary_shape(value(a), value(b));
  return push(make(Op::kSub, {a, b}));
}
NodeId Tape::mul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  binary_shape(value(a), value(b));
  return push(make(Op::kMul, {a, b}));
}
NodeId Tape::div(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  binary_shape(value(a), value(b));
  return push(make(Op::kDiv, {a, b}));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  if (value(a).cols() != value(b).rows()) {
    fail("matmul inner dims " + shape_str(value(a)) + " * " + shape_str(value(b)));
  }
  return push(make(Op::kMatmul, {a, b}));
}

NodeId Tape::transpose(NodeId x) {
  check_id(x);
  return push(make(Op::kTranspose, {x}));
}
NodeId Tape::negate(NodeId x) {
  check_id(x);
  return push(make(Op::kNegate, {x}));
}
NodeId Tape::exp(NodeId x) {
  check_id(x);
  return push(make(Op::kExp, {x}));
}
NodeId Tape::log(NodeId x) {
  check_id(x);
  return push(make(Op::kLog, {x}));
}
NodeId Tape::tanh(NodeId x) {
  check_id(x);
  return push(make(Op::kTanh, {x}));
}
NodeId Tape::relu(NodeId x) {
  check_id(x);
  return push(make(Op::kRelu, {x}));
}
NodeId Tape::log_sigmoid(NodeId x) {
  check_id(x);
  return push(make(Op::kLogSigmoid, {x}));
}
NodeId Tape::square(NodeId x) {
  check_id(x);
  return push(make(Op::kSquare, {x}));
}
NodeId Tape::sqrt(NodeId x) {
  check_id(x);
  return push(make(Op::kSqrt, {x}));
}
NodeId Tape::reciprocal(NodeId x) {
  check_id(x);
  return push(make(Op::kReciprocal, {x}));
}
NodeId Tape::step(NodeId x) {
  check_id(x);
  return push(make(Op::kStep, {x}));
}

NodeId Tape::argmax_mask(NodeId x, Axis axis) {
  check_id(x);
  Node n = make(Op::kArgmaxMask, {x});
  n.axis = axis;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double c) {
  check_id(x);
  if (!std::isfinite(c)) fail("non-finite scale");
  Node n = make(Op::kScale, {x});
  n.scalar = c;
  return push(std::move(n));
}

NodeId Tape::add_scalar(NodeId x, double c) {
  check_id(x);
  if (!std::isfinite(c)) fail("non-finite shift");
  Node n = make(Op::kAddScalar, {x});
  n.scalar = c;
  return push(std::move(n));
}

NodeId Tape::reduce_sum(NodeId x, Axis axis) {
  check_id(x);
  Node n = make(Op::kReduceSum, {x});
  n.axis = axis;
  return push(std::move(n));
}

NodeId Tape::reduce_max(NodeId x, Axis axis) {
  check_id(x);
  Node n = make(Op::kReduceMax, {x});
  n.axis = axis;
  return push(std::move(n));
}

NodeId Tape::log_sum_exp(NodeId x, Axis axis) {
  check_id(x);
  Node n = make(Op::kLogSumExp, {x});
  n.axis = axis;
  return push(std::move(n));
}

NodeId Tape::concat(std::vector<NodeId> parts, Axis axis) {
  if (parts.empty()) fail("concat of nothing");
  if (axis == Axis::kAll) fail("concat needs a stacking axis");
  for (NodeId id : parts) check_id(id);
  const Mat& first = value(parts[0]);
  for (NodeId id : parts) {
    const Mat& m = value(id);
    const bool ok = axis == Axis::kRows ? m.cols() == first.cols() : m.rows() == first.rows();
    if (!ok) fail("concat parts disagree: " + shape_str(first) + " vs " + shape_str(m));
  }
  Node n = make(Op::kConcat, std::move(parts));
  n.axis = axis;
  return push(std::move(n));
}

NodeId Tape::block(NodeId x, int r0, int c0, int rows, int cols) {
  check_id(x);
  const Mat& v = value(x);
  if (r0 < 0 || c0 < 0 || rows <= 0 || cols <= 0 || r0 + rows > v.rows() || c0 + cols > v.cols()) {
    fail("block out of range");
  }
  Node n = make(Op::kBlock, {x});
  n.geom = {r0, c0, rows, cols};
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId x, int rows, int cols) {
  check_id(x);
  if (rows <= 0 || cols <= 0 || rows * static_cast<long>(cols) != value(x).size()) {
    fail("reshape element count mismatch");
  }
  Node n = make(Op::kReshape, {x});
  n.geom = {rows, cols, 0, 0};
  return push(std::move(n));
}

NodeId Tape::mean(NodeId x, Axis axis) {
  const auto [r, c] = shape(x);
  double denom = 1.0;
  switch (axis) {
    case Axis::kAll: denom = static_cast<double>(r * c); break;
    case Axis::kRows: denom = static_cast<double>(r); break;
    case Axis::kCols: denom = static_cast<double>(c); break;
  }
  return scale(reduce_sum(x, axis), 1.0 / denom);
}

NodeId Tape::row(NodeId x, int r) {
  const auto [rows, cols] = shape(x);
  (void)rows;
  return block(x, r, 0, 1, static_cast<int>(cols));
}

NodeId Tape::col(NodeId x, int c) {
  const auto [rows, cols] = shape(x);
  (void)cols;
  return block(x, 0, c, static_cast<int>(rows), 1);
}

// ---- re-evaluation ----

void Tape::evaluate(const std::map<std::string, Mat>& bindings) {
  for (const auto& [name, id] : variables_) {
    auto it = bindings.find(name);
    if (it == bindings.end()) fail("unbound variable '" + name + "'");
    const Mat& bound = it->second;
    if (!bound.allFinite()) fail("non-finite binding for '" + name + "'");
    if (bound.rows() != nodes_[id].value.rows() || bound.cols() != nodes_[id].value.cols()) {
      fail("binding shape mismatch for '" + name + "'");
    }
  }
  for (auto& n : nodes_) {
    if (n.op == Op::kVariable) {
      n.value = bindings.at(n.name);
    } else if (n.op != Op::kConstant) {
      n.value = compute(n);
    }
  }
}

// ---- reverse pass ----

namespace {

// Collapse g back to a broadcast operand's shape by summing the expanded dims.
NodeId reduce_to_shape(Tape& t, NodeId g, Eigen::Index rows, Eigen::Index cols) {
  auto [gr, gc] = t.shape(g);
  NodeId out = g;
  if (rows == 1 && gr > 1) {
    out = t.reduce_sum(out, Axis::kRows);
  }
  if (cols == 1 && gc > 1) {
    out = t.reduce_sum(out, Axis::kCols);
  }
  return out;
}

}  // namespace

std::vector<NodeId> Tape::backward(NodeId output, std::span<const NodeId> wrt) {
  check_id(output);
  for (NodeId id : wrt) check_id(id);
  if (value(output).size() != 1) {
    fail("backward needs a scalar (1x1) output, got " + shape_str(value(output)));
  }

  // adjoint[i] accumulates d output / d node_i as emitted nodes. Children
  // always have larger ids than parents, so a reverse scan settles each
  // node's adjoint before it is propagated.
  std::vector<NodeId> adjoint(static_cast<std::size_t>(output) + 1, kNoNode);
  adjoint[output] = ones(1, 1);

  auto accumulate = [&](NodeId parent, NodeId contribution) {
    if (parent > output) return;  // created after the output; cannot feed it
    adjoint[parent] =
        adjoint[parent] == kNoNode ? contribution : add(adjoint[parent], contribution);
  };

  for (NodeId i = output; i >= 0; --i) {
    const NodeId g = adjoint[i];
    if (g == kNoNode) continue;
    // Copy what we need: emission may reallocate nodes_.
    const Op op = nodes_[i].op;
    const Axis axis = nodes_[i].axis;
    const double sc = nodes_[i].scalar;
    const auto geom = nodes_[i].geom;
    const std::vector<NodeId> parents = nodes_[i].parents;

    auto pshape = [&](int k) { return shape(parents[k]); };

    switch (op) {
      case Op::kConstant:
      case Op::kVariable:
        break;
      case Op::kAdd: {
        accumulate(parents[0], reduce_to_shape(*this, g, pshape(0).first, pshape(0).second));
        accumulate(parents[1], reduce_to_shape(*this, g, pshape(1).first, pshape(1).second));
        break;
      }
      case Op::kSub: {
        accumulate(parents[0], reduce_to_shape(*this, g, pshape(0).first, pshape(0).second));
        accumulate(parents[1],
                   reduce_to_shape(*this, negate(g), pshape(1).first, pshape(1).second));
        break;
      }
      case Op::kMul: {
        accumulate(parents[0],
                   reduce_to_shape(*this, mul(g, parents[1]), pshape(0).first, pshape(0).second));
        accumulate(parents[1],
                   reduce_to_shape(*this, mul(g, parents[0]), pshape(1).first, pshape(1).second));
        break;
      }
      case Op::kDiv: {
        accumulate(parents[0],
                   reduce_to_shape(*this, div(g, parents[1]), pshape(0).first, pshape(0).second));
        // d(a/b)/db = -a / b^2
        NodeId db = negate(div(mul(g, parents[0]), square(parents[1])));
        accumulate(parents[1], reduce_to_shape(*this, db, pshape(1).first, pshape(1).second));
        break;
      }
      case Op::kMatmul: {
        accumulate(parents[0], matmul(g, transpose(parents[1])));
        accumulate(parents[1], matmul(transpose(parents[0]), g));
        break;
      }
      case Op::kTranspose:
        accumulate(parents[0], transpose(g));
        break;
      case Op::kNegate:
        accumulate(parents[0], negate(g));
        break;
      case Op::kExp:
        accumulate(parents[0], mul(g, i));
        break;
      case Op::kLog:
        accumulate(parents[0], div(g, parents[0]));
        break;
      case Op::kTanh:
        // 1 - tanh^2, reusing the forward value.
        accumulate(parents[0], mul(g, add_scalar(negate(square(i)), 1.0)));
        break;
      case Op::kRelu:
        accumulate(parents[0], mul(g, step(parents[0])));
        break;
      case Op::kLogSigmoid:
        // d/dx log sigma(x) = sigma(-x)
        accumulate(parents[0], mul(g, exp(log_sigmoid(negate(parents[0])))));
        break;
      case Op::kSquare:
        accumulate(parents[0], mul(g, scale(parents[0], 2.0)));
        break;
      case Op::kSqrt:
        accumulate(parents[0], div(g, scale(i, 2.0)));
        break;
      case Op::kReciprocal:
        accumulate(parents[0], negate(mul(g, square(i))));
        break;
      case Op::kStep:
      case Op::kArgmaxMask:
        break;  // defined to carry zero gradient
      case Op::kScale:
        accumulate(parents[0], scale(g, sc));
        break;
      case Op::kAddScalar:
        accumulate(parents[0], g);
        break;
      case Op::kReduceSum: {
        // Broadcast g back over the reduced dims.
        auto [pr, pc] = pshape(0);
        accumulate(parents[0], mul(g, ones(pr, pc)));
        break;
      }
      case Op::kReduceMax:
        accumulate(parents[0], mul(g, argmax_mask(parents[0], axis)));
        break;
      case Op::kLogSumExp:
        // d lse / dx = softmax(x) = exp(x - lse(x)), broadcast against g.
        accumulate(parents[0], mul(g, exp(sub(parents[0], i))));
        break;
      case Op::kConcat: {
        Eigen::Index at = 0;
        for (NodeId pid : parents) {
          auto [pr, pc] = shape(pid);
          if (axis == Axis::kRows) {
            accumulate(pid, block(g, static_cast<int>(at), 0, static_cast<int>(pr),
                                  static_cast<int>(pc)));
            at += pr;
          } else {
            accumulate(pid, block(g, 0, static_cast<int>(at), static_cast<int>(pr),
                                  static_cast<int>(pc)));
            at += pc;
          }
        }
        break;
      }
      case Op::kBlock: {
        // Pad g back into the parent's frame with zero borders.
        auto [pr, pc] = pshape(0);
        const int r0 = geom[0], c0 = geom[1], h = geom[2], w = geom[3];
        NodeId mid = g;
        if (c0 > 0 || c0 + w < pc) {
          std::vector<NodeId> cols_parts;
          if (c0 > 0) cols_parts.push_back(zeros(h, c0));
          cols_parts.push_back(g);
          if (c0 + w < pc) cols_parts.push_back(zeros(h, pc - c0 - w));
          mid = cols_parts.size() > 1 ? concat(std::move(cols_parts), Axis::kCols) : cols_parts[0];
        }
        NodeId full = mid;
        if (r0 > 0 || r0 + h < pr) {
          std::vector<NodeId> rows_parts;
          if (r0 > 0) rows_parts.push_back(zeros(r0, pc));
          rows_parts.push_back(mid);
          if (r0 + h < pr) rows_parts.push_back(zeros(pr - r0 - h, pc));
          full = rows_parts.size() > 1 ? concat(std::move(rows_parts), Axis::kRows) : rows_parts[0];
        }
        accumulate(parents[0], full);
        break;
      }
      case Op::kReshape: {
        auto [pr, pc] = pshape(0);
        accumulate(parents[0], reshape(g, static_cast<int>(pr), static_cast<int>(pc)));
        break;
      }
    }
  }

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId id : wrt) {
    out.push_back(id <= output ? adjoint[id] : kNoNode);
  }
  return out;
}

std::vector<Mat> Tape::gradient(NodeId output, std::span<const NodeId> wrt) {
  const std::size_t checkpoint = mark();
  const std::vector<NodeId> ids = backward(output, wrt);
  std::vector<Mat> grads;
  grads.reserve(wrt.size());
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (ids[k] == kNoNode) {
      const auto [r, c] = shape(wrt[k]);
      grads.push_back(Mat::Zero(r, c));
    } else {
      grads.push_back(value(ids[k]));
    }
  }
  truncate(checkpoint);
  return grads;
}

void Tape::truncate(std::size_t mark) {
  if (mark > nodes_.size()) fail("truncate past the end");
  nodes_.resize(mark);
  std::erase_if(variables_, [&](const auto& v) {
    return static_cast<std::size_t>(v.second) >= mark;
  });
}

UnrolledResult unrolled_gradient(
    Tape& tape, std::vector<NodeId> psi0, int steps,
    const std::function<std::vector<NodeId>(Tape&, const std::vector<NodeId>&, int)>& inner_step,
    const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& outer_loss,
    std::span<const NodeId> wrt) {
  if (steps < 0) fail("negative step count");
  std::vector<NodeId> psi = std::move(psi0);
  for (int t = 1; t <= steps; ++t) {
    psi = inner_step(tape, psi, t);
  }
  UnrolledResult result;
  result.outer_loss = outer_loss(tape, psi);
  result.final_params = std::move(psi);
  result.grads = tape.gradient(result.outer_loss, wrt);
  return result;
}

}  // namespace corevi::ad
