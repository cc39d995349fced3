// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph is an append-only tape of nodes. Every operation appends one node
// holding its value; Tensor is a cheap (graph, id) handle. Backward rules are
// written with the same differentiable operations, so when the graph is in
// GradMode::record_through_grad the gradients are themselves recorded and can
// be differentiated again.

#pragma once

#include "cinr/errors.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cinr {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

std::string shape_string(Index rows, Index cols);

namespace ad {

using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

enum class GradMode : std::uint8_t {
  record,               // forward is recorded, backward produces constants
  no_record,            // nothing is recorded; every result is a constant
  record_through_grad,  // backward is recorded too (higher-order gradients)
};

enum class Op : std::uint8_t {
  leaf,
  constant,
  matmul,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  pow,
  relu,
  sin,
  cos,
  exp,
  gelu,
  sum_all,
  sum_rows,
  sum_cols,
  broadcast_scalar,
  broadcast_rows,
  broadcast_cols,
  slice_rows,
  slice_cols,
  pad_rows,
  pad_cols,
  concat_rows,
  concat_cols,
  transpose,
  softmax_rows,
  add_row,
  mul_row,
  add_col,
  mul_col,
};

const char* op_name(Op op);

template <typename T>
struct Node {
  Op op = Op::constant;
  std::vector<NodeId> inputs;
  Matrix<T> value;
  bool requires_grad = false;
  // Op attributes: scalar factor/exponent, offsets/extents, transpose flags.
  T scalar = T(0);
  Index offset = 0;
  Index extent = 0;
  bool trans_a = false;
  bool trans_b = false;
};

template <typename T>
class Graph;

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr && id_ != kNoNode; }
  NodeId id() const { return id_; }
  Graph<T>& graph() const { return *graph_; }

  const Matrix<T>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  T item() const;

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = kNoNode;
};

template <typename T>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::record) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  GradMode mode() const { return mode_; }
  void set_mode(GradMode mode) { mode_ = mode; }
  bool recording() const { return mode_ != GradMode::no_record; }

  // Leaf that gradients can be taken with respect to. In no_record mode this
  // still creates a differentiable leaf so that evaluation-only graphs can
  // request gradients of selected inputs.
  Tensor<T> variable(Matrix<T> value);
  Tensor<T> constant(Matrix<T> value);

  // Gradients of the scalar `loss` with respect to each tensor in `wrt`, in
  // the same order. Tensors the loss does not depend on get a zero gradient.
  std::vector<Tensor<T>> backward(const Tensor<T>& loss, std::span<const Tensor<T>> wrt);

  const Node<T>& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  std::size_t bytes() const { return bytes_; }
  void clear();

  // Appends a node; inputs are dropped and requires_grad cleared when the
  // graph is not recording.
  Tensor<T> push(Node<T> node);

 private:
  std::deque<Node<T>> nodes_;
  GradMode mode_;
  std::size_t bytes_ = 0;
};

// Temporarily switches the grad mode of a graph.
template <typename T>
class ModeGuard {
 public:
  ModeGuard(Graph<T>& graph, GradMode mode) : graph_(graph), saved_(graph.mode()) {
    graph_.set_mode(mode);
  }
  ~ModeGuard() { graph_.set_mode(saved_); }
  ModeGuard(const ModeGuard&) = delete;
  ModeGuard& operator=(const ModeGuard&) = delete;

 private:
  Graph<T>& graph_;
  GradMode saved_;
};

enum class Trans : bool { no = false, yes = true };

// ---- primitives -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Trans ta = Trans::no, Trans tb = Trans::no);

// Elementwise binary ops accept equal shapes or a 1x1 operand on either side.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T shift);
template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent);

// relu'(0) is taken as 0; the second derivative is identically zero.
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sin(const Tensor<T>& x);
template <typename T>
Tensor<T> cos(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Exact (erf) GELU. First-order only.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
// M x N -> 1 x N
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x);
// M x N -> M x 1
template <typename T>
Tensor<T> sum_cols(const Tensor<T>& x);

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& x, Index rows, Index cols);
// 1 x N -> rows x N
template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& x, Index rows);
// M x 1 -> M x cols
template <typename T>
Tensor<T> broadcast_cols(const Tensor<T>& x, Index cols);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, Index begin, Index count);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, Index begin, Index count);
// Embeds x at row `begin` of a zero matrix with `total` rows.
template <typename T>
Tensor<T> pad_rows(const Tensor<T>& x, Index begin, Index total);
template <typename T>
Tensor<T> pad_cols(const Tensor<T>& x, Index begin, Index total);
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// Row / column broadcasts fused with the elementwise op:
// x (M x N) with r (1 x N) or c (M x 1).
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& r);
template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& r);
template <typename T>
Tensor<T> add_col(const Tensor<T>& x, const Tensor<T>& c);
template <typename T>
Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& c);

// Row-wise softmax, stabilized by subtracting the row max.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// ---- composites -----------------------------------------------------------

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return mul(x, x);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.rows() * x.cols()));
}


// x W^T + b for x: M x in, W: out x in, b: 1 x out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// (1/M) sum_i ||pred_i - target_i||^2. The squared norm runs over the
// columns (output channels) and is not divided by their count.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

// Normalizes every row to zero mean / unit variance, then applies gain and
// shift (both 1 x N).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T(1e-5));

// softmax(q k^T / sqrt(dk)) v.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

// ---- inline Tensor members --------------------------------------------------

template <typename T>
const Matrix<T>& Tensor<T>::value() const {
  return graph_->node(id_).value;
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return graph_->node(id_).requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(v.rows(), v.cols()));
  return v(0, 0);
}

}  // namespace ad
}  // namespace cinr
