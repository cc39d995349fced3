// SPDX-License-Identifier: Apache-2.0

#include "cinr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace cinr {

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

namespace ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::pow: return "pow";
    case Op::relu: return "relu";
    case Op::sin: return "sin";
    case Op::cos: return "cos";
    case Op::exp: return "exp";
    case Op::gelu: return "gelu";
    case Op::sum_all: return "sum_all";
    case Op::sum_rows: return "sum_rows";
    case Op::sum_cols: return "sum_cols";
    case Op::broadcast_scalar: return "broadcast_scalar";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::broadcast_cols: return "broadcast_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_rows: return "pad_rows";
    case Op::pad_cols: return "pad_cols";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::transpose: return "transpose";
    case Op::softmax_rows: return "softmax_rows";
    case Op::add_row: return "add_row";
    case Op::mul_row: return "mul_row";
    case Op::add_col: return "add_col";
    case Op::mul_col: return "mul_col";
  }
  return "?";
}

namespace {

template <typename T>
void require_same_graph(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(what) + ": invalid tensor");
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(what) + ": tensors from different graphs");
}

template <typename T>
Node<T> make_node(Op op, std::initializer_list<Tensor<T>> inputs, Matrix<T> value) {
  Node<T> n;
  n.op = op;
  n.value = std::move(value);
  for (const auto& t : inputs) {
    n.inputs.push_back(t.id());
    n.requires_grad = n.requires_grad || t.requires_grad();
  }
  return n;
}

template <typename T>
Node<T> make_node(Op op, std::span<const Tensor<T>> inputs, Matrix<T> value) {
  Node<T> n;
  n.op = op;
  n.value = std::move(value);
  for (const auto& t : inputs) {
    n.inputs.push_back(t.id());
    n.requires_grad = n.requires_grad || t.requires_grad();
  }
  return n;
}

bool is_scalar(Index r, Index c) { return r == 1 && c == 1; }

enum class Pairing { same, left_scalar, right_scalar };

template <typename T>
Pairing pair_shapes(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  require_same_graph(a, b, what);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) return Pairing::same;
  if (is_scalar(av.rows(), av.cols())) return Pairing::left_scalar;
  if (is_scalar(bv.rows(), bv.cols())) return Pairing::right_scalar;
  throw DimensionError(std::string(what) + ": cannot broadcast " + shape_string(av.rows(), av.cols()) + " with " +
                       shape_string(bv.rows(), bv.cols()));
}

template <typename T>
T gelu_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

}  // namespace

// ---- Graph --------------------------------------------------------------

template <typename T>
Tensor<T> Graph<T>::push(Node<T> node) {
  if (!recording()) {
    node.inputs.clear();
    node.requires_grad = false;
    if (node.op != Op::leaf) node.op = Op::constant;
  }
  bytes_ += static_cast<std::size_t>(node.value.size()) * sizeof(T);
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
Tensor<T> Graph<T>::variable(Matrix<T> value) {
  Node<T> n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  bytes_ += static_cast<std::size_t>(n.value.size()) * sizeof(T);
  nodes_.push_back(std::move(n));
  return Tensor<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
Tensor<T> Graph<T>::constant(Matrix<T> value) {
  Node<T> n;
  n.op = Op::constant;
  n.value = std::move(value);
  bytes_ += static_cast<std::size_t>(n.value.size()) * sizeof(T);
  nodes_.push_back(std::move(n));
  return Tensor<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
void Graph<T>::clear() {
  nodes_.clear();
  bytes_ = 0;
}

namespace {

// Gradient of node `self` with respect to its j-th input, given the upstream
// gradient g. Written with differentiable ops so that it records when the
// graph is in record_through_grad mode.
template <typename T>
Tensor<T> input_grad(Graph<T>& graph, NodeId self, std::size_t j, const Tensor<T>& g) {
  const Node<T>& n = graph.node(self);
  const Tensor<T> out(&graph, self);
  const Tensor<T> a(&graph, n.inputs[0]);
  switch (n.op) {
    case Op::matmul: {
      const Tensor<T> b(&graph, n.inputs[1]);
      const bool ta = n.trans_a;
      const bool tb = n.trans_b;
      if (j == 0) {
        if (!ta && !tb) return matmul(g, b, Trans::no, Trans::yes);
        if (!ta && tb) return matmul(g, b);
        if (ta && !tb) return matmul(b, g, Trans::no, Trans::yes);
        return matmul(b, g, Trans::yes, Trans::yes);
      }
      if (!ta && !tb) return matmul(a, g, Trans::yes, Trans::no);
      if (!ta && tb) return matmul(g, a, Trans::yes, Trans::no);
      if (ta && !tb) return matmul(a, g);
      return matmul(g, a, Trans::yes, Trans::yes);
    }
    case Op::add: return g;
    case Op::sub: return j == 0 ? g : neg(g);
    case Op::mul: {
      const Tensor<T> b(&graph, n.inputs[1]);
      return j == 0 ? mul(g, b) : mul(g, a);
    }
    case Op::div: {
      const Tensor<T> b(&graph, n.inputs[1]);
      if (j == 0) return div(g, b);
      return neg(mul(g, div(out, b)));
    }
    case Op::scale: return scale(g, n.scalar);
    case Op::add_scalar: return g;
    case Op::pow: {
      if (n.scalar == T(1)) return g;
      return mul(g, scale(pow(a, n.scalar - T(1)), n.scalar));
    }
    case Op::relu: {
      Matrix<T> mask = (a.value().array() > T(0)).template cast<T>();
      return mul(g, graph.constant(std::move(mask)));
    }
    case Op::sin: return mul(g, cos(a));
    case Op::cos: return neg(mul(g, sin(a)));
    case Op::exp: return mul(g, out);
    case Op::gelu: {
      if (graph.mode() == GradMode::record_through_grad)
        throw std::logic_error("gelu: higher-order gradients are not supported");
      Matrix<T> d = a.value().unaryExpr([](T x) { return gelu_cdf(x) + x * gelu_pdf(x); });
      return mul(g, graph.constant(std::move(d)));
    }
    case Op::sum_all: return broadcast_scalar(g, a.rows(), a.cols());
    case Op::sum_rows: return broadcast_rows(g, a.rows());
    case Op::sum_cols: return broadcast_cols(g, a.cols());
    case Op::broadcast_scalar: return sum(g);
    case Op::broadcast_rows: return sum_rows(g);
    case Op::broadcast_cols: return sum_cols(g);
    case Op::slice_rows: return pad_rows(g, n.offset, n.extent);
    case Op::slice_cols: return pad_cols(g, n.offset, n.extent);
    case Op::pad_rows: return slice_rows(g, n.offset, a.rows());
    case Op::pad_cols: return slice_cols(g, n.offset, a.cols());
    case Op::concat_rows: {
      Index offset = 0;
      for (std::size_t i = 0; i < j; ++i) offset += graph.node(n.inputs[i]).value.rows();
      return slice_rows(g, offset, graph.node(n.inputs[j]).value.rows());
    }
    case Op::concat_cols: {
      Index offset = 0;
      for (std::size_t i = 0; i < j; ++i) offset += graph.node(n.inputs[i]).value.cols();
      return slice_cols(g, offset, graph.node(n.inputs[j]).value.cols());
    }
    case Op::transpose: return transpose(g);
    case Op::softmax_rows: {
      const auto weighted = sum_cols(mul(g, out));
      return mul(out, add_col(g, neg(weighted)));
    }
    case Op::add_row: return j == 0 ? g : sum_rows(g);
    case Op::add_col: return j == 0 ? g : sum_cols(g);
    case Op::mul_row: {
      const Tensor<T> r(&graph, n.inputs[1]);
      return j == 0 ? mul_row(g, r) : sum_rows(mul(g, a));
    }
    case Op::mul_col: {
      const Tensor<T> c(&graph, n.inputs[1]);
      return j == 0 ? mul_col(g, c) : sum_cols(mul(g, a));
    }
    case Op::leaf:
    case Op::constant: break;
  }
  throw std::logic_error(std::string("no backward rule for ") + op_name(n.op));
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> Graph<T>::backward(const Tensor<T>& loss, std::span<const Tensor<T>> wrt) {
  if (!loss.valid() || &loss.graph() != this) throw std::invalid_argument("backward: loss is not in this graph");
  const auto& lv = loss.value();
  if (lv.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_string(lv.rows(), lv.cols()));

  const auto last = static_cast<std::size_t>(loss.id());
  std::vector<char> needed(last + 1, 0);
  for (const auto& w : wrt) {
    if (w.valid() && static_cast<std::size_t>(w.id()) <= last) needed[static_cast<std::size_t>(w.id())] = 1;
  }
  for (std::size_t id = 0; id <= last; ++id) {
    if (needed[id]) continue;
    const auto& n = nodes_[id];
    if (!n.requires_grad) continue;
    for (auto in : n.inputs) {
      if (needed[static_cast<std::size_t>(in)]) {
        needed[id] = 1;
        break;
      }
    }
  }

  // Plain backward records nothing; record_through_grad keeps the graph.
  const GradMode pass_mode = mode_ == GradMode::record_through_grad ? mode_ : GradMode::no_record;
  ModeGuard<T> guard(*this, pass_mode);

  std::vector<Tensor<T>> grads(last + 1);
  grads[last] = constant(Matrix<T>::Ones(1, 1));
  for (std::size_t id = last + 1; id-- > 0;) {
    if (!grads[id].valid() || !needed[id]) continue;
    const Op op = nodes_[id].op;
    if (op == Op::leaf || op == Op::constant) continue;
    const std::size_t arity = nodes_[id].inputs.size();
    for (std::size_t j = 0; j < arity; ++j) {
      const auto in = static_cast<std::size_t>(nodes_[id].inputs[j]);
      if (!needed[in] || !nodes_[in].requires_grad) continue;
      Tensor<T> gi = input_grad(*this, static_cast<NodeId>(id), j, grads[id]);
      grads[in] = grads[in].valid() ? add(grads[in], gi) : gi;
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id());
    if (id <= last && grads[id].valid()) {
      out.push_back(grads[id]);
    } else {
      out.push_back(constant(Matrix<T>::Zero(w.rows(), w.cols())));
    }
  }
  return out;
}

// ---- primitives ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Trans ta, Trans tb) {
  require_same_graph(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool at = ta == Trans::yes;
  const bool bt = tb == Trans::yes;
  const Index m = at ? av.cols() : av.rows();
  const Index ka = at ? av.rows() : av.cols();
  const Index kb = bt ? bv.cols() : bv.rows();
  const Index n = bt ? bv.rows() : bv.cols();
  if (ka != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(av.rows(), av.cols()) +
                         (at ? "^T" : "") + " and " + shape_string(bv.rows(), bv.cols()) + (bt ? "^T" : ""));
  }
  Matrix<T> c(m, n);
  if (!at && !bt) {
    c.noalias() = av * bv;
  } else if (!at && bt) {
    c.noalias() = av * bv.transpose();
  } else if (at && !bt) {
    c.noalias() = av.transpose() * bv;
  } else {
    c.noalias() = av.transpose() * bv.transpose();
  }
  auto node = make_node<T>(Op::matmul, {a, b}, std::move(c));
  node.trans_a = at;
  node.trans_b = bt;
  return a.graph().push(std::move(node));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  switch (pair_shapes(a, b, "add")) {
    case Pairing::left_scalar: return add(broadcast_scalar(a, b.rows(), b.cols()), b);
    case Pairing::right_scalar: return add(a, broadcast_scalar(b, a.rows(), a.cols()));
    case Pairing::same: break;
  }
  Matrix<T> v = a.value() + b.value();
  return a.graph().push(make_node<T>(Op::add, {a, b}, std::move(v)));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  switch (pair_shapes(a, b, "sub")) {
    case Pairing::left_scalar: return sub(broadcast_scalar(a, b.rows(), b.cols()), b);
    case Pairing::right_scalar: return sub(a, broadcast_scalar(b, a.rows(), a.cols()));
    case Pairing::same: break;
  }
  Matrix<T> v = a.value() - b.value();
  return a.graph().push(make_node<T>(Op::sub, {a, b}, std::move(v)));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  switch (pair_shapes(a, b, "mul")) {
    case Pairing::left_scalar: return mul(broadcast_scalar(a, b.rows(), b.cols()), b);
    case Pairing::right_scalar: return mul(a, broadcast_scalar(b, a.rows(), a.cols()));
    case Pairing::same: break;
  }
  Matrix<T> v = a.value().cwiseProduct(b.value());
  return a.graph().push(make_node<T>(Op::mul, {a, b}, std::move(v)));
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  switch (pair_shapes(a, b, "div")) {
    case Pairing::left_scalar: return div(broadcast_scalar(a, b.rows(), b.cols()), b);
    case Pairing::right_scalar: return div(a, broadcast_scalar(b, a.rows(), a.cols()));
    case Pairing::same: break;
  }
  Matrix<T> v = a.value().cwiseQuotient(b.value());
  return a.graph().push(make_node<T>(Op::div, {a, b}, std::move(v)));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Matrix<T> v = x.value() * factor;
  auto node = make_node<T>(Op::scale, {x}, std::move(v));
  node.scalar = factor;
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T shift) {
  Matrix<T> v = x.value().array() + shift;
  auto node = make_node<T>(Op::add_scalar, {x}, std::move(v));
  node.scalar = shift;
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, T exponent) {
  Matrix<T> v;
  if (exponent == T(2)) {
    v = x.value().array().square();
  } else if (exponent == T(1)) {
    v = x.value();
  } else if (exponent == T(0)) {
    v = Matrix<T>::Ones(x.rows(), x.cols());
  } else {
    v = x.value().array().pow(exponent);
  }
  auto node = make_node<T>(Op::pow, {x}, std::move(v));
  node.scalar = exponent;
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Matrix<T> v = x.value().cwiseMax(T(0));
  return x.graph().push(make_node<T>(Op::relu, {x}, std::move(v)));
}

template <typename T>
Tensor<T> sin(const Tensor<T>& x) {
  Matrix<T> v = x.value().array().sin();
  return x.graph().push(make_node<T>(Op::sin, {x}, std::move(v)));
}

template <typename T>
Tensor<T> cos(const Tensor<T>& x) {
  Matrix<T> v = x.value().array().cos();
  return x.graph().push(make_node<T>(Op::cos, {x}, std::move(v)));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  Matrix<T> v = x.value().array().exp();
  return x.graph().push(make_node<T>(Op::exp, {x}, std::move(v)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Matrix<T> v = x.value().unaryExpr([](T t) { return t * gelu_cdf(t); });
  return x.graph().push(make_node<T>(Op::gelu, {x}, std::move(v)));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Matrix<T> v(1, 1);
  v(0, 0) = x.value().sum();
  return x.graph().push(make_node<T>(Op::sum_all, {x}, std::move(v)));
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  Matrix<T> v = x.value().colwise().sum();
  return x.graph().push(make_node<T>(Op::sum_rows, {x}, std::move(v)));
}

template <typename T>
Tensor<T> sum_cols(const Tensor<T>& x) {
  Matrix<T> v = x.value().rowwise().sum();
  return x.graph().push(make_node<T>(Op::sum_cols, {x}, std::move(v)));
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& x, Index rows, Index cols) {
  if (!is_scalar(x.rows(), x.cols()))
    throw DimensionError("broadcast_scalar: expected [1x1], got " + shape_string(x.rows(), x.cols()));
  Matrix<T> v = Matrix<T>::Constant(rows, cols, x.value()(0, 0));
  return x.graph().push(make_node<T>(Op::broadcast_scalar, {x}, std::move(v)));
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& x, Index rows) {
  if (x.rows() != 1) throw DimensionError("broadcast_rows: expected one row, got " + shape_string(x.rows(), x.cols()));
  Matrix<T> v(rows, x.cols());
  v.rowwise() = x.value().row(0);
  return x.graph().push(make_node<T>(Op::broadcast_rows, {x}, std::move(v)));
}

template <typename T>
Tensor<T> broadcast_cols(const Tensor<T>& x, Index cols) {
  if (x.cols() != 1)
    throw DimensionError("broadcast_cols: expected one column, got " + shape_string(x.rows(), x.cols()));
  Matrix<T> v(x.rows(), cols);
  v.colwise() = x.value().col(0);
  return x.graph().push(make_node<T>(Op::broadcast_cols, {x}, std::move(v)));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows())
    throw DimensionError("slice_rows: range out of bounds for " + shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value().middleRows(begin, count);
  auto node = make_node<T>(Op::slice_rows, {x}, std::move(v));
  node.offset = begin;
  node.extent = x.rows();
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols())
    throw DimensionError("slice_cols: range out of bounds for " + shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value().middleCols(begin, count);
  auto node = make_node<T>(Op::slice_cols, {x}, std::move(v));
  node.offset = begin;
  node.extent = x.cols();
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> pad_rows(const Tensor<T>& x, Index begin, Index total) {
  if (begin < 0 || begin + x.rows() > total) throw DimensionError("pad_rows: target too small");
  Matrix<T> v = Matrix<T>::Zero(total, x.cols());
  v.middleRows(begin, x.rows()) = x.value();
  auto node = make_node<T>(Op::pad_rows, {x}, std::move(v));
  node.offset = begin;
  node.extent = total;
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> pad_cols(const Tensor<T>& x, Index begin, Index total) {
  if (begin < 0 || begin + x.cols() > total) throw DimensionError("pad_cols: target too small");
  Matrix<T> v = Matrix<T>::Zero(x.rows(), total);
  v.middleCols(begin, x.cols()) = x.value();
  auto node = make_node<T>(Op::pad_cols, {x}, std::move(v));
  node.offset = begin;
  node.extent = total;
  return x.graph().push(std::move(node));
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    require_same_graph(parts.front(), p, "concat_rows");
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch " + shape_string(p.rows(), p.cols()));
    rows += p.rows();
  }
  Matrix<T> v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().graph().push(make_node<T>(Op::concat_rows, parts, std::move(v)));
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    require_same_graph(parts.front(), p, "concat_cols");
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch " + shape_string(p.rows(), p.cols()));
    cols += p.cols();
  }
  Matrix<T> v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().graph().push(make_node<T>(Op::concat_cols, parts, std::move(v)));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  Matrix<T> v = x.value().transpose();
  return x.graph().push(make_node<T>(Op::transpose, {x}, std::move(v)));
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.cols() == 0) throw DimensionError("softmax_rows: zero-length axis");
  const auto& xv = x.value();
  Matrix<T> v = (xv.colwise() - xv.rowwise().maxCoeff()).array().exp();
  v.array().colwise() /= v.rowwise().sum().array();
  return x.graph().push(make_node<T>(Op::softmax_rows, {x}, std::move(v)));
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& r) {
  require_same_graph(x, r, "add_row");
  if (r.rows() != 1 || r.cols() != x.cols())
    throw DimensionError("add_row: row " + shape_string(r.rows(), r.cols()) + " does not fit " +
                         shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value();
  v.rowwise() += r.value().row(0);
  return x.graph().push(make_node<T>(Op::add_row, {x, r}, std::move(v)));
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& r) {
  require_same_graph(x, r, "mul_row");
  if (r.rows() != 1 || r.cols() != x.cols())
    throw DimensionError("mul_row: row " + shape_string(r.rows(), r.cols()) + " does not fit " +
                         shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value();
  v.array().rowwise() *= r.value().row(0).array();
  return x.graph().push(make_node<T>(Op::mul_row, {x, r}, std::move(v)));
}

template <typename T>
Tensor<T> add_col(const Tensor<T>& x, const Tensor<T>& c) {
  require_same_graph(x, c, "add_col");
  if (c.cols() != 1 || c.rows() != x.rows())
    throw DimensionError("add_col: column " + shape_string(c.rows(), c.cols()) + " does not fit " +
                         shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value();
  v.colwise() += c.value().col(0);
  return x.graph().push(make_node<T>(Op::add_col, {x, c}, std::move(v)));
}

template <typename T>
Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& c) {
  require_same_graph(x, c, "mul_col");
  if (c.cols() != 1 || c.rows() != x.rows())
    throw DimensionError("mul_col: column " + shape_string(c.rows(), c.cols()) + " does not fit " +
                         shape_string(x.rows(), x.cols()));
  Matrix<T> v = x.value();
  v.array().colwise() *= c.value().col(0).array();
  return x.graph().push(make_node<T>(Op::mul_col, {x, c}, std::move(v)));
}

// ---- composites ---------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_row(matmul(x, weight, Trans::no, Trans::yes), bias);
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("mse: prediction " + shape_string(pred.rows(), pred.cols()) + " vs target " +
                         shape_string(target.rows(), target.cols()));
  if (pred.rows() == 0) throw DimensionError("mse: no coordinates");
  const auto diff = sub(pred, target);
  return scale(sum(mul(diff, diff)), T(1) / static_cast<T>(pred.rows()));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  const Index n = x.cols();
  if (n == 0) throw DimensionError("layer_norm: zero-length axis");
  const T inv_n = T(1) / static_cast<T>(n);
  const auto mu = scale(sum_cols(x), inv_n);
  const auto centered = add_col(x, neg(mu));
  const auto var = scale(sum_cols(mul(centered, centered)), inv_n);
  const auto inv_std = pow(add_scalar(var, eps), T(-0.5));
  const auto normed = mul_col(centered, inv_std);
  return add_row(mul_row(normed, gain), shift);
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.cols() != k.cols()) throw DimensionError("attention: query/key head dims differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: key/value counts differ");
  if (k.rows() == 0) throw DimensionError("attention: zero-length key axis");
  const T factor = T(1) / std::sqrt(static_cast<T>(q.cols()));
  const auto scores = scale(matmul(q, k, Trans::no, Trans::yes), factor);
  return matmul(softmax_rows(scores), v);
}

// ---- instantiations -----------------------------------------------------

#define CINR_INSTANTIATE_AD(T)                                                                   \
  template class Graph<T>;                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Trans, Trans);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> pow(const Tensor<T>&, T);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> sin(const Tensor<T>&);                                                     \
  template Tensor<T> cos(const Tensor<T>&);                                                     \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> sum_rows(const Tensor<T>&);                                                \
  template Tensor<T> sum_cols(const Tensor<T>&);                                                \
  template Tensor<T> broadcast_scalar(const Tensor<T>&, Index, Index);                          \
  template Tensor<T> broadcast_rows(const Tensor<T>&, Index);                                   \
  template Tensor<T> broadcast_cols(const Tensor<T>&, Index);                                   \
  template Tensor<T> slice_rows(const Tensor<T>&, Index, Index);                                \
  template Tensor<T> slice_cols(const Tensor<T>&, Index, Index);                                \
  template Tensor<T> pad_rows(const Tensor<T>&, Index, Index);                                  \
  template Tensor<T> pad_cols(const Tensor<T>&, Index, Index);                                  \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                   \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                   \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                            \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add_col(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul_col(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

CINR_INSTANTIATE_AD(float)
CINR_INSTANTIATE_AD(double)

#undef CINR_INSTANTIATE_AD

}  // namespace ad
}  // namespace cinr
