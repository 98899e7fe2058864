#include "latmask/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "latmask/errors.hpp"

namespace latmask::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const NDArray& a, std::size_t rows, std::size_t cols) {
  return ConstMapMat(a.data().data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

MapMat as_mat(NDArray& a, std::size_t rows, std::size_t cols) {
  return MapMat(a.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ContractError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Maps a flat index of the broadcast output to a flat index of one operand.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& in, const Shape& out) {
    if (in == out) {
      kind_ = Kind::identity;
      return;
    }
    if (numel(in) == 1) {
      kind_ = Kind::zero;
      return;
    }
    kind_ = Kind::mapped;
    const std::size_t rank = out.size();
    std::vector<std::size_t> in_strides(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      const std::size_t axis = i + (rank - in.size());
      in_strides[axis] = in[i] == 1 ? 0 : stride;
      stride *= in[i];
    }
    map_.resize(numel(out));
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < map_.size(); ++flat) {
      map_[flat] = offset;
      for (std::size_t axis = rank; axis-- > 0;) {
        ++counter[axis];
        offset += in_strides[axis];
        if (counter[axis] < out[axis]) break;
        offset -= in_strides[axis] * counter[axis];
        counter[axis] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::identity:
        return i;
      case Kind::zero:
        return 0;
      default:
        return map_[i];
    }
  }

 private:
  enum class Kind { identity, zero, mapped };
  Kind kind_ = Kind::identity;
  std::vector<std::size_t> map_;
};

// cols[c*k_size + k, t] = src[c, t*stride + k - padding], zero outside.
NDArray im2col(const NDArray& src, std::size_t channels, std::size_t src_len, std::size_t k_size,
               std::size_t stride, std::size_t padding, std::size_t col_len) {
  NDArray cols(Shape{channels * k_size, col_len});
  for (std::size_t c = 0; c < channels; ++c) {
    const double* s = src.data().data() + c * src_len;
    for (std::size_t k = 0; k < k_size; ++k) {
      double* row = cols.data().data() + (c * k_size + k) * col_len;
      for (std::size_t t = 0; t < col_len; ++t) {
        const auto pos = static_cast<std::ptrdiff_t>(t * stride + k) -
                         static_cast<std::ptrdiff_t>(padding);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(src_len)) row[t] = s[pos];
      }
    }
  }
  return cols;
}

// Adjoint of im2col: dst[c, t*stride + k - padding] += cols[c*k_size + k, t].
void col2im(const NDArray& cols, std::size_t channels, std::size_t dst_len, std::size_t k_size,
            std::size_t stride, std::size_t padding, std::size_t col_len, NDArray& dst) {
  for (std::size_t c = 0; c < channels; ++c) {
    double* d = dst.data().data() + c * dst_len;
    for (std::size_t k = 0; k < k_size; ++k) {
      const double* row = cols.data().data() + (c * k_size + k) * col_len;
      for (std::size_t t = 0; t < col_len; ++t) {
        const auto pos = static_cast<std::ptrdiff_t>(t * stride + k) -
                         static_cast<std::ptrdiff_t>(padding);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(dst_len)) d[pos] += row[t];
      }
    }
  }
}

template <class F>
NDArray unary_map(const NDArray& x, F f) {
  NDArray out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <class F>
NDArray binary_map(const NDArray& a, const NDArray& b, F f) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  NDArray out(out_shape);
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  } else if (a.shape() == out_shape && b.size() == 1) {
    const double bv = b[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], bv);
  } else {
    const BroadcastIndex ia(a.shape(), out_shape);
    const BroadcastIndex ib(b.shape(), out_shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[ia(i)], b[ib(i)]);
  }
  return out;
}

std::size_t outer_count(const Shape& s, std::size_t axis) {
  return std::accumulate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis), std::size_t{1},
                         std::multiplies<>());
}

std::size_t inner_count(const Shape& s, std::size_t axis) {
  return std::accumulate(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end(),
                         std::size_t{1}, std::multiplies<>());
}

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::abs: return "abs";
    case Op::sqrt: return "sqrt";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::maximum: return "maximum";
    case Op::matmul: return "matmul";
    case Op::conv1d: return "conv1d";
    case Op::conv_transpose1d: return "conv_transpose1d";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::sum_axis: return "sum_axis";
    case Op::reshape: return "reshape";
    case Op::transpose: return "transpose";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::gather: return "gather";
    case Op::scatter_add: return "scatter_add";
    case Op::concat: return "concat";
  }
  return "?";
}

const NDArray& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->nodes_.at(id_).value;
}

NDArray Gradients::of(Var v) const {
  if (v.id() < present_.size() && present_[v.id()]) return grads_[v.id()];
  return NDArray(v.shape());
}

void Tape::check_owner(Var v) const {
  if (&v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("node does not belong to this tape");
  }
}

Var Tape::constant(NDArray value) { return push(Op::leaf, {}, std::move(value)); }

Var Tape::variable(NDArray value) {
  Var v = push(Op::leaf, {}, std::move(value));
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::push(Op op, std::vector<std::size_t> inputs, NDArray value, OpAttrs attrs) {
  const std::size_t id = nodes_.size();
  for (std::size_t in : inputs) {
    if (in >= id) throw ContractError("tape input must reference an earlier node");
  }
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced at node " + std::to_string(id) + " (" +
                         std::string(op_name(op)) + ")");
  }
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
  nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(attrs), needs});
  return Var(this, id);
}

const NDArray& Tape::forward(Var root) const {
  check_owner(root);
  return nodes_[root.id()].value;
}

Gradients Tape::backward(Var root) const {
  check_owner(root);
  const Node& r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(r.value.shape()));
  }
  Gradients out;
  out.tape_ = this;
  out.grads_.resize(root.id() + 1);
  out.present_.assign(root.id() + 1, false);
  auto& g = out.grads_;
  auto& has = out.present_;

  auto acc = [&](std::size_t id) -> NDArray& {
    if (!has[id]) {
      g[id] = NDArray(nodes_[id].value.shape());
      has[id] = true;
    }
    return g[id];
  };

  g[root.id()] = NDArray(r.value.shape(), 1.0);
  has[root.id()] = true;

  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!has[id] || !n.requires_grad || n.op == Op::leaf) continue;
    const NDArray& gy = g[id];
    const NDArray& y = n.value;
    auto in = [&](std::size_t k) -> const Node& { return nodes_[n.inputs[k]]; };
    auto wants = [&](std::size_t k) { return in(k).requires_grad; };

    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::div:
      case Op::maximum: {
        const NDArray& a = in(0).value;
        const NDArray& b = in(1).value;
        const BroadcastIndex ia(a.shape(), y.shape());
        const BroadcastIndex ib(b.shape(), y.shape());
        if (wants(0)) {
          NDArray& ga = acc(n.inputs[0]);
          for (std::size_t i = 0; i < y.size(); ++i) {
            double d = 0.0;
            switch (n.op) {
              case Op::add:
              case Op::sub: d = gy[i]; break;
              case Op::mul: d = gy[i] * b[ib(i)]; break;
              case Op::div: d = gy[i] / b[ib(i)]; break;
              default: d = a[ia(i)] >= b[ib(i)] ? gy[i] : 0.0; break;
            }
            ga[ia(i)] += d;
          }
        }
        if (wants(1)) {
          NDArray& gb = acc(n.inputs[1]);
          for (std::size_t i = 0; i < y.size(); ++i) {
            double d = 0.0;
            switch (n.op) {
              case Op::add: d = gy[i]; break;
              case Op::sub: d = -gy[i]; break;
              case Op::mul: d = gy[i] * a[ia(i)]; break;
              case Op::div: {
                const double bv = b[ib(i)];
                d = -gy[i] * a[ia(i)] / (bv * bv);
                break;
              }
              default: d = a[ia(i)] >= b[ib(i)] ? 0.0 : gy[i]; break;
            }
            gb[ib(i)] += d;
          }
        }
        break;
      }
      case Op::neg:
      case Op::abs:
      case Op::sqrt:
      case Op::log:
      case Op::exp:
      case Op::sigmoid:
      case Op::tanh:
      case Op::relu:
      case Op::scale:
      case Op::add_scalar: {
        const NDArray& x = in(0).value;
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i) {
          double d = 0.0;
          switch (n.op) {
            case Op::neg: d = -gy[i]; break;
            case Op::abs: d = x[i] > 0.0 ? gy[i] : (x[i] < 0.0 ? -gy[i] : 0.0); break;
            case Op::sqrt: d = gy[i] * 0.5 / y[i]; break;
            case Op::log: d = gy[i] / x[i]; break;
            case Op::exp: d = gy[i] * y[i]; break;
            case Op::sigmoid: d = gy[i] * y[i] * (1.0 - y[i]); break;
            case Op::tanh: d = gy[i] * (1.0 - y[i] * y[i]); break;
            case Op::relu: d = x[i] > 0.0 ? gy[i] : 0.0; break;
            case Op::scale: d = gy[i] * n.attrs.scalar; break;
            default: d = gy[i]; break;
          }
          gx[i] += d;
        }
        break;
      }
      case Op::matmul: {
        const NDArray& a = in(0).value;
        const NDArray& b = in(1).value;
        const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        const auto G = as_mat(gy, m, nn);
        if (wants(0)) as_mat(acc(n.inputs[0]), m, k).noalias() += G * as_mat(b, k, nn).transpose();
        if (wants(1)) as_mat(acc(n.inputs[1]), k, nn).noalias() += as_mat(a, m, k).transpose() * G;
        break;
      }
      case Op::conv1d: {
        const NDArray& x = in(0).value;
        const NDArray& w = in(1).value;
        const std::size_t c_in = x.dim(0), len = x.dim(1);
        const std::size_t c_out = w.dim(0), k = w.dim(2);
        const std::size_t out_len = y.dim(1);
        const auto G = as_mat(gy, c_out, out_len);
        if (wants(1)) {
          const NDArray cols = im2col(x, c_in, len, k, n.attrs.stride, n.attrs.padding, out_len);
          as_mat(acc(n.inputs[1]), c_out, c_in * k).noalias() +=
              G * as_mat(cols, c_in * k, out_len).transpose();
        }
        if (wants(0)) {
          NDArray gcols(Shape{c_in * k, out_len});
          as_mat(gcols, c_in * k, out_len).noalias() = as_mat(w, c_out, c_in * k).transpose() * G;
          col2im(gcols, c_in, len, k, n.attrs.stride, n.attrs.padding, out_len, acc(n.inputs[0]));
        }
        break;
      }
      case Op::conv_transpose1d: {
        const NDArray& x = in(0).value;
        const NDArray& w = in(1).value;
        const std::size_t c_in = x.dim(0), len = x.dim(1);
        const std::size_t c_out = w.dim(1), k = w.dim(2);
        const std::size_t out_len = y.dim(1);
        const NDArray gcols = im2col(gy, c_out, out_len, k, n.attrs.stride, n.attrs.padding, len);
        const auto GC = as_mat(gcols, c_out * k, len);
        if (wants(0)) {
          as_mat(acc(n.inputs[0]), c_in, len).noalias() += as_mat(w, c_in, c_out * k) * GC;
        }
        if (wants(1)) {
          as_mat(acc(n.inputs[1]), c_in, c_out * k).noalias() += as_mat(x, c_in, len) * GC.transpose();
        }
        break;
      }
      case Op::sum:
      case Op::mean: {
        NDArray& gx = acc(n.inputs[0]);
        const double d = n.op == Op::sum ? gy[0] : gy[0] / static_cast<double>(gx.size());
        for (double& v : gx.data()) v += d;
        break;
      }
      case Op::sum_axis: {
        const Shape& xs = in(0).value.shape();
        const std::size_t outer = outer_count(xs, n.attrs.axis);
        const std::size_t mid = xs[n.attrs.axis];
        const std::size_t inner = inner_count(xs, n.attrs.axis);
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t i = 0; i < inner; ++i)
              gx[(o * mid + m) * inner + i] += gy[o * inner + i];
        break;
      }
      case Op::reshape: {
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        break;
      }
      case Op::transpose: {
        const std::size_t rows = y.dim(0), cols = y.dim(1);
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[c * rows + r] += gy[r * cols + c];
        break;
      }
      case Op::gather: {
        const auto& idx = *n.attrs.indices;
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t i = 0; i < idx.size(); ++i)
          if (idx[i] >= 0) gx[static_cast<std::size_t>(idx[i])] += gy[i];
        break;
      }
      case Op::scatter_add: {
        const auto& idx = *n.attrs.indices;
        NDArray& gx = acc(n.inputs[0]);
        for (std::size_t i = 0; i < idx.size(); ++i)
          if (idx[i] >= 0) gx[i] += gy[static_cast<std::size_t>(idx[i])];
        break;
      }
      case Op::concat: {
        const std::size_t axis = n.attrs.axis;
        const std::size_t outer = outer_count(y.shape(), axis);
        const std::size_t inner = inner_count(y.shape(), axis);
        const std::size_t out_block = y.dim(axis) * inner;
        std::size_t offset = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const std::size_t block = in(p).value.dim(axis) * inner;
          if (wants(p)) {
            NDArray& gp = acc(n.inputs[p]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += gy[o * out_block + offset + i];
          }
          offset += block;
        }
        break;
      }
    }
  }
  return out;
}

Var add(Var a, Var b) {
  return same_tape(a, b).push(Op::add, {a.id(), b.id()},
                              binary_map(a.value(), b.value(), [](double x, double y) { return x + y; }));
}

Var sub(Var a, Var b) {
  return same_tape(a, b).push(Op::sub, {a.id(), b.id()},
                              binary_map(a.value(), b.value(), [](double x, double y) { return x - y; }));
}

Var mul(Var a, Var b) {
  return same_tape(a, b).push(Op::mul, {a.id(), b.id()},
                              binary_map(a.value(), b.value(), [](double x, double y) { return x * y; }));
}

Var div(Var a, Var b) {
  return same_tape(a, b).push(Op::div, {a.id(), b.id()},
                              binary_map(a.value(), b.value(), [](double x, double y) { return x / y; }));
}

Var maximum(Var a, Var b) {
  return same_tape(a, b).push(
      Op::maximum, {a.id(), b.id()},
      binary_map(a.value(), b.value(), [](double x, double y) { return x >= y ? x : y; }));
}

Var neg(Var x) {
  return x.tape().push(Op::neg, {x.id()}, unary_map(x.value(), [](double v) { return -v; }));
}

Var abs(Var x) {
  return x.tape().push(Op::abs, {x.id()}, unary_map(x.value(), [](double v) { return std::abs(v); }));
}

Var sqrt(Var x) {
  return x.tape().push(Op::sqrt, {x.id()}, unary_map(x.value(), [](double v) { return std::sqrt(v); }));
}

Var log(Var x) {
  return x.tape().push(Op::log, {x.id()}, unary_map(x.value(), [](double v) { return std::log(v); }));
}

Var exp(Var x) {
  return x.tape().push(Op::exp, {x.id()}, unary_map(x.value(), [](double v) { return std::exp(v); }));
}

Var sigmoid(Var x) {
  return x.tape().push(Op::sigmoid, {x.id()}, unary_map(x.value(), [](double v) {
                         if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                         const double e = std::exp(v);
                         return e / (1.0 + e);
                       }));
}

Var tanh(Var x) {
  return x.tape().push(Op::tanh, {x.id()}, unary_map(x.value(), [](double v) { return std::tanh(v); }));
}

Var relu(Var x) {
  return x.tape().push(Op::relu, {x.id()},
                       unary_map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }));
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const NDArray& av = a.value();
  const NDArray& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ContractError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                        shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  NDArray out(Shape{m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return t.push(Op::matmul, {a.id(), b.id()}, std::move(out));
}

Var conv1d(Var x, Var w, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape(x, w);
  const NDArray& xv = x.value();
  const NDArray& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 3 || wv.dim(1) != xv.dim(0) || stride == 0) {
    throw ContractError("conv1d: incompatible shapes " + shape_str(xv.shape()) + " * " +
                        shape_str(wv.shape()));
  }
  const std::size_t c_in = xv.dim(0), len = xv.dim(1);
  const std::size_t c_out = wv.dim(0), k = wv.dim(2);
  if (len + 2 * padding < k) throw ContractError("conv1d: input shorter than kernel");
  const std::size_t out_len = (len + 2 * padding - k) / stride + 1;
  const NDArray cols = im2col(xv, c_in, len, k, stride, padding, out_len);
  NDArray out(Shape{c_out, out_len});
  as_mat(out, c_out, out_len).noalias() = as_mat(wv, c_out, c_in * k) * as_mat(cols, c_in * k, out_len);
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return t.push(Op::conv1d, {x.id(), w.id()}, std::move(out), std::move(attrs));
}

Var conv_transpose1d(Var x, Var w, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape(x, w);
  const NDArray& xv = x.value();
  const NDArray& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 3 || wv.dim(0) != xv.dim(0) || stride == 0) {
    throw ContractError("conv_transpose1d: incompatible shapes " + shape_str(xv.shape()) + " * " +
                        shape_str(wv.shape()));
  }
  const std::size_t c_in = xv.dim(0), len = xv.dim(1);
  const std::size_t c_out = wv.dim(1), k = wv.dim(2);
  if ((len - 1) * stride + k < 2 * padding + 1) {
    throw ContractError("conv_transpose1d: padding exceeds output");
  }
  const std::size_t out_len = (len - 1) * stride + k - 2 * padding;
  NDArray cols(Shape{c_out * k, len});
  as_mat(cols, c_out * k, len).noalias() = as_mat(wv, c_in, c_out * k).transpose() * as_mat(xv, c_in, len);
  NDArray out(Shape{c_out, out_len});
  col2im(cols, c_out, out_len, k, stride, padding, len, out);
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return t.push(Op::conv_transpose1d, {x.id(), w.id()}, std::move(out), std::move(attrs));
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().push(Op::sum, {x.id()}, NDArray::scalar(s));
}

Var mean(Var x) {
  if (x.value().size() == 0) throw ContractError("mean of an empty array");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().push(Op::mean, {x.id()}, NDArray::scalar(s / static_cast<double>(x.value().size())));
}

Var sum_axis(Var x, std::size_t axis) {
  const NDArray& xv = x.value();
  if (axis >= xv.rank()) throw ContractError("sum_axis: axis out of range");
  const std::size_t outer = outer_count(xv.shape(), axis);
  const std::size_t mid = xv.dim(axis);
  const std::size_t inner = inner_count(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  NDArray out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * mid + m) * inner + i];
  OpAttrs attrs;
  attrs.axis = axis;
  return x.tape().push(Op::sum_axis, {x.id()}, std::move(out), std::move(attrs));
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.value().size()) {
    throw ContractError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return x.tape().push(Op::reshape, {x.id()}, x.value().reshaped(std::move(shape)));
}

Var transpose(Var x) {
  const NDArray& xv = x.value();
  if (xv.rank() != 2) throw ContractError("transpose expects a 2-D array");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  NDArray out(Shape{cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xv[r * cols + c];
  return x.tape().push(Op::transpose, {x.id()}, std::move(out));
}

Var scale(Var x, double c) {
  OpAttrs attrs;
  attrs.scalar = c;
  return x.tape().push(Op::scale, {x.id()}, unary_map(x.value(), [c](double v) { return v * c; }),
                       std::move(attrs));
}

Var add_scalar(Var x, double c) {
  OpAttrs attrs;
  attrs.scalar = c;
  return x.tape().push(Op::add_scalar, {x.id()},
                       unary_map(x.value(), [c](double v) { return v + c; }), std::move(attrs));
}

Var gather(Var x, IndexMap indices, Shape out_shape) {
  const NDArray& xv = x.value();
  if (!indices || indices->size() != numel(out_shape)) {
    throw ContractError("gather: index map does not match output shape " + shape_str(out_shape));
  }
  NDArray out(std::move(out_shape));
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::ptrdiff_t j = (*indices)[i];
    if (j >= static_cast<std::ptrdiff_t>(xv.size())) throw ContractError("gather: index out of range");
    if (j >= 0) out[i] = xv[static_cast<std::size_t>(j)];
  }
  OpAttrs attrs;
  attrs.indices = std::move(indices);
  return x.tape().push(Op::gather, {x.id()}, std::move(out), std::move(attrs));
}

Var scatter_add(Var x, IndexMap indices, Shape out_shape) {
  const NDArray& xv = x.value();
  if (!indices || indices->size() != xv.size()) {
    throw ContractError("scatter_add: index map does not match input");
  }
  NDArray out(std::move(out_shape));
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::ptrdiff_t j = (*indices)[i];
    if (j >= static_cast<std::ptrdiff_t>(out.size())) throw ContractError("scatter_add: index out of range");
    if (j >= 0) out[static_cast<std::size_t>(j)] += xv[i];
  }
  OpAttrs attrs;
  attrs.indices = std::move(indices);
  return x.tape().push(Op::scatter_add, {x.id()}, std::move(out), std::move(attrs));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero arrays");
  Tape& t = parts.front().tape();
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw ContractError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ContractError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != parts.front().shape()[d]) throw ContractError("concat: shape mismatch");
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = outer_count(out_shape, axis);
  const std::size_t inner = inner_count(out_shape, axis);
  const std::size_t out_block = out_shape[axis] * inner;
  NDArray out(out_shape);
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const NDArray& pv = p.value();
    const std::size_t block = pv.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data().data() + o * block, block, out.data().data() + o * out_block + offset);
    offset += block;
    ids.push_back(p.id());
  }
  OpAttrs attrs;
  attrs.axis = axis;
  return t.push(Op::concat, std::move(ids), std::move(out), std::move(attrs));
}

GradCheckReport grad_check(const TapeBuilder& f, const NDArray& x, double h, double tol,
                           std::size_t max_coords, unsigned long long seed) {
  if (!(h > 0.0)) throw ContractError("grad_check: step must be positive");

  auto evaluate = [&](const NDArray& at) {
    Tape tape;
    Var root = f(tape, tape.constant(at));
    if (root.value().size() != 1) throw ContractError("grad_check: builder must return a scalar");
    return root.value()[0];
  };

  GradCheckReport report;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var root = f(tape, xv);
    report.analytic = tape.backward(root, xv);
    const double first = root.value().item();
    if (evaluate(x) != first) {
      throw NumericalError("grad_check: builder is not deterministic between evaluations");
    }
  }

  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (max_coords > 0 && max_coords < coords.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  report.numeric = NDArray(x.shape());
  NDArray probe = x;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = evaluate(probe);
    probe[i] = orig - h;
    const double down = evaluate(probe);
    probe[i] = orig;
    const double num = (up - down) / (2.0 * h);
    report.numeric[i] = num;
    const double ana = report.analytic[i];
    const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(ana - num) / denom);
  }
  report.coords_checked = coords.size();
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace latmask::ad
