#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape records every primitive as it is evaluated (define-by-run), so the
// value of every node is available as soon as the node exists. Backward walks
// the tape in reverse insertion order, once, accumulating adjoints
// sequentially; identical tapes give bit-identical gradients.

#include <cstddef>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "latmask/ndarray.hpp"

namespace latmask::ad {

// The closed primitive set. Every op has an adjoint in autodiff.cpp.
enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  abs,
  sqrt,
  log,
  exp,
  sigmoid,
  tanh,
  relu,
  maximum,
  matmul,
  conv1d,
  conv_transpose1d,
  sum,
  mean,
  sum_axis,
  reshape,
  transpose,
  scale,
  add_scalar,
  gather,
  scatter_add,
  concat,
};

std::string_view op_name(Op op);

class Tape;

// Handle to a tape node. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const NDArray& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Flat index map for gather/scatter. A negative entry reads as zero (gather)
// or is dropped (scatter).
using IndexMap = std::shared_ptr<const std::vector<std::ptrdiff_t>>;

// Per-node op parameters.
struct OpAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t axis = 0;
  double scalar = 0.0;
  IndexMap indices;
};

class Gradients {
 public:
  // Adjoint of `v`; zeros of v's shape when v is not on a path to the root.
  NDArray of(Var v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<NDArray> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(NDArray value);
  Var variable(NDArray value);

  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id()).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Value of `root`. Nodes are evaluated on insertion, so this is a lookup.
  const NDArray& forward(Var root) const;

  // Adjoints of every node w.r.t. the scalar `root`.
  Gradients backward(Var root) const;
  NDArray backward(Var root, Var wrt) const { return backward(root).of(wrt); }

  // Used by the op functions below; validates finiteness of `value`.
  Var push(Op op, std::vector<std::size_t> inputs, NDArray value, OpAttrs attrs = OpAttrs());

 private:
  friend class Var;

  struct Node {
    Op op = Op::leaf;
    std::vector<std::size_t> inputs;
    NDArray value;
    OpAttrs attrs;
    bool requires_grad = false;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
};

// Elementwise binary ops broadcast numpy-style.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
// On ties the whole adjoint goes to `a`.
Var maximum(Var a, Var b);

Var neg(Var x);
// Subgradient 0 at x == 0.
Var abs(Var x);
Var sqrt(Var x);
Var log(Var x);
Var exp(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);

// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);

// x: [c_in, len], w: [c_out, c_in, k]. Zero padding on both ends.
Var conv1d(Var x, Var w, std::size_t stride = 1, std::size_t padding = 0);
// x: [c_in, len], w: [c_in, c_out, k]. out len = (len-1)*stride - 2*padding + k.
Var conv_transpose1d(Var x, Var w, std::size_t stride = 1, std::size_t padding = 0);

Var sum(Var x);
Var mean(Var x);
// Sums out `axis`, removing it from the shape.
Var sum_axis(Var x, std::size_t axis);
Var reshape(Var x, Shape shape);
// 2-D transpose.
Var transpose(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var gather(Var x, IndexMap indices, Shape out_shape);
Var scatter_add(Var x, IndexMap indices, Shape out_shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);

inline Var square(Var x) { return mul(x, x); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var x) { return neg(x); }
inline Var operator*(double c, Var x) { return scale(x, c); }
inline Var operator*(Var x, double c) { return scale(x, c); }
inline Var operator+(Var x, double c) { return add_scalar(x, c); }
inline Var operator+(double c, Var x) { return add_scalar(x, c); }

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = false;
  std::size_t coords_checked = 0;
  NDArray analytic;
  NDArray numeric;  // only checked coordinates are filled
};

using TapeBuilder = std::function<Var(Tape&, Var)>;

// Compares backward() against central differences. |a-b|/max(|a|,|b|,1e-8)
// per coordinate. With max_coords > 0 only a seeded random subset of that many
// coordinates is perturbed.
GradCheckReport grad_check(const TapeBuilder& f, const NDArray& x, double h, double tol,
                           std::size_t max_coords = 0, unsigned long long seed = 0);

}  // namespace latmask::ad
