#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape records primitive operations in execution order; each recorded node
// keeps its forward value and a closure that pushes its adjoint to its
// parents. Only row-wise broadcasting is supported: the right operand of
// add/sub/mul may be a 1xC row applied to every row of an RxC left operand.

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "gcrf/matrix.hpp"

namespace gcrf::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return rows() * cols(); }
  const std::vector<double>& value() const;
  double value(std::size_t r, std::size_t c) const { return value()[r * cols() + c]; }
  // Value of a 1x1 node.
  double scalar() const;
  Matrix to_matrix() const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(const Matrix& value);
  Var constant(const Matrix& value);
  Var constant(std::size_t rows, std::size_t cols, std::vector<double> value);
  Var scalar_constant(double v);

  // Appends a node; `backward` is dropped when no parent requires a gradient.
  Var record(std::size_t rows, std::size_t cols, std::vector<double> value,
             std::initializer_list<Var> parents, BackwardFn backward);
  Var record(std::size_t rows, std::size_t cols, std::vector<double> value,
             std::span<const Var> parents, BackwardFn backward);

  // Runs reverse accumulation from a 1x1 loss. Throws std::invalid_argument
  // for a non-scalar loss. Gradients from a previous call are discarded.
  void backprop(Var loss);

  // Adjoint of `v` after backprop; zeros when `v` is unreachable from the loss.
  Matrix grad(Var v) const;
  std::vector<double> grad_vector(Var v) const;

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// Elementwise, with optional 1xC row broadcast of `b`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b);
// Row r of `a` as a 1xC node.
Var gather_row(Var a, std::size_t r);
// Entry (r, c) of `a` as a 1x1 node.
Var pick(Var a, std::size_t r, std::size_t c);
// Horizontal concatenation of equal-height nodes.
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
// Vertical stacking of equal-width nodes.
Var concat_rows(std::span<const Var> parts);
Var tanh(Var a);
Var log(Var a);
Var exp(Var a);
// Row-wise softmax(a / tau).
Var softmax_with_temperature(Var a, double tau);
Var log_softmax_row(Var a);
// Row-wise log-sum-exp, R x 1.
Var logsumexp_row(Var a);
// Row-wise max, R x 1; the adjoint goes to the first maximal entry.
Var max_row(Var a);
Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var sum(Var a);
Var mean(Var a);
Var scalar_scale(Var a, double c);
// Forward value of `hard`, adjoint routed unchanged to `soft`.
Var straight_through(Var hard, Var soft);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scalar_scale(a, c); }

// Central differences of `loss` around `params`.
std::vector<double> finite_diff(const std::function<double(std::span<const double>)>& loss,
                                std::span<const double> params, double step);

// max_i |a_i - b_i| / max(|b|_inf, floor).
double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor = 1e-12);

}  // namespace gcrf::ad
