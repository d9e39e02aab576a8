// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "selectroscope/tensor.hpp"

namespace selectroscope {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Computation record for reverse-mode differentiation.
///
/// Operations are appended in execution order, which is already a topological
/// order; backward() walks the list once in reverse. A tape belongs to one
/// thread. In inference mode no backward closures are kept and backward() is
/// rejected.
class Tape {
 public:
  enum class Mode { kRecord, kInference };

  using BackwardFn = std::function<void(Tape&, std::span<const double> out_adjoint)>;

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::kRecord; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);

  /// Leaf that reads `tensor`'s data. If the tensor requires grad, backward()
  /// adds d(loss)/d(tensor) into its grad slot. The tensor must outlive the tape.
  Var parameter(Tensor& tensor);

  /// Populates adjoints for every node and accumulates into bound parameters.
  /// Adjoints are recomputed from scratch per call; parameter grads add up.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id_).needs_grad; }

  /// Adjoint of `v` from the most recent backward(); empty if not computed.
  std::span<const double> adjoint(Var v) const { return nodes_.at(v.id_).adjoint; }

  // Used by operation implementations.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  std::span<double> adjoint_buffer(Var v) { return nodes_.at(v.id_).adjoint; }

 private:
  struct Node {
    Tensor value;
    BackwardFn backward;
    Tensor* bound = nullptr;
    std::vector<double> adjoint;
    bool needs_grad = false;
  };

  void check_owner(Var v) const;

  Mode mode_;
  // deque keeps references to earlier nodes valid while new ones are appended.
  std::deque<Node> nodes_;
};

// Elementwise operations on equal shapes. No implicit broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scalar_mul(Var a, double factor);
Var add_scalar(Var a, double offset);
Var relu(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

/// x[N,C,...] + bias[C] broadcast over every axis except 1. The only broadcast.
Var add_channel_bias(Var x, Var bias);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var sum(Var a);
Var mean(Var a);
/// Reduces the listed axes away; remaining axes keep their order.
Var sum_over(Var a, std::vector<std::size_t> axes);
Var mean_over(Var a, std::vector<std::size_t> axes);
/// Maximum along one axis. Ties go to the lowest index, and the gradient
/// flows only through that element.
Var max_over(Var a, std::size_t axis);

/// [N, ...] -> [N, prod(...)].
Var flatten(Var a);
/// [N,C,H,W] -> [N,C], spatial mean per channel.
Var global_avg_pool(Var a);

/// Cross-correlation of input[N,Cin,H,W] with kernel[Cout,Cin,kh,kw].
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding);

/// Zeroes channel c of x[N,C,...] wherever ablated[c] is true.
Var mask_channels(Var x, const std::vector<bool>& ablated);

/// Mean over the batch of -log softmax(logits)[label], max-shifted.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Compares the tape gradient of `f` at `point` with central differences of
/// width `step`. Returns max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).
using ScalarFunction = std::function<Var(Tape&, Var)>;
double grad_check(const ScalarFunction& f, const Tensor& point, double step);

}  // namespace selectroscope
