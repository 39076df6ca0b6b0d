// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace affect {

/// Row-major extents. All extents are positive.
using Shape = std::vector<long>;

long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;

  long numel() const { return static_cast<long>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

class Tape;

/**
 * Dense n-dimensional array of 64-bit floats with optional participation in
 * reverse-mode differentiation. A Tensor is a cheap shared handle; data is
 * immutable once an op has consumed it. Gradient buffers are the only state
 * mutated by a backward pass. Leaf tensors (parameters) may be rewritten
 * between steps through mutable_data().
 */
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  long dim(int axis) const;  // negative axis counts from the end
  int rank() const;
  long numel() const;
  std::string shape_str() const;

  const std::vector<double>& data() const;
  /// Direct write access for leaves: optimizer updates and finite-difference
  /// probing. Must not be called on a tensor already consumed by a recorded op
  /// within the same tape scope.
  std::vector<double>& mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if no gradient present
  void zero_grad();

  double item() const;  // single-element tensors only
  double at(std::initializer_list<long> idx) const;

  Tensor clone(bool requires_grad = false) const;

 private:
  friend class Tape;
  friend struct OpAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/**
 * Ordered record of differentiable ops. Construction order is topological by
 * construction (an op's inputs exist before its output), so the backward pass
 * is a single reverse sweep visiting each record exactly once. A Tape is
 * confined to the thread that created it; ops record onto the innermost
 * active Tape of the current thread.
 */
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and applies the chain rule in reverse
  /// topological order. Gradients accumulate additively across fan-out.
  void backward(const Tensor& loss);

  std::size_t num_ops() const { return entries_.size(); }

  static Tape* active();
  void record(const char* op_name, std::function<void()> pull);

 private:
  struct Entry {
    const char* op;
    std::function<void()> pull;
  };
  std::vector<Entry> entries_;
  Tape* prev_;
};

// ---- differentiable ops ----------------------------------------------------
// Each op computes eagerly, checks the output for NaN/Inf (surfacing a
// NumericError with an op serial number), and records a backward rule on the
// active tape when any input requires a gradient.

/// a: [..., m, k] contracted with b: [k, n] over the last axis of a.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched matmul: a [B, m, k] with b [B, k, n], or b [B, n, k] when
/// transpose_b is set (contraction over k).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise with equal shapes, or broadcast when one operand has a single
// element. Anything else is a DimensionError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

/// x: [..., d] plus a bias vector b: [d] broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Concatenate along the last axis; all other extents must agree.
Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, long start, long len);

/// x: [B, T, d] -> [B, d] at time index t.
Tensor select_time(const Tensor& x, long t);
/// T tensors of [B, d] -> [B, T, d].
Tensor stack_time(const std::vector<Tensor>& steps);
/// x: [L, ...] -> [...] at leading index i (contiguous block).
Tensor select_axis0(const Tensor& x, long i);
/// L tensors of identical shape -> [L, ...].
Tensor stack_axis0(const std::vector<Tensor>& parts);

/// x: [B, T, C] gathered at (batch, time) pairs -> [N, C].
Tensor select_frames(const Tensor& x, const std::vector<std::pair<long, long>>& positions);

/// Max-subtracted softmax over the last axis; rows sum to 1.
Tensor softmax_last(const Tensor& x);
/// Softmax restricted to positions where mask != 0; masked weights are exactly
/// zero. The mask must not require gradients and every row needs at least one
/// valid position.
Tensor softmax_last_masked(const Tensor& x, const Tensor& mask);

/// Normalization over the last axis with learnable gain/bias (population
/// variance, epsilon inside the square root).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Sum of all elements -> scalar (shape {1}).
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& new_shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }

}  // namespace affect
