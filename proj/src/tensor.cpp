// SPDX-License-Identifier: Apache-2.0
#include "affect/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>

#include "affect/error.hpp"

namespace affect {

long shape_numel(const Shape& s) {
  long n = 1;
  for (long e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

thread_local Tape* t_active_tape = nullptr;
thread_local long t_op_serial = 0;

Impl make_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

void validate_shape(const Shape& s) {
  for (long e : s) {
    if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(s));
  }
}

void check_finite(const char* op, long serial, const std::vector<double>& out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) {
      throw NumericError(std::string(op) + " (op #" + std::to_string(serial) +
                         ") produced non-finite value at flat index " + std::to_string(i));
    }
  }
}

struct OpGuard {
  const char* name;
  long serial;
  explicit OpGuard(const char* n) : name(n), serial(++t_op_serial) {}
};

// ---- raw GEMM kernels, all accumulate into C -------------------------------
// Per-element accumulation order is fixed (ascending k), so results are
// independent of the thread count.

constexpr long kParallelFlops = 1L << 16;

// C[M,N] += A[M,K] * B[K,N]
void mm_nn(long M, long K, long N, const double* A, const double* B, double* C) {
  const bool par = M > 1 && M * N * K >= kParallelFlops;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (long i = 0; i < M; ++i) {
    double* crow = C + i * N;
    const double* arow = A + i * K;
    for (long k = 0; k < K; ++k) {
      const double a = arow[k];
      const double* brow = B + k * N;
      for (long j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
  (void)par;
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(long M, long K, long N, const double* A, const double* B, double* C) {
  const bool par = M > 1 && M * N * K >= kParallelFlops;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (long i = 0; i < M; ++i) {
    const double* arow = A + i * K;
    double* crow = C + i * N;
    for (long j = 0; j < N; ++j) {
      const double* brow = B + j * K;
      double s = 0.0;
      for (long k = 0; k < K; ++k) s += arow[k] * brow[k];
      crow[j] += s;
    }
  }
  (void)par;
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_tn(long M, long K, long N, const double* A, const double* B, double* C) {
  const bool par = M > 1 && M * N * K >= kParallelFlops;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (long i = 0; i < M; ++i) {
    double* crow = C + i * N;
    for (long k = 0; k < K; ++k) {
      const double a = A[k * M + i];
      const double* brow = B + k * N;
      for (long j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
  (void)par;
}

bool want_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

}  // namespace

struct OpAccess {
  static Impl& impl(Tensor& t) { return t.impl_; }
  static const Impl& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(Impl impl) { return Tensor(std::move(impl)); }
};

namespace {

Impl get(const Tensor& t) { return OpAccess::impl(t); }

void accum(const Impl& target, const std::vector<double>& contribution) {
  target->ensure_grad();
  auto& g = target->grad;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  validate_shape(shape);
  return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  validate_shape(shape);
  return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<long>(values.size())) {
    throw DimensionError("from_data: shape " + affect::shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  return Tensor(make_impl(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("shape() on an undefined tensor");
  return impl_->shape;
}

long Tensor::dim(int axis) const {
  const Shape& s = shape();
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("dim(): axis out of range for " + affect::shape_str(s));
  return s[axis];
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }
long Tensor::numel() const { return impl_ ? impl_->numel() : 0; }
std::string Tensor::shape_str() const { return affect::shape_str(shape()); }

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw ContractError("data() on an undefined tensor");
  return impl_->data;
}

std::vector<double>& Tensor::mutable_data() {
  if (!impl_) throw ContractError("mutable_data() on an undefined tensor");
  return impl_->data;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!impl_) throw ContractError("set_requires_grad() on an undefined tensor");
  impl_->requires_grad = v;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad(): no gradient recorded for this tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item(): tensor has shape " + shape_str() + ", want a single element");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<long> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw DimensionError("at(): index rank mismatch for " + shape_str());
  long flat = 0;
  std::size_t d = 0;
  for (long i : idx) {
    if (i < 0 || i >= s[d]) throw DimensionError("at(): index out of range for " + shape_str());
    flat = flat * s[d] + i;
    ++d;
  }
  return impl_->data[flat];
}

Tensor Tensor::clone(bool requires_grad) const {
  if (!impl_) return {};
  return Tensor(make_impl(impl_->shape, impl_->data, requires_grad));
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : prev_(t_active_tape) { t_active_tape = this; }

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(const char* op_name, std::function<void()> pull) {
  entries_.push_back({op_name, std::move(pull)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: loss tensor is undefined");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + loss.shape_str());
  }
  Impl li = OpAccess::impl(loss);
  li->ensure_grad();
  li->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->pull();
}

// ---- op implementations ----------------------------------------------------

namespace {

// Op epilogue: finite check, requires_grad propagation, tape recording. The
// builder receives the output impl and returns the pull closure.
Tensor finish_op_out(const OpGuard& op, Shape shape, std::vector<double> data,
                     const std::vector<Tensor>& inputs,
                     const std::function<std::function<void()>(Impl)>& make_pull) {
  check_finite(op.name, op.serial, data);
  bool rec = false;
  if (Tape::active()) {
    for (const auto& in : inputs) rec = rec || want_grad(in);
  }
  auto impl = make_impl(std::move(shape), std::move(data), rec);
  if (rec) Tape::active()->record(op.name, make_pull(impl));
  return OpAccess::wrap(std::move(impl));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  OpGuard op("matmul");
  if (a.rank() < 2 || b.rank() != 2) {
    throw DimensionError("matmul: need a rank>=2 and b rank 2, got " + a.shape_str() + " and " +
                         b.shape_str());
  }
  const long k = a.dim(-1);
  if (k != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  const long n = b.dim(1);
  const long m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;

  std::vector<double> out(m * n, 0.0);
  mm_nn(m, k, n, a.data().data(), b.data().data(), out.data());

  Impl ai = get(a), bi = get(b);
  return finish_op_out(op, std::move(out_shape), std::move(out), {a, b}, [ai, bi, m, k, n](Impl oi) {
    return [ai, bi, oi, m, k, n]() {
      const auto& g = oi->grad;
      if (g.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        mm_nt(m, n, k, g.data(), bi->data.data(), ai->grad.data());
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        mm_tn(k, m, n, ai->data.data(), g.data(), bi->grad.data());
      }
    };
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  OpGuard op("bmm");
  if (a.rank() != 3 || b.rank() != 3) {
    throw DimensionError("bmm: need rank-3 operands, got " + a.shape_str() + " and " + b.shape_str());
  }
  const long batches = a.dim(0);
  const long m = a.dim(1);
  const long k = a.dim(2);
  const long bk = transpose_b ? b.dim(2) : b.dim(1);
  const long n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batches || bk != k) {
    throw DimensionError(std::string("bmm: incompatible shapes ") + a.shape_str() + " and " +
                         b.shape_str() + (transpose_b ? " (transposed)" : ""));
  }
  std::vector<double> out(batches * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (long i = 0; i < batches; ++i) {
    if (transpose_b) {
      mm_nt(m, k, n, A + i * m * k, B + i * n * k, out.data() + i * m * n);
    } else {
      mm_nn(m, k, n, A + i * m * k, B + i * k * n, out.data() + i * m * n);
    }
  }
  Impl ai = get(a), bi = get(b);
  return finish_op_out(op, {batches, m, n}, std::move(out), {a, b},
                       [ai, bi, batches, m, k, n, transpose_b](Impl oi) {
                         return [ai, bi, oi, batches, m, k, n, transpose_b]() {
                           const auto& g = oi->grad;
                           if (g.empty()) return;
                           for (long i = 0; i < batches; ++i) {
                             const double* gi = g.data() + i * m * n;
                             const double* Ai = ai->data.data() + i * m * k;
                             if (ai->requires_grad) {
                               ai->ensure_grad();
                               double* dA = ai->grad.data() + i * m * k;
                               if (transpose_b) {
                                 // C = A * B^T with B stored [n,k]: dA = dC * B
                                 mm_nn(m, n, k, gi, bi->data.data() + i * n * k, dA);
                               } else {
                                 mm_nt(m, n, k, gi, bi->data.data() + i * k * n, dA);
                               }
                             }
                             if (bi->requires_grad) {
                               bi->ensure_grad();
                               if (transpose_b) {
                                 // dB[n,k] = dC^T * A
                                 mm_tn(n, m, k, gi, Ai, bi->grad.data() + i * n * k);
                               } else {
                                 // dB[k,n] = A^T * dC
                                 mm_tn(k, m, n, Ai, gi, bi->grad.data() + i * k * n);
                               }
                             }
                           }
                         };
                       });
}

namespace {

enum class EwMode { equal, a_scalar, b_scalar };

EwMode ew_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return EwMode::equal;
  if (a.numel() == 1) return EwMode::a_scalar;
  if (b.numel() == 1) return EwMode::b_scalar;
  throw DimensionError(std::string(op) + ": shapes " + a.shape_str() + " and " + b.shape_str() +
                       " are not broadcast-compatible (equal shapes or a single-element operand)");
}

template <typename Fwd>
std::vector<double> ew_forward(EwMode mode, const Tensor& a, const Tensor& b, Fwd f) {
  const auto& A = a.data();
  const auto& B = b.data();
  if (mode == EwMode::a_scalar) {
    std::vector<double> out(B.size());
    for (std::size_t i = 0; i < B.size(); ++i) out[i] = f(A[0], B[i]);
    return out;
  }
  if (mode == EwMode::b_scalar) {
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[0]);
    return out;
  }
  std::vector<double> out(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[i]);
  return out;
}

double read_side(const std::vector<double>& v, bool is_scalar, std::size_t i) {
  return is_scalar ? v[0] : v[i];
}

// Shared backward wiring for binary elementwise ops. da/db compute the local
// partials as functions of (a_i, b_i, g_i).
Tensor ew_op(const OpGuard& op, const Tensor& a, const Tensor& b,
             const std::function<double(double, double)>& f,
             const std::function<double(double, double, double)>& da,
             const std::function<double(double, double, double)>& db) {
  EwMode mode = ew_mode(op.name, a, b);
  Shape out_shape = (mode == EwMode::a_scalar) ? b.shape() : a.shape();
  std::vector<double> out = ew_forward(mode, a, b, f);
  Impl ai = get(a), bi = get(b);
  const bool a_scalar = mode == EwMode::a_scalar;
  const bool b_scalar = mode == EwMode::b_scalar;
  return finish_op_out(op, std::move(out_shape), std::move(out), {a, b},
                       [ai, bi, da, db, a_scalar, b_scalar](Impl oi) {
                         return [ai, bi, oi, da, db, a_scalar, b_scalar]() {
                           const auto& g = oi->grad;
                           if (g.empty()) return;
                           if (ai->requires_grad) {
                             ai->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double av = read_side(ai->data, a_scalar, i);
                               const double bv = read_side(bi->data, b_scalar, i);
                               ai->grad[a_scalar ? 0 : i] += da(av, bv, g[i]);
                             }
                           }
                           if (bi->requires_grad) {
                             bi->ensure_grad();
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const double av = read_side(ai->data, a_scalar, i);
                               const double bv = read_side(bi->data, b_scalar, i);
                               bi->grad[b_scalar ? 0 : i] += db(av, bv, g[i]);
                             }
                           }
                         };
                       });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  OpGuard op("add");
  return ew_op(
      op, a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  OpGuard op("sub");
  return ew_op(
      op, a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  OpGuard op("mul");
  return ew_op(
      op, a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  OpGuard op("divide");
  return ew_op(
      op, a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  OpGuard op("add_bias");
  if (b.rank() != 1 || x.dim(-1) != b.dim(0)) {
    throw DimensionError("add_bias: bias " + b.shape_str() + " does not match last axis of " +
                         x.shape_str());
  }
  const long d = b.dim(0);
  const long rows = x.numel() / d;
  std::vector<double> out(x.data());
  for (long r = 0; r < rows; ++r) {
    double* row = out.data() + r * d;
    for (long j = 0; j < d; ++j) row[j] += b.data()[j];
  }
  Impl xi = get(x), bi = get(b);
  return finish_op_out(op, x.shape(), std::move(out), {x, b}, [xi, bi, rows, d](Impl oi) {
    return [xi, bi, oi, rows, d]() {
      const auto& g = oi->grad;
      if (g.empty()) return;
      if (xi->requires_grad) accum(xi, g);
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (long r = 0; r < rows; ++r) {
          const double* row = g.data() + r * d;
          for (long j = 0; j < d; ++j) bi->grad[j] += row[j];
        }
      }
    };
  });
}

namespace {

// Unary op wiring; dfdx receives (x_i, y_i) so saturating activations can
// reuse the forward value.
Tensor unary_op(const OpGuard& op, const Tensor& x, const std::function<double(double)>& f,
                const std::function<double(double, double)>& dfdx) {
  std::vector<double> out(x.numel());
  for (long i = 0; i < x.numel(); ++i) out[i] = f(x.data()[i]);
  Impl xi = get(x);
  return finish_op_out(op, x.shape(), std::move(out), {x}, [xi, dfdx](Impl oi) {
    return [xi, oi, dfdx]() {
      const auto& g = oi->grad;
      if (g.empty()) return;
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        xi->grad[i] += g[i] * dfdx(xi->data[i], oi->data[i]);
      }
    };
  });
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  OpGuard op("sigmoid");
  return unary_op(
      op, x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  OpGuard op("tanh");
  return unary_op(op, x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  OpGuard op("relu");
  return unary_op(op, x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor log(const Tensor& x) {
  OpGuard op("log");
  return unary_op(op, x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor pow(const Tensor& x, double exponent) {
  OpGuard op("pow");
  return unary_op(op, x, [exponent](double v) { return std::pow(v, exponent); },
                  [exponent](double v, double) {
                    return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0);
                  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  OpGuard op("clamp");
  if (!(lo <= hi)) throw ContractError("clamp: lo must be <= hi");
  return unary_op(op, x,
                  [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                  [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor scale(const Tensor& x, double c) {
  OpGuard op("scale");
  return unary_op(op, x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor add_const(const Tensor& x, double c) {
  OpGuard op("add_const");
  return unary_op(op, x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  OpGuard op("concat_last");
  if (parts.empty()) throw ContractError("concat_last: no operands");
  const Shape& base = parts[0].shape();
  long total_last = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(base.size())) {
      throw DimensionError("concat_last: rank mismatch, " + p.shape_str() + " vs " +
                           shape_str(base));
    }
    for (int d = 0; d + 1 < p.rank(); ++d) {
      if (p.shape()[d] != base[d]) {
        throw DimensionError("concat_last: leading extents differ, " + p.shape_str() + " vs " +
                             shape_str(base));
      }
    }
    total_last += p.dim(-1);
  }
  Shape out_shape = base;
  out_shape.back() = total_last;
  const long rows = shape_numel(out_shape) / total_last;

  std::vector<double> out(rows * total_last);
  std::vector<long> widths;
  std::vector<Impl> impls;
  for (const auto& p : parts) {
    widths.push_back(p.dim(-1));
    impls.push_back(get(p));
  }
  long col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const long w = widths[pi];
    const auto& src = parts[pi].data();
    for (long r = 0; r < rows; ++r) {
      std::copy_n(src.data() + r * w, w, out.data() + r * total_last + col);
    }
    col += w;
  }
  return finish_op_out(op, std::move(out_shape), std::move(out), parts,
                       [impls, widths, rows, total_last](Impl oi) {
                         return [impls, widths, rows, total_last, oi]() {
                           const auto& g = oi->grad;
                           if (g.empty()) return;
                           long col = 0;
                           for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                             const long w = widths[pi];
                             if (impls[pi]->requires_grad) {
                               impls[pi]->ensure_grad();
                               for (long r = 0; r < rows; ++r) {
                                 const double* src = g.data() + r * total_last + col;
                                 double* dst = impls[pi]->grad.data() + r * w;
                                 for (long j = 0; j < w; ++j) dst[j] += src[j];
                               }
                             }
                             col += w;
                           }
                         };
                       });
}

Tensor slice_last(const Tensor& x, long start, long len) {
  OpGuard op("slice_last");
  const long d = x.dim(-1);
  if (start < 0 || len < 1 || start + len > d) {
    throw DimensionError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for " + x.shape_str());
  }
  Shape out_shape = x.shape();
  out_shape.back() = len;
  const long rows = x.numel() / d;
  std::vector<double> out(rows * len);
  for (long r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * d + start, len, out.data() + r * len);
  }
  Impl xi = get(x);
  return finish_op_out(op, std::move(out_shape), std::move(out), {x},
                       [xi, rows, d, start, len](Impl oi) {
                         return [xi, oi, rows, d, start, len]() {
                           const auto& g = oi->grad;
                           if (g.empty() || !xi->requires_grad) return;
                           xi->ensure_grad();
                           for (long r = 0; r < rows; ++r) {
                             const double* src = g.data() + r * len;
                             double* dst = xi->grad.data() + r * d + start;
                             for (long j = 0; j < len; ++j) dst[j] += src[j];
                           }
                         };
                       });
}

Tensor select_time(const Tensor& x, long t) {
  OpGuard op("select_time");
  if (x.rank() != 3) throw DimensionError("select_time: need [B,T,d], got " + x.shape_str());
  const long B = x.dim(0), T = x.dim(1), d = x.dim(2);
  if (t < 0 || t >= T) {
    throw DimensionError("select_time: t=" + std::to_string(t) + " out of range for " + x.shape_str());
  }
  std::vector<double> out(B * d);
  for (long b = 0; b < B; ++b) {
    std::copy_n(x.data().data() + (b * T + t) * d, d, out.data() + b * d);
  }
  Impl xi = get(x);
  return finish_op_out(op, {B, d}, std::move(out), {x}, [xi, B, T, d, t](Impl oi) {
    return [xi, oi, B, T, d, t]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (long b = 0; b < B; ++b) {
        const double* src = g.data() + b * d;
        double* dst = xi->grad.data() + (b * T + t) * d;
        for (long j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  });
}

Tensor stack_time(const std::vector<Tensor>& steps) {
  OpGuard op("stack_time");
  if (steps.empty()) throw ContractError("stack_time: no steps");
  const long B = steps[0].dim(0);
  const long d = steps[0].dim(1);
  const long T = static_cast<long>(steps.size());
  std::vector<Impl> impls;
  for (const auto& s : steps) {
    if (s.rank() != 2 || s.dim(0) != B || s.dim(1) != d) {
      throw DimensionError("stack_time: step shape " + s.shape_str() + " does not match " +
                           steps[0].shape_str());
    }
    impls.push_back(get(s));
  }
  std::vector<double> out(B * T * d);
  for (long t = 0; t < T; ++t) {
    const auto& src = steps[t].data();
    for (long b = 0; b < B; ++b) {
      std::copy_n(src.data() + b * d, d, out.data() + (b * T + t) * d);
    }
  }
  return finish_op_out(op, {B, T, d}, std::move(out), steps, [impls, B, T, d](Impl oi) {
    return [impls, oi, B, T, d]() {
      const auto& g = oi->grad;
      if (g.empty()) return;
      for (long t = 0; t < T; ++t) {
        if (!impls[t]->requires_grad) continue;
        impls[t]->ensure_grad();
        for (long b = 0; b < B; ++b) {
          const double* src = g.data() + (b * T + t) * d;
          double* dst = impls[t]->grad.data() + b * d;
          for (long j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    };
  });
}

Tensor select_axis0(const Tensor& x, long i) {
  OpGuard op("select_axis0");
  if (x.rank() < 2) throw DimensionError("select_axis0: need rank >= 2, got " + x.shape_str());
  const long L = x.dim(0);
  if (i < 0 || i >= L) {
    throw DimensionError("select_axis0: index " + std::to_string(i) + " out of range for " +
                         x.shape_str());
  }
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const long block = shape_numel(out_shape);
  std::vector<double> out(x.data().begin() + i * block, x.data().begin() + (i + 1) * block);
  Impl xi = get(x);
  return finish_op_out(op, std::move(out_shape), std::move(out), {x}, [xi, i, block](Impl oi) {
    return [xi, oi, i, block]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      double* dst = xi->grad.data() + i * block;
      for (long j = 0; j < block; ++j) dst[j] += g[j];
    };
  });
}

Tensor stack_axis0(const std::vector<Tensor>& parts) {
  OpGuard op("stack_axis0");
  if (parts.empty()) throw ContractError("stack_axis0: no operands");
  const Shape& inner = parts[0].shape();
  const long block = shape_numel(inner);
  std::vector<Impl> impls;
  for (const auto& p : parts) {
    if (p.shape() != inner) {
      throw DimensionError("stack_axis0: shape " + p.shape_str() + " does not match " +
                           shape_str(inner));
    }
    impls.push_back(get(p));
  }
  Shape out_shape;
  out_shape.push_back(static_cast<long>(parts.size()));
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  std::vector<double> out;
  out.reserve(block * parts.size());
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return finish_op_out(op, std::move(out_shape), std::move(out), parts, [impls, block](Impl oi) {
    return [impls, oi, block]() {
      const auto& g = oi->grad;
      if (g.empty()) return;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (!impls[p]->requires_grad) continue;
        impls[p]->ensure_grad();
        const double* src = g.data() + p * block;
        for (long j = 0; j < block; ++j) impls[p]->grad[j] += src[j];
      }
    };
  });
}

Tensor select_frames(const Tensor& x, const std::vector<std::pair<long, long>>& positions) {
  OpGuard op("select_frames");
  if (x.rank() != 3) throw DimensionError("select_frames: need [B,T,C], got " + x.shape_str());
  const long B = x.dim(0), T = x.dim(1), C = x.dim(2);
  const long N = static_cast<long>(positions.size());
  if (N == 0) throw ContractError("select_frames: empty position list");
  std::vector<double> out(N * C);
  for (long i = 0; i < N; ++i) {
    auto [b, t] = positions[i];
    if (b < 0 || b >= B || t < 0 || t >= T) {
      throw DimensionError("select_frames: position (" + std::to_string(b) + "," +
                           std::to_string(t) + ") out of range for " + x.shape_str());
    }
    std::copy_n(x.data().data() + (b * T + t) * C, C, out.data() + i * C);
  }
  Impl xi = get(x);
  auto pos = positions;
  return finish_op_out(op, {N, C}, std::move(out), {x}, [xi, pos, T, C](Impl oi) {
    return [xi, oi, pos, T, C]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < pos.size(); ++i) {
        const double* src = g.data() + i * C;
        double* dst = xi->grad.data() + (pos[i].first * T + pos[i].second) * C;
        for (long j = 0; j < C; ++j) dst[j] += src[j];
      }
    };
  });
}

namespace {

// Shared softmax kernel over rows of width d. valid==nullptr means all valid.
void softmax_rows(const double* x, const double* valid, double* y, long rows, long d) {
  for (long r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    const double* vr = valid ? valid + r * d : nullptr;
    double* yr = y + r * d;
    double mx = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < d; ++j) {
      if (!vr || vr[j] != 0.0) mx = std::max(mx, xr[j]);
    }
    if (!std::isfinite(mx)) throw ContractError("softmax: a row has no valid positions");
    double sum = 0.0;
    for (long j = 0; j < d; ++j) {
      const double e = (!vr || vr[j] != 0.0) ? std::exp(xr[j] - mx) : 0.0;
      yr[j] = e;
      sum += e;
    }
    for (long j = 0; j < d; ++j) yr[j] /= sum;
  }
}

Tensor softmax_impl(const OpGuard& op, const Tensor& x, const Tensor* mask) {
  if (x.dim(-1) < 1) throw DimensionError("softmax: empty last axis in " + x.shape_str());
  const long d = x.dim(-1);
  const long rows = x.numel() / d;
  if (mask) {
    if (mask->shape() != x.shape()) {
      throw DimensionError("softmax mask shape " + mask->shape_str() + " != input " + x.shape_str());
    }
    if (mask->requires_grad()) throw ContractError("softmax mask must not require gradients");
  }
  std::vector<double> out(x.numel());
  softmax_rows(x.data().data(), mask ? mask->data().data() : nullptr, out.data(), rows, d);
  Impl xi = get(x);
  return finish_op_out(op, x.shape(), std::move(out), {x}, [xi, rows, d](Impl oi) {
    return [xi, oi, rows, d]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (long r = 0; r < rows; ++r) {
        const double* yr = oi->data.data() + r * d;
        const double* gr = g.data() + r * d;
        double dot = 0.0;
        for (long j = 0; j < d; ++j) dot += gr[j] * yr[j];
        double* dst = xi->grad.data() + r * d;
        for (long j = 0; j < d; ++j) dst[j] += yr[j] * (gr[j] - dot);
      }
    };
  });
}

}  // namespace

Tensor softmax_last(const Tensor& x) {
  OpGuard op("softmax_last");
  return softmax_impl(op, x, nullptr);
}

Tensor softmax_last_masked(const Tensor& x, const Tensor& mask) {
  OpGuard op("softmax_last_masked");
  return softmax_impl(op, x, &mask);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  OpGuard op("layer_norm");
  const long d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                         gain.shape_str() + " and " + bias.shape_str());
  }
  const long rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(rows), mean(rows);
  for (long r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (long j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = is;
    double* yr = out.data() + r * d;
    for (long j = 0; j < d; ++j) yr[j] = gain.data()[j] * ((xr[j] - mu) * is) + bias.data()[j];
  }
  Impl xi = get(x), gi = get(gain), bi = get(bias);
  return finish_op_out(
      op, x.shape(), std::move(out), {x, gain, bias},
      [xi, gi, bi, rows, d, mean, inv_std](Impl oi) {
        return [xi, gi, bi, oi, rows, d, mean, inv_std]() {
          const auto& g = oi->grad;
          if (g.empty()) return;
          const double dd = static_cast<double>(d);
          for (long r = 0; r < rows; ++r) {
            const double* xr = xi->data.data() + r * d;
            const double* gr = g.data() + r * d;
            const double mu = mean[r];
            const double is = inv_std[r];
            if (gi->requires_grad || bi->requires_grad) {
              if (gi->requires_grad) gi->ensure_grad();
              if (bi->requires_grad) bi->ensure_grad();
              for (long j = 0; j < d; ++j) {
                const double xhat = (xr[j] - mu) * is;
                if (gi->requires_grad) gi->grad[j] += gr[j] * xhat;
                if (bi->requires_grad) bi->grad[j] += gr[j];
              }
            }
            if (xi->requires_grad) {
              xi->ensure_grad();
              double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
              for (long j = 0; j < d; ++j) {
                const double dxhat = gr[j] * gi->data[j];
                sum_dxhat += dxhat;
                sum_dxhat_xc += dxhat * (xr[j] - mu);
              }
              // dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat . xhat))
              const double dvar_term = sum_dxhat_xc * is * is;
              double* dst = xi->grad.data() + r * d;
              for (long j = 0; j < d; ++j) {
                const double dxhat = gr[j] * gi->data[j];
                dst[j] += is * (dxhat - sum_dxhat / dd - (xr[j] - mu) * dvar_term / dd);
              }
            }
          }
        };
      });
}

Tensor sum_all(const Tensor& x) {
  OpGuard op("sum_all");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Impl xi = get(x);
  return finish_op_out(op, {1}, {s}, {x}, [xi](Impl oi) {
    return [xi, oi]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (auto& gv : xi->grad) gv += g[0];
    };
  });
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, const Shape& new_shape) {
  OpGuard op("reshape");
  validate_shape(new_shape);
  if (shape_numel(new_shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + x.shape_str() + " as " + shape_str(new_shape));
  }
  std::vector<double> out(x.data());
  Impl xi = get(x);
  return finish_op_out(op, new_shape, std::move(out), {x}, [xi](Impl oi) {
    return [xi, oi]() {
      const auto& g = oi->grad;
      if (g.empty() || !xi->requires_grad) return;
      accum(xi, g);
    };
  });
}

}  // namespace affect
