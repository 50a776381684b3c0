#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "membart/tape.hpp"
#include "membart/tensor.hpp"

namespace membart {

constexpr double kMaskedScore = -1e9;

namespace detail {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) return false;
  for (const Tensor<T>* t : inputs)
    if (tape->needs_grad(*t)) return true;
  return false;
}

template <typename T>
void finish_op(const char* name, const Tensor<T>& out) {
  if (finite_checks_enabled() && !out.all_finite()) throw Error(std::string(name) + ": non-finite output");
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A^T * B where A is [k,m], B is [k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_same_shape(const char* name, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::should_record<T>({&a, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->ensure_node(b);
    tape->record(out, [a, b](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(a, g.data(), static_cast<int64_t>(g.size()));
      t.add_grad(b, g.data(), static_cast<int64_t>(g.size()));
    });
  }
  detail::finish_op("add", out);
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::should_record<T>({&a, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->ensure_node(b);
    tape->record(out, [a, b](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(a, g.data(), static_cast<int64_t>(g.size()));
      std::vector<T> neg(g.size());
      for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      t.add_grad(b, neg.data(), static_cast<int64_t>(neg.size()));
    });
  }
  detail::finish_op("sub", out);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::should_record<T>({&a, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->ensure_node(b);
    tape->record(out, [a, b](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> buf(g.size());
      for (size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * b.data()[i];
      t.add_grad(a, buf.data(), static_cast<int64_t>(buf.size()));
      for (size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * a.data()[i];
      t.add_grad(b, buf.data(), static_cast<int64_t>(buf.size()));
    });
  }
  detail::finish_op("mul", out);
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  if (detail::should_record<T>({&a})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->record(out, [a, c](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> buf(g.size());
      for (size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * c;
      t.add_grad(a, buf.data(), static_cast<int64_t>(buf.size()));
    });
  }
  detail::finish_op("mul_scalar", out);
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
  if (detail::should_record<T>({&a})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->record(out, [a](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(a, g.data(), static_cast<int64_t>(g.size()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

// out = x * s where s is a trainable scalar tensor (shape [1] or []).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must be a single element, got " + shape_str(s.shape()));
  T sv = s.data()[0];
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * sv;
  if (detail::should_record<T>({&x, &s})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(s);
    tape->record(out, [x, s, sv](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> buf(g.size());
      for (size_t i = 0; i < g.size(); ++i) buf[i] = g[i] * sv;
      t.add_grad(x, buf.data(), static_cast<int64_t>(buf.size()));
      T acc = 0;
      for (size_t i = 0; i < g.size(); ++i) acc += g[i] * x.data()[i];
      t.add_grad_at(s, 0, acc);
    });
  }
  return out;
}

// out = x + b where b is a trainable scalar tensor broadcast everywhere.
template <typename T>
Tensor<T> add_scalar_t(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.numel() != 1) throw ShapeError("add_scalar_t: bias must be a single element");
  T bv = b.data()[0];
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + bv;
  if (detail::should_record<T>({&x, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(b);
    tape->record(out, [x, b](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(x, g.data(), static_cast<int64_t>(g.size()));
      T acc = 0;
      for (T gv : g) acc += gv;
      t.add_grad_at(b, 0, acc);
    });
  }
  return out;
}

// Broadcast add over the last dimension: x[..., d] + bias[d].
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  int64_t d = x.dim(-1);
  if (bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs last dim " + std::to_string(d));
  Tensor<T> out(x.shape());
  int64_t rows = x.numel() / d;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] + bias.data()[j];
  if (detail::should_record<T>({&x, &bias})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(bias);
    tape->record(out, [x, bias, rows, d](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(x, g.data(), static_cast<int64_t>(g.size()));
      std::vector<T> gb(static_cast<size_t>(d), T(0));
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * d + j)];
      t.add_grad(bias, gb.data(), d);
    });
  }
  return out;
}

// x[b, ...] + y[...] with y broadcast over the leading dimension.
template <typename T>
Tensor<T> add_broadcast0(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() < 1 || static_cast<int64_t>(x.rank()) != y.rank() + 1)
    throw ShapeError("add_broadcast0: rank mismatch");
  for (int64_t i = 0; i < y.rank(); ++i)
    if (x.dim(i + 1) != y.dim(i)) throw ShapeError("add_broadcast0: trailing shape mismatch");
  int64_t batch = x.dim(0);
  int64_t inner = y.numel();
  Tensor<T> out(x.shape());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < inner; ++i) out.data()[b * inner + i] = x.data()[b * inner + i] + y.data()[i];
  if (detail::should_record<T>({&x, &y})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(y);
    tape->record(out, [x, y, batch, inner](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(x, g.data(), static_cast<int64_t>(g.size()));
      std::vector<T> gy(static_cast<size_t>(inner), T(0));
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < inner; ++i) gy[static_cast<size_t>(i)] += g[static_cast<size_t>(b * inner + i)];
      t.add_grad(y, gy.data(), inner);
    });
  }
  return out;
}

// Multiplies each last-dim row of x by a constant (non-differentiable) scale.
// scales.size() must equal numel(x) / last_dim. Used for reset flags and
// loss-weight masking where the scale carries no gradient.
template <typename T>
Tensor<T> scale_rows_const(const Tensor<T>& x, const std::vector<T>& scales) {
  int64_t d = x.dim(-1);
  int64_t rows = x.numel() / d;
  if (static_cast<int64_t>(scales.size()) != rows) throw ShapeError("scale_rows_const: wrong number of scales");
  Tensor<T> out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    T s = scales[static_cast<size_t>(r)];
    for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] * s;
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, scales, rows, d](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> buf(g.size());
      for (int64_t r = 0; r < rows; ++r) {
        T s = scales[static_cast<size_t>(r)];
        for (int64_t j = 0; j < d; ++j)
          buf[static_cast<size_t>(r * d + j)] = g[static_cast<size_t>(r * d + j)] * s;
      }
      t.add_grad(x, buf.data(), static_cast<int64_t>(buf.size()));
    });
  }
  return out;
}

// x[..., d] scaled per row by trainable s with shape == x.shape[:-1].
template <typename T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& s) {
  int64_t d = x.dim(-1);
  int64_t rows = x.numel() / d;
  if (s.numel() != rows)
    throw ShapeError("mul_rows: scale shape " + shape_str(s.shape()) + " vs rows " + std::to_string(rows));
  Tensor<T> out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    T sv = s.data()[r];
    for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] * sv;
  }
  if (detail::should_record<T>({&x, &s})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(s);
    tape->record(out, [x, s, rows, d](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      std::vector<T> gs(static_cast<size_t>(rows), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        T sv = s.data()[r];
        for (int64_t j = 0; j < d; ++j) {
          size_t idx = static_cast<size_t>(r * d + j);
          gx[idx] = g[idx] * sv;
          gs[static_cast<size_t>(r)] += g[idx] * x.data()[idx];
        }
      }
      t.add_grad(x, gx.data(), static_cast<int64_t>(gx.size()));
      t.add_grad(s, gs.data(), rows);
    });
  }
  return out;
}

// Row-wise dot product over the last dim: out[...] = sum_d a[..., d] * b[..., d].
template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("rowwise_dot", a, b);
  int64_t d = a.dim(-1);
  int64_t rows = a.numel() / d;
  std::vector<int64_t> oshape(a.shape().begin(), a.shape().end() - 1);
  Tensor<T> out(oshape);
  for (int64_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (int64_t j = 0; j < d; ++j) acc += a.data()[r * d + j] * b.data()[r * d + j];
    out.data()[r] = acc;
  }
  if (detail::should_record<T>({&a, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->ensure_node(b);
    tape->record(out, [a, b, rows, d](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> buf(static_cast<size_t>(rows * d));
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j)
          buf[static_cast<size_t>(r * d + j)] = g[static_cast<size_t>(r)] * b.data()[r * d + j];
      t.add_grad(a, buf.data(), rows * d);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j)
          buf[static_cast<size_t>(r * d + j)] = g[static_cast<size_t>(r)] * a.data()[r * d + j];
      t.add_grad(b, buf.data(), rows * d);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

// a[..., m, k] times b. b is either [k, n] ([n, k] when trans_b), shared
// across the leading batch dims, or has the same leading dims as a.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: rank must be >= 2");
  int64_t m = a.dim(-2), k = a.dim(-1);
  int64_t bk = trans_b ? b.dim(-1) : b.dim(-2);
  int64_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if (bk != k)
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (trans_b ? " (b transposed)" : ""));
  bool shared_b = (b.rank() == 2 && a.rank() >= 2);
  if (!shared_b) {
    if (a.rank() != b.rank()) throw ShapeError("matmul: batch rank mismatch");
    for (int64_t i = 0; i + 2 < a.rank(); ++i)
      if (a.dim(i) != b.dim(i)) throw ShapeError("matmul: batch dims mismatch");
  }
  int64_t batch = a.numel() / (m * k);
  std::vector<int64_t> oshape(a.shape().begin(), a.shape().end() - 2);
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor<T> out(oshape);
  int64_t b_stride = shared_b ? 0 : k * n;
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* ap = a.data() + bi * m * k;
    const T* bp = b.data() + bi * b_stride;
    T* cp = out.data() + bi * m * n;
    if (trans_b)
      detail::gemm_nt(ap, bp, cp, m, k, n);
    else
      detail::gemm_nn(ap, bp, cp, m, k, n);
  }
  if (detail::should_record<T>({&a, &b})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(a);
    tape->ensure_node(b);
    tape->record(out, [a, b, trans_b, shared_b, batch, m, k, n](Tape<T>& t, const std::vector<T>& g) {
      int64_t b_stride = shared_b ? 0 : k * n;
      std::vector<T> ga(static_cast<size_t>(a.numel()), T(0));
      std::vector<T> gb(static_cast<size_t>(b.numel()), T(0));
      for (int64_t bi = 0; bi < batch; ++bi) {
        const T* gp = g.data() + bi * m * n;
        const T* ap = a.data() + bi * m * k;
        const T* bp = b.data() + bi * b_stride;
        T* gap = ga.data() + bi * m * k;
        T* gbp = gb.data() + bi * b_stride;
        if (!trans_b) {
          // out = a*b: da += g*b^T ; db += a^T*g
          detail::gemm_nt(gp, bp, gap, m, n, k);
          detail::gemm_tn(ap, gp, gbp, k, m, n);
        } else {
          // out = a*b^T (b is [n,k]): da += g*b ; db += g^T*a
          detail::gemm_nn(gp, bp, gap, m, n, k);
          detail::gemm_tn(gp, ap, gbp, n, m, k);
        }
      }
      t.add_grad(a, ga.data(), a.numel());
      t.add_grad(b, gb.data(), b.numel());
    });
  }
  detail::finish_op("matmul", out);
  return out;
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), x.raw());
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x](Tape<T>& t, const std::vector<T>& g) {
      t.add_grad(x, g.data(), static_cast<int64_t>(g.size()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> swap_axes(const Tensor<T>& x, int64_t ax0, int64_t ax1) {
  int64_t r = x.rank();
  if (ax0 < 0) ax0 += r;
  if (ax1 < 0) ax1 += r;
  if (ax0 < 0 || ax0 >= r || ax1 < 0 || ax1 >= r) throw ShapeError("swap_axes: axis out of range");
  std::vector<int64_t> oshape = x.shape();
  std::swap(oshape[static_cast<size_t>(ax0)], oshape[static_cast<size_t>(ax1)]);
  // strides of the input
  std::vector<int64_t> istr(static_cast<size_t>(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    istr[static_cast<size_t>(i)] = istr[static_cast<size_t>(i + 1)] * x.dim(i + 1);
  std::vector<int64_t> perm_str = istr;
  std::swap(perm_str[static_cast<size_t>(ax0)], perm_str[static_cast<size_t>(ax1)]);
  Tensor<T> out(oshape);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t total = x.numel();
  for (int64_t lin = 0; lin < total; ++lin) {
    int64_t src = 0;
    for (int64_t i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * perm_str[static_cast<size_t>(i)];
    out.data()[lin] = x.data()[src];
    for (int64_t i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, oshape, perm_str, r](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(static_cast<size_t>(x.numel()), T(0));
      std::vector<int64_t> idx(static_cast<size_t>(r), 0);
      for (size_t lin = 0; lin < g.size(); ++lin) {
        int64_t src = 0;
        for (int64_t i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * perm_str[static_cast<size_t>(i)];
        gx[static_cast<size_t>(src)] += g[lin];
        for (int64_t i = r - 1; i >= 0; --i) {
          if (++idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
          idx[static_cast<size_t>(i)] = 0;
        }
      }
      t.add_grad(x, gx.data(), x.numel());
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  std::vector<const Tensor<T>*> keep;
  for (const auto& p : parts)
    if (p.defined() && p.numel() >= 0 && p.dim(axis) > 0) keep.push_back(&p);
  if (keep.empty()) throw ShapeError("concat: no non-empty parts");
  if (keep.size() == 1) {
    // Single effective part: pass through (identity gradient).
    const Tensor<T>& only = *keep[0];
    return reshape(only, only.shape());
  }
  int64_t r = keep[0]->rank();
  if (axis < 0) axis += r;
  std::vector<int64_t> oshape = keep[0]->shape();
  int64_t cat_dim = 0;
  for (const Tensor<T>* p : keep) {
    if (p->rank() != r) throw ShapeError("concat: rank mismatch");
    for (int64_t i = 0; i < r; ++i)
      if (i != axis && p->dim(i) != oshape[static_cast<size_t>(i)]) throw ShapeError("concat: dim mismatch");
    cat_dim += p->dim(axis);
  }
  oshape[static_cast<size_t>(axis)] = cat_dim;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= oshape[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= oshape[static_cast<size_t>(i)];
  Tensor<T> out(oshape);
  int64_t offset = 0;
  for (const Tensor<T>* p : keep) {
    int64_t pd = p->dim(axis);
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * cat_dim + offset) * inner, p->data() + o * pd * inner,
                  sizeof(T) * static_cast<size_t>(pd * inner));
    offset += pd;
  }
  bool rec = false;
  for (const Tensor<T>* p : keep)
    if (detail::should_record<T>({p})) rec = true;
  if (rec) {
    Tape<T>* tape = active_tape<T>();
    std::vector<Tensor<T>> captured;
    for (const Tensor<T>* p : keep) {
      tape->ensure_node(*p);
      captured.push_back(*p);
    }
    tape->record(out, [captured, outer, inner, cat_dim, axis](Tape<T>& t, const std::vector<T>& g) {
      int64_t offset = 0;
      for (const Tensor<T>& p : captured) {
        int64_t pd = p.dim(axis);
        std::vector<T> gp(static_cast<size_t>(p.numel()));
        for (int64_t o = 0; o < outer; ++o)
          std::memcpy(gp.data() + o * pd * inner, g.data() + (o * cat_dim + offset) * inner,
                      sizeof(T) * static_cast<size_t>(pd * inner));
        t.add_grad(p, gp.data(), p.numel());
        offset += pd;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int64_t axis, int64_t start, int64_t end) {
  int64_t r = x.rank();
  if (axis < 0) axis += r;
  int64_t dim = x.dim(axis);
  if (start < 0 || end > dim || start > end) throw ShapeError("slice: bad range");
  std::vector<int64_t> oshape = x.shape();
  oshape[static_cast<size_t>(axis)] = end - start;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int64_t i = axis + 1; i < r; ++i) inner *= x.dim(i);
  Tensor<T> out(oshape);
  int64_t w = end - start;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * w * inner, x.data() + (o * dim + start) * inner,
                sizeof(T) * static_cast<size_t>(w * inner));
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, outer, inner, dim, start, w](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(static_cast<size_t>(x.numel()), T(0));
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(gx.data() + (o * dim + start) * inner, g.data() + o * w * inner,
                    sizeof(T) * static_cast<size_t>(w * inner));
      t.add_grad(x, gx.data(), x.numel());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

// Softmax over the last dimension, max-stabilized. If `mask` is nonempty it is
// added to the scores before the softmax (broadcast over dim 1 when x is rank
// 4 [b,h,q,n] and mask has b*q*n entries). Rows whose mask is entirely
// kMaskedScore produce all-zero output rather than a uniform distribution.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const std::vector<T>& mask = {}) {
  int64_t n = x.dim(-1);
  if (n < 1) throw ShapeError("softmax_rows: empty last dim");
  int64_t rows = x.numel() / n;
  int64_t mask_rows = 0;
  if (!mask.empty()) {
    if (x.rank() != 4) throw ShapeError("softmax_rows: mask requires rank-4 scores");
    mask_rows = x.dim(0) * x.dim(2);
    if (static_cast<int64_t>(mask.size()) != mask_rows * n) throw ShapeError("softmax_rows: mask size mismatch");
  }
  int64_t heads = mask.empty() ? 1 : x.dim(1);
  int64_t q = mask.empty() ? rows : x.dim(2);
  Tensor<T> out(x.shape());
  const T dead = static_cast<T>(kMaskedScore / 2);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = out.data() + r * n;
    const T* mr = nullptr;
    if (!mask.empty()) {
      int64_t bi = r / (heads * q);
      int64_t qi = r % q;
      mr = mask.data() + (bi * q + qi) * n;
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      T v = xr[j] + (mr ? mr[j] : T(0));
      if (v > mx) mx = v;
    }
    if (mr && mx <= dead) {
      // fully masked row: no attendable position
      for (int64_t j = 0; j < n; ++j) yr[j] = T(0);
      continue;
    }
    T z = 0;
    for (int64_t j = 0; j < n; ++j) {
      T v = std::exp((xr[j] + (mr ? mr[j] : T(0))) - mx);
      yr[j] = v;
      z += v;
    }
    for (int64_t j = 0; j < n; ++j) yr[j] /= z;
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, out, rows, n](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = out.data() + r * n;
        const T* gr = g.data() + r * n;
        T dot = 0;
        for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        for (int64_t j = 0; j < n; ++j) gx[static_cast<size_t>(r * n + j)] = yr[j] * (gr[j] - dot);
      }
      t.add_grad(x, gx.data(), static_cast<int64_t>(gx.size()));
    });
  }
  detail::finish_op("softmax_rows", out);
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  int64_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias must have last-dim size");
  int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T istd = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = istd;
    for (int64_t j = 0; j < d; ++j) {
      T h = (xr[j] - mean) * istd;
      xhat[static_cast<size_t>(r * d + j)] = h;
      out.data()[r * d + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  if (detail::should_record<T>({&x, &gain, &bias})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->ensure_node(gain);
    tape->ensure_node(bias);
    auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    tape->record(out, [x, gain, bias, xh, istd, rows, d](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(static_cast<size_t>(rows * d));
      std::vector<T> ggain(static_cast<size_t>(d), T(0));
      std::vector<T> gbias(static_cast<size_t>(d), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * d;
        const T* hr = xh->data() + r * d;
        T s = (*istd)[static_cast<size_t>(r)];
        T sum_gg = 0, sum_ggh = 0;
        for (int64_t j = 0; j < d; ++j) {
          T gg = gr[j] * gain.data()[j];
          sum_gg += gg;
          sum_ggh += gg * hr[j];
          ggain[static_cast<size_t>(j)] += gr[j] * hr[j];
          gbias[static_cast<size_t>(j)] += gr[j];
        }
        T mean_gg = sum_gg / static_cast<T>(d);
        T mean_ggh = sum_ggh / static_cast<T>(d);
        for (int64_t j = 0; j < d; ++j) {
          T gg = gr[j] * gain.data()[j];
          gx[static_cast<size_t>(r * d + j)] = (gg - mean_gg - hr[j] * mean_ggh) * s;
        }
      }
      t.add_grad(x, gx.data(), rows * d);
      t.add_grad(gain, ggain.data(), d);
      t.add_grad(bias, gbias.data(), d);
    });
  }
  detail::finish_op("layer_norm", out);
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T v = x.data()[i];
    out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, out](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      for (size_t i = 0; i < g.size(); ++i) {
        T y = out.data()[static_cast<int64_t>(i)];
        gx[i] = g[i] * y * (T(1) - y);
      }
      t.add_grad(x, gx.data(), static_cast<int64_t>(gx.size()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      for (size_t i = 0; i < g.size(); ++i) {
        double v = static_cast<double>(x.data()[static_cast<int64_t>(i)]);
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] = g[i] * static_cast<T>(cdf + v * pdf);
      }
      t.add_grad(x, gx.data(), static_cast<int64_t>(gx.size()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(static_cast<size_t>(x.numel()), g[0]);
      t.add_grad(x, gx.data(), x.numel());
    });
  }
  return out;
}

// Inverted dropout. Identity (and recorded as nothing) when rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw UsageError("dropout: rate must be < 1");
  T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::bernoulli_distribution keep(1.0 - rate);
  auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    T m = keep(rng) ? scale : T(0);
    (*mask)[static_cast<size_t>(i)] = m;
    out.data()[i] = x.data()[i] * m;
  }
  if (detail::should_record<T>({&x})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(x);
    tape->record(out, [x, mask](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * (*mask)[i];
      t.add_grad(x, gx.data(), static_cast<int64_t>(gx.size()));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const IdMatrix& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  int64_t vocab = table.dim(0), d = table.dim(1);
  Tensor<T> out({ids.rows, ids.cols, d});
  for (int64_t r = 0; r < ids.rows; ++r)
    for (int64_t c = 0; c < ids.cols; ++c) {
      int32_t id = ids.at(r, c);
      if (id < 0 || id >= vocab)
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
      std::memcpy(out.data() + (r * ids.cols + c) * d, table.data() + id * d, sizeof(T) * static_cast<size_t>(d));
    }
  if (detail::should_record<T>({&table})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(table);
    tape->record(out, [table, ids, d](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gt(static_cast<size_t>(table.numel()), T(0));
      for (int64_t r = 0; r < ids.rows; ++r)
        for (int64_t c = 0; c < ids.cols; ++c) {
          int32_t id = ids.at(r, c);
          const T* gr = g.data() + (r * ids.cols + c) * d;
          T* dst = gt.data() + id * d;
          for (int64_t j = 0; j < d; ++j) dst[j] += gr[j];
        }
      t.add_grad(table, gt.data(), table.numel());
    });
  }
  return out;
}

// Weighted sum of per-token negative log-likelihoods:
//   sum_r weights[r] * (logsumexp(logits[r]) - logits[r][labels[r]])
// Rows with weight 0 are skipped entirely (their label may be padding).
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, const IdMatrix& labels, const std::vector<T>& weights) {
  if (logits.rank() != 3) throw ShapeError("cross_entropy_sum: logits must be [batch, len, vocab]");
  int64_t rows = logits.dim(0) * logits.dim(1);
  int64_t vocab = logits.dim(2);
  if (labels.rows * labels.cols != rows || static_cast<int64_t>(weights.size()) != rows)
    throw ShapeError("cross_entropy_sum: labels/weights size mismatch");
  auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(rows), T(0));
  T total = 0;
  for (int64_t r = 0; r < rows; ++r) {
    T w = weights[static_cast<size_t>(r)];
    if (w == T(0)) continue;
    const T* lr = logits.data() + r * vocab;
    T mx = lr[0];
    for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, lr[v]);
    T z = 0;
    for (int64_t v = 0; v < vocab; ++v) z += std::exp(lr[v] - mx);
    T l = std::log(z) + mx;
    (*lse)[static_cast<size_t>(r)] = l;
    int32_t label = labels.v[static_cast<size_t>(r)];
    if (label < 0 || label >= vocab) throw InputError("cross_entropy_sum: label out of range");
    total += w * (l - lr[label]);
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (detail::should_record<T>({&logits})) {
    Tape<T>* tape = active_tape<T>();
    tape->ensure_node(logits);
    tape->record(out, [logits, labels, weights, lse, rows, vocab](Tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gl(static_cast<size_t>(rows * vocab), T(0));
      for (int64_t r = 0; r < rows; ++r) {
        T w = weights[static_cast<size_t>(r)];
        if (w == T(0)) continue;
        const T* lr = logits.data() + r * vocab;
        T l = (*lse)[static_cast<size_t>(r)];
        int32_t label = labels.v[static_cast<size_t>(r)];
        T* gr = gl.data() + r * vocab;
        T scale = g[0] * w;
        for (int64_t v = 0; v < vocab; ++v) gr[v] = scale * std::exp(lr[v] - l);
        gr[label] -= scale;
      }
      t.add_grad(logits, gl.data(), rows * vocab);
    });
  }
  detail::finish_op("cross_entropy_sum", out);
  return out;
}

}  // namespace membart
