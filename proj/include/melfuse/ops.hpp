#pragma once

// Differentiable primitives on TensorT. Every op validates shapes up front,
// computes the forward value, and (when recording) attaches a backward
// closure that scatters gradients into its parents.

#include <algorithm>
#include <cstring>
#include <limits>

#include "melfuse/tensor.hpp"

namespace melfuse {

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (detail::want_grad(a) || detail::want_grad(b)) {
    detail::attach<T>(out, {a, b}, [](const TensorT<T>& o) {
      const auto& g = *o.grad;
      detail::accumulate(o.node->parents[0], g);
      detail::accumulate(o.node->parents[1], g);
    });
  }
  return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (detail::want_grad(a) || detail::want_grad(b)) {
    detail::attach<T>(out, {a, b}, [](const TensorT<T>& o) {
      const auto& g = *o.grad;
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      detail::accumulate(pa, g);
      if (pb.requires_grad) {
        auto& dst = *pb.grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (detail::want_grad(a) || detail::want_grad(b)) {
    detail::attach<T>(out, {a, b}, [](const TensorT<T>& o) {
      const auto& g = *o.grad;
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      if (pa.requires_grad) {
        auto& dst = *pa.grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (*pb.data)[i];
      }
      if (pb.requires_grad) {
        auto& dst = *pb.grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (*pa.data)[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  TensorT<T> out = TensorT<T>::zeros(a.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * c;
  if (detail::want_grad(a)) {
    detail::attach<T>(out, {a}, [c](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      auto& dst = *pa.grad;
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * c;
    });
  }
  return out;
}

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(a.shape) + " -> " +
                                shape_str(s));
  TensorT<T> out = TensorT<T>::zeros(std::move(s));
  *out.data = *a.data;
  if (detail::want_grad(a)) {
    detail::attach<T>(out, {a}, [](const TensorT<T>& o) {
      detail::accumulate(o.node->parents[0], *o.grad);
    });
  }
  return out;
}

namespace detail {

// C[m x n] += A[m x k] * B[k x n], contiguous row-major; ikj order so the
// inner loop runs over contiguous B and C rows.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = arow[kk];
      if (av == T(0)) continue;
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* arow = a + kk * m;
    const T* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  TensorT<T> out = TensorT<T>::zeros({m, n});
  detail::gemm_acc(a.data->data(), b.data->data(), out.data->data(), m, k, n);
  if (detail::want_grad(a) || detail::want_grad(b)) {
    detail::attach<T>(out, {a, b}, [m, k, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      const auto& pb = o.node->parents[1];
      const T* g = o.grad->data();
      if (pa.requires_grad)  // dA = dC * B^T
        detail::gemm_nt_acc(g, pb.data->data(), pa.grad->data(), m, n, k);
      if (pb.requires_grad)  // dB = A^T * dC
        detail::gemm_tn_acc(pa.data->data(), g, pb.grad->data(), k, m, n);
    });
  }
  return out;
}

// y = x * w (+ b) with x flattened to [rows x d_in].
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b = nullptr) {
  if (x.ndim() < 1 || w.ndim() != 2 || x.shape.back() != w.shape[0])
    throw std::invalid_argument("linear: shape mismatch x=" + shape_str(x.shape) +
                                " w=" + shape_str(w.shape));
  const std::size_t d_in = w.shape[0], d_out = w.shape[1];
  const std::size_t rows = x.numel() / d_in;
  if (b) {
    if (b->ndim() != 1 || b->shape[0] != d_out)
      throw std::invalid_argument("linear: bias shape " + shape_str(b->shape) +
                                  " does not match w=" + shape_str(w.shape));
  }
  Shape out_shape = x.shape;
  out_shape.back() = d_out;
  TensorT<T> out = TensorT<T>::zeros(out_shape);
  detail::gemm_acc(x.data->data(), w.data->data(), out.data->data(), rows, d_in, d_out);
  if (b) {
    T* o = out.data->data();
    const T* bv = b->data->data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d_out; ++j) o[r * d_out + j] += bv[j];
  }
  const bool need = detail::want_grad(x) || detail::want_grad(w) || (b && detail::want_grad(*b));
  if (need) {
    std::vector<TensorT<T>> parents = {x, w};
    if (b) parents.push_back(*b);
    detail::attach<T>(out, std::move(parents), [rows, d_in, d_out](const TensorT<T>& o) {
      const auto& px = o.node->parents[0];
      const auto& pw = o.node->parents[1];
      const T* g = o.grad->data();
      if (px.requires_grad)
        detail::gemm_nt_acc(g, pw.data->data(), px.grad->data(), rows, d_out, d_in);
      if (pw.requires_grad)
        detail::gemm_tn_acc(px.data->data(), g, pw.grad->data(), d_in, rows, d_out);
      if (o.node->parents.size() == 3 && o.node->parents[2].requires_grad) {
        auto& db = *o.node->parents[2].grad;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d_out; ++j) db[j] += g[r * d_out + j];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(const TensorT<T>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose2d: need 2-d, got " + shape_str(a.shape));
  const std::size_t m = a.shape[0], n = a.shape[1];
  TensorT<T> out = TensorT<T>::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) (*out.data)[j * m + i] = (*a.data)[i * n + j];
  if (detail::want_grad(a)) {
    detail::attach<T>(out, {a}, [m, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      auto& dst = *pa.grad;
      const auto& g = *o.grad;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) dst[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_cols(const TensorT<T>& a, std::size_t start, std::size_t len) {
  if (a.ndim() != 2 || start + len > a.shape[1])
    throw std::invalid_argument("slice_cols: invalid slice of " + shape_str(a.shape));
  const std::size_t m = a.shape[0], n = a.shape[1];
  TensorT<T> out = TensorT<T>::zeros({m, len});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) (*out.data)[i * len + j] = (*a.data)[i * n + start + j];
  if (detail::want_grad(a)) {
    detail::attach<T>(out, {a}, [m, n, start, len](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      auto& dst = *pa.grad;
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) dst[i * n + start + j] += g[i * len + j];
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const std::size_t m = parts[0].shape[0];
  std::size_t total = 0;
  bool need = false;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.shape[0] != m)
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(p.shape));
    total += p.shape[1];
    need = need || detail::want_grad(p);
  }
  TensorT<T> out = TensorT<T>::zeros({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape[1];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) (*out.data)[i * total + off + j] = (*p.data)[i * w + j];
    off += w;
  }
  if (need) {
    detail::attach<T>(out, parts, [m, total](const TensorT<T>& o) {
      std::size_t off2 = 0;
      const auto& g = *o.grad;
      for (const auto& p : o.node->parents) {
        const std::size_t w = p.shape[1];
        if (p.requires_grad) {
          auto& dst = *p.grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) dst[i * w + j] += g[i * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& a, std::size_t start, std::size_t len) {
  if (a.ndim() != 2 || start + len > a.shape[0])
    throw std::invalid_argument("slice_rows: invalid slice of " + shape_str(a.shape));
  const std::size_t n = a.shape[1];
  TensorT<T> out = TensorT<T>::zeros({len, n});
  std::memcpy(out.data->data(), a.data->data() + start * n, len * n * sizeof(T));
  if (detail::want_grad(a)) {
    detail::attach<T>(out, {a}, [start, len, n](const TensorT<T>& o) {
      const auto& pa = o.node->parents[0];
      if (!pa.requires_grad) return;
      auto& dst = *pa.grad;
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < len * n; ++i) dst[start * n + i] += g[i];
    });
  }
  return out;
}

// Row gather: out[i] = table[ids[i]].
template <class T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const std::vector<std::int32_t>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-d");
  const std::size_t v = table.shape[0], d = table.shape[1];
  for (std::int32_t id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside [0," +
                              std::to_string(v) + ")");
  TensorT<T> out = TensorT<T>::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data->data() + i * d, table.data->data() + static_cast<std::size_t>(ids[i]) * d,
                d * sizeof(T));
  if (detail::want_grad(table)) {
    detail::attach<T>(out, {table}, [ids, d](const TensorT<T>& o) {
      const auto& pt = o.node->parents[0];
      if (!pt.requires_grad) return;
      auto& dst = *pt.grad;
      const auto& g = *o.grad;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          dst[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
    });
  }
  return out;
}

enum class Activation { relu, gelu };

template <class T>
TensorT<T> activation(const TensorT<T>& x, Activation kind) {
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  const std::size_t n = x.numel();
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < n; ++i) (*out.data)[i] = std::max(T(0), (*x.data)[i]);
  } else {
    // exact Gaussian-CDF form: 0.5 x (1 + erf(x / sqrt(2)))
    for (std::size_t i = 0; i < n; ++i) {
      const double v = static_cast<double>((*x.data)[i]);
      (*out.data)[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
    }
  }
  if (detail::want_grad(x)) {
    detail::attach<T>(out, {x}, [kind](const TensorT<T>& o) {
      const auto& px = o.node->parents[0];
      if (!px.requires_grad) return;
      auto& dst = *px.grad;
      const auto& g = *o.grad;
      if (kind == Activation::relu) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if ((*px.data)[i] > T(0)) dst[i] += g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = static_cast<double>((*px.data)[i]);
          const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
          const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * 3.14159265358979323846);
          dst[i] += g[i] * static_cast<T>(cdf + v * pdf);
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) { return activation(x, Activation::relu); }

template <class T>
TensorT<T> gelu(const TensorT<T>& x) { return activation(x, Activation::gelu); }

// Max-subtracted softmax along `axis`. A slice whose maximum is -inf has no
// admissible key and is a precondition violation.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, std::size_t axis) {
  if (axis >= x.ndim()) throw std::invalid_argument("softmax: axis out of range");
  const std::size_t d = x.shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape[i];
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.shape[i];
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  const T* in = x.data->data();
  T* o = out.data->data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t b = 0; b < inner; ++b) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < d; ++k) mx = std::max(mx, in[(a * d + k) * inner + b]);
      if (mx == -std::numeric_limits<T>::infinity())
        throw std::domain_error("softmax: slice is entirely -inf");
      T sum = T(0);
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t idx = (a * d + k) * inner + b;
        const T e = std::exp(in[idx] - mx);
        o[idx] = e;
        sum += e;
      }
      const T invsum = T(1) / sum;
      for (std::size_t k = 0; k < d; ++k) o[(a * d + k) * inner + b] *= invsum;
    }
  }
  if (detail::want_grad(x)) {
    detail::attach<T>(out, {x}, [outer, inner, d](const TensorT<T>& o2) {
      const auto& px = o2.node->parents[0];
      if (!px.requires_grad) return;
      auto& dst = *px.grad;
      const auto& g = *o2.grad;
      const auto& y = *o2.data;
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t b = 0; b < inner; ++b) {
          T dot = T(0);
          for (std::size_t k = 0; k < d; ++k) {
            const std::size_t idx = (a * d + k) * inner + b;
            dot += g[idx] * y[idx];
          }
          for (std::size_t k = 0; k < d; ++k) {
            const std::size_t idx = (a * d + k) * inner + b;
            dst[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Per-row normalization over the last dim, then gamma * xhat + beta.
// Biased variance, eps inside the square root.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      double eps = 1e-5) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const std::size_t d = x.shape.back();
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layer_norm: gamma/beta size must be " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  TensorT<T> out = TensorT<T>::zeros(x.shape);
  std::vector<T> inv_std(rows), means(rows);
  const T* in = x.data->data();
  T* o = out.data->data();
  const T* gm = gamma.data->data();
  const T* bt = beta.data->data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
    means[r] = static_cast<T>(mu);
    inv_std[r] = istd;
    for (std::size_t j = 0; j < d; ++j)
      o[r * d + j] = gm[j] * ((row[j] - static_cast<T>(mu)) * istd) + bt[j];
  }
  const bool need =
      detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta);
  if (need) {
    detail::attach<T>(out, {x, gamma, beta},
                      [rows, d, means, inv_std](const TensorT<T>& o2) {
      const auto& px = o2.node->parents[0];
      const auto& pg = o2.node->parents[1];
      const auto& pb = o2.node->parents[2];
      const auto& g = *o2.grad;
      const T* in2 = px.data->data();
      const T* gm2 = pg.data->data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T mu = means[r];
        const T istd = inv_std[r];
        // xhat_j = (x_j - mu) * istd
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (std::size_t j = 0; j < d; ++j) {
          const T xhat = (in2[r * d + j] - mu) * istd;
          const T dxhat = g[r * d + j] * gm2[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (pg.requires_grad) (*pg.grad)[j] += g[r * d + j] * xhat;
          if (pb.requires_grad) (*pb.grad)[j] += g[r * d + j];
        }
        if (px.requires_grad) {
          auto& dx = *px.grad;
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T xhat = (in2[r * d + j] - mu) * istd;
            const T dxhat = g[r * d + j] * gm2[j];
            dx[r * d + j] += istd * (dxhat - inv_d * sum_dxhat - inv_d * xhat * sum_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

enum class BatchNormMode { train, infer };

// Running statistics live outside the autodiff graph.
template <class T>
struct BatchNormStateT {
  TensorT<T> gamma;  // [C]
  TensorT<T> beta;   // [C]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool has_stats = false;

  static BatchNormStateT init(std::size_t channels, bool with_running_stats = true) {
    BatchNormStateT s;
    s.gamma = TensorT<T>::full({channels}, T(1), true);
    s.beta = TensorT<T>::zeros({channels}, true);
    if (with_running_stats) {
      s.running_mean.assign(channels, T(0));
      s.running_var.assign(channels, T(1));
      s.has_stats = true;
    }
    return s;
  }
};

// x is [N x C x F x T] (or any [N x C x ...]); normalizes per channel over
// batch + spatial dims. Train mode uses batch statistics and updates the
// running estimates with the given momentum; infer mode uses running stats.
template <class T>
TensorT<T> batch_norm(const TensorT<T>& x, BatchNormStateT<T>& state, BatchNormMode mode,
                      double momentum = 0.1, double eps = 1e-5) {
  if (x.ndim() < 2) throw std::invalid_argument("batch_norm: need [N x C x ...], got " +
                                                shape_str(x.shape));
  const std::size_t n = x.shape[0], c = x.shape[1];
  if (state.gamma.numel() != c)
    throw std::invalid_argument("batch_norm: channel mismatch, input has " + std::to_string(c) +
                                " channels, params have " + std::to_string(state.gamma.numel()));
  if (n < 1) throw std::invalid_argument("batch_norm: empty batch");
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < x.ndim(); ++i) spatial *= x.shape[i];
  const std::size_t per_c = n * spatial;

  std::vector<T> mean(c), var(c);
  if (mode == BatchNormMode::train) {
    const T* in = x.data->data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* base = in + (b * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) mu += base[s];
      }
      mu /= static_cast<double>(per_c);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* base = in + (b * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = base[s] - mu;
          v += d * d;
        }
      }
      v /= static_cast<double>(per_c);
      mean[ch] = static_cast<T>(mu);
      var[ch] = static_cast<T>(v);
    }
    if (state.running_mean.empty()) {
      state.running_mean.assign(c, T(0));
      state.running_var.assign(c, T(1));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      state.running_mean[ch] = static_cast<T>((1.0 - momentum) * state.running_mean[ch] +
                                              momentum * mean[ch]);
      state.running_var[ch] = static_cast<T>((1.0 - momentum) * state.running_var[ch] +
                                             momentum * var[ch]);
    }
    state.has_stats = true;
  } else {
    if (!state.has_stats)
      throw std::runtime_error("batch_norm: infer mode requested but no running statistics");
    mean = state.running_mean;
    var = state.running_var;
  }

  TensorT<T> out = TensorT<T>::zeros(x.shape);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[ch]) + eps));
  {
    const T* in = x.data->data();
    T* o = out.data->data();
    const T* gm = state.gamma.data->data();
    const T* bt = state.beta.data->data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (b * c + ch) * spatial;
        for (std::size_t s = 0; s < spatial; ++s)
          o[base + s] = gm[ch] * ((in[base + s] - mean[ch]) * inv_std[ch]) + bt[ch];
      }
  }

  const bool need = detail::want_grad(x) || detail::want_grad(state.gamma) ||
                    detail::want_grad(state.beta);
  if (need) {
    const bool train = mode == BatchNormMode::train;
    detail::attach<T>(out, {x, state.gamma, state.beta},
                      [n, c, spatial, per_c, mean, inv_std, train](const TensorT<T>& o2) {
      const auto& px = o2.node->parents[0];
      const auto& pg = o2.node->parents[1];
      const auto& pb = o2.node->parents[2];
      const auto& g = *o2.grad;
      const T* in2 = px.data->data();
      const T* gm2 = pg.data->data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0), sum_g = T(0), sum_g_xhat = T(0);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) {
            const T xhat = (in2[base + s] - mean[ch]) * inv_std[ch];
            const T dxhat = g[base + s] * gm2[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            sum_g += g[base + s];
            sum_g_xhat += g[base + s] * xhat;
          }
        }
        if (pg.requires_grad) (*pg.grad)[ch] += sum_g_xhat;
        if (pb.requires_grad) (*pb.grad)[ch] += sum_g;
        if (px.requires_grad) {
          auto& dx = *px.grad;
          const T inv_m = T(1) / static_cast<T>(per_c);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const T xhat = (in2[base + s] - mean[ch]) * inv_std[ch];
              const T dxhat = g[base + s] * gm2[ch];
              if (train) {
                dx[base + s] +=
                    inv_std[ch] * (dxhat - inv_m * sum_dxhat - inv_m * xhat * sum_dxhat_xhat);
              } else {
                dx[base + s] += inv_std[ch] * dxhat;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// SAME padding: out = ceil(in / stride), extra padding on the trailing edge.
struct SamePad {
  std::size_t out = 0;
  long begin = 0;
};

inline SamePad same_pad(std::size_t in, std::size_t stride, std::size_t k) {
  SamePad p;
  p.out = ceil_div(in, stride);
  const long total =
      std::max<long>(0, static_cast<long>((p.out - 1) * stride + k) - static_cast<long>(in));
  p.begin = total / 2;
  return p;
}

}  // namespace detail

// 3x3 convolution with SAME padding. x is [N x C_in x F x T], kernel is
// [C_out x C_in x 3 x 3]; stride pair is (frequency, time).
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& kernel, std::size_t stride_f,
                  std::size_t stride_t) {
  if (x.ndim() != 4) throw std::invalid_argument("conv2d: input must be [N x C x F x T], got " +
                                                 shape_str(x.shape));
  if (kernel.ndim() != 4 || kernel.shape[2] != 3 || kernel.shape[3] != 3)
    throw std::invalid_argument("conv2d: kernel must be [C_out x C_in x 3 x 3], got " +
                                shape_str(kernel.shape));
  if (stride_f == 0 || stride_t == 0) throw std::invalid_argument("conv2d: zero stride");
  if (x.shape[1] != kernel.shape[1])
    throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(x.shape) +
                                " vs kernel " + shape_str(kernel.shape));
  const std::size_t n = x.shape[0], cin = x.shape[1], fin = x.shape[2], tin = x.shape[3];
  const std::size_t cout = kernel.shape[0];
  const auto pf = detail::same_pad(fin, stride_f, 3);
  const auto pt = detail::same_pad(tin, stride_t, 3);
  const std::size_t fout = pf.out, tout = pt.out;

  TensorT<T> out = TensorT<T>::zeros({n, cout, fout, tout});
  // Tiled im2col + GEMM: patch rows for a block of output positions, then
  // one multiply against the flattened kernel.
  const std::size_t patch = cin * 9;
  // cap the im2col scratch at ~4 MB
  const std::size_t block =
      std::clamp<std::size_t>((4u << 20) / (patch * sizeof(T)), 16, 8192);
  std::vector<T> cols(block * patch);
  std::vector<T> prod(block * cout);
  const T* in = x.data->data();
  const T* kw = kernel.data->data();
  T* o = out.data->data();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t positions = fout * tout;
    for (std::size_t p0 = 0; p0 < positions; p0 += block) {
      const std::size_t pn = std::min(block, positions - p0);
      std::fill(cols.begin(), cols.begin() + pn * patch, T(0));
      for (std::size_t p = 0; p < pn; ++p) {
        const std::size_t of = (p0 + p) / tout, ot = (p0 + p) % tout;
        T* crow = cols.data() + p * patch;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t kf = 0; kf < 3; ++kf) {
            const long f = static_cast<long>(of * stride_f + kf) - pf.begin;
            if (f < 0 || f >= static_cast<long>(fin)) continue;
            const T* src = in + ((b * cin + ci) * fin + static_cast<std::size_t>(f)) * tin;
            for (std::size_t kt = 0; kt < 3; ++kt) {
              const long t = static_cast<long>(ot * stride_t + kt) - pt.begin;
              if (t < 0 || t >= static_cast<long>(tin)) continue;
              crow[(ci * 3 + kf) * 3 + kt] = src[static_cast<std::size_t>(t)];
            }
          }
        }
      }
      // prod[pn x cout] = cols[pn x patch] * kernel^T (kernel is [cout x patch])
      std::fill(prod.begin(), prod.begin() + pn * cout, T(0));
      detail::gemm_nt_acc(cols.data(), kw, prod.data(), pn, patch, cout);
      for (std::size_t p = 0; p < pn; ++p) {
        const std::size_t of = (p0 + p) / tout, ot = (p0 + p) % tout;
        for (std::size_t co = 0; co < cout; ++co)
          o[((b * cout + co) * fout + of) * tout + ot] = prod[p * cout + co];
      }
    }
  }

  if (detail::want_grad(x) || detail::want_grad(kernel)) {
    detail::attach<T>(out, {x, kernel},
                      [n, cin, fin, tin, cout, fout, tout, stride_f, stride_t, pf,
                       pt](const TensorT<T>& o2) {
      const auto& px = o2.node->parents[0];
      const auto& pk = o2.node->parents[1];
      const auto& g = *o2.grad;
      const T* in2 = px.data->data();
      const T* kw2 = pk.data->data();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t of = 0; of < fout; ++of) {
          for (std::size_t ot = 0; ot < tout; ++ot) {
            for (std::size_t kf = 0; kf < 3; ++kf) {
              const long f = static_cast<long>(of * stride_f + kf) - pf.begin;
              if (f < 0 || f >= static_cast<long>(fin)) continue;
              for (std::size_t kt = 0; kt < 3; ++kt) {
                const long t = static_cast<long>(ot * stride_t + kt) - pt.begin;
                if (t < 0 || t >= static_cast<long>(tin)) continue;
                for (std::size_t co = 0; co < cout; ++co) {
                  const T go = g[((b * cout + co) * fout + of) * tout + ot];
                  if (go == T(0)) continue;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const std::size_t xi =
                        ((b * cin + ci) * fin + static_cast<std::size_t>(f)) * tin +
                        static_cast<std::size_t>(t);
                    const std::size_t wi = ((co * cin + ci) * 3 + kf) * 3 + kt;
                    if (px.requires_grad) (*px.grad)[xi] += go * kw2[wi];
                    if (pk.requires_grad) (*pk.grad)[wi] += go * in2[xi];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Mean negative log-softmax of the target class over non-ignored rows.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& targets,
                         std::int32_t ignore_id) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be [N x V]");
  const std::size_t n = logits.shape[0], v = logits.shape[1];
  if (targets.size() != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(n) + " rows");
  std::size_t active = 0;
  for (std::int32_t t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," +
                              std::to_string(v) + ")");
    ++active;
  }
  if (active == 0) throw std::invalid_argument("cross_entropy: every position is ignored");

  const T* in = logits.data->data();
  double total = 0.0;
  std::vector<T> log_z(n, T(0));  // cached per-row logsumexp
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_id) continue;
    const T* row = in + r * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lz = static_cast<double>(mx) + std::log(s);
    log_z[r] = static_cast<T>(lz);
    total += lz - static_cast<double>(row[static_cast<std::size_t>(targets[r])]);
  }
  TensorT<T> out = TensorT<T>::from({1}, {static_cast<T>(total / static_cast<double>(active))});
  if (detail::want_grad(logits)) {
    detail::attach<T>(out, {logits}, [n, v, targets, ignore_id, active, log_z](const TensorT<T>& o2) {
      const auto& pl = o2.node->parents[0];
      if (!pl.requires_grad) return;
      const T g = (*o2.grad)[0] / static_cast<T>(active);
      const T* in2 = pl.data->data();
      auto& dst = *pl.grad;
      for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] == ignore_id) continue;
        for (std::size_t j = 0; j < v; ++j) {
          const T p = std::exp(in2[r * v + j] - log_z[r]);
          dst[r * v + j] += g * (p - (static_cast<std::size_t>(targets[r]) == j ? T(1) : T(0)));
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
  double total = 0.0;
  for (const T& v : *x.data) total += static_cast<double>(v);
  TensorT<T> out = TensorT<T>::from({1}, {static_cast<T>(total)});
  if (detail::want_grad(x)) {
    detail::attach<T>(out, {x}, [](const TensorT<T>& o) {
      const auto& px = o.node->parents[0];
      if (!px.requires_grad) return;
      const T g = (*o.grad)[0];
      for (T& v : *px.grad) v += g;
    });
  }
  return out;
}

// Mean over masked-true rows of a [L x d] matrix; mask values are 0/1.
template <class T>
std::vector<T> masked_mean_rows(const TensorT<T>& x, const std::vector<std::uint8_t>& mask) {
  if (x.ndim() != 2 || mask.size() != x.shape[0])
    throw std::invalid_argument("masked_mean_rows: mask/shape mismatch");
  const std::size_t d = x.shape[1];
  std::vector<T> acc(d, T(0));
  std::size_t count = 0;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) continue;
    ++count;
    for (std::size_t j = 0; j < d; ++j) acc[j] += (*x.data)[r * d + j];
  }
  if (count == 0) throw std::invalid_argument("masked_mean_rows: empty mask");
  for (T& v : acc) v /= static_cast<T>(count);
  return acc;
}

}  // namespace melfuse
