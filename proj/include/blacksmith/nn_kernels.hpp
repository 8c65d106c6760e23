#pragma once

#include <cmath>
#include <cstddef>

namespace blacksmith::nn {

// Plain loops, no hidden parallelism: results must be bit-reproducible for
// a fixed binary regardless of how callers schedule work.

// y[i,n] = sum_d x[i,d] * W[n,d] + b[n], for i in [0, rows)
template <typename T>
void linear_forward(const T* x, const T* W, const T* b, T* y,
                    std::size_t rows, std::size_t din, std::size_t dout) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x + i * din;
    T* yi = y + i * dout;
    for (std::size_t n = 0; n < dout; ++n) {
      const T* wn = W + n * din;
      T acc = b ? b[n] : T(0);
      for (std::size_t d = 0; d < din; ++d) acc += xi[d] * wn[d];
      yi[n] = acc;
    }
  }
}

// Accumulating backward. Null dx / dW / db skip that part of the work
// (frozen parameters bypass their gradient computation entirely).
template <typename T>
void linear_backward(const T* x, const T* W, const T* dy, T* dx, T* dW, T* db,
                     std::size_t rows, std::size_t din, std::size_t dout) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x + i * din;
    const T* dyi = dy + i * dout;
    if (dx) {
      T* dxi = dx + i * din;
      for (std::size_t n = 0; n < dout; ++n) {
        const T g = dyi[n];
        const T* wn = W + n * din;
        for (std::size_t d = 0; d < din; ++d) dxi[d] += g * wn[d];
      }
    }
    if (dW) {
      for (std::size_t n = 0; n < dout; ++n) {
        const T g = dyi[n];
        T* dWn = dW + n * din;
        for (std::size_t d = 0; d < din; ++d) dWn[d] += g * xi[d];
      }
    }
    if (db) {
      for (std::size_t n = 0; n < dout; ++n) db[n] += dyi[n];
    }
  }
}

// Per-row layer norm over the last dimension.
template <typename T>
void layernorm_forward(const T* x, const T* w, const T* b, T* y, T* mean,
                       T* rstd, std::size_t rows, std::size_t dim, T eps) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x + i * dim;
    T* yi = y + i * dim;
    T mu = T(0);
    for (std::size_t d = 0; d < dim; ++d) mu += xi[d];
    mu /= T(dim);
    T var = T(0);
    for (std::size_t d = 0; d < dim; ++d) {
      const T c = xi[d] - mu;
      var += c * c;
    }
    var /= T(dim);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    for (std::size_t d = 0; d < dim; ++d)
      yi[d] = (xi[d] - mu) * rs * w[d] + b[d];
  }
}

template <typename T>
void layernorm_backward(const T* x, const T* w, const T* mean, const T* rstd,
                        const T* dy, T* dx, T* dw, T* db, std::size_t rows,
                        std::size_t dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* xi = x + i * dim;
    const T* dyi = dy + i * dim;
    const T mu = mean[i];
    const T rs = rstd[i];
    T m1 = T(0), m2 = T(0);
    for (std::size_t d = 0; d < dim; ++d) {
      const T xhat = (xi[d] - mu) * rs;
      const T dxhat = dyi[d] * w[d];
      m1 += dxhat;
      m2 += dxhat * xhat;
    }
    m1 /= T(dim);
    m2 /= T(dim);
    if (dx) {
      T* dxi = dx + i * dim;
      for (std::size_t d = 0; d < dim; ++d) {
        const T xhat = (xi[d] - mu) * rs;
        const T dxhat = dyi[d] * w[d];
        dxi[d] += rs * (dxhat - m1 - xhat * m2);
      }
    }
    if (dw) {
      for (std::size_t d = 0; d < dim; ++d)
        dw[d] += dyi[d] * (xi[d] - mu) * rs;
    }
    if (db) {
      for (std::size_t d = 0; d < dim; ++d) db[d] += dyi[d];
    }
  }
}

// Exact (erf-based) GELU.
template <typename T>
void gelu_forward(const T* x, T* y, std::size_t n) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < n; ++i)
    y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::size_t n) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  for (std::size_t i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
    dx[i] += dy[i] * (cdf + x[i] * pdf);
  }
}

// Row softmax with max subtraction.
template <typename T>
void softmax_rows(const T* z, T* p, std::size_t rows, std::size_t dim) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* zi = z + i * dim;
    T* pi = p + i * dim;
    T m = zi[0];
    for (std::size_t d = 1; d < dim; ++d) m = zi[d] > m ? zi[d] : m;
    T sum = T(0);
    for (std::size_t d = 0; d < dim; ++d) {
      pi[d] = std::exp(zi[d] - m);
      sum += pi[d];
    }
    const T inv = T(1) / sum;
    for (std::size_t d = 0; d < dim; ++d) pi[d] *= inv;
  }
}

// Bidirectional multi-head self-attention over one batch element.
// qkv layout: [tokens, 3*dim] with q | k | v sections, heads contiguous
// inside each section. att holds softmax probabilities [heads, T, T].
template <typename T>
void attention_forward(const T* qkv, T* att, T* y, std::size_t tokens,
                       std::size_t dim, std::size_t heads) {
  const std::size_t hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * hd;
    const std::size_t ko = dim + h * hd;
    const std::size_t vo = 2 * dim + h * hd;
    T* att_h = att + h * tokens * tokens;
    for (std::size_t t = 0; t < tokens; ++t) {
      const T* q = qkv + t * 3 * dim + qo;
      T* row = att_h + t * tokens;
      T m = T(0);
      for (std::size_t u = 0; u < tokens; ++u) {
        const T* k = qkv + u * 3 * dim + ko;
        T acc = T(0);
        for (std::size_t d = 0; d < hd; ++d) acc += q[d] * k[d];
        acc *= scale;
        row[u] = acc;
        if (u == 0 || acc > m) m = acc;
      }
      T sum = T(0);
      for (std::size_t u = 0; u < tokens; ++u) {
        row[u] = std::exp(row[u] - m);
        sum += row[u];
      }
      const T inv = T(1) / sum;
      for (std::size_t u = 0; u < tokens; ++u) row[u] *= inv;
      T* yt = y + t * dim + h * hd;
      for (std::size_t d = 0; d < hd; ++d) yt[d] = T(0);
      for (std::size_t u = 0; u < tokens; ++u) {
        const T a = row[u];
        const T* v = qkv + u * 3 * dim + vo;
        for (std::size_t d = 0; d < hd; ++d) yt[d] += a * v[d];
      }
    }
  }
}

// dqkv is accumulated; att holds the forward softmax probabilities.
// scratch must have room for tokens elements (one attention row).
template <typename T>
void attention_backward(const T* qkv, const T* att, const T* dy, T* dqkv,
                        T* scratch, std::size_t tokens, std::size_t dim,
                        std::size_t heads) {
  const std::size_t hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * hd;
    const std::size_t ko = dim + h * hd;
    const std::size_t vo = 2 * dim + h * hd;
    const T* att_h = att + h * tokens * tokens;
    for (std::size_t t = 0; t < tokens; ++t) {
      const T* dyt = dy + t * dim + h * hd;
      const T* row = att_h + t * tokens;
      // datt (into scratch), dv
      for (std::size_t u = 0; u < tokens; ++u) {
        const T* v = qkv + u * 3 * dim + vo;
        T acc = T(0);
        for (std::size_t d = 0; d < hd; ++d) acc += dyt[d] * v[d];
        scratch[u] = acc;
        T* dv = dqkv + u * 3 * dim + vo;
        const T a = row[u];
        for (std::size_t d = 0; d < hd; ++d) dv[d] += a * dyt[d];
      }
      // softmax backward: dz = att * (datt - sum(datt * att))
      T dot = T(0);
      for (std::size_t u = 0; u < tokens; ++u) dot += scratch[u] * row[u];
      const T* q = qkv + t * 3 * dim + qo;
      T* dq = dqkv + t * 3 * dim + qo;
      for (std::size_t u = 0; u < tokens; ++u) {
        const T dz = row[u] * (scratch[u] - dot) * scale;
        const T* k = qkv + u * 3 * dim + ko;
        T* dk = dqkv + u * 3 * dim + ko;
        for (std::size_t d = 0; d < hd; ++d) {
          dq[d] += dz * k[d];
          dk[d] += dz * q[d];
        }
      }
    }
  }
}

}  // namespace blacksmith::nn
