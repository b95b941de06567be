// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Numeric kernels with hand-written backward formulas.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <type_traits>

#include <cblas.h>

#include "jigsaw/tensor.hpp"

namespace jigsaw {

/// Operand arrangement of a matrix product: NN = A·B, NT = A·Bᵀ, TN = Aᵀ·B.
enum class MatmulMode : std::uint8_t { NN, NT, TN };

inline const char* mode_name(MatmulMode m) {
  switch (m) {
    case MatmulMode::NN: return "NN";
    case MatmulMode::NT: return "NT";
    case MatmulMode::TN: return "TN";
  }
  return "?";
}

struct ProductDims {
  std::size_t rows, inner, cols;
};

/// Output/inner extents of op(a)·op(b); throws ShapeError if they do not line up.
inline ProductDims product_dims(const Shape& a, const Shape& b, MatmulMode mode) {
  auto fail = [&] {
    throw ShapeError(std::string("matmul ") + mode_name(mode) + " shape mismatch: " + shape_str(a) + " and " +
                     shape_str(b));
  };
  if (a.size() != 2 || b.size() != 2) fail();
  switch (mode) {
    case MatmulMode::NN:
      if (a[1] != b[0]) fail();
      return {a[0], a[1], b[1]};
    case MatmulMode::NT:
      if (a[1] != b[1]) fail();
      return {a[0], a[1], b[0]};
    case MatmulMode::TN:
      if (a[0] != b[0]) fail();
      return {a[1], a[0], b[1]};
  }
  fail();
  return {};
}

template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MatmulMode mode) {
  const auto [m, k, n] = product_dims(a.shape(), b.shape(), mode);
  Tensor<T> c({m, n});
  if (m == 0 || n == 0 || k == 0) return c;
  const auto ta = mode == MatmulMode::TN ? CblasTrans : CblasNoTrans;
  const auto tb = mode == MatmulMode::NT ? CblasTrans : CblasNoTrans;
  const auto M = blasint(m), N = blasint(n), K = blasint(k);
  const blasint lda = mode == MatmulMode::TN ? M : K;
  const blasint ldb = mode == MatmulMode::NT ? K : N;
  if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, ta, tb, M, N, K, 1.0, a.data(), lda, b.data(), ldb, 0.0, c.data(), N);
  } else {
    cblas_sgemm(CblasRowMajor, ta, tb, M, N, K, 1.0f, a.data(), lda, b.data(), ldb, 0.0f, c.data(), N);
  }
  return c;
}

inline std::uint64_t matmul_flops(const ProductDims& d) { return 2ull * d.rows * d.inner * d.cols; }

// ---------------------------------------------------------------- GELU

template <Scalar T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <Scalar T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + x * pdf;
}

template <Scalar T>
Tensor<T> gelu(Tensor<T> x) {
  for (auto& v : x.values()) v = gelu_scalar(v);
  return x;
}

template <Scalar T>
Tensor<T> gelu_backward(const Tensor<T>& x, Tensor<T> upstream) {
  x.require_same_shape(upstream, "gelu_backward");
  for (std::size_t i = 0; i < x.size(); ++i) upstream[i] *= gelu_grad_scalar(x[i]);
  return upstream;
}

// ---------------------------------------------------------- layer norm

inline constexpr double kLayerNormEps = 1e-5;

template <Scalar T>
struct LayerNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

namespace detail {
template <Scalar T>
void check_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (!(eps > 0)) throw ShapeError("layer_norm: eps must be positive, got " + std::to_string(eps));
  if (x.ndim() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta length must equal last-axis size " + std::to_string(d));
  }
}
}  // namespace detail

/// Normalizes each row over the last axis, then applies gamma/beta.
template <Scalar T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps) {
  detail::check_layer_norm(x, gamma, beta, eps);
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(eps));
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return y;
}

template <Scalar T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& upstream,
                                      double eps = kLayerNormEps) {
  detail::check_layer_norm(x, gamma, gamma, eps);
  x.require_same_shape(upstream, "layer_norm_backward");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({d}), Tensor<T>({d})};
  std::vector<T> xhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    const T* gr = upstream.data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(eps));
    T sum_dxhat{0}, sum_dxhat_xhat{0};
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      const T dxhat = gr[j] * gamma[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat[j];
      g.dgamma[j] += gr[j] * xhat[j];
      g.dbeta[j] += gr[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      const T dxhat = gr[j] * gamma[j];
      g.dx[r * d + j] = rstd * (dxhat - sum_dxhat / T(d) - xhat[j] * sum_dxhat_xhat / T(d));
    }
  }
  return g;
}

// ------------------------------------------------------------ patches

struct PatchShape {
  std::size_t batch, lat, lon, channels, p_lat, p_lon;
  std::size_t tokens() const { return (lat / p_lat) * (lon / p_lon); }
  std::size_t features() const { return p_lat * p_lon * channels; }
};

inline PatchShape check_patch_shape(const Shape& s, std::size_t p_lat, std::size_t p_lon) {
  if (s.size() != 4) throw ShapeError("patchify expects [B,lat,lon,C], got " + shape_str(s));
  if (p_lat == 0 || p_lon == 0 || s[1] % p_lat != 0 || s[2] % p_lon != 0) {
    throw ShapeError("grid " + std::to_string(s[1]) + "x" + std::to_string(s[2]) + " not divisible by patch " +
                     std::to_string(p_lat) + "x" + std::to_string(p_lon));
  }
  return {s[0], s[1], s[2], s[3], p_lat, p_lon};
}

/// [B,lat,lon,C] -> [B,tokens,p_lat*p_lon*C]. Tokens are row-major over the
/// patch grid; features within a token are channel-major (c, py, px), the
/// layout of a flattened convolution kernel.
template <Scalar T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p_lat, std::size_t p_lon) {
  const PatchShape ps = check_patch_shape(x.shape(), p_lat, p_lon);
  const std::size_t nlon = ps.lon / p_lon, P = p_lat * p_lon;
  Tensor<T> out({ps.batch, ps.tokens(), ps.features()});
  for (std::size_t b = 0; b < ps.batch; ++b)
    for (std::size_t t = 0; t < ps.tokens(); ++t) {
      const std::size_t ty = t / nlon, tx = t % nlon;
      T* dst = out.data() + (b * ps.tokens() + t) * ps.features();
      for (std::size_t py = 0; py < p_lat; ++py)
        for (std::size_t px = 0; px < p_lon; ++px) {
          const T* src = x.data() + ((b * ps.lat + ty * p_lat + py) * ps.lon + tx * p_lon + px) * ps.channels;
          for (std::size_t c = 0; c < ps.channels; ++c) dst[c * P + py * p_lon + px] = src[c];
        }
    }
  return out;
}

template <Scalar T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t lat, std::size_t lon, std::size_t channels,
                     std::size_t p_lat, std::size_t p_lon) {
  const PatchShape ps = check_patch_shape({tokens.shape().empty() ? 0 : tokens.dim(0), lat, lon, channels}, p_lat,
                                          p_lon);
  if (tokens.ndim() != 3 || tokens.dim(1) != ps.tokens() || tokens.dim(2) != ps.features()) {
    throw ShapeError("unpatchify: token tensor " + shape_str(tokens.shape()) + " inconsistent with grid");
  }
  const std::size_t nlon = lon / p_lon, P = p_lat * p_lon;
  Tensor<T> x({ps.batch, lat, lon, channels});
  for (std::size_t b = 0; b < ps.batch; ++b)
    for (std::size_t t = 0; t < ps.tokens(); ++t) {
      const std::size_t ty = t / nlon, tx = t % nlon;
      const T* src = tokens.data() + (b * ps.tokens() + t) * ps.features();
      for (std::size_t py = 0; py < p_lat; ++py)
        for (std::size_t px = 0; px < p_lon; ++px) {
          T* dst = x.data() + ((b * lat + ty * p_lat + py) * lon + tx * p_lon + px) * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] = src[c * P + py * p_lon + px];
        }
    }
  return x;
}

// -------------------------------------------------------------- dropout

/// Inverted dropout. Returns the scaled keep-mask so the same mask can be
/// applied in the backward pass; rate 0 yields an all-ones mask.
template <Scalar T>
Tensor<T> dropout_mask(const Shape& shape, double rate, std::mt19937_64& rng) {
  if (rate < 0 || rate >= 1) throw ShapeError("dropout rate must be in [0,1)");
  Tensor<T> mask(shape, T(1));
  if (rate == 0) return mask;
  const T keep_scale = T(1) / T(1 - rate);
  for (auto& m : mask.values()) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? T(0) : keep_scale;
  }
  return mask;
}

template <Scalar T>
Tensor<T> hadamard(Tensor<T> a, const Tensor<T>& b) {
  a.require_same_shape(b, "hadamard");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  return a;
}

}  // namespace jigsaw
