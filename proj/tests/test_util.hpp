// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <mutex>
#include <random>
#include <vector>

#include "jigsaw/inproc.hpp"
#include "jigsaw/jigsaw.hpp"
#include "jigsaw/tensor.hpp"

namespace jigsaw::testing {

template <Scalar T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(u(rng));
  return t;
}

/// max |a - b| / max(1, max |b|): relative to the reference's scale.
template <Scalar T>
double rel_error(const Tensor<T>& got, const Tensor<T>& want) {
  if (got.shape() != want.shape()) return INFINITY;
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff = std::max(diff, std::abs(double(got[i]) - double(want[i])));
    scale = std::max(scale, std::abs(double(want[i])));
  }
  return diff / std::max(1.0, scale);
}

/// Naive triple loop in long double, independent of the kernels under test.
template <Scalar T>
Tensor<T> oracle_matmul(const Tensor<T>& a, const Tensor<T>& b, char mode) {
  auto A = [&](std::size_t i, std::size_t l) { return mode == 'T' ? a(l, i) : a(i, l); };  // TN
  const bool bt = mode == 't';                                                              // NT
  const std::size_t m = mode == 'T' ? a.cols() : a.rows();
  const std::size_t k = mode == 'T' ? a.rows() : a.cols();
  const std::size_t n = bt ? b.rows() : b.cols();
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t l = 0; l < k; ++l) acc += (long double)A(i, l) * (long double)(bt ? b(j, l) : b(l, j));
      c(i, j) = T(acc);
    }
  return c;
}

/// Runs `body(comm)` on `world` in-process ranks and returns one result per rank.
template <typename R>
std::vector<R> run_ranks(int world, const std::function<R(Communicator&)>& body) {
  std::vector<R> out(world);
  run_inproc(world, [&](Communicator& c) { out[c.rank()] = body(c); });
  return out;
}

/// Overwrites a parameter with this rank's part of a global tensor.
template <Scalar T>
void set_global(Param<T>& p, const MpContext& ctx, const Tensor<T>& global) {
  p.value.fill(T(0));
  for (std::size_t k = 0; k < global.size(); ++k) perturb_global(p, ctx, k, global[k]);
}

}  // namespace jigsaw::testing
