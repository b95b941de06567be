// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Runs a WeatherMixer on an in-process n-way group from global tensors and
// returns gathered outputs and gradients.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "jigsaw/model.hpp"
#include "test_util.hpp"

namespace jigsaw::testing {

struct ModelRun {
  Tensor<double> out;
  std::vector<std::string> names;
  std::vector<Tensor<double>> values, grads;
  std::vector<std::vector<Tensor<double>>> local_grads;  // [param][rank]
  std::vector<MatmulStats> stats;
};

using ModelSetup = std::function<void(WeatherMixer<double>&, const MpContext&)>;

/// forward (and backward when `upstream` is non-empty) on an n-way group.
inline ModelRun run_model(int n, const ModelConfig& cfg, const Tensor<double>& x, int r,
                          const Tensor<double>& upstream = {}, std::uint64_t seed = 7, const ModelSetup& setup = {}) {
  std::vector<Tensor<double>> outs(n);
  std::vector<std::vector<Tensor<double>>> vals(n), grads(n);
  std::vector<std::string> names;
  std::vector<Param<double>> meta;
  std::vector<MatmulStats> stats(n);
  std::mutex mu;
  run_inproc(n, [&](Communicator& c) {
    const MpContext ctx = MpContext::from(ProcessGroup(n, n, c.rank()));
    WeatherMixer<double> model(cfg, ctx, seed);
    if (setup) setup(model, ctx);
    typename WeatherMixer<double>::Cache cache;
    const auto xl = shard_trailing(x, model.sample_shard());
    outs[c.rank()] = model.forward(c, xl, r, &cache, &stats[c.rank()]);
    if (upstream.size()) model.backward(c, cache, shard_trailing(upstream, model.sample_shard()), &stats[c.rank()]);
    for (auto* p : model.params()) {
      vals[c.rank()].push_back(p->value);
      grads[c.rank()].push_back(p->grad);
    }
    if (c.rank() == 0) {
      std::lock_guard lock(mu);
      for (auto* p : model.params()) {
        names.push_back(p->name);
        meta.push_back(*p);
      }
    }
  });
  ModelRun run;
  run.out = gather_trailing(outs, cfg.lon, cfg.n_vars);
  run.names = names;
  run.stats = stats;
  for (std::size_t k = 0; k < meta.size(); ++k) {
    std::vector<Tensor<double>> v(n), g(n);
    for (int rk = 0; rk < n; ++rk) {
      v[rk] = vals[rk][k];
      g[rk] = grads[rk][k];
    }
    run.values.push_back(gather_param(v, meta[k]));
    run.grads.push_back(gather_param(g, meta[k]));
    run.local_grads.push_back(g);
  }
  return run;
}

inline double weighted_sum(const Tensor<double>& a, const Tensor<double>& w) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (long double)a[i] * w[i];
  return double(s);
}

/// max |a-b| / max |b| over a group of entries.
inline double group_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale == 0 ? diff : diff / scale;
}

struct FdResult {
  std::string name;
  double rel;
  std::size_t checked;
};

/// Central differences of L = sum(U * forecast) through the n-way model for
/// up to `per_param` entries of every parameter, against analytic gradients.
inline std::vector<FdResult> finite_difference_check(int n, const ModelConfig& cfg, const Tensor<double>& x, int r,
                                                     const Tensor<double>& U, double h, std::size_t per_param,
                                                     std::uint64_t seed = 7) {
  const ModelRun base = run_model(n, cfg, x, r, U, seed);
  std::vector<FdResult> out;
  for (std::size_t k = 0; k < base.names.size(); ++k) {
    const std::size_t total = base.grads[k].size();
    std::vector<double> analytic, numeric;
    const std::size_t stride = std::max<std::size_t>(1, total / per_param);
    for (std::size_t idx = 0; idx < total && analytic.size() < per_param; idx += stride) {
      auto loss_at = [&](double delta) {
        const ModelRun pr = run_model(n, cfg, x, r, {}, seed, [&](WeatherMixer<double>& m, const MpContext& ctx) {
          perturb_global(*m.params()[k], ctx, idx, delta);
        });
        return weighted_sum(pr.out, U);
      };
      numeric.push_back((loss_at(h) - loss_at(-h)) / (2 * h));
      analytic.push_back(base.grads[k][idx]);
    }
    out.push_back({base.names[k], group_rel(analytic, numeric), analytic.size()});
  }
  return out;
}

}  // namespace jigsaw::testing
