// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-checks for a configuration: serial vs sharded forward, backward and
// training steps, finite-difference gradients, and loader reconstruction.

#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "jigsaw/experiment.hpp"
#include "jigsaw/inproc.hpp"

namespace jigsaw {

struct CheckResult {
  std::string name;
  bool passed = false;
  double error = 0;
  double tolerance = 0;
  std::string detail;
  double seconds = 0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline void to_json(nlohmann::json& j, const CheckResult& c) {
  j = {{"name", c.name},           {"passed", c.passed}, {"error", c.error},
       {"tolerance", c.tolerance}, {"detail", c.detail}, {"seconds", c.seconds}};
}

inline void to_json(nlohmann::json& j, const VerifyReport& r) {
  j = {{"passed", r.passed()}, {"checks", r.checks}};
}

struct VerifyOptions {
  std::size_t train_steps = 5;
  std::size_t fd_entries = 2;  // per parameter
  double fd_step = 1e-5;
  std::size_t batch = 2;
  double forward_tol = 1e-12;
  double grad_tol = 1e-10;
  double fd_tol = 1e-4;
  double train_tol = 1e-8;
};

namespace detail {

/// max |a - b| / max |b|; plain max |a - b| when b is all zeros.
inline double rel_error(const double* a, const double* b, std::size_t n) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < n; ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale == 0 ? diff : diff / scale;
}

inline double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return rel_error(a.data(), b.data(), a.size());
}

struct Probe {
  Tensor<double> out;
  std::vector<std::string> names;
  std::vector<Tensor<double>> grads;
};

using ProbeSetup = std::function<void(WeatherMixer<double>&, const MpContext&)>;

/// Forward (and backward when `upstream` is non-empty) of an n-way model,
/// gathered to global tensors.
inline Probe probe(int n, const ModelConfig& cfg, std::uint64_t seed, const Tensor<double>& x, int r,
                   const Tensor<double>& upstream, const ProbeSetup& setup = {}) {
  std::vector<Tensor<double>> outs(n);
  std::vector<std::vector<Tensor<double>>> grads(n);
  std::vector<Param<double>> meta;
  std::mutex mu;
  run_inproc(n, [&](Communicator& c) {
    const MpContext ctx = MpContext::from(ProcessGroup(n, n, c.rank()));
    WeatherMixer<double> model(cfg, ctx, seed);
    if (setup) setup(model, ctx);
    typename WeatherMixer<double>::Cache cache;
    outs[c.rank()] = model.forward(c, shard_trailing(x, model.sample_shard()), r, &cache);
    if (upstream.size()) model.backward(c, cache, shard_trailing(upstream, model.sample_shard()));
    for (auto* p : model.params()) grads[c.rank()].push_back(p->grad);
    if (c.rank() == 0) {
      std::lock_guard lock(mu);
      for (auto* p : model.params()) meta.push_back(*p);
    }
  });
  Probe pr;
  pr.out = gather_trailing(outs, cfg.lon, cfg.n_vars);
  for (std::size_t k = 0; k < meta.size(); ++k) {
    std::vector<Tensor<double>> parts(n);
    for (int rk = 0; rk < n; ++rk) parts[rk] = grads[rk][k];
    pr.names.push_back(meta[k].name);
    pr.grads.push_back(gather_param(parts, meta[k]));
  }
  return pr;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return double(s);
}

struct TrainRun {
  std::vector<double> losses;
  std::vector<Tensor<double>> params;
};

/// Trains `steps` pretraining steps on an in-process world; parameters are
/// gathered from the first replica.
inline TrainRun train_run(const ExperimentConfig& cfg, std::size_t steps) {
  const int world = cfg.world.size(), n = cfg.world.n_way;
  TrainRun run;
  std::vector<std::vector<Tensor<double>>> local(world);
  std::vector<Param<double>> meta;
  std::mutex mu;
  run_inproc(world, [&](Communicator& comm) {
    RankSession<double> s(cfg, comm);
    std::vector<double> losses;
    for (std::size_t k = 0; k < steps; ++k) losses.push_back(s.trainer().next(false).loss);
    for (auto* p : s.model().params()) local[comm.rank()].push_back(p->value);
    if (comm.rank() == 0) {
      std::lock_guard lock(mu);
      run.losses = losses;
      for (auto* p : s.model().params()) meta.push_back(*p);
    }
  });
  for (std::size_t k = 0; k < meta.size(); ++k) {
    std::vector<Tensor<double>> parts(n);
    for (int r = 0; r < n; ++r) parts[r] = local[r][k];
    run.params.push_back(gather_param(parts, meta[k]));
  }
  return run;
}

inline double compare_runs(const TrainRun& a, const TrainRun& b, std::string& where) {
  double worst = 0;
  auto note = [&](double e, const std::string& w) {
    if (e > worst || std::isnan(e)) {
      worst = std::isnan(e) ? INFINITY : e;
      where = w;
    }
  };
  if (a.losses.size() != b.losses.size() || a.params.size() != b.params.size()) {
    where = "run length mismatch";
    return INFINITY;
  }
  for (std::size_t k = 0; k < a.losses.size(); ++k) {
    note(std::abs(a.losses[k] - b.losses[k]) / std::max(1.0, std::abs(b.losses[k])), "loss at step " + std::to_string(k));
  }
  for (std::size_t k = 0; k < a.params.size(); ++k) note(rel_error(a.params[k], b.params[k]), "parameter " + std::to_string(k));
  return worst;
}

template <typename Fn>
CheckResult timed(const std::string& name, double tol, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult c;
  c.name = name;
  c.tolerance = tol;
  try {
    fn(c);
    c.passed = c.error <= tol;
  } catch (const std::exception& e) {
    c.passed = false;
    c.error = INFINITY;
    c.detail = e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace detail

/// Runs every check for `cfg` at its n_way (and dp_replicas when > 1) in f64.
/// Dropout is disabled so that every configuration is deterministic.
inline VerifyReport verify_experiment(ExperimentConfig cfg, const VerifyOptions& opt = {},
                                      const std::function<void(const CheckResult&)>& on_check = {}) {
  cfg.validate();
  cfg.model.dropout_rate = 0;
  const int n = cfg.world.n_way;
  const ModelConfig& m = cfg.model;
  VerifyReport rep;
  auto add = [&](CheckResult c) {
    if (on_check) on_check(c);
    rep.checks.push_back(std::move(c));
  };

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  auto random = [&](Shape s) {
    Tensor<double> t(std::move(s), 0.0);
    for (auto& v : t.values()) v = U(rng);
    return t;
  };
  const auto x = random({opt.batch, m.lat, m.lon, m.n_vars});
  const auto up = random(x.shape());

  for (int r : {1, 2}) {
    add(detail::timed("forward_r" + std::to_string(r), opt.forward_tol, [&](CheckResult& c) {
      const auto serial = detail::probe(1, m, cfg.seed, x, r, {});
      const auto sharded = detail::probe(n, m, cfg.seed, x, r, {});
      c.error = detail::rel_error(sharded.out, serial.out);
      c.detail = "gathered " + std::to_string(n) + "-way forecast vs serial";
    }));
  }

  add(detail::timed("backward", opt.grad_tol, [&](CheckResult& c) {
    const auto serial = detail::probe(1, m, cfg.seed, x, 1, up);
    const auto sharded = detail::probe(n, m, cfg.seed, x, 1, up);
    for (std::size_t k = 0; k < serial.grads.size(); ++k) {
      const double e = detail::rel_error(sharded.grads[k], serial.grads[k]);
      if (e >= c.error) {
        c.error = e;
        c.detail = "worst group " + serial.names[k];
      }
    }
  }));

  add(detail::timed("finite_difference", opt.fd_tol, [&](CheckResult& c) {
    const auto base = detail::probe(n, m, cfg.seed, x, 1, up);
    std::size_t checked = 0;
    for (std::size_t k = 0; k < base.grads.size(); ++k) {
      const std::size_t total = base.grads[k].size();
      const std::size_t stride = std::max<std::size_t>(1, total / opt.fd_entries);
      std::vector<double> analytic, numeric;
      for (std::size_t idx = 0; idx < total && analytic.size() < opt.fd_entries; idx += stride) {
        auto loss_at = [&](double delta) {
          const auto p = detail::probe(n, m, cfg.seed, x, 1, {}, [&](WeatherMixer<double>& mm, const MpContext& ctx) {
            perturb_global(*mm.params()[k], ctx, idx, delta);
          });
          return detail::dot(p.out, up);
        };
        numeric.push_back((loss_at(opt.fd_step) - loss_at(-opt.fd_step)) / (2 * opt.fd_step));
        analytic.push_back(base.grads[k][idx]);
      }
      checked += analytic.size();
      const double e = detail::rel_error(analytic.data(), numeric.data(), analytic.size());
      if (e >= c.error) {
        c.error = e;
        c.detail = "worst group " + base.names[k];
      }
    }
    c.detail += ", " + std::to_string(checked) + " entries";
  }));

  add(detail::timed("training_mp", opt.train_tol, [&](CheckResult& c) {
    ExperimentConfig serial = cfg, sharded = cfg;
    serial.world = {1, 1, Backend::InProc, ""};
    sharded.world = {n, 1, Backend::InProc, ""};
    const auto a = detail::train_run(sharded, opt.train_steps);
    const auto b = detail::train_run(serial, opt.train_steps);
    c.error = detail::compare_runs(a, b, c.detail);
  }));

  if (cfg.world.dp_replicas > 1) {
    add(detail::timed("training_dp", opt.train_tol, [&](CheckResult& c) {
      const int R = cfg.world.dp_replicas;
      ExperimentConfig serial = cfg, dp = cfg;
      serial.world = {1, 1, Backend::InProc, ""};
      serial.train.batch = cfg.train.batch * std::size_t(R);
      dp.world.backend = Backend::InProc;
      const auto a = detail::train_run(dp, opt.train_steps);
      const auto b = detail::train_run(serial, opt.train_steps);
      c.error = detail::compare_runs(a, b, c.detail);
    }));
  }

  add(detail::timed("loader", 0.0, [&](CheckResult& c) {
    const SyntheticGenerator gen(cfg.data);
    const NormStats stats = zscore_fit(gen);
    const std::size_t lon = cfg.data.sample.lon, C = cfg.data.sample.channels();
    LoaderOptions lo{.batch = cfg.train.batch, .halo = cfg.halo, .seed = cfg.seed, .r_max = cfg.train.r_max,
                     .cache_dir = {}};
    ShardedLoader<double> serial(gen, stats, ShardSpec::make(1, 0, lon, C), lo);
    std::vector<ShardedLoader<double>> shards;
    for (int r = 0; r < n; ++r) shards.emplace_back(gen, stats, ShardSpec::make(n, r, lon, C), lo);
    std::size_t mismatches = 0;
    for (std::size_t s = 0; s < serial.steps_per_epoch(); ++s) {
      const auto want = serial.load(s, 1);
      std::vector<Tensor<double>> in(n), tgt(n);
      for (int r = 0; r < n; ++r) {
        const auto got = shards[r].load(s, 1);
        if (got.indices != want.indices) ++mismatches;
        in[r] = strip_halo(got.input, cfg.halo);
        tgt[r] = strip_halo(got.target, cfg.halo);
      }
      if (!(gather_trailing(in, lon, C) == strip_halo(want.input, cfg.halo))) ++mismatches;
      if (!(gather_trailing(tgt, lon, C) == strip_halo(want.target, cfg.halo))) ++mismatches;
    }
    c.error = double(mismatches);
    c.detail = std::to_string(serial.steps_per_epoch()) + " steps, halo " + std::to_string(cfg.halo);
  }));
  return rep;
}

}  // namespace jigsaw
