// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <unistd.h>

#include "model_harness.hpp"
#include "train_harness.hpp"

using namespace jigsaw;
using namespace jigsaw::testing;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  return std::filesystem::temp_directory_path() / ("jigsaw_" + tag + "_" + std::to_string(::getpid()));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("train config validation", "[train][config]") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.final_lr = 2e-4;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("final_lr"));
  c = {};
  c.warmup_start = 1e-3;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("warmup_start"));
  c = {};
  c.clip_norm = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const nlohmann::json j = TrainConfig{};
  CHECK(j.get<TrainConfig>() == TrainConfig{});
}

TEST_CASE("learning-rate schedule fixtures", "[train][lr]") {
  TrainConfig c;
  const std::size_t spe = 37, total = c.epochs * spe;
  CHECK(lr_at(0, total, c) == 1e-6);
  CHECK(lr_at(spe, total, c) == 1e-4);
  CHECK(lr_at(total - 1, total, c) == 1e-5);
  CHECK(lr_at(spe, total, c, ParamClass::EncDec) == 2e-5);
  CHECK(lr_at(total - 1, total, c, ParamClass::EncDec) == Catch::Approx(2e-6).epsilon(1e-15));
  CHECK(lr_at(0, total, c, ParamClass::EncDec) == 1e-6);
  CHECK_THROWS_AS(lr_at(total, total, c), ConfigError);

  // Continuity at the warmup boundary and monotone pieces.
  const double before = lr_at(spe - 1, total, c), after = lr_at(spe + 1, total, c);
  CHECK(std::abs(before - 1e-4) <= (1e-4 - 1e-6) / spe * 1.0000001);
  CHECK(std::abs(after - 1e-4) <= 1e-4 * 1e-3);
  for (std::size_t s = 1; s < spe; ++s) CHECK(lr_at(s, total, c) > lr_at(s - 1, total, c));
  for (std::size_t s = spe + 1; s < total; ++s) CHECK(lr_at(s, total, c) <= lr_at(s - 1, total, c));
  // Midpoint of the cosine is the arithmetic mean of base and final.
  TrainConfig odd = c;
  const std::size_t t2 = 100 * 3;  // warmup 3, cosine span 296
  CHECK(lr_at(3 + 148, t2, odd) == Catch::Approx(5.5e-5).epsilon(1e-12));
}

TEST_CASE("clipping examples", "[train][clip]") {
  run_inproc(1, [](Communicator& comm) {
    const auto ctx = MpContext::serial(0);
    Param<double> p;
    p.value = Tensor<double>({2});
    p.grad = Tensor<double>({2}, {3.0, 4.0});
    std::vector<Param<double>*> ps{&p};
    CHECK(clip_grads(comm, ctx, ps, 1.0) == 5.0);
    CHECK(p.grad[0] == Catch::Approx(0.6).epsilon(1e-15));
    CHECK(p.grad[1] == Catch::Approx(0.8).epsilon(1e-15));
    p.grad = Tensor<double>({2}, {0.3, 0.4});
    CHECK(clip_grads(comm, ctx, ps, 1.0) == Catch::Approx(0.5));
    CHECK(p.grad == Tensor<double>({2}, {0.3, 0.4}));
  });
}

TEST_CASE("sharded clipping matches serial clipping", "[train][clip][property]") {
  const auto cfg = tiny_experiment().model;
  std::mt19937_64 rng(1);
  const auto x = random_tensor<double>({1, cfg.lat, cfg.lon, cfg.n_vars}, rng);
  const auto U = random_tensor<double>(x.shape(), rng, -50, 50);
  auto clipped = [&](int n) {
    double norm = 0;
    std::vector<std::vector<Tensor<double>>> grads(n);
    std::vector<Param<double>> meta;
    std::mutex mu;
    run_inproc(n, [&](Communicator& comm) {
      const auto ctx = MpContext::from(ProcessGroup(n, n, comm.rank()));
      WeatherMixer<double> m(cfg, ctx, 7);
      typename WeatherMixer<double>::Cache cache;
      m.forward(comm, shard_trailing(x, m.sample_shard()), 1, &cache);
      m.backward(comm, cache, shard_trailing(U, m.sample_shard()));
      const double g = clip_grads(comm, ctx, m.params(), 1e-3);
      std::lock_guard lock(mu);
      if (comm.rank() == 0) {
        norm = g;
        for (auto* p : m.params()) meta.push_back(*p);
      }
      for (auto* p : m.params()) grads[comm.rank()].push_back(p->grad);
    });
    std::vector<Tensor<double>> out;
    for (std::size_t k = 0; k < meta.size(); ++k) {
      std::vector<Tensor<double>> parts(n);
      for (int r = 0; r < n; ++r) parts[r] = grads[r][k];
      out.push_back(gather_param(parts, meta[k]));
    }
    return std::pair{norm, out};
  };
  const auto [serial_norm, serial] = clipped(1);
  REQUIRE(serial_norm > 1e-3);
  for (int n : {2, 4}) {
    const auto [norm, grads] = clipped(n);
    CHECK(norm == Catch::Approx(serial_norm).epsilon(1e-12));
    for (std::size_t k = 0; k < grads.size(); ++k) CHECK(rel_error(grads[k], serial[k]) <= 1e-12);
  }
}

TEST_CASE("adam examples", "[train][adam]") {
  Tensor<double> x({3}, {1.0, -2.0, 0.5}), m({3}, {1.0, 1.0, 1.0}), v({3}, {1.0, 1.0, 1.0});
  const Tensor<double> x0 = x;
  adam_update(x, Tensor<double>({3}), m, v, 1, 0.1, 0.9, 0.999, 1e-8);
  CHECK(m[0] == Catch::Approx(0.9).epsilon(1e-15));
  CHECK(v[0] == Catch::Approx(0.999).epsilon(1e-15));

  Tensor<double> y({3}, {1.0, -2.0, 0.5}), m2({3}), v2({3});
  adam_update(y, Tensor<double>({3}, {0.3, -7.0, 1e-3}), m2, v2, 1, 0.01, 0.9, 0.999, 1e-8);
  CHECK(y[0] - 1.0 == Catch::Approx(-0.01).epsilon(1e-6));
  CHECK(y[1] + 2.0 == Catch::Approx(0.01).epsilon(1e-6));
  CHECK(y[2] - 0.5 == Catch::Approx(-0.01).epsilon(1e-4));

  // Zero gradient after moments are zero: nothing moves.
  Tensor<double> z = x0, mz({3}), vz({3});
  adam_update(z, Tensor<double>({3}), mz, vz, 1, 0.1, 0.9, 0.999, 1e-8);
  CHECK(z == x0);
}

TEST_CASE("adam minimizes x^2 like a scalar reference", "[train][adam]") {
  Tensor<double> x({1}, {1.0}), m({1}), v({1});
  double rx = 1.0, rm = 0, rv = 0;
  for (int t = 1; t <= 100; ++t) {
    adam_update(x, Tensor<double>({1}, {2 * x[0]}), m, v, std::uint64_t(t), 0.1, 0.9, 0.999, 1e-8);
    const double g = 2 * rx;
    rm = 0.9 * rm + (1 - 0.9) * g;
    rv = 0.999 * rv + (1 - 0.999) * g * g;
    rx -= 0.1 * (rm / (1 - std::pow(0.9, t))) / (std::sqrt(rv / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(x[0] == rx);
  CHECK(std::abs(x[0]) < 0.1);
}

TEST_CASE("dp groups follow the residue rule", "[train][dp]") {
  CHECK(ProcessGroup::dp_groups(8, 2) == std::vector<std::vector<RankId>>{{0, 2, 4, 6}, {1, 3, 5, 7}});
  CHECK(ProcessGroup::dp_groups(8, 4) == std::vector<std::vector<RankId>>{{0, 4}, {1, 5}, {2, 6}, {3, 7}});
  CHECK(ProcessGroup::dp_groups(2, 2) == std::vector<std::vector<RankId>>{{0}, {1}});
}

TEST_CASE("dp_reduce averages within groups only", "[train][dp]") {
  std::vector<Tensor<double>> out(4);
  run_inproc(4, [&](Communicator& comm) {
    const ProcessGroup pg(4, 2, comm.rank());
    Param<double> p;
    p.value = Tensor<double>({2});
    p.grad = Tensor<double>({2}, {double(comm.rank()), 10.0 * comm.rank()});
    dp_reduce(comm, pg, std::vector<Param<double>*>{&p});
    out[comm.rank()] = p.grad;
  });
  CHECK(out[0] == Tensor<double>({2}, {1.0, 10.0}));
  CHECK(out[2] == out[0]);
  CHECK(out[1] == Tensor<double>({2}, {2.0, 20.0}));
  CHECK(out[3] == out[1]);
  run_inproc(2, [&](Communicator& comm) {
    const ProcessGroup pg(2, 2, comm.rank());
    Param<double> p;
    p.grad = Tensor<double>({1}, {double(comm.rank())});
    dp_reduce(comm, pg, std::vector<Param<double>*>{&p});
    CHECK(p.grad[0] == double(comm.rank()));
  });
}

TEST_CASE("local loss partials and gradients", "[train][loss]") {
  auto cfg = tiny_experiment();
  const auto w = WeightScheme::make(cfg.data.sample);
  std::mt19937_64 rng(2);
  const auto p = random_tensor<double>({2, 8, 16, 4}, rng), t = random_tensor<double>({2, 8, 16, 4}, rng);
  const double global = weighted_mse_loss(p, t, w);
  const auto serial = local_weighted_loss(p, t, w, ShardSpec::make(1, 0, 16, 4), p.size());
  CHECK(double(serial.partial / p.size()) == Catch::Approx(global).epsilon(1e-14));
  // Gradient against central differences of the global loss.
  for (std::size_t k : {0u, 77u, 511u, 1023u}) {
    auto a = p, b = p;
    a[k] += 1e-6;
    b[k] -= 1e-6;
    const double fd = (weighted_mse_loss(a, t, w) - weighted_mse_loss(b, t, w)) / 2e-6;
    CHECK(serial.grad[k] == Catch::Approx(fd).epsilon(1e-6).margin(1e-9));
  }
  long double sum = 0;
  for (int r = 0; r < 4; ++r) {
    const auto spec = ShardSpec::make(4, r, 16, 4);
    sum += local_weighted_loss(shard_trailing(p, spec), shard_trailing(t, spec), w, spec, p.size()).partial;
  }
  CHECK(double(sum / p.size()) == Catch::Approx(global).epsilon(1e-13));
}

TEST_CASE("model-parallel training matches serial step by step", "[train][equivalence]") {
  const auto serial = run_training(tiny_experiment(1), 20);
  for (int n : {2, 4}) {
    const auto sh = run_training(tiny_experiment(n), 20);
    for (std::size_t s = 0; s < 20; ++s) {
      INFO("n=" << n << " step " << s);
      CHECK(std::abs(sh.losses[0][s] - serial.losses[0][s]) <= 1e-8 * std::max(1.0, serial.losses[0][s]));
      for (int r = 1; r < n; ++r) CHECK(sh.losses[r][s] == sh.losses[0][s]);
    }
    for (std::size_t k = 0; k < sh.params.size(); ++k) CHECK(rel_error(sh.params[k], serial.params[k]) <= 1e-8);
  }
}

TEST_CASE("two dp replicas reproduce a serial batch-2 update", "[train][dp][equivalence]") {
  auto big = tiny_experiment(1, 1);
  big.train.batch = 2;
  const auto serial = run_training(big, 3);
  const auto dp = run_training(tiny_experiment(1, 2), 3);
  for (std::size_t s = 0; s < 3; ++s) CHECK(dp.losses[0][s] == Catch::Approx(serial.losses[0][s]).epsilon(1e-12));
  for (std::size_t k = 0; k < serial.params.size(); ++k) {
    INFO(serial.names[k]);
    CHECK(rel_error(dp.params[k], serial.params[k]) <= 1e-10);
  }
}

TEST_CASE("dp group members hold bit-identical shards", "[train][dp]") {
  const auto tr = run_training(tiny_experiment(2, 2), 5);
  for (std::size_t k = 0; k < tr.names.size(); ++k) {
    CHECK(tr.local_values[0][k] == tr.local_values[2][k]);
    CHECK(tr.local_values[1][k] == tr.local_values[3][k]);
  }
  CHECK(tr.losses[0] == tr.losses[3]);
}

TEST_CASE("rollout length is synchronized and r_max=1 equals pretraining", "[train][rollout]") {
  auto cfg = tiny_experiment(2, 2);
  cfg.train.r_max = 2;
  const auto ft = run_training(cfg, 8, true);
  for (int r = 1; r < 4; ++r) CHECK(ft.rollouts[r] == ft.rollouts[0]);
  CHECK(std::count(ft.rollouts[0].begin(), ft.rollouts[0].end(), 2) > 0);
  cfg = tiny_experiment(2);
  cfg.train.r_max = 1;
  const auto a = run_training(cfg, 4, true), b = run_training(cfg, 4, false);
  CHECK(a.losses == b.losses);
  for (std::size_t k = 0; k < a.params.size(); ++k) CHECK(a.params[k] == b.params[k]);
}

TEST_CASE("checkpoint round trip and resume", "[train][checkpoint]") {
  const auto dir = temp_dir("ckpt"), dir2 = temp_dir("ckpt2");
  const auto cfg = tiny_experiment(2);
  // Uninterrupted: 6 steps.
  const auto full = run_training(cfg, 6);
  // Interrupted: 4 steps, save, fresh world loads and runs 2 more.
  run_training(cfg, 4, false, {}, [&](RankSession<double>& s) { s.trainer().save(dir); });
  std::vector<double> resumed(2);
  run_inproc(2, [&](Communicator& comm) {
    RankSession<double> s(cfg, comm);
    s.trainer().load(dir);
    CHECK(s.trainer().global_step() == 4);
    s.trainer().save(dir2);
    for (int k = 0; k < 2; ++k) {
      const double l = s.trainer().next().loss;
      if (comm.rank() == 0) resumed[k] = l;
    }
  });
  for (int r = 0; r < 2; ++r) {
    const auto f = Trainer<double>::checkpoint_file(dir, r);
    CHECK(slurp(f) == slurp(Trainer<double>::checkpoint_file(dir2, r)));
    std::ifstream in(f);
    std::string header;
    std::getline(in, header);
    const auto h = nlohmann::json::parse(header);
    CHECK(h.at("rank") == r);
    CHECK(h.at("n") == 2);
  }
  CHECK(resumed[0] == full.losses[0][4]);
  CHECK(resumed[1] == full.losses[0][5]);

  // A 2-way checkpoint cannot be loaded into a 4-way world.
  bool rejected = false;
  run_inproc(4, [&](Communicator& comm) {
    RankSession<double> s(tiny_experiment(4), comm);
    if (comm.rank() > 1) return;
    try {
      s.trainer().load(dir);
    } catch (const ShapeError& e) {
      if (comm.rank() == 0) rejected = std::string(e.what()).find("n=2") != std::string::npos;
    }
  });
  CHECK(rejected);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}
