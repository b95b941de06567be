// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include "model_harness.hpp"

using namespace jigsaw;
using namespace jigsaw::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_vars = 4;
  c.lat = 8;
  c.lon = 16;
  c.p_lat = 2;
  c.p_lon = 2;
  c.d_emb = 8;
  c.d_tok = 12;
  c.d_ch = 6;
  c.n_blocks = 2;
  return c;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_vars = 2;
  c.lat = 4;
  c.lon = 8;
  c.p_lat = 2;
  c.p_lon = 2;
  c.d_emb = 4;
  c.d_tok = 6;
  c.d_ch = 4;
  c.n_blocks = 2;
  return c;
}

Tensor<double> sample(const ModelConfig& c, std::size_t B, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor<double>({B, c.lat, c.lon, c.n_vars}, rng);
}

}  // namespace

TEST_CASE("config validation", "[model][config]") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate_for(4));
  c.lat = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.d_emb = 0;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("d_emb"));
  c = {};
  c.n_vars = 7;
  CHECK_NOTHROW(c.validate_for(1));
  CHECK_THROWS_AS(c.validate_for(2), ConfigError);
  CHECK_THROWS_AS(ModelConfig{}.validate_for(3), ConfigError);
  const nlohmann::json j = ModelConfig{};
  CHECK(j.get<ModelConfig>() == ModelConfig{});
}

TEST_CASE("encoder counts tokens and passes raw patches through an identity weight", "[model][encode]") {
  ModelConfig c = toy_config();
  c.n_vars = 1;
  c.lat = 4;
  c.lon = 8;
  CHECK(c.tokens() == 8);
  c.d_emb = c.patch_features();
  const auto x = sample(c, 1, 3);
  run_inproc(1, [&](Communicator& comm) {
    const auto ctx = MpContext::serial(0);
    WeatherMixer<double> m(c, ctx, 1);
    Tensor<double> eye({c.d_emb, c.d_emb});
    for (std::size_t i = 0; i < c.d_emb; ++i) eye(i, i) = 1;
    m.encoder().set_global_weight(eye, ctx);
    const auto p = m.to_tokens(x);
    CHECK(p.local.shape() == Shape{8, 4});
    CHECK(m.encoder().forward(comm, ctx, p).local == p.local);
    CHECK(m.from_tokens(p.local, 1) == x);
  });
}

TEST_CASE("serial and sharded encodings gather-match", "[model][encode]") {
  const ModelConfig c = small_config();
  const auto x = sample(c, 1, 4);
  Tensor<double> serial;
  run_inproc(1, [&](Communicator& comm) {
    WeatherMixer<double> m(c, MpContext::serial(0), 1);
    serial = m.encoder().forward(comm, MpContext::serial(0), m.to_tokens(x)).local;
  });
  for (int n : {2, 4}) {
    std::vector<Tensor<double>> parts(n);
    run_inproc(n, [&](Communicator& comm) {
      const auto ctx = MpContext::from(ProcessGroup(n, n, comm.rank()));
      WeatherMixer<double> m(c, ctx, 1);
      const auto xl = shard_trailing(x, m.sample_shard());
      parts[comm.rank()] = m.encoder().forward(comm, ctx, m.to_tokens(xl)).local;
    });
    CHECK(rel_error(gather(parts, c.tokens(), c.d_emb), serial) <= 1e-12);
  }
}

TEST_CASE("mixer block with zero weights is the identity", "[model][block]") {
  const ModelConfig c = small_config();
  for (int n : {1, 2, 4}) {
    std::vector<Tensor<double>> ins(n), outs(n);
    run_inproc(n, [&](Communicator& comm) {
      const auto ctx = MpContext::from(ProcessGroup(n, n, comm.rank()));
      WeatherMixer<double> m(c, ctx, 1);
      auto& blk = m.block(0);
      for (auto* l : {&blk.token1(), &blk.token2(), &blk.channel1(), &blk.channel2()}) {
        l->weight().value.fill(0);
        l->bias().value.fill(0);
      }
      std::mt19937_64 rng(comm.rank());
      const ShardedMatrix<double> x{random_tensor<double>(ShardSpec::make(n, ctx.mp_rank, 2 * c.tokens(), c.d_emb)
                                                              .local_shape(), rng),
                                    2 * c.tokens(), c.d_emb};
      typename MixerBlock<double>::Cache cache;
      ins[comm.rank()] = x.local;
      outs[comm.rank()] = blk.forward(comm, ctx, x, cache, nullptr, nullptr).local;
    });
    for (int r = 0; r < n; ++r) CHECK(outs[r] == ins[r]);
  }
}

TEST_CASE("block output shape equals input shape", "[model][block]") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    ModelConfig c = small_config();
    c.d_emb = 2 * (1 + rng() % 5);
    c.d_tok = 2 * (1 + rng() % 5);
    c.d_ch = 2 * (1 + rng() % 5);
    const auto x = sample(c, 2, trial);
    const auto run = run_model(2, c, x, 1);
    CHECK(run.out.shape() == x.shape());
  }
}

TEST_CASE("forward with rollout", "[model][forward]") {
  const ModelConfig c = small_config();
  const auto x = sample(c, 1, 5);
  run_inproc(1, [&](Communicator& comm) {
    WeatherMixer<double> m(c, MpContext::serial(0), 9);
    CHECK(m.forward(comm, x, 1) == m.forward(comm, x, 1));
    CHECK_THROWS_AS(m.forward(comm, x, 0), ShapeError);
    CHECK_THROWS_AS(m.forward(comm, Tensor<double>({1, 8, 8, 4}), 1), ShapeError);
    m.blend().value.fill(0);
    CHECK(m.forward(comm, x, 3) == x);
  });
  const auto serial = run_model(1, c, x, 3);
  const auto two = run_model(2, c, x, 3);
  CHECK(rel_error(two.out, serial.out) <= 1e-12);
}

TEST_CASE("sharded forward and gradients match serial end to end", "[model][equivalence][property]") {
  const ModelConfig c = small_config();
  const auto x = sample(c, 2, 6);
  const auto U = sample(c, 2, 60);
  const auto serial = run_model(1, c, x, 2, U);
  CHECK(serial.values.size() == serial.grads.size());
  for (int n : {2, 4}) {
    const auto sh = run_model(n, c, x, 2, U);
    CHECK(rel_error(sh.out, serial.out) <= 1e-12);
    REQUIRE(sh.names == serial.names);
    for (std::size_t k = 0; k < sh.grads.size(); ++k) {
      INFO("n=" << n << " " << sh.names[k]);
      CHECK(sh.values[k] == serial.values[k]);
      CHECK(rel_error(sh.grads[k], serial.grads[k]) <= 1e-10);
    }
  }
}

TEST_CASE("gradients match central differences on a 2-block toy model", "[model][backward][property]") {
  const ModelConfig c = toy_config();
  const auto x = sample(c, 1, 8);
  const auto U = sample(c, 1, 80);
  for (int n : {1, 4}) {
    for (const auto& res : finite_difference_check(n, c, x, 2, U, 1e-5, 3)) {
      INFO("n=" << n << " " << res.name);
      CHECK(res.checked > 0);
      CHECK(res.rel <= 1e-4);
    }
  }
}

TEST_CASE("zero upstream gives zero gradients", "[model][backward]") {
  const ModelConfig c = toy_config();
  const auto x = sample(c, 1, 9);
  const auto run = run_model(2, c, x, 1, Tensor<double>(x.shape()));
  for (const auto& g : run.grads)
    for (auto v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("4-way replicated vector gradients are bit-identical after reduction", "[model][layernorm]") {
  const ModelConfig c = small_config();
  const auto x = sample(c, 1, 10);
  const auto run = run_model(4, c, x, 1, sample(c, 1, 100));
  std::size_t checked = 0;
  for (std::size_t k = 0; k < run.names.size(); ++k) {
    if (run.names[k].find(".ln") == std::string::npos) continue;
    const auto& g = run.local_grads[k];
    CHECK(g[0] == g[2]);
    CHECK(g[1] == g[3]);
    ++checked;
  }
  CHECK(checked == 4 * c.n_blocks);
}

TEST_CASE("rollout cost is affine in r with constant encoder/decoder cost", "[model][flops]") {
  const ModelConfig c = small_config();
  const auto x = sample(c, 1, 11);
  std::uint64_t f[4];
  for (int r = 1; r <= 3; ++r) f[r] = run_model(1, c, x, r).stats[0].flops;
  CHECK(f[3] - f[2] == f[2] - f[1]);
  const std::uint64_t per_step = f[2] - f[1];
  const std::uint64_t T = c.tokens(), D = c.d_emb;
  CHECK(per_step == c.n_blocks * (2 * 2 * D * T * c.d_tok + 2 * 2 * T * D * c.d_ch));
  CHECK(f[1] - per_step == 2 * (2 * T * c.patch_features() * D));
}

TEST_CASE("parameter count matches the closed form and shards without redundancy", "[model][params]") {
  const ModelConfig c = small_config();
  std::size_t serial = 0;
  run_inproc(1, [&](Communicator&) { serial = WeatherMixer<double>(c, MpContext::serial(0), 1).local_param_elements(); });
  CHECK(serial == model_param_count(c));
  for (int n : {2, 4}) {
    std::vector<std::size_t> matrix_elems(n), vector_elems(n);
    run_inproc(n, [&](Communicator& comm) {
      const auto ctx = MpContext::from(ProcessGroup(n, n, comm.rank()));
      WeatherMixer<double> m(c, ctx, 1);
      for (auto* p : m.params()) (p->global_shape.size() == 2 ? matrix_elems : vector_elems)[comm.rank()] += p->value.size();
    });
    std::size_t global_matrix = 0;
    run_inproc(1, [&](Communicator&) {
      WeatherMixer<double> m(c, MpContext::serial(0), 1);
      for (auto* p : m.params())
        if (p->global_shape.size() == 2) global_matrix += p->value.size();
    });
    for (int r = 0; r < n; ++r) CHECK(matrix_elems[r] * n == global_matrix);
  }
}
