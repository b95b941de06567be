// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <set>

#include <unistd.h>

#include "jigsaw/data.hpp"
#include "test_util.hpp"

using namespace jigsaw;
using namespace jigsaw::testing;
using Catch::Approx;

namespace {

SyntheticConfig small_data(std::size_t lon = 16, std::size_t n_steps = 24) {
  SyntheticConfig c;
  c.seed = 5;
  c.n_steps = n_steps;
  c.sample.lat = 8;
  c.sample.lon = lon;
  return c;
}

double spatial_variance(const Tensor<double>& f, std::size_t c) {
  const std::size_t C = f.dim(2), cells = f.size() / C;
  double mean = 0, var = 0;
  for (std::size_t k = 0; k < cells; ++k) mean += f[k * C + c];
  mean /= double(cells);
  for (std::size_t k = 0; k < cells; ++k) var += (f[k * C + c] - mean) * (f[k * C + c] - mean);
  return var / double(cells);
}

}  // namespace

TEST_CASE("sample spec channel layout", "[data][sample]") {
  SampleSpec s;
  s.surface_vars = {"t2m"};
  s.plevel_vars = {"z", "t"};
  s.levels = {1000, 500, 50};
  s.constant_vars = {"orography"};
  CHECK(s.channels() == 1 + 2 * 3 + 1);
  CHECK(s.channel_names() ==
        std::vector<std::string>{"t2m", "z1000", "z500", "z50", "t1000", "t500", "t50", "orography"});
  CHECK(s.channel_level(3) == 50);
  CHECK(s.channel_level(0) == 0);
  CHECK(s.channel_variable(5) == "t");
  CHECK(s.is_constant(7));
  CHECK_FALSE(s.is_constant(6));
}

TEST_CASE("generator is deterministic per seed", "[data][generator]") {
  const auto a = generate_synthetic(small_data());
  const auto b = generate_synthetic(small_data());
  REQUIRE(a.size() == 24);
  for (std::size_t t = 0; t < a.size(); ++t) CHECK(a[t] == b[t]);
  auto other = small_data();
  other.seed = 6;
  CHECK_FALSE(generate_synthetic(other)[0] == a[0]);
}

TEST_CASE("generator rejects degenerate grids", "[data][generator]") {
  auto c = small_data();
  c.sample.lat = 3;
  CHECK_THROWS_AS(SyntheticGenerator(c), ConfigError);
  c = small_data();
  c.sample.lon = 2;
  CHECK_THROWS_AS(SyntheticGenerator(c), ConfigError);
}

TEST_CASE("diffusion never increases spatial variance", "[data][generator][property]") {
  auto c = small_data();
  c.advection = 0;
  c.diffusion = 0.02;
  const SyntheticGenerator g(c);
  for (std::size_t ch = 0; ch < g.channels(); ++ch) {
    double prev = spatial_variance(g.field(0), ch);
    CHECK(prev > 0);
    for (std::size_t t = 1; t < c.n_steps; ++t) {
      const double v = spatial_variance(g.field(t), ch);
      CHECK(v <= prev * (1 + 1e-14));
      prev = v;
    }
  }
}

TEST_CASE("pure advection is an exact periodic shift", "[data][generator]") {
  auto c = small_data(16);
  c.diffusion = 0;
  c.advection = 1;
  const SyntheticGenerator g(c);
  const auto f0 = g.field(0);
  const auto period = g.field(16);
  for (std::size_t k = 0; k < f0.size(); ++k) CHECK(std::abs(period[k] - f0[k]) <= 1e-10);
  // Shift oracle: after 3 steps each column comes from 3 cells to the west.
  const auto f3 = g.field(3);
  const std::size_t C = g.channels(), lon = 16;
  for (std::size_t i = 0; i < c.sample.lat; ++i)
    for (std::size_t j = 0; j < lon; ++j)
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double expect = g.channel(ch).constant ? f0[(i * lon + j) * C + ch]
                                                      : f0[(i * lon + (j + lon - 3) % lon) * C + ch];
        CHECK(std::abs(f3[(i * lon + j) * C + ch] - expect) <= 1e-10);
      }
}

TEST_CASE("constant channels do not change over time", "[data][generator]") {
  const SyntheticGenerator g(small_data());
  const auto a = g.field(0), b = g.field(9);
  const std::size_t C = g.channels();
  for (std::size_t k = 0; k < a.size(); ++k)
    if (g.spec().is_constant(k % C)) CHECK(a[k] == b[k]);
}

TEST_CASE("zscore flags constant channels", "[data][zscore]") {
  std::mt19937_64 rng(1);
  std::vector<Tensor<double>> xs;
  for (int s = 0; s < 4; ++s) {
    auto x = random_tensor<double>({5, 2}, rng);
    for (std::size_t r = 0; r < 5; ++r) x(r, 1) = 7;
    xs.push_back(x);
  }
  const auto st = zscore_fit(xs);
  CHECK(st.constant == std::vector<bool>{false, true});
  CHECK(st.std[1] == 1.0);
  CHECK(st.mean[1] == 7.0);
  const auto z = zscore_apply(xs[0], st);
  for (std::size_t r = 0; r < 5; ++r) CHECK(z(r, 1) == 0.0);
  CHECK_THROWS_AS(zscore_fit(std::vector<Tensor<double>>{xs[0]}), ShapeError);
}

TEST_CASE("zscore statistics match sample moments", "[data][zscore]") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(3.0, 2.0);
  std::vector<Tensor<double>> xs;
  for (int s = 0; s < 50; ++s) {
    Tensor<double> x({100, 1});
    for (auto& v : x.values()) v = nd(rng);
    xs.push_back(x);
  }
  const auto st = zscore_fit(xs);
  double mean = 0, var = 0;
  for (const auto& x : xs)
    for (double v : x.values()) mean += v;
  mean /= 5000;
  for (const auto& x : xs)
    for (double v : x.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / 5000);
  CHECK(st.mean[0] == Approx(mean).epsilon(1e-12));
  CHECK(st.std[0] == Approx(sd).epsilon(1e-12));
  CHECK(std::abs(st.mean[0] - 3.0) < 0.1);
  CHECK(std::abs(st.std[0] - 2.0) < 0.1);
}

TEST_CASE("zscore round trip and normalized moments", "[data][zscore][property]") {
  const SyntheticGenerator g(small_data());
  const auto st = zscore_fit(g);
  std::vector<Tensor<double>> zs;
  for (std::size_t t = 0; t < g.config().n_steps; ++t) {
    const auto f = g.field(t);
    const auto z = zscore_apply(f, st);
    const auto back = zscore_invert(z, st);
    CHECK(rel_error(back, f) <= 1e-14);
    zs.push_back(z);
  }
  const auto zst = zscore_fit(zs);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    INFO("channel " << c);
    CHECK(std::abs(zst.mean[c]) <= 1e-10);
    if (!st.constant[c]) CHECK(std::abs(zst.std[c] - 1.0) <= 1e-6);
  }
}

TEST_CASE("latitude weights", "[data][metrics]") {
  for (std::size_t rows : {1u, 2u, 3u, 8u, 32u, 721u}) {
    const auto w = lat_weights(rows);
    double s = 0;
    for (double v : w) s += v;
    CHECK(std::abs(s / double(rows) - 1.0) <= 1e-12);
  }
  const auto poles = lat_weights(5, true);
  CHECK(poles.front() == 0.0);
  CHECK(poles.back() == 0.0);
  CHECK_THROWS_AS(lat_weights(2, true), ShapeError);
  CHECK(lat_weights_for({0.0}) == std::vector<double>{1.0});
}

TEST_CASE("latitude-weighted RMSE", "[data][metrics]") {
  const auto w = lat_weights_for({-60.0, 0.0, 60.0});
  CHECK(w[1] == Approx(1.5).epsilon(1e-15));
  Tensor<double> pred({3, 1, 1}), target({3, 1, 1});
  CHECK(lat_weighted_rmse(pred, target, w) == std::vector<double>{0.0});
  pred(1, 0, 0) = 1;
  CHECK(lat_weighted_rmse(pred, target, w)[0] == Approx(0.70710678118654752).epsilon(1e-14));

  std::mt19937_64 rng(3);
  const auto a = random_tensor<double>({2, 4, 6, 3}, rng), b = random_tensor<double>({2, 4, 6, 3}, rng);
  const auto r = lat_weighted_rmse(a, b, std::vector<double>(4, 1.0));
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t k = c; k < a.size(); k += 3) s += (a[k] - b[k]) * (a[k] - b[k]);
    CHECK(std::abs(r[c] - std::sqrt(s / 48)) <= 1e-12);
  }
  CHECK_THROWS_AS(lat_weighted_rmse(a, b, std::vector<double>(3, 1.0)), ShapeError);
}

TEST_CASE("weighted MSE loss", "[data][loss]") {
  SampleSpec s;
  s.lat = 4;
  s.lon = 4;
  s.surface_vars = {};
  s.plevel_vars = {"z"};
  s.levels = {1000, 50};
  s.constant_vars = {};
  Tensor<double> target({1, 4, 4, 2}), p1000({1, 4, 4, 2}), p50({1, 4, 4, 2});
  p1000(0, 1, 2, 0) = 2.0;
  p50(0, 1, 2, 1) = 2.0;
  const auto w = WeightScheme::make(s);
  CHECK(w.plevel == std::vector<double>{1.0, 0.3});
  CHECK(weighted_mse_loss(p50, target, w) / weighted_mse_loss(p1000, target, w) == Approx(0.3).epsilon(1e-15));

  std::mt19937_64 rng(4);
  const auto a = random_tensor<double>({2, 4, 4, 2}, rng), b = random_tensor<double>({2, 4, 4, 2}, rng);
  double mse = 0;
  for (std::size_t k = 0; k < a.size(); ++k) mse += (a[k] - b[k]) * (a[k] - b[k]);
  CHECK(weighted_mse_loss(a, b, WeightScheme::uniform(4, 2)) == Approx(mse / double(a.size())).epsilon(1e-14));

  auto zero_z = WeightScheme::make(s, {{"z", 0.0}});
  auto c = a;
  c(1, 3, 3, 1) += 100;
  CHECK(weighted_mse_loss(c, b, zero_z) == 0.0);
  CHECK_THROWS_AS(weighted_mse_loss(a, b, WeightScheme::uniform(4, 3)), ShapeError);
  s.levels = {1000, 777};
  CHECK_THROWS_AS(WeightScheme::make(s), ConfigError);
}

TEST_CASE("sharded partial losses sum to the global loss", "[data][loss]") {
  auto cfg = small_data(8, 6);
  cfg.sample.lat = 4;
  const SyntheticGenerator g(cfg);
  const auto w = WeightScheme::make(cfg.sample);
  std::mt19937_64 rng(5);
  const std::size_t C = g.channels();
  const auto a = random_tensor<double>({2, 4, 8, C}, rng), b = random_tensor<double>({2, 4, 8, C}, rng);
  const double global = weighted_mse_loss(a, b, w);
  for (int n : {2, 4}) {
    long double sum = 0;
    for (int r = 0; r < n; ++r) {
      const auto spec = ShardSpec::make(n, r, 8, C);
      sum += weighted_sq_error_sum(shard_trailing(a, spec), shard_trailing(b, spec), w, spec.col_offset(),
                                   spec.valid_cols(), spec.valid_rows());
    }
    CHECK(double(sum / a.size()) == Approx(global).epsilon(1e-13));
  }
}

TEST_CASE("loader block shapes and padding", "[data][loader]") {
  auto cfg = small_data(8, 12);
  cfg.sample.surface_vars = {"a", "b"};
  cfg.sample.plevel_vars = {"z"};
  cfg.sample.levels = {1000, 500};
  cfg.sample.constant_vars = {"orography", "mask"};
  REQUIRE(cfg.sample.channels() == 6);
  SyntheticGenerator g6(cfg);
  const auto st6 = zscore_fit(g6);
  for (int r = 0; r < 4; ++r) {
    ShardedLoader<double> L(g6, st6, ShardSpec::make(4, r, 8, 6), {.batch = 2});
    CHECK(L.load(0).input.shape() == Shape{2, 8, 4, 3});
  }

  cfg.sample.constant_vars = {"orography", "mask", "soil"};
  SyntheticGenerator g7(cfg);
  const auto st7 = zscore_fit(g7);
  std::vector<Tensor<double>> parts;
  for (int r = 0; r < 4; ++r) {
    const auto spec = ShardSpec::make(4, r, 8, 7);
    ShardedLoader<double> L(g7, st7, spec, {.batch = 1});
    auto x = L.load_step(3);
    CHECK(x.dim(3) == 4);
    if (spec.block_col == 1) {
      for (std::size_t k = 3; k < x.size(); k += 4) CHECK(x[k] == 0.0);
    }
    parts.push_back(std::move(x));
  }
  ShardedLoader<double> serial(g7, st7, ShardSpec::make(1, 0, 8, 7), {.batch = 1});
  CHECK(gather_trailing(parts, 8, 7) == serial.load_step(3));
}

TEST_CASE("loader halo columns equal neighbor edge columns", "[data][loader]") {
  const auto cfg = small_data(8, 12);
  const SyntheticGenerator g(cfg);
  const auto st = zscore_fit(g);
  const std::size_t C = g.channels(), lon = 8, lat = cfg.sample.lat;
  ShardedLoader<double> serial(g, st, ShardSpec::make(1, 0, lon, C), {});
  const auto full = serial.load_step(5);
  for (int n : {2, 4}) {
    std::vector<Tensor<double>> stripped;
    for (int r = 0; r < n; ++r) {
      const auto spec = ShardSpec::make(n, r, lon, C);
      ShardedLoader<double> L(g, st, spec, {.halo = 1});
      const auto x = L.load_step(5);
      const std::size_t W = x.dim(2), Cl = x.dim(3);
      REQUIRE(W == spec.local_rows + 2);
      const std::size_t west = (spec.row_offset() + lon - 1) % lon;
      const std::size_t east = (spec.row_offset() + spec.valid_rows()) % lon;
      for (std::size_t i = 0; i < lat; ++i)
        for (std::size_t c = 0; c < spec.valid_cols(); ++c) {
          const std::size_t gc = spec.col_offset() + c;
          CHECK(x[(i * W + 0) * Cl + c] == full[(i * lon + west) * C + gc]);
          CHECK(x[(i * W + W - 1) * Cl + c] == full[(i * lon + east) * C + gc]);
        }
      stripped.push_back(strip_halo(x, 1));
    }
    CHECK(gather_trailing(stripped, lon, C) == full);
  }
  CHECK_THROWS_AS(ShardedLoader<double>(g, st, ShardSpec::make(4, 0, lon, C), {.halo = 5}), ShapeError);
  CHECK_THROWS_AS(ShardedLoader<double>(g, st, ShardSpec::make(4, 0, 16, C), {}), ShapeError);
}

TEST_CASE("loader seed contract across mp and dp groups", "[data][loader][property]") {
  const auto cfg = small_data(8, 40);
  const SyntheticGenerator g(cfg);
  const auto st = zscore_fit(g);
  const std::size_t C = g.channels();
  const LoaderOptions opt{.batch = 3, .seed = 11, .r_max = 2};
  const int dp = 2, n = 4;
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::set<std::size_t> seen;
    std::size_t drawn = 0;
    for (int d = 0; d < dp; ++d) {
      std::vector<std::vector<std::size_t>> per_rank;
      for (int r = 0; r < n; ++r) {
        ShardedLoader<double> L(g, st, ShardSpec::make(n, r, 8, C), opt, d, dp);
        L.start_epoch(epoch);
        REQUIRE(L.steps_per_epoch() == 38 / 6);
        std::vector<std::size_t> seq;
        for (std::size_t s = 0; s < L.steps_per_epoch(); ++s)
          for (auto i : L.indices(s)) seq.push_back(i);
        per_rank.push_back(seq);
      }
      for (int r = 1; r < n; ++r) CHECK(per_rank[r] == per_rank[0]);
      for (auto i : per_rank[0]) {
        CHECK(i < 38);
        seen.insert(i);
        ++drawn;
      }
    }
    CHECK(seen.size() == drawn);
  }
  ShardedLoader<double> L(g, st, ShardSpec::make(1, 0, 8, C), opt);
  const auto e0 = L.indices(0);
  L.start_epoch(1);
  CHECK(L.indices(0) != e0);
  CHECK_THROWS_AS(L.indices(L.steps_per_epoch()), ShapeError);
  CHECK_THROWS_AS(L.load(0, 3), ShapeError);
}

TEST_CASE("loader targets are lead steps ahead", "[data][loader]") {
  const auto cfg = small_data(8, 20);
  const SyntheticGenerator g(cfg);
  const auto st = zscore_fit(g);
  ShardedLoader<double> L(g, st, ShardSpec::make(2, 1, 8, g.channels()), {.batch = 2, .seed = 3, .r_max = 3});
  const auto b = L.load(1, 3);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto tgt = L.load_step(b.indices[k] + 3);
    CHECK(std::equal(tgt.data(), tgt.data() + tgt.size(), b.target.data() + k * tgt.size()));
  }
}

TEST_CASE("f32 cache files round trip through the loader", "[data][cache]") {
  const auto cfg = small_data(8, 6);
  const SyntheticGenerator g(cfg);
  const auto st = zscore_fit(g);
  const auto dir = std::filesystem::temp_directory_path() / ("jigsaw_cache_" + std::to_string(::getpid()));
  write_cache(g, dir);
  {
    std::ifstream in(cache_file(dir, 2), std::ios::binary);
    std::uint32_t hdr[2];
    in.read(reinterpret_cast<char*>(hdr), 8);
    CHECK(hdr[0] == 8);
    CHECK(hdr[1] == 8);
    CHECK(std::filesystem::file_size(cache_file(dir, 2)) == g.channels() * (8 + 64 * 4));
  }
  for (int r = 0; r < 4; ++r) {
    const auto spec = ShardSpec::make(4, r, 8, g.channels());
    ShardedLoader<float> direct(g, st, spec, {.halo = 1});
    ShardedLoader<float> cached(g, st, spec, {.halo = 1, .cache_dir = dir});
    CHECK(rel_error(cached.load_step(4), direct.load_step(4)) <= 1e-6);
  }
  std::filesystem::remove_all(dir);
  ShardedLoader<float> missing(g, st, ShardSpec::make(1, 0, 8, g.channels()), {.cache_dir = dir});
  CHECK_THROWS(missing.load_step(0));
}

TEST_CASE("dataset manifest JSON round trip", "[data][manifest]") {
  auto c = small_data();
  c.sample.levels = {850, 50};
  const nlohmann::json j = c;
  CHECK(j.at("grid") == nlohmann::json::array({8, 16}));
  for (const char* key : {"seed", "n_steps", "grid", "variables", "levels"}) CHECK(j.contains(key));
  const auto back = j.get<SyntheticConfig>();
  CHECK(back.sample == c.sample);
  CHECK(back.seed == c.seed);
  CHECK(back.n_steps == c.n_steps);
  CHECK_THROWS_AS(nlohmann::json({{"grid", {8}}}).get<SyntheticConfig>(), ConfigError);
}
