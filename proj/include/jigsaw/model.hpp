// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// WeatherMixer: patch encoder, token/channel mixing blocks, patch decoder and
// a per-variable blend with the input state. Every parameter lives only as a
// local shard; one code path serves n = 1, 2 and 4.
//
// Activations are [B*tokens, features] matrices. Their rows are the tokens of
// all samples in the batch, sample-major; columns are features. In 4-way mode
// a rank holds the tokens of one longitude half, and in 2- and 4-way mode one
// half of the feature columns. Tokens are ordered west half first, then east
// half, each row-major over the patch grid, so the local patches of a rank's
// longitude half are a contiguous row block.

#pragma once

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <vector>

#include "jigsaw/jigsaw.hpp"
#include "jigsaw/ops.hpp"

namespace jigsaw {

struct ModelConfig {
  std::size_t n_vars = 8;
  std::size_t lat = 32, lon = 64;
  std::size_t p_lat = 4, p_lon = 4;
  std::size_t d_emb = 64;
  std::size_t d_tok = 128;
  std::size_t d_ch = 64;
  std::size_t n_blocks = 3;
  double dropout_rate = 0.0;

  std::size_t lat_patches() const { return lat / p_lat; }
  std::size_t lon_patches() const { return lon / p_lon; }
  std::size_t tokens() const { return lat_patches() * lon_patches(); }
  std::size_t patch_features() const { return p_lat * p_lon * n_vars; }

  /// Throws ConfigError naming the first offending field.
  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be >= 1");
    };
    positive(n_vars, "n_vars");
    positive(lat, "grid.lat");
    positive(lon, "grid.lon");
    positive(p_lat, "patch.p_lat");
    positive(p_lon, "patch.p_lon");
    positive(d_emb, "d_emb");
    positive(d_tok, "d_tok");
    positive(d_ch, "d_ch");
    positive(n_blocks, "n_blocks");
    if (lat % p_lat != 0) throw ConfigError("model.grid.lat must be divisible by patch.p_lat");
    if (lon % p_lon != 0) throw ConfigError("model.grid.lon must be divisible by patch.p_lon");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("model.dropout_rate must be in [0,1)");
  }

  /// Splits must be even: feature dims for n >= 2, the longitude patch count
  /// for n = 4.
  void validate_for(int n) const {
    validate();
    if (n != 1 && n != 2 && n != 4) throw ConfigError("n_way must be 1, 2 or 4");
    if (n == 1) return;
    auto even = [](std::size_t v, const char* name) {
      if (v % 2 != 0) throw ConfigError(std::string("model.") + name + " must be even for model-parallel runs");
    };
    even(n_vars, "n_vars");
    even(d_emb, "d_emb");
    even(d_tok, "d_tok");
    even(d_ch, "d_ch");
    if (n == 4) even(lon_patches(), "grid.lon / patch.p_lon");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_vars", c.n_vars},
       {"grid", {c.lat, c.lon}},
       {"patch", {c.p_lat, c.p_lon}},
       {"d_emb", c.d_emb},
       {"d_tok", c.d_tok},
       {"d_ch", c.d_ch},
       {"n_blocks", c.n_blocks},
       {"dropout_rate", c.dropout_rate}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto pair = [&](const char* key, std::size_t& a, std::size_t& b) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("model.") + key + " must be a 2-element array");
    a = v[0].get<std::size_t>();
    b = v[1].get<std::size_t>();
  };
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) j.at(key).get_to(out);
  };
  get("n_vars", c.n_vars);
  pair("grid", c.lat, c.lon);
  pair("patch", c.p_lat, c.p_lon);
  get("d_emb", c.d_emb);
  get("d_tok", c.d_tok);
  get("d_ch", c.d_ch);
  get("n_blocks", c.n_blocks);
  get("dropout_rate", c.dropout_rate);
}

/// Global parameter count, closed form.
inline std::size_t model_param_count(const ModelConfig& c) {
  const std::size_t K = c.patch_features(), T = c.tokens(), D = c.d_emb;
  const std::size_t block = 4 * D + (T * c.d_tok + c.d_tok) + (T * c.d_tok + T) + (c.d_ch * D + c.d_ch) +
                            (D * c.d_ch + D);
  return D * K + D + c.n_blocks * block + K * D + K + c.n_vars;
}

/// Placement of a rank's slice of a [B, lat, lon, C] sample: longitude is
/// the row dim of the split, channels the column dim.
inline ShardSpec sample_spec(const ModelConfig& c, const MpContext& ctx) {
  return ShardSpec::make(ctx.n, ctx.mp_rank, c.lon, c.n_vars);
}

/// Position of each row-major local patch in the model's token order.
inline std::vector<std::size_t> local_token_order(std::size_t lat_p, std::size_t lon_p_local, bool half_major) {
  std::vector<std::size_t> pos(lat_p * lon_p_local);
  const std::size_t half = lon_p_local / 2;
  for (std::size_t i = 0; i < lat_p; ++i)
    for (std::size_t j = 0; j < lon_p_local; ++j) {
      const std::size_t rm = i * lon_p_local + j;
      pos[rm] = half_major ? (j / half) * (lat_p * half) + i * half + j % half : rm;
    }
  return pos;
}

// ------------------------------------------------------------ layer norm

/// Layer norm over the (possibly column-split) feature axis. Row statistics
/// are summed with the row peer so they cover all features.
template <Scalar T>
class ShardedLayerNorm {
 public:
  struct Cache {
    Tensor<T> xhat;
    std::vector<T> rstd;
  };

  ShardedLayerNorm() = default;
  ShardedLayerNorm(std::string name, std::size_t features, const MpContext& ctx) : features_(features) {
    const VectorSlice vs = vector_slice(features, true, ctx);
    for (auto* p : {&gamma_, &beta_}) {
      p->value = Tensor<T>({vs.local});
      p->replication = Replication::ColPeers;
      p->global_elements = features;
      p->global_shape = {features};
      p->valid_elements = vs.valid;
      p->zero_grad();
    }
    gamma_.name = name + ".gamma";
    beta_.name = name + ".beta";
    for (std::size_t k = 0; k < vs.valid; ++k) gamma_.value[k] = T(1);
  }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  void append_params(std::vector<Param<T>*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

  ShardedMatrix<T> forward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x, Cache& cache) const {
    const std::size_t rows = x.local.rows(), cols = x.local.cols();
    const T inv_d = T(1) / T(features_);
    const std::size_t vc = valid_cols(ctx);
    Tensor<T> s({rows});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) s[i] += x.local(i, j);
    s = row_sum(comm, ctx, s);
    Tensor<T> q({rows});
    for (std::size_t i = 0; i < rows; ++i) {
      s[i] *= inv_d;
      for (std::size_t j = 0; j < vc; ++j) {
        const T d = x.local(i, j) - s[i];
        q[i] += d * d;
      }
    }
    q = row_sum(comm, ctx, q);
    cache.xhat = Tensor<T>({rows, cols});
    cache.rstd.assign(rows, T(0));
    ShardedMatrix<T> y{Tensor<T>({rows, cols}), x.rows, x.cols};
    for (std::size_t i = 0; i < rows; ++i) {
      const T rstd = T(1) / std::sqrt(q[i] * inv_d + T(kLayerNormEps));
      cache.rstd[i] = rstd;
      for (std::size_t j = 0; j < vc; ++j) {
        const T xh = (x.local(i, j) - s[i]) * rstd;
        cache.xhat(i, j) = xh;
        y.local(i, j) = gamma_.value[j] * xh + beta_.value[j];
      }
    }
    return y;
  }

  ShardedMatrix<T> backward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& dy,
                            const Cache& cache) {
    const std::size_t rows = dy.local.rows(), cols = dy.local.cols();
    const T inv_d = T(1) / T(features_);
    const std::size_t vc = valid_cols(ctx);
    // Row sums of dxhat and dxhat*xhat, exchanged together.
    Tensor<T> sums({2, rows});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < vc; ++j) {
        const T g = dy.local(i, j);
        const T xh = cache.xhat(i, j);
        gamma_.grad[j] += g * xh;
        beta_.grad[j] += g;
        const T dxh = g * gamma_.value[j];
        sums(0, i) += dxh;
        sums(1, i) += dxh * xh;
      }
    sums = row_sum(comm, ctx, sums);
    ShardedMatrix<T> dx{Tensor<T>({rows, cols}), dy.rows, dy.cols};
    for (std::size_t i = 0; i < rows; ++i) {
      const T m1 = sums(0, i) * inv_d, m2 = sums(1, i) * inv_d;
      for (std::size_t j = 0; j < vc; ++j) {
        const T dxh = dy.local(i, j) * gamma_.value[j];
        dx.local(i, j) = cache.rstd[i] * (dxh - m1 - cache.xhat(i, j) * m2);
      }
    }
    return dx;
  }

 private:
  std::size_t valid_cols(const MpContext& ctx) const { return vector_slice(features_, true, ctx).valid; }

  static Tensor<T> row_sum(Communicator& comm, const MpContext& ctx, const Tensor<T>& partial) {
    if (ctx.n < 2) return partial;
    return comm.pairwise_reduce_sum(ctx.global(ctx.row_peer()), partial);
  }

  std::size_t features_ = 0;
  Param<T> gamma_, beta_;
};

// ----------------------------------------------------------- mixer block

template <Scalar T>
class MixerBlock {
 public:
  struct Cache {
    ShardedMatrix<T> x, a, x1, c, h, g;
    std::vector<ShardedMatrix<T>> tok_h, tok_g;
    typename ShardedLayerNorm<T>::Cache ln1, ln2;
    Tensor<T> tok_mask, ch_mask;
  };

  MixerBlock() = default;
  MixerBlock(const std::string& name, const ModelConfig& cfg, const MpContext& ctx, std::uint64_t seed,
             std::uint64_t stream)
      : tokens_(cfg.tokens()), dropout_(cfg.dropout_rate) {
    using M = MatmulMode;
    const std::size_t T_ = cfg.tokens(), D = cfg.d_emb;
    ln1_ = ShardedLayerNorm<T>(name + ".ln1", D, ctx);
    ln2_ = ShardedLayerNorm<T>(name + ".ln2", D, ctx);
    tok1_ = ShardedLinear<T>(name + ".token1", T_, cfg.d_tok, T_, {M::TN, false, true, false}, ctx, seed, stream);
    tok2_ = ShardedLinear<T>(name + ".token2", T_, cfg.d_tok, cfg.d_tok, {M::NT, true, true, false}, ctx, seed,
                             stream + 1);
    ch1_ = ShardedLinear<T>(name + ".channel1", cfg.d_ch, D, D, {M::NT, false, true, false}, ctx, seed, stream + 2);
    ch2_ = ShardedLinear<T>(name + ".channel2", D, cfg.d_ch, cfg.d_ch, {M::NT, false, true, false}, ctx, seed,
                            stream + 3);
  }

  static constexpr std::uint64_t kStreams = 4;

  ShardedLinear<T>& token1() { return tok1_; }
  ShardedLinear<T>& token2() { return tok2_; }
  ShardedLinear<T>& channel1() { return ch1_; }
  ShardedLinear<T>& channel2() { return ch2_; }
  ShardedLayerNorm<T>& ln1() { return ln1_; }
  ShardedLayerNorm<T>& ln2() { return ln2_; }

  void append_params(std::vector<Param<T>*>& out) {
    ln1_.append_params(out);
    tok1_.append_params(out);
    tok2_.append_params(out);
    ln2_.append_params(out);
    ch1_.append_params(out);
    ch2_.append_params(out);
  }

  ShardedMatrix<T> forward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x, Cache& cache,
                           std::mt19937_64* drop_rng, MatmulStats* stats) const {
    cache.x = x;
    cache.a = ln1_.forward(comm, ctx, x, cache.ln1);
    const std::size_t per = x.local.rows() / batch(x);
    const std::size_t B = batch(x);
    ShardedMatrix<T> o{Tensor<T>(x.local.shape()), x.rows, x.cols};
    cache.tok_h.assign(B, {});
    cache.tok_g.assign(B, {});
    for (std::size_t b = 0; b < B; ++b) {
      const ShardedMatrix<T> u{slice2d(cache.a.local, b * per, per, 0, x.local.cols()), tokens_, x.cols};
      cache.tok_h[b] = jigsaw_transposed_mlp_forward(comm, ctx, u, tok1_, stats);
      cache.tok_g[b] = {gelu(cache.tok_h[b].local), cache.tok_h[b].rows, cache.tok_h[b].cols};
      apply_dropout(cache.tok_g[b].local, cache.tok_mask, drop_rng, b == 0);
      const ShardedMatrix<T> ob = tok2_.forward(comm, ctx, cache.tok_g[b], stats);
      place2d(o.local, ob.local, b * per, 0);
    }
    cache.x1 = {x.local + o.local, x.rows, x.cols};
    cache.c = ln2_.forward(comm, ctx, cache.x1, cache.ln2);
    cache.h = ch1_.forward(comm, ctx, cache.c, stats);
    cache.g = {gelu(cache.h.local), cache.h.rows, cache.h.cols};
    apply_dropout(cache.g.local, cache.ch_mask, drop_rng, true);
    const ShardedMatrix<T> o2 = ch2_.forward(comm, ctx, cache.g, stats);
    return {cache.x1.local + o2.local, x.rows, x.cols};
  }

  ShardedMatrix<T> backward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& dy,
                            const Cache& cache, MatmulStats* stats) {
    // Channel MLP branch.
    const ShardedMatrix<T> dg = ch2_.backward(comm, ctx, cache.g, dy, stats);
    Tensor<T> dgl = dg.local;
    if (cache.ch_mask.size()) dgl = hadamard(dgl, cache.ch_mask);
    const ShardedMatrix<T> dh{gelu_backward(cache.h.local, dgl), dg.rows, dg.cols};
    const ShardedMatrix<T> dc = ch1_.backward(comm, ctx, cache.c, dh, stats);
    ShardedMatrix<T> dx1{dy.local + ln2_.backward(comm, ctx, dc, cache.ln2).local, dy.rows, dy.cols};

    // Token MLP branch.
    const std::size_t B = cache.tok_h.size();
    const std::size_t per = dy.local.rows() / B;
    ShardedMatrix<T> da{Tensor<T>(dy.local.shape()), dy.rows, dy.cols};
    for (std::size_t b = 0; b < B; ++b) {
      const ShardedMatrix<T> dob{slice2d(dx1.local, b * per, per, 0, dy.local.cols()), tokens_, dy.cols};
      const ShardedMatrix<T> dgb = tok2_.backward(comm, ctx, cache.tok_g[b], dob, stats);
      Tensor<T> dgbl = dgb.local;
      if (cache.tok_mask.size()) dgbl = hadamard(dgbl, cache.tok_mask);
      const ShardedMatrix<T> dhb{gelu_backward(cache.tok_h[b].local, dgbl), dgb.rows, dgb.cols};
      const ShardedMatrix<T> ub{slice2d(cache.a.local, b * per, per, 0, dy.local.cols()), tokens_, dy.cols};
      const ShardedMatrix<T> dub = tok1_.backward(comm, ctx, ub, dhb, stats);
      place2d(da.local, dub.local, b * per, 0);
    }
    dx1.local += ln1_.backward(comm, ctx, da, cache.ln1).local;
    return dx1;
  }

 private:
  std::size_t batch(const ShardedMatrix<T>& x) const { return x.rows / tokens_; }

  void apply_dropout(Tensor<T>& t, Tensor<T>& mask, std::mt19937_64* rng, bool fresh) const {
    if (dropout_ <= 0 || !rng) {
      mask = Tensor<T>();
      return;
    }
    if (fresh || mask.shape() != t.shape()) mask = dropout_mask<T>(t.shape(), dropout_, *rng);
    t = hadamard(t, mask);
  }

  std::size_t tokens_ = 0;
  double dropout_ = 0;
  ShardedLayerNorm<T> ln1_, ln2_;
  ShardedLinear<T> tok1_, tok2_, ch1_, ch2_;
};

// ---------------------------------------------------------------- model

template <Scalar T>
class WeatherMixer {
 public:
  struct Cache {
    int r = 0;
    std::size_t batch = 0;
    Tensor<T> input;  // local [B, lat, lon_loc, C_loc]
    ShardedMatrix<T> patches, final_latent;
    Tensor<T> decoded;  // local field
    std::vector<typename MixerBlock<T>::Cache> blocks;
  };

  WeatherMixer(const ModelConfig& cfg, const MpContext& ctx, std::uint64_t seed) : cfg_(cfg), ctx_(ctx) {
    cfg.validate_for(ctx.n);
    using M = MatmulMode;
    const std::size_t K = cfg.patch_features(), D = cfg.d_emb;
    encoder_ = ShardedLinear<T>("encoder", D, K, K, {M::NT, false, true, true}, ctx, seed, 0);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
      blocks_.emplace_back("blocks." + std::to_string(i), cfg, ctx, seed, 1 + i * MixerBlock<T>::kStreams);
    }
    decoder_ = ShardedLinear<T>("decoder", K, D, D, {M::NT, false, true, true}, ctx, seed,
                                1 + cfg.n_blocks * MixerBlock<T>::kStreams);
    const VectorSlice vs = vector_slice(cfg.n_vars, true, ctx);
    blend_.name = "blend.weight";
    blend_.value = Tensor<T>({vs.local});
    for (std::size_t k = 0; k < vs.valid; ++k) blend_.value[k] = T(0.5);
    blend_.replication = Replication::ColPeers;
    blend_.global_elements = cfg.n_vars;
    blend_.global_shape = {cfg.n_vars};
    blend_.valid_elements = vs.valid;
    blend_.zero_grad();
    std::vector<Param<T>*> ps;
    append_params(ps);
    params_ = ps;
  }

  WeatherMixer(const WeatherMixer&) = delete;
  WeatherMixer& operator=(const WeatherMixer&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const MpContext& context() const { return ctx_; }
  ShardSpec sample_shard() const { return sample_spec(cfg_, ctx_); }
  /// Local sample block shape for batch size B.
  Shape local_sample_shape(std::size_t B) const {
    const ShardSpec s = sample_shard();
    return {B, cfg_.lat, s.local_rows, s.local_cols};
  }

  ShardedLinear<T>& encoder() { return encoder_; }
  ShardedLinear<T>& decoder() { return decoder_; }
  MixerBlock<T>& block(std::size_t i) { return blocks_.at(i); }
  Param<T>& blend() { return blend_; }

  const std::vector<Param<T>*>& params() { return params_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  /// Local parameter elements resident on this rank.
  std::size_t local_param_elements() const {
    std::size_t s = 0;
    for (const auto* p : params_) s += p->value.size();
    return s;
  }

  /// Seeds the per-rank dropout generator; unused at rate 0.
  void seed_dropout(std::uint64_t seed) { drop_rng_.seed(seed); }

  /// Forecast r steps ahead: encode once, apply the block stack r times,
  /// decode once, blend with the input.
  Tensor<T> forward(Communicator& comm, const Tensor<T>& x, int r, Cache* cache = nullptr,
                    MatmulStats* stats = nullptr) {
    if (r < 1) throw ShapeError("rollout steps must be >= 1, got " + std::to_string(r));
    if (x.ndim() != 4 || x.shape() != local_sample_shape(x.dim(0))) {
      throw ShapeError("model input " + shape_str(x.shape()) + " does not match local sample shape " +
                       shape_str(local_sample_shape(x.ndim() == 4 ? x.dim(0) : 1)));
    }
    Cache local;
    Cache& c = cache ? *cache : local;
    c.r = r;
    c.batch = x.dim(0);
    c.input = x;
    c.patches = to_tokens(x);
    ShardedMatrix<T> z = encoder_.forward(comm, ctx_, c.patches, stats);
    c.blocks.assign(std::size_t(r) * blocks_.size(), {});
    std::mt19937_64* rng = cfg_.dropout_rate > 0 ? &drop_rng_ : nullptr;
    for (int s = 0; s < r; ++s)
      for (std::size_t i = 0; i < blocks_.size(); ++i) {
        z = blocks_[i].forward(comm, ctx_, z, c.blocks[s * blocks_.size() + i], rng, stats);
      }
    c.final_latent = z;
    const ShardedMatrix<T> dec = decoder_.forward(comm, ctx_, z, stats);
    c.decoded = from_tokens(dec.local, c.batch);
    return blend(c.decoded, x);
  }

  /// Accumulates parameter gradients for dL/d(output) = dout. Replicated
  /// vector gradients are summed with their peers before returning.
  void backward(Communicator& comm, const Cache& c, const Tensor<T>& dout, MatmulStats* stats = nullptr) {
    if (c.r < 1 || c.blocks.size() != std::size_t(c.r) * blocks_.size()) {
      throw ShapeError("backward called without a matching forward cache");
    }
    if (dout.shape() != c.input.shape()) {
      throw ShapeError("output gradient " + shape_str(dout.shape()) + " does not match forecast " +
                       shape_str(c.input.shape()));
    }
    const std::size_t C_loc = dout.dim(3);
    const std::size_t valid_c = vector_slice(cfg_.n_vars, true, ctx_).valid;
    Tensor<T> ddec(dout.shape());
    for (std::size_t i = 0; i < dout.size(); ++i) {
      const std::size_t ch = i % C_loc;
      if (ch >= valid_c) continue;
      ddec[i] = blend_.value[ch] * dout[i];
      blend_.grad[ch] += dout[i] * (c.decoded[i] - c.input[i]);
    }
    const ShardedMatrix<T> dd = to_tokens(ddec);
    ShardedMatrix<T> dz = decoder_.backward(comm, ctx_, c.final_latent, dd, stats);
    for (int s = c.r - 1; s >= 0; --s)
      for (std::size_t i = blocks_.size(); i-- > 0;) {
        dz = blocks_[i].backward(comm, ctx_, dz, c.blocks[s * blocks_.size() + i], stats);
      }
    (void)encoder_.backward(comm, ctx_, c.patches, dz, stats);
    for (auto* p : params_) reduce_replicas(comm, ctx_, *p);
  }

  /// Local patch matrix [B*T_loc, K_loc] in model token order.
  ShardedMatrix<T> to_tokens(const Tensor<T>& field) const {
    const std::size_t B = field.dim(0);
    const Tensor<T> p = patchify(field, cfg_.p_lat, cfg_.p_lon);
    const std::size_t Tl = p.dim(1), F = p.dim(2);
    const auto order = token_order(field.dim(2));
    Tensor<T> out({B * Tl, F});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tl; ++t)
        std::copy_n(p.data() + (b * Tl + t) * F, F, out.data() + (b * Tl + order[t]) * F);
    return {std::move(out), B * cfg_.tokens(), cfg_.patch_features()};
  }

  /// Inverse of to_tokens for a local [B*T_loc, K_loc] block.
  Tensor<T> from_tokens(const Tensor<T>& m, std::size_t B) const {
    const ShardSpec s = sample_shard();
    const std::size_t lon_loc = s.local_rows, C_loc = s.local_cols;
    const std::size_t Tl = m.rows() / B, F = m.cols();
    const auto order = token_order(lon_loc);
    Tensor<T> p({B, Tl, F});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tl; ++t)
        std::copy_n(m.data() + (b * Tl + order[t]) * F, F, p.data() + (b * Tl + t) * F);
    return unpatchify(p, cfg_.lat, lon_loc, C_loc, cfg_.p_lat, cfg_.p_lon);
  }

 private:
  std::vector<std::size_t> token_order(std::size_t lon_loc) const {
    const std::size_t lp = lon_loc / cfg_.p_lon;
    return local_token_order(cfg_.lat_patches(), lp, ctx_.n != 4 && lp % 2 == 0);
  }

  Tensor<T> blend(const Tensor<T>& decoded, const Tensor<T>& x) const {
    Tensor<T> out(x.shape());
    const std::size_t C_loc = x.dim(3);
    const std::size_t valid_c = vector_slice(cfg_.n_vars, true, ctx_).valid;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t ch = i % C_loc;
      if (ch >= valid_c) continue;
      const T w = blend_.value[ch];
      out[i] = w * decoded[i] + (T(1) - w) * x[i];
    }
    return out;
  }

  void append_params(std::vector<Param<T>*>& out) {
    encoder_.append_params(out);
    for (auto& b : blocks_) b.append_params(out);
    decoder_.append_params(out);
    out.push_back(&blend_);
  }

  ModelConfig cfg_;
  MpContext ctx_;
  ShardedLinear<T> encoder_, decoder_;
  std::vector<MixerBlock<T>> blocks_;
  Param<T> blend_;
  std::vector<Param<T>*> params_;
  std::mt19937_64 drop_rng_{0};
};

}  // namespace jigsaw
