// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Zero-redundancy sharded matrix products.
//
// Every operand and result lives in the block layout of shard.hpp. A product
// C = op(A)·op(B) is decomposed into block terms C_ij += opA_il · opB_lj. Each
// term is computed on one rank chosen by a fixed rule:
//
//   1. a rank holding both operand blocks computes it (the owner of C_ij if
//      it qualifies);
//   2. otherwise the owner of C_ij computes it if it holds one operand, and
//      the missing operand block is shipped to it;
//   3. otherwise the owner of the B block computes it after receiving the
//      A block, and ships the partial product to the owner of C_ij.
//
// For Y = X·Wᵀ this reproduces the 2-way exchange of partial sums
// X_r·W_{r,1-r}ᵀ, and in 4-way mode: rank 1 sends X1·W1ᵀ to rank 0, rank 2
// sends X2·W2ᵀ to rank 3, rank 0 ships W0 and X0 to rank 2 which returns
// X0·W2ᵀ to rank 1, and rank 3 ships W3 and X3 to rank 1 which returns
// X3·W1ᵀ to rank 2. No rank ever holds a full operand.
//
// Within a call all sends are issued before local terms are computed, and
// partial products are awaited only afterwards; contributions to a block are
// summed in ascending inner-block order, so results are deterministic.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "jigsaw/comm.hpp"
#include "jigsaw/ops.hpp"
#include "jigsaw/process_group.hpp"
#include "jigsaw/shard.hpp"

namespace jigsaw {

struct BlockPlan {
  struct Term {
    std::size_t i, j, l;
    int a_owner, b_owner, c_owner, compute;
  };
  struct Shipment {
    int operand;  // 0 = A, 1 = B
    std::size_t p, q;
    int src, dst;
  };

  MatmulMode mode{};
  int n = 1;
  std::size_t I = 0, J = 0, L = 0;       // global extents of C (I x J) and the inner dim
  std::size_t sI = 1, sJ = 1, sL = 1;    // number of blocks per dim
  std::size_t bI = 0, bJ = 0, bL = 0;    // block extents
  std::vector<Term> terms;
  std::vector<Shipment> shipments;

  /// Stored (row, col) block coordinates of the A / B operand in a term.
  std::pair<std::size_t, std::size_t> a_block(const Term& t) const {
    return mode == MatmulMode::TN ? std::pair{t.l, t.i} : std::pair{t.i, t.l};
  }
  std::pair<std::size_t, std::size_t> b_block(const Term& t) const {
    return mode == MatmulMode::NT ? std::pair{t.j, t.l} : std::pair{t.l, t.j};
  }
  std::pair<std::size_t, std::size_t> a_extent() const {
    return mode == MatmulMode::TN ? std::pair{bL, bI} : std::pair{bI, bL};
  }
  std::pair<std::size_t, std::size_t> b_extent() const {
    return mode == MatmulMode::NT ? std::pair{bJ, bL} : std::pair{bL, bJ};
  }
  int owner(std::size_t p, std::size_t q) const { return n == 4 ? int(2 * p + q) : n == 2 ? int(q) : 0; }

  std::optional<std::size_t> shipment_index(int operand, std::size_t p, std::size_t q, int dst) const {
    for (std::size_t s = 0; s < shipments.size(); ++s) {
      const auto& sh = shipments[s];
      if (sh.operand == operand && sh.p == p && sh.q == q && sh.dst == dst) return s;
    }
    return std::nullopt;
  }
};

/// Block schedule for op(A)·op(B) with A stored a_rows x a_cols, B stored
/// b_rows x b_cols, on an n-way group.
inline BlockPlan plan_product(std::size_t a_rows, std::size_t a_cols, std::size_t b_rows, std::size_t b_cols,
                              MatmulMode mode, int n) {
  const ProductDims d = product_dims({a_rows, a_cols}, {b_rows, b_cols}, mode);
  BlockPlan p;
  p.mode = mode;
  p.n = n;
  p.I = d.rows;
  p.J = d.cols;
  p.L = d.inner;
  // In 2-way mode only column dims are partitioned; a dim is split into
  // halves if it is the column dim of A, B, or C.
  bool split_I = n == 4, split_J = n >= 2, split_L = n == 4;
  if (n == 2) {
    if (mode == MatmulMode::TN) split_I = true;
    else split_L = true;
  }
  p.sI = split_I ? 2 : 1;
  p.sJ = split_J ? 2 : 1;
  p.sL = split_L ? 2 : 1;
  p.bI = split_I ? half_up(p.I) : p.I;
  p.bJ = split_J ? half_up(p.J) : p.J;
  p.bL = split_L ? half_up(p.L) : p.L;

  for (std::size_t i = 0; i < p.sI; ++i)
    for (std::size_t j = 0; j < p.sJ; ++j)
      for (std::size_t l = 0; l < p.sL; ++l) {
        BlockPlan::Term t{i, j, l, 0, 0, 0, 0};
        const auto [ap, aq] = p.a_block(t);
        const auto [bp, bq] = p.b_block(t);
        t.a_owner = p.owner(ap, aq);
        t.b_owner = p.owner(bp, bq);
        t.c_owner = p.owner(i, j);
        if (t.a_owner == t.b_owner) t.compute = t.a_owner;
        else if (t.c_owner == t.a_owner || t.c_owner == t.b_owner) t.compute = t.c_owner;
        else t.compute = t.b_owner;
        p.terms.push_back(t);
        if (t.a_owner != t.compute && !p.shipment_index(0, ap, aq, t.compute)) {
          p.shipments.push_back({0, ap, aq, t.a_owner, t.compute});
        }
        if (t.b_owner != t.compute && !p.shipment_index(1, bp, bq, t.compute)) {
          p.shipments.push_back({1, bp, bq, t.b_owner, t.compute});
        }
      }
  return p;
}

struct MatmulStats {
  std::uint64_t flops = 0;
  std::uint64_t elements_sent = 0;
  std::uint64_t messages_sent = 0;
  std::uint64_t peak_buffer_elements = 0;

  MatmulStats& operator+=(const MatmulStats& o) {
    flops += o.flops;
    elements_sent += o.elements_sent;
    messages_sent += o.messages_sent;
    peak_buffer_elements = std::max(peak_buffer_elements, o.peak_buffer_elements);
    return *this;
  }
};

namespace detail {

inline constexpr std::uint64_t kProductSlot = 2048;

template <Scalar T>
Tensor<T> extract_block(const ShardedMatrix<T>& m, int n, std::size_t p, std::size_t q, std::size_t bp,
                        std::size_t bq) {
  (void)q;
  const std::size_t row_off = n == 4 ? 0 : p * bp;
  return slice2d(m.local, row_off, bp, 0, bq);
}

template <Scalar T>
void check_local(const ShardedMatrix<T>& m, const MpContext& ctx, const char* what) {
  const Shape want = m.spec(ctx).local_shape();
  if (m.local.shape() != want) {
    throw ShapeError(std::string("sharded operand ") + what + " has local shape " + shape_str(m.local.shape()) +
                     ", expected " + shape_str(want) + " for global " + shape_str({m.rows, m.cols}));
  }
}

}  // namespace detail

/// Collective over the mp group: returns this rank's block of op(A)·op(B).
template <Scalar T>
ShardedMatrix<T> sharded_matmul(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& a,
                                const ShardedMatrix<T>& b, MatmulMode mode, MatmulStats* stats = nullptr) {
  detail::check_local(a, ctx, "A");
  detail::check_local(b, ctx, "B");
  const BlockPlan plan = plan_product(a.rows, a.cols, b.rows, b.cols, mode, ctx.n);
  ShardedMatrix<T> c = ShardedMatrix<T>::zeros(plan.I, plan.J, ctx);
  MatmulStats local_stats;

  if (ctx.n == 1) {
    c.local = matmul(a.local, b.local, mode);
    local_stats.flops = matmul_flops(product_dims({a.rows, a.cols}, {b.rows, b.cols}, mode));
    if (stats) *stats += local_stats;
    return c;
  }

  const int me = ctx.mp_rank;
  const auto [aP, aQ] = plan.a_extent();
  const auto [bP, bQ] = plan.b_extent();
  const std::uint64_t base = comm.next_collective_tag(ctx.members);
  const auto sent_before = comm.counters();

  std::vector<PendingTransfer<T>> sends;
  std::map<std::tuple<int, std::size_t, std::size_t>, Tensor<T>> received;
  std::uint64_t buffered = 0;

  auto own_block = [&](int operand, std::size_t p, std::size_t q) {
    return operand == 0 ? detail::extract_block(a, ctx.n, p, q, aP, aQ)
                        : detail::extract_block(b, ctx.n, p, q, bP, bQ);
  };
  auto operand_block = [&](int operand, std::size_t p, std::size_t q, int owner) -> Tensor<T> {
    if (owner == me) return own_block(operand, p, q);
    const auto key = std::make_tuple(operand, p, q);
    auto it = received.find(key);
    if (it == received.end()) {
      const auto s = plan.shipment_index(operand, p, q, me);
      Tensor<T> blk = comm.recv<T>(ctx.global(owner), base + *s);
      buffered += blk.size();
      it = received.emplace(key, std::move(blk)).first;
    }
    return it->second;
  };
  auto compute_term = [&](const BlockPlan::Term& t) {
    const auto [ap, aq] = plan.a_block(t);
    const auto [bp, bq] = plan.b_block(t);
    Tensor<T> x = operand_block(0, ap, aq, t.a_owner);
    Tensor<T> y = operand_block(1, bp, bq, t.b_owner);
    local_stats.flops += matmul_flops(product_dims(x.shape(), y.shape(), mode));
    return matmul(x, y, mode);
  };
  auto needs_shipment = [&](const BlockPlan::Term& t) { return t.a_owner != me || t.b_owner != me; };

  // Operand shipments leave first.
  for (std::size_t s = 0; s < plan.shipments.size(); ++s) {
    const auto& sh = plan.shipments[s];
    if (sh.src == me) sends.push_back(comm.isend(ctx.global(sh.dst), base + s, own_block(sh.operand, sh.p, sh.q)));
  }
  // Partial products for other ranks: those computable from local blocks,
  // then those waiting on a shipped operand.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t ti = 0; ti < plan.terms.size(); ++ti) {
      const auto& t = plan.terms[ti];
      if (t.compute != me || t.c_owner == me || needs_shipment(t) != (pass == 1)) continue;
      sends.push_back(comm.isend(ctx.global(t.c_owner), base + detail::kProductSlot + ti, compute_term(t)));
    }
  }
  // Local terms overlap with the transfers above.
  std::vector<std::optional<Tensor<T>>> contrib(plan.terms.size());
  for (std::size_t ti = 0; ti < plan.terms.size(); ++ti) {
    const auto& t = plan.terms[ti];
    if (t.c_owner == me && t.compute == me) contrib[ti] = compute_term(t);
  }
  for (std::size_t ti = 0; ti < plan.terms.size(); ++ti) {
    const auto& t = plan.terms[ti];
    if (t.c_owner == me && t.compute != me) {
      contrib[ti] = comm.recv<T>(ctx.global(t.compute), base + detail::kProductSlot + ti);
      buffered += contrib[ti]->size();
    }
  }
  for (std::size_t i = 0; i < plan.sI; ++i)
    for (std::size_t j = 0; j < plan.sJ; ++j) {
      if (plan.owner(i, j) != me) continue;
      std::optional<Tensor<T>> acc;
      for (std::size_t ti = 0; ti < plan.terms.size(); ++ti) {
        const auto& t = plan.terms[ti];
        if (t.i != i || t.j != j) continue;
        if (!acc) acc = std::move(*contrib[ti]);
        else *acc += *contrib[ti];
      }
      place2d(c.local, *acc, ctx.n == 4 ? 0 : i * plan.bI, 0);
    }
  for (auto& s : sends) comm.wait(s);

  local_stats.elements_sent = comm.counters().elements_sent - sent_before.elements_sent;
  local_stats.messages_sent = comm.counters().messages_sent - sent_before.messages_sent;
  local_stats.peak_buffer_elements = buffered;
  if (stats) *stats += local_stats;
  return c;
}

// --------------------------------------------------------- comm volume

/// Elements each rank sends for one sharded product, derived by hand from
/// the block equations (not from the planner).
struct CommVolumeReport {
  std::vector<std::uint64_t> sent_per_rank;
  std::vector<std::uint64_t> received_per_rank;

  std::uint64_t total_sent() const {
    std::uint64_t s = 0;
    for (auto v : sent_per_rank) s += v;
    return s;
  }
  std::uint64_t total_received() const {
    std::uint64_t s = 0;
    for (auto v : received_per_rank) s += v;
    return s;
  }
};

/// `m`, `k`, `n_out` follow the stored operand shapes: NT: X m×k, W n_out×k;
/// NN: X m×k, W k×n_out; TN: X m×k, W m×n_out.
inline CommVolumeReport comm_volume(std::size_t m, std::size_t k, std::size_t n_out, int n_way,
                                    MatmulMode mode = MatmulMode::NT) {
  if (m == 0 || k == 0 || n_out == 0) throw ShapeError("comm_volume: dimensions must be positive");
  CommVolumeReport r;
  r.sent_per_rank.assign(n_way, 0);
  r.received_per_rank.assign(n_way, 0);
  if (n_way == 1) return r;
  const std::uint64_t hm = half_up(m), hk = half_up(k), ho = half_up(n_out);
  auto& s = r.sent_per_rank;
  auto& rcv = r.received_per_rank;
  if (n_way == 2) {
    // NT: partial sums X_r W_{r,1-r}ᵀ of size m × o/2.
    // NN / TN: the peer's X column half (m × k/2) is shipped to the W owner.
    const std::uint64_t v = mode == MatmulMode::NT ? m * ho : m * hk;
    s = {v, v};
    rcv = {v, v};
    return r;
  }
  if (n_way != 4) throw ShapeError("comm_volume: n_way must be 1, 2 or 4");
  const std::uint64_t xb = hm * hk;
  switch (mode) {
    case MatmulMode::NT: {
      const std::uint64_t wb = ho * hk, yb = hm * ho;
      s = {xb + wb, 2 * yb, 2 * yb, xb + wb};
      rcv = {yb, xb + wb + yb, xb + wb + yb, yb};
      break;
    }
    case MatmulMode::NN: {
      const std::uint64_t wb = hk * ho, yb = hm * ho;
      s = {xb + wb, xb + yb, xb + yb, wb + xb};
      rcv = {yb, xb + xb + wb, wb + xb + xb, yb};
      break;
    }
    case MatmulMode::TN: {
      const std::uint64_t yb = hk * ho;
      s = {xb + yb, xb + yb, xb + yb, xb + yb};
      rcv = {yb + xb, xb + yb, yb + xb, xb + yb};
      break;
    }
  }
  return r;
}

// ------------------------------------------------------ vectors, params

/// Which peers hold a replica of a vector parameter. Column vectors (indexed
/// by a column dim) are replicated across the two row halves in 4-way mode;
/// row vectors are replicated across column halves whenever n >= 2.
enum class Replication : std::uint8_t { None, ColPeers, RowPeers };

inline std::optional<int> replica_peer(const MpContext& ctx, Replication r) {
  if (r == Replication::ColPeers && ctx.n == 4) return ctx.col_peer();
  if (r == Replication::RowPeers && ctx.n >= 2) return ctx.row_peer();
  return std::nullopt;
}

/// True on exactly one member of each replica set.
inline bool is_primary_replica(const MpContext& ctx, Replication r) {
  const auto p = replica_peer(ctx, r);
  return !p || ctx.mp_rank < *p;
}

template <Scalar T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Replication replication = Replication::None;
  bool encdec = false;
  std::size_t global_elements = 0;
  std::size_t valid_elements = 0;  // local elements excluding padding
  Shape global_shape;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

/// Local slice of a vector aligned with a sharded dim: `along_cols` selects
/// the column half (n >= 2), otherwise the row half (n == 4).
struct VectorSlice {
  std::size_t offset = 0, local = 0, valid = 0;
};

inline VectorSlice vector_slice(std::size_t length, bool along_cols, const MpContext& ctx) {
  const bool split = along_cols ? ctx.n >= 2 : ctx.n == 4;
  if (!split) return {0, length, length};
  const std::size_t h = half_up(length);
  const std::size_t off = (along_cols ? ctx.block_col() : ctx.block_row()) * h;
  return {off, h, off >= length ? 0 : std::min(h, length - off)};
}

/// Reassembles a parameter (or its gradient) from the per-rank local
/// tensors of an n-way group.
template <Scalar T>
Tensor<T> gather_param(const std::vector<Tensor<T>>& locals, const Param<T>& meta) {
  const int n = int(locals.size());
  if (meta.global_shape.size() == 2) return gather(locals, meta.global_shape[0], meta.global_shape[1]);
  const std::size_t len = meta.global_elements;
  Tensor<T> out({len});
  for (int r = 0; r < n; ++r) {
    const MpContext ctx{n, r, {}};
    const VectorSlice vs = vector_slice(len, meta.replication != Replication::RowPeers, ctx);
    for (std::size_t k = 0; k < vs.valid; ++k) out[vs.offset + k] = locals[r][k];
  }
  return out;
}

/// Adds `delta` to global element `index` of a parameter on whichever ranks
/// hold it (every replica for vectors).
template <Scalar T>
void perturb_global(Param<T>& p, const MpContext& ctx, std::size_t index, T delta) {
  if (p.global_shape.size() == 2) {
    const std::size_t rows = p.global_shape[0], cols = p.global_shape[1];
    const ShardSpec s = ShardSpec::make(ctx.n, ctx.mp_rank, rows, cols);
    const std::size_t i = index / cols, j = index % cols;
    if (i >= s.row_offset() && i < s.row_offset() + s.valid_rows() && j >= s.col_offset() &&
        j < s.col_offset() + s.valid_cols()) {
      p.value(i - s.row_offset(), j - s.col_offset()) += delta;
    }
    return;
  }
  const VectorSlice vs = vector_slice(p.global_elements, p.replication != Replication::RowPeers, ctx);
  if (index >= vs.offset && index < vs.offset + vs.valid) p.value[index - vs.offset] += delta;
}

/// Sums a vector gradient over its replicas so all copies stay identical.
template <Scalar T>
void reduce_replicas(Communicator& comm, const MpContext& ctx, Param<T>& p) {
  if (const auto peer = replica_peer(ctx, p.replication)) {
    p.grad = comm.pairwise_reduce_sum(ctx.global(*peer), p.grad);
  }
}

// -------------------------------------------------------- linear layer

/// Counter-based uniform init: value depends only on (seed, stream, global
/// index), so every rank materializes exactly its own block of a common
/// global initialization.
inline double hashed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ull ^ (stream + 0x632be59bd9b4e019ull) * 0xbf58476d1ce4e5b9ull ^ index;
  for (int i = 0; i < 2; ++i) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
  }
  return double(z >> 11) * 0x1.0p-53;
}

/// Sharded linear layer. With the weight on the right it computes op(X, W);
/// with `weight_left` it computes op(W, X). The bias is sharded along the
/// output dim it is indexed by and added after the partial-sum reduction.
template <Scalar T>
class ShardedLinear {
 public:
  struct Options {
    MatmulMode mode = MatmulMode::NT;
    bool weight_left = false;
    bool bias = true;
    bool encdec = false;
  };

  ShardedLinear() = default;

  /// Weight stored as `w_rows` x `w_cols`; `fan_in` scales the init range.
  ShardedLinear(std::string name, std::size_t w_rows, std::size_t w_cols, std::size_t fan_in, Options opt,
                const MpContext& ctx, std::uint64_t seed, std::uint64_t stream)
      : opt_(opt), w_rows_(w_rows), w_cols_(w_cols) {
    const ShardSpec s = ShardSpec::make(ctx.n, ctx.mp_rank, w_rows, w_cols);
    weight_.name = name + ".weight";
    weight_.value = Tensor<T>(s.local_shape());
    weight_.encdec = opt.encdec;
    weight_.global_elements = w_rows * w_cols;
    weight_.global_shape = {w_rows, w_cols};
    weight_.valid_elements = s.valid_rows() * s.valid_cols();
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (std::size_t i = 0; i < s.valid_rows(); ++i)
      for (std::size_t j = 0; j < s.valid_cols(); ++j) {
        const std::uint64_t gidx = (s.row_offset() + i) * w_cols + s.col_offset() + j;
        weight_.value(i, j) = T((2.0 * hashed_uniform(seed, stream, gidx) - 1.0) * bound);
      }
    weight_.zero_grad();
    if (opt.bias) {
      bias_along_cols_ = !opt.weight_left;
      const std::size_t len = bias_length();
      const VectorSlice vs = vector_slice(len, bias_along_cols_, ctx);
      bias_.name = name + ".bias";
      bias_.value = Tensor<T>({vs.local});
      bias_.replication = bias_along_cols_ ? Replication::ColPeers : Replication::RowPeers;
      bias_.encdec = opt.encdec;
      bias_.global_elements = len;
      bias_.global_shape = {len};
      bias_.valid_elements = vs.valid;
      bias_.zero_grad();
    }
  }

  const Options& options() const { return opt_; }
  Param<T>& weight() { return weight_; }
  const Param<T>& weight() const { return weight_; }
  bool has_bias() const { return opt_.bias; }
  Param<T>& bias() { return bias_; }
  std::size_t weight_rows() const { return w_rows_; }
  std::size_t weight_cols() const { return w_cols_; }

  ShardedMatrix<T> weight_matrix() const { return {weight_.value, w_rows_, w_cols_}; }

  /// Replaces the weight with this rank's block of a global matrix.
  void set_global_weight(const Tensor<T>& global, const MpContext& ctx) {
    if (global.shape() != Shape{w_rows_, w_cols_}) {
      throw ShapeError(weight_.name + ": global weight " + shape_str(global.shape()) + " != " +
                       shape_str({w_rows_, w_cols_}));
    }
    weight_.value = shard(global, ShardSpec::make(ctx.n, ctx.mp_rank, w_rows_, w_cols_));
  }

  void append_params(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    if (opt_.bias) out.push_back(&bias_);
  }

  ShardedMatrix<T> forward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                           MatmulStats* stats = nullptr) const {
    const ShardedMatrix<T> w = weight_matrix();
    ShardedMatrix<T> y = opt_.weight_left ? sharded_matmul(comm, ctx, w, x, opt_.mode, stats)
                                          : sharded_matmul(comm, ctx, x, w, opt_.mode, stats);
    if (opt_.bias) add_bias(y);
    return y;
  }

  struct Grads {
    ShardedMatrix<T> dx, dw;
  };

  /// Accumulates weight/bias gradients and returns dL/dX. Bias gradients are
  /// local partial sums; call reduce_replicas before using them.
  ShardedMatrix<T> backward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                            const ShardedMatrix<T>& dy, MatmulStats* stats = nullptr) {
    return backward_with_weight_grad(comm, ctx, x, dy, stats).dx;
  }

  /// As backward, also returning this call's weight gradient block.
  Grads backward_with_weight_grad(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                                  const ShardedMatrix<T>& dy, MatmulStats* stats = nullptr) {
    const ShardedMatrix<T> w = weight_matrix();
    ShardedMatrix<T> dw, dx;
    using M = MatmulMode;
    if (!opt_.weight_left) {
      switch (opt_.mode) {
        case M::NT:  // Y = X Wᵀ
          dx = sharded_matmul(comm, ctx, dy, w, M::NN, stats);
          dw = sharded_matmul(comm, ctx, dy, x, M::TN, stats);
          break;
        case M::NN:  // Y = X W
          dx = sharded_matmul(comm, ctx, dy, w, M::NT, stats);
          dw = sharded_matmul(comm, ctx, x, dy, M::TN, stats);
          break;
        case M::TN:  // Y = Xᵀ W
          dx = sharded_matmul(comm, ctx, w, dy, M::NT, stats);
          dw = sharded_matmul(comm, ctx, x, dy, M::NN, stats);
          break;
      }
    } else {
      switch (opt_.mode) {
        case M::NT:  // Y = W Xᵀ
          dw = sharded_matmul(comm, ctx, dy, x, M::NN, stats);
          dx = sharded_matmul(comm, ctx, dy, w, M::TN, stats);
          break;
        case M::NN:  // Y = W X
          dw = sharded_matmul(comm, ctx, dy, x, M::NT, stats);
          dx = sharded_matmul(comm, ctx, w, dy, M::TN, stats);
          break;
        case M::TN:  // Y = Wᵀ X
          dw = sharded_matmul(comm, ctx, x, dy, M::NT, stats);
          dx = sharded_matmul(comm, ctx, w, dy, M::NN, stats);
          break;
      }
    }
    clear_padding(dw.local, dw.spec(ctx));
    clear_padding(dx.local, dx.spec(ctx));
    weight_.grad += dw.local;
    if (opt_.bias) accumulate_bias_grad(dy, ctx);
    return {std::move(dx), std::move(dw)};
  }

 private:
  std::size_t bias_length() const {
    // Output extent along the bias axis.
    using M = MatmulMode;
    if (!opt_.weight_left) return opt_.mode == M::NT ? w_rows_ : w_cols_;
    return opt_.mode == M::TN ? w_cols_ : w_rows_;
  }

  void add_bias(ShardedMatrix<T>& y) const {
    auto& t = y.local;
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) t(i, j) += bias_.value[bias_along_cols_ ? j : i];
  }

  void accumulate_bias_grad(const ShardedMatrix<T>& dy, const MpContext& ctx) {
    const auto& t = dy.local;
    const VectorSlice vs = vector_slice(bias_.global_elements, bias_along_cols_, ctx);
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) {
        const std::size_t k = bias_along_cols_ ? j : i;
        if (k < vs.valid) bias_.grad[k] += t(i, j);
      }
  }

  Options opt_;
  std::size_t w_rows_ = 0, w_cols_ = 0;
  Param<T> weight_, bias_;
  bool bias_along_cols_ = true;
};

// Named entry points for the 2- and 4-way schedules. They are the same
// collective; the wrappers only pin the group size.

template <Scalar T>
ShardedMatrix<T> jigsaw_linear_forward_2way(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                                            const ShardedLinear<T>& layer, MatmulStats* stats = nullptr) {
  if (ctx.n != 2) throw ShapeError("jigsaw_linear_forward_2way called on a " + std::to_string(ctx.n) + "-way group");
  return layer.forward(comm, ctx, x, stats);
}

template <Scalar T>
ShardedMatrix<T> jigsaw_linear_forward_4way(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                                            const ShardedLinear<T>& layer, MatmulStats* stats = nullptr) {
  if (ctx.n != 4) throw ShapeError("jigsaw_linear_forward_4way called on a " + std::to_string(ctx.n) + "-way group");
  return layer.forward(comm, ctx, x, stats);
}

template <Scalar T>
typename ShardedLinear<T>::Grads jigsaw_linear_backward_2way(Communicator& comm, const MpContext& ctx,
                                                            const ShardedMatrix<T>& dy, const ShardedMatrix<T>& x,
                                                            ShardedLinear<T>& layer, MatmulStats* stats = nullptr) {
  if (ctx.n != 2) throw ShapeError("jigsaw_linear_backward_2way called on a " + std::to_string(ctx.n) + "-way group");
  return layer.backward_with_weight_grad(comm, ctx, x, dy, stats);
}

template <Scalar T>
typename ShardedLinear<T>::Grads jigsaw_linear_backward_4way(Communicator& comm, const MpContext& ctx,
                                                            const ShardedMatrix<T>& dy, const ShardedMatrix<T>& x,
                                                            ShardedLinear<T>& layer, MatmulStats* stats = nullptr) {
  if (ctx.n != 4) throw ShapeError("jigsaw_linear_backward_4way called on a " + std::to_string(ctx.n) + "-way group");
  return layer.backward_with_weight_grad(comm, ctx, x, dy, stats);
}

/// XᵀW without materializing the transpose.
template <Scalar T>
ShardedMatrix<T> jigsaw_transposed_mlp_forward(Communicator& comm, const MpContext& ctx, const ShardedMatrix<T>& x,
                                               const ShardedLinear<T>& layer, MatmulStats* stats = nullptr) {
  if (layer.options().mode != MatmulMode::TN || layer.options().weight_left) {
    throw ShapeError("transposed MLP layer must use TN mode with the weight on the right");
  }
  return layer.forward(comm, ctx, x, stats);
}

}  // namespace jigsaw
