// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "jigsaw/comm.hpp"

namespace jigsaw {

/// World partitioned into model-parallel groups (consecutive blocks of n
/// ranks, one model instance each) and data-parallel groups (ranks with
/// equal r % n, holding the same shard).
class ProcessGroup {
 public:
  ProcessGroup(int world_size, int n_way, RankId rank) : world_(world_size), n_(n_way), rank_(rank) {
    if (n_way != 1 && n_way != 2 && n_way != 4) {
      throw ConfigError("model-parallel degree must be 1, 2 or 4, got " + std::to_string(n_way));
    }
    if (world_size < 1 || world_size % n_way != 0) {
      throw ConfigError("world size " + std::to_string(world_size) + " is not a multiple of n_way " +
                        std::to_string(n_way));
    }
    if (rank < 0 || rank >= world_size) throw ConfigError("rank " + std::to_string(rank) + " outside world");
  }

  int world_size() const { return world_; }
  int n_way() const { return n_; }
  RankId rank() const { return rank_; }
  int mp_rank() const { return rank_ % n_; }
  int replica() const { return rank_ / n_; }
  int dp_replicas() const { return world_ / n_; }

  RankId mp_member(int mp_rank) const { return replica() * n_ + mp_rank; }

  std::vector<RankId> mp_group() const {
    std::vector<RankId> g;
    for (int i = 0; i < n_; ++i) g.push_back(mp_member(i));
    return g;
  }

  std::vector<RankId> dp_group() const { return dp_group_of(world_, n_, mp_rank()); }

  static std::vector<RankId> dp_group_of(int world, int n, int residue) {
    std::vector<RankId> g;
    for (RankId r = 0; r < world; ++r)
      if (r % n == residue) g.push_back(r);
    return g;
  }

  static std::vector<std::vector<RankId>> dp_groups(int world, int n) {
    std::vector<std::vector<RankId>> gs;
    for (int c = 0; c < n; ++c) gs.push_back(dp_group_of(world, n, c));
    return gs;
  }

 private:
  int world_, n_;
  RankId rank_;
};

/// View of one model-parallel group from the calling rank.
struct MpContext {
  int n = 1;
  int mp_rank = 0;
  std::vector<RankId> members{0};

  static MpContext from(const ProcessGroup& pg) { return {pg.n_way(), pg.mp_rank(), pg.mp_group()}; }
  static MpContext serial(RankId self) { return {1, 0, {self}}; }

  RankId global(int mp) const { return members.at(mp); }
  /// Rank holding the same rows but the other column half (n >= 2).
  int row_peer() const { return mp_rank ^ 1; }
  /// Rank holding the same columns but the other row half (n == 4).
  int col_peer() const { return mp_rank ^ 2; }
  std::size_t block_row() const { return n == 4 ? std::size_t(mp_rank / 2) : 0; }
  std::size_t block_col() const { return n >= 2 ? std::size_t(mp_rank % 2) : 0; }
};

}  // namespace jigsaw
