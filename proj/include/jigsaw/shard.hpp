// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Placement of 2-D blocks on model-parallel ranks.
//
//   n = 1: the whole matrix.
//   n = 2: column halves; rank r holds all rows of column half r.
//   n = 4: 2x2 blocks; rank r holds block (r / 2, r % 2).
//
// Odd split extents are zero-padded on the high side.

#pragma once

#include <string>
#include <vector>

#include "jigsaw/process_group.hpp"
#include "jigsaw/tensor.hpp"

namespace jigsaw {

inline std::size_t half_up(std::size_t d) { return (d + 1) / 2; }

struct ShardSpec {
  int n = 1;
  int rank = 0;
  std::size_t block_row = 0, block_col = 0;
  std::size_t global_rows = 0, global_cols = 0;
  std::size_t local_rows = 0, local_cols = 0;
  std::size_t pad_rows = 0, pad_cols = 0;

  static ShardSpec make(int n, int rank, std::size_t rows, std::size_t cols) {
    if (n != 1 && n != 2 && n != 4) throw ShapeError("shard degree must be 1, 2 or 4");
    if (rank < 0 || rank >= n) throw ShapeError("shard rank out of range");
    ShardSpec s{n, rank, 0, 0, rows, cols, rows, cols, 0, 0};
    if (n >= 2) {
      s.block_col = std::size_t(rank % 2);
      s.local_cols = half_up(cols);
    }
    if (n == 4) {
      s.block_row = std::size_t(rank / 2);
      s.local_rows = half_up(rows);
    }
    s.pad_rows = s.local_rows - s.valid_rows();
    s.pad_cols = s.local_cols - s.valid_cols();
    return s;
  }

  std::size_t row_offset() const { return block_row * local_rows; }
  std::size_t col_offset() const { return block_col * local_cols; }
  std::size_t valid_rows() const {
    return row_offset() >= global_rows ? 0 : std::min(local_rows, global_rows - row_offset());
  }
  std::size_t valid_cols() const {
    return col_offset() >= global_cols ? 0 : std::min(local_cols, global_cols - col_offset());
  }
  Shape local_shape() const { return {local_rows, local_cols}; }
  bool operator==(const ShardSpec&) const = default;
};

/// This rank's block of a global matrix; padding cells are zero.
template <Scalar T>
Tensor<T> shard(const Tensor<T>& global, const ShardSpec& spec) {
  if (global.ndim() != 2 || global.rows() != spec.global_rows || global.cols() != spec.global_cols) {
    throw ShapeError("shard: global " + shape_str(global.shape()) + " does not match spec " +
                     shape_str({spec.global_rows, spec.global_cols}));
  }
  return slice2d(global, spec.row_offset(), spec.local_rows, spec.col_offset(), spec.local_cols);
}

/// Reassembles the global matrix from the blocks of all n ranks (index = rank),
/// stripping padding.
template <Scalar T>
Tensor<T> gather(const std::vector<Tensor<T>>& locals, std::size_t rows, std::size_t cols) {
  const int n = static_cast<int>(locals.size());
  Tensor<T> out({rows, cols});
  for (int r = 0; r < n; ++r) {
    const ShardSpec s = ShardSpec::make(n, r, rows, cols);
    if (locals[r].shape() != s.local_shape()) {
      throw ShapeError("gather: rank " + std::to_string(r) + " block " + shape_str(locals[r].shape()) +
                       " inconsistent with expected " + shape_str(s.local_shape()));
    }
    place2d(out, locals[r], s.row_offset(), s.col_offset());
  }
  return out;
}

/// shard() applied to every trailing [rows, cols] matrix of a tensor with
/// leading batch dims, e.g. a [B, lat, lon, C] sample split over (lon, C).
template <Scalar T>
Tensor<T> shard_trailing(const Tensor<T>& global, const ShardSpec& spec) {
  const std::size_t nd = global.ndim();
  if (nd < 2 || global.dim(nd - 2) != spec.global_rows || global.dim(nd - 1) != spec.global_cols) {
    throw ShapeError("shard_trailing: tensor " + shape_str(global.shape()) + " does not match spec " +
                     shape_str({spec.global_rows, spec.global_cols}));
  }
  Shape out_shape = global.shape();
  out_shape[nd - 2] = spec.local_rows;
  out_shape[nd - 1] = spec.local_cols;
  Tensor<T> out(out_shape);
  const std::size_t lead = global.size() / (spec.global_rows * spec.global_cols);
  const std::size_t gin = spec.global_rows * spec.global_cols, lout = spec.local_rows * spec.local_cols;
  for (std::size_t b = 0; b < lead; ++b)
    for (std::size_t i = 0; i < spec.valid_rows(); ++i)
      for (std::size_t j = 0; j < spec.valid_cols(); ++j)
        out[b * lout + i * spec.local_cols + j] =
            global[b * gin + (spec.row_offset() + i) * spec.global_cols + spec.col_offset() + j];
  return out;
}

/// Inverse of shard_trailing over all n ranks (index = rank).
template <Scalar T>
Tensor<T> gather_trailing(const std::vector<Tensor<T>>& locals, std::size_t rows, std::size_t cols) {
  const int n = static_cast<int>(locals.size());
  Shape shape = locals.at(0).shape();
  const std::size_t nd = shape.size();
  if (nd < 2) throw ShapeError("gather_trailing: blocks must have at least 2 dims");
  shape[nd - 2] = rows;
  shape[nd - 1] = cols;
  Tensor<T> out(shape);
  const std::size_t lead = out.size() / (rows * cols);
  for (int r = 0; r < n; ++r) {
    const ShardSpec s = ShardSpec::make(n, r, rows, cols);
    const auto& l = locals[r];
    if (l.ndim() != nd || l.dim(nd - 2) != s.local_rows || l.dim(nd - 1) != s.local_cols ||
        l.size() != lead * s.local_rows * s.local_cols) {
      throw ShapeError("gather_trailing: rank " + std::to_string(r) + " block " + shape_str(l.shape()) +
                       " inconsistent with its shard spec");
    }
    const std::size_t lin = s.local_rows * s.local_cols;
    for (std::size_t b = 0; b < lead; ++b)
      for (std::size_t i = 0; i < s.valid_rows(); ++i)
        for (std::size_t j = 0; j < s.valid_cols(); ++j)
          out[b * rows * cols + (s.row_offset() + i) * cols + s.col_offset() + j] = l[b * lin + i * s.local_cols + j];
  }
  return out;
}

/// A rank's block together with the global extents it belongs to.
template <Scalar T>
struct ShardedMatrix {
  Tensor<T> local;
  std::size_t rows = 0, cols = 0;

  ShardSpec spec(const MpContext& ctx) const { return ShardSpec::make(ctx.n, ctx.mp_rank, rows, cols); }

  static ShardedMatrix from_global(const Tensor<T>& g, const MpContext& ctx) {
    return {shard(g, ShardSpec::make(ctx.n, ctx.mp_rank, g.rows(), g.cols())), g.rows(), g.cols()};
  }
  static ShardedMatrix zeros(std::size_t rows, std::size_t cols, const MpContext& ctx) {
    return {Tensor<T>(ShardSpec::make(ctx.n, ctx.mp_rank, rows, cols).local_shape()), rows, cols};
  }
};

/// Zeroes the padding cells of a local block.
template <Scalar T>
void clear_padding(Tensor<T>& local, const ShardSpec& s) {
  for (std::size_t i = 0; i < local.rows(); ++i)
    for (std::size_t j = 0; j < local.cols(); ++j)
      if (i >= s.valid_rows() || j >= s.valid_cols()) local(i, j) = T(0);
}

}  // namespace jigsaw
