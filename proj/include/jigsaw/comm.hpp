// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rank-addressed message passing. A Communicator wraps one rank's end of a
// Transport; transports only move frames, all matching happens in Mailbox.

#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "jigsaw/tensor.hpp"

namespace jigsaw {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

using RankId = int;

inline constexpr char kFrameMagic[4] = {'J', 'G', 'S', 'W'};

struct Frame {
  std::uint32_t src = 0;
  std::uint32_t dst = 0;
  std::uint64_t tag = 0;
  DType dtype = DType::F64;
  Shape dims;
  std::vector<std::byte> payload;

  std::size_t elements() const { return numel(dims); }
};

namespace detail {
template <typename V>
void put(std::vector<std::byte>& out, V v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}
template <typename V>
V get(const std::byte* p) {
  V v;
  std::memcpy(&v, p, sizeof(V));
  return v;
}
}  // namespace detail

/// Header bytes: magic | u32 src | u32 dst | u64 tag | u8 dtype | u8 ndim | ndim x u64.
inline std::size_t frame_header_size(std::size_t ndim) { return 4 + 4 + 4 + 8 + 1 + 1 + 8 * ndim; }

inline std::vector<std::byte> encode_frame(const Frame& f) {
  if (f.dims.size() > 255) throw CommError("frame: too many dimensions");
  std::vector<std::byte> out;
  out.reserve(frame_header_size(f.dims.size()) + f.payload.size());
  for (char c : kFrameMagic) out.push_back(std::byte(c));
  detail::put(out, f.src);
  detail::put(out, f.dst);
  detail::put(out, f.tag);
  detail::put(out, static_cast<std::uint8_t>(f.dtype));
  detail::put(out, static_cast<std::uint8_t>(f.dims.size()));
  for (auto d : f.dims) detail::put(out, static_cast<std::uint64_t>(d));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

/// Parses the fixed part of a header; returns ndim. Throws on bad magic.
inline std::uint8_t decode_frame_prefix(const std::byte* p, Frame& f) {
  if (std::memcmp(p, kFrameMagic, 4) != 0) throw CommError("frame: bad magic");
  f.src = detail::get<std::uint32_t>(p + 4);
  f.dst = detail::get<std::uint32_t>(p + 8);
  f.tag = detail::get<std::uint64_t>(p + 12);
  const auto dt = detail::get<std::uint8_t>(p + 20);
  if (dt > 1) throw CommError("frame: unknown dtype code " + std::to_string(dt));
  f.dtype = static_cast<DType>(dt);
  return detail::get<std::uint8_t>(p + 21);
}

inline Frame decode_frame(std::span<const std::byte> bytes) {
  if (bytes.size() < frame_header_size(0)) throw CommError("frame: truncated header");
  Frame f;
  const std::size_t ndim = decode_frame_prefix(bytes.data(), f);
  if (bytes.size() < frame_header_size(ndim)) throw CommError("frame: truncated dims");
  for (std::size_t i = 0; i < ndim; ++i) f.dims.push_back(detail::get<std::uint64_t>(bytes.data() + 22 + 8 * i));
  const std::size_t body = numel(f.dims) * dtype_size(f.dtype);
  const std::size_t hdr = frame_header_size(ndim);
  if (bytes.size() != hdr + body) throw CommError("frame: payload length mismatch");
  f.payload.assign(bytes.begin() + hdr, bytes.end());
  return f;
}

template <Scalar T>
Frame tensor_frame(RankId src, RankId dst, std::uint64_t tag, const Tensor<T>& t) {
  Frame f{static_cast<std::uint32_t>(src), static_cast<std::uint32_t>(dst), tag, dtype_of<T>::value, t.shape(), {}};
  const auto* p = reinterpret_cast<const std::byte*>(t.data());
  f.payload.assign(p, p + t.size() * sizeof(T));
  return f;
}

template <Scalar T>
Tensor<T> frame_tensor(const Frame& f) {
  if (f.dtype != dtype_of<T>::value) {
    throw CommError(std::string("received ") + dtype_name(f.dtype) + " frame, expected " +
                    dtype_name(dtype_of<T>::value));
  }
  Tensor<T> t(f.dims);
  if (f.payload.size() != t.size() * sizeof(T)) throw CommError("frame: payload length mismatch");
  std::memcpy(t.data(), f.payload.data(), f.payload.size());
  return t;
}

/// Per-rank inbox keyed by (source, tag); FIFO within a key.
class Mailbox {
 public:
  void push(Frame f) {
    {
      std::lock_guard lk(mu_);
      queues_[{f.src, f.tag}].push_back(std::move(f));
    }
    cv_.notify_all();
  }

  /// Blocks until a frame from (src, tag) arrives, the timeout expires
  /// (nullopt), or the mailbox is shut down (CommError).
  std::optional<Frame> pop(std::uint32_t src, std::uint64_t tag, std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    const auto key = std::make_pair(src, tag);
    const bool ready = cv_.wait_for(lk, timeout, [&] {
      if (shutdown_) return true;
      auto it = queues_.find(key);
      return it != queues_.end() && !it->second.empty();
    });
    auto it = queues_.find(key);
    if (it != queues_.end() && !it->second.empty()) {
      Frame f = std::move(it->second.front());
      it->second.pop_front();
      if (it->second.empty()) queues_.erase(it);
      return f;
    }
    if (shutdown_) throw CommError("backend shut down with transfers pending: " + shutdown_reason_);
    (void)ready;
    return std::nullopt;
  }

  void shutdown(std::string reason) {
    {
      std::lock_guard lk(mu_);
      if (!shutdown_) shutdown_reason_ = std::move(reason);
      shutdown_ = true;
    }
    cv_.notify_all();
  }

  std::size_t pending() const {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (const auto& [k, q] : queues_) n += q.size();
    return n;
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<std::uint32_t, std::uint64_t>, std::deque<Frame>> queues_;
  bool shutdown_ = false;
  std::string shutdown_reason_;
};

/// Moves frames between ranks. Implementations deliver `send` frames into the
/// destination rank's inbox.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual RankId rank() const = 0;
  virtual int world_size() const = 0;
  virtual void send(Frame f) = 0;
  virtual Mailbox& inbox() = 0;
  virtual void shutdown(const std::string& reason) = 0;
};

struct CommCounters {
  std::uint64_t messages_sent = 0;
  std::uint64_t elements_sent = 0;
  std::uint64_t payload_bytes_sent = 0;
  std::uint64_t frame_bytes_sent = 0;
  std::uint64_t elements_received = 0;
};

template <Scalar T>
class PendingTransfer {
 public:
  enum class Direction { Send, Recv };

  PendingTransfer() = default;
  PendingTransfer(RankId peer, std::uint64_t tag, Direction dir) : peer_(peer), tag_(tag), dir_(dir), live_(true) {}
  PendingTransfer(const PendingTransfer&) = delete;
  PendingTransfer& operator=(const PendingTransfer&) = delete;
  PendingTransfer(PendingTransfer&& o) noexcept { *this = std::move(o); }
  PendingTransfer& operator=(PendingTransfer&& o) noexcept {
    peer_ = o.peer_;
    tag_ = o.tag_;
    dir_ = o.dir_;
    live_ = std::exchange(o.live_, false);
    done_ = o.done_;
    return *this;
  }

  RankId peer() const { return peer_; }
  std::uint64_t tag() const { return tag_; }
  Direction direction() const { return dir_; }
  bool completed() const { return done_; }

 private:
  friend class Communicator;
  RankId peer_ = -1;
  std::uint64_t tag_ = 0;
  Direction dir_ = Direction::Send;
  bool live_ = false;
  bool done_ = false;
};

class Communicator {
 public:
  static constexpr std::chrono::milliseconds kDefaultTimeout{30000};

  explicit Communicator(Transport& transport, std::chrono::milliseconds timeout = kDefaultTimeout)
      : transport_(&transport), timeout_(timeout) {}

  RankId rank() const { return transport_->rank(); }
  int world_size() const { return transport_->world_size(); }
  void set_timeout(std::chrono::milliseconds t) { timeout_ = t; }
  std::chrono::milliseconds timeout() const { return timeout_; }
  const CommCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }
  Transport& transport() { return *transport_; }

  template <Scalar T>
  PendingTransfer<T> isend(RankId peer, std::uint64_t tag, const Tensor<T>& t) {
    check_peer(peer);
    if (!inflight_sends_.insert({peer, tag}).second) {
      throw CommError("duplicate in-flight tag " + std::to_string(tag) + " on channel " + std::to_string(rank()) +
                      "->" + std::to_string(peer));
    }
    Frame f = tensor_frame(rank(), peer, tag, t);
    counters_.messages_sent += 1;
    counters_.elements_sent += t.size();
    counters_.payload_bytes_sent += f.payload.size();
    counters_.frame_bytes_sent += frame_header_size(f.dims.size()) + f.payload.size();
    transport_->send(std::move(f));
    return PendingTransfer<T>(peer, tag, PendingTransfer<T>::Direction::Send);
  }

  template <Scalar T>
  PendingTransfer<T> irecv(RankId peer, std::uint64_t tag) {
    check_peer(peer);
    return PendingTransfer<T>(peer, tag, PendingTransfer<T>::Direction::Recv);
  }

  /// Completes a transfer. Receives return the payload; sends return an empty tensor.
  template <Scalar T>
  Tensor<T> wait(PendingTransfer<T>& h) {
    if (!h.live_) throw CommError("wait on an empty transfer handle");
    if (h.done_) {
      throw CommError("transfer (peer " + std::to_string(h.peer_) + ", tag " + std::to_string(h.tag_) +
                      ") waited on twice");
    }
    h.done_ = true;
    if (h.dir_ == PendingTransfer<T>::Direction::Send) {
      inflight_sends_.erase({h.peer_, h.tag_});
      return {};
    }
    auto f = transport_->inbox().pop(static_cast<std::uint32_t>(h.peer_), h.tag_, timeout_);
    if (!f) {
      throw CommError("rank " + std::to_string(rank()) + " timed out waiting for (peer " + std::to_string(h.peer_) +
                      ", tag " + std::to_string(h.tag_) + ")");
    }
    Tensor<T> t = frame_tensor<T>(*f);
    counters_.elements_received += t.size();
    return t;
  }

  template <Scalar T>
  Tensor<T> recv(RankId peer, std::uint64_t tag) {
    auto h = irecv<T>(peer, tag);
    return wait(h);
  }

  /// Fresh tag base for one collective call over `group`. All members must
  /// call collectives on a given group in the same order. The low 12 bits are
  /// free for per-message slots.
  std::uint64_t next_collective_tag(const std::vector<RankId>& group) {
    std::uint64_t h = 1469598103934665603ull;
    for (RankId r : group) h = (h ^ std::uint64_t(r + 1)) * 1099511628211ull;
    const std::uint64_t seq = collective_seq_[group]++;
    return (1ull << 63) | ((h & 0x7fffull) << 48) | ((seq & 0xfffffffffull) << 12);
  }

  /// Elementwise sum over `group`, reduced in ascending rank order on the
  /// lowest rank and broadcast back, so every member sees identical bits.
  template <Scalar T>
  Tensor<T> allreduce_sum(std::vector<RankId> group, const Tensor<T>& t) {
    std::sort(group.begin(), group.end());
    check_member(group);
    if (group.size() == 1) return t;
    const std::uint64_t base = next_collective_tag(group);
    const RankId root = group.front();
    if (rank() == root) {
      std::vector<Tensor<T>> parts;
      parts.reserve(group.size());
      parts.push_back(t);
      for (std::size_t i = 1; i < group.size(); ++i) {
        Tensor<T> p = recv<T>(group[i], base);
        if (p.shape() != t.shape()) {
          throw CommError("allreduce shape mismatch: rank " + std::to_string(root) + " holds " +
                          shape_str(t.shape()) + ", rank " + std::to_string(group[i]) + " holds " +
                          shape_str(p.shape()));
        }
        parts.push_back(std::move(p));
      }
      Tensor<T> acc = parts[0];
      for (std::size_t i = 1; i < parts.size(); ++i) acc += parts[i];
      std::vector<PendingTransfer<T>> sends;
      for (std::size_t i = 1; i < group.size(); ++i) sends.push_back(isend(group[i], base + 1, acc));
      for (auto& s : sends) wait(s);
      return acc;
    }
    auto s = isend(root, base, t);
    wait(s);
    Tensor<T> out = recv<T>(root, base + 1);
    if (out.shape() != t.shape()) {
      throw CommError("allreduce shape mismatch on rank " + std::to_string(rank()) + ": local " +
                      shape_str(t.shape()) + ", reduced " + shape_str(out.shape()));
    }
    return out;
  }

  template <Scalar T>
  Tensor<T> allreduce_mean(const std::vector<RankId>& group, const Tensor<T>& t) {
    Tensor<T> s = allreduce_sum(group, t);
    s *= T(1) / T(group.size());
    return s;
  }

  /// Exchange with one peer; both sides add in ascending rank order.
  template <Scalar T>
  Tensor<T> pairwise_reduce_sum(RankId peer, const Tensor<T>& t) {
    check_peer(peer);
    std::vector<RankId> pair{std::min(rank(), peer), std::max(rank(), peer)};
    const std::uint64_t base = next_collective_tag(pair);
    auto s = isend(peer, base, t);
    Tensor<T> other = recv<T>(peer, base);
    wait(s);
    if (other.shape() != t.shape()) {
      throw CommError("pairwise reduce shape mismatch between ranks " + std::to_string(rank()) + " and " +
                      std::to_string(peer) + ": " + shape_str(t.shape()) + " vs " + shape_str(other.shape()));
    }
    return rank() < peer ? t + other : other + t;
  }

  template <Scalar T>
  Tensor<T> pairwise_reduce_mean(RankId peer, const Tensor<T>& t) {
    Tensor<T> s = pairwise_reduce_sum(peer, t);
    s *= T(0.5);
    return s;
  }

  void barrier(const std::vector<RankId>& group) { (void)allreduce_sum(group, Tensor<double>({1})); }

 private:
  void check_peer(RankId peer) const {
    if (peer == rank()) throw CommError("rank " + std::to_string(peer) + " cannot message itself");
    if (peer < 0 || peer >= world_size()) {
      throw CommError("unknown peer " + std::to_string(peer) + " (world size " + std::to_string(world_size()) + ")");
    }
  }
  void check_member(const std::vector<RankId>& group) const {
    if (!std::binary_search(group.begin(), group.end(), rank())) {
      throw CommError("rank " + std::to_string(rank()) + " is not a member of the reduction group");
    }
  }

  Transport* transport_;
  std::chrono::milliseconds timeout_;
  CommCounters counters_;
  std::set<std::pair<RankId, std::uint64_t>> inflight_sends_;
  std::map<std::vector<RankId>, std::uint64_t> collective_seq_;
};

}  // namespace jigsaw
