// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-process backend: full TCP mesh built from a rank table.

#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "jigsaw/comm.hpp"

namespace jigsaw {

struct RankEndpoint {
  int rank = 0;
  std::string host;
  int port = 0;
};

using RankTable = std::vector<RankEndpoint>;

/// Rank table JSON: [{"rank": int, "host": string, "port": int}, ...].
inline RankTable parse_rank_table(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("rank table must be a JSON array");
  RankTable t;
  for (const auto& e : j) t.push_back({e.at("rank").get<int>(), e.at("host").get<std::string>(), e.at("port").get<int>()});
  std::sort(t.begin(), t.end(), [](auto& a, auto& b) { return a.rank < b.rank; });
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].rank != static_cast<int>(i)) throw ConfigError("rank table must list ranks 0..N-1 exactly once");
  }
  return t;
}

inline nlohmann::json rank_table_json(const RankTable& t) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : t) j.push_back({{"rank", e.rank}, {"host", e.host}, {"port", e.port}});
  return j;
}

inline RankTable load_rank_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open rank table " + path);
  return parse_rank_table(nlohmann::json::parse(in));
}

struct SocketEnv {
  int rank = -1;
  int world = -1;
  std::string ranktable;
};

/// Reads JIGSAW_RANK / JIGSAW_WORLD / JIGSAW_RANKTABLE; absent values stay unset.
inline SocketEnv socket_env() {
  SocketEnv e;
  if (const char* v = std::getenv("JIGSAW_RANK")) e.rank = std::atoi(v);
  if (const char* v = std::getenv("JIGSAW_WORLD")) e.world = std::atoi(v);
  if (const char* v = std::getenv("JIGSAW_RANKTABLE")) e.ranktable = v;
  return e;
}

class SocketTransport final : public Transport {
 public:
  SocketTransport(RankId rank, RankTable table, std::chrono::milliseconds connect_timeout = std::chrono::seconds(30))
      : rank_(rank), table_(std::move(table)), fds_(table_.size(), -1), send_mu_(table_.size()) {
    if (rank_ < 0 || rank_ >= static_cast<int>(table_.size())) {
      throw ConfigError("rank " + std::to_string(rank_) + " outside rank table of size " +
                        std::to_string(table_.size()));
    }
    listen_fd_ = open_listener(table_[rank_].port);
    const auto deadline = std::chrono::steady_clock::now() + connect_timeout;
    for (RankId peer = 0; peer < rank_; ++peer) fds_[peer] = connect_to(peer, deadline);
    for (int pending = world_size() - rank_ - 1; pending > 0; --pending) accept_one(deadline);
    for (RankId peer = 0; peer < world_size(); ++peer) {
      if (peer != rank_) readers_.emplace_back([this, peer] { read_loop(peer); });
    }
  }

  ~SocketTransport() override {
    closing_ = true;
    for (int fd : fds_)
      if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
    for (auto& t : readers_) t.join();
    for (int fd : fds_)
      if (fd >= 0) ::close(fd);
    if (listen_fd_ >= 0) ::close(listen_fd_);
  }

  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;

  RankId rank() const override { return rank_; }
  int world_size() const override { return static_cast<int>(table_.size()); }
  Mailbox& inbox() override { return inbox_; }
  void shutdown(const std::string& reason) override { inbox_.shutdown(reason); }

  void send(Frame f) override {
    const auto bytes = encode_frame(f);
    std::lock_guard lk(send_mu_.at(f.dst));
    write_all(fds_.at(f.dst), bytes.data(), bytes.size(), f.dst);
  }

 private:
  static void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  static int open_listener(int port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw CommError("socket() failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 64) != 0) {
      ::close(fd);
      throw CommError("cannot listen on port " + std::to_string(port) + ": " + std::strerror(errno));
    }
    return fd;
  }

  int connect_to(RankId peer, std::chrono::steady_clock::time_point deadline) {
    const auto& ep = table_[peer];
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res) != 0 || !res) {
      throw CommError("cannot resolve " + ep.host + " for rank " + std::to_string(peer));
    }
    while (true) {
      int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (::connect(fd, res->ai_addr, res->ai_addrlen) == 0) {
        ::freeaddrinfo(res);
        set_nodelay(fd);
        const auto me = static_cast<std::uint32_t>(rank_);
        write_all(fd, &me, sizeof(me), peer);
        return fd;
      }
      ::close(fd);
      if (std::chrono::steady_clock::now() > deadline) {
        ::freeaddrinfo(res);
        throw CommError("rank " + std::to_string(rank_) + " could not reach rank " + std::to_string(peer) + " at " +
                        ep.host + ":" + std::to_string(ep.port));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  void accept_one(std::chrono::steady_clock::time_point deadline) {
    timeval tv{};
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    tv.tv_sec = std::max<long>(0, left.count() / 1000);
    tv.tv_usec = std::max<long>(0, (left.count() % 1000) * 1000);
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) throw CommError("rank " + std::to_string(rank_) + " timed out accepting peer connections");
    set_nodelay(fd);
    std::uint32_t peer = 0;
    if (!read_all(fd, &peer, sizeof(peer)) || peer >= table_.size() || fds_[peer] >= 0) {
      ::close(fd);
      throw CommError("bad handshake on rank " + std::to_string(rank_));
    }
    fds_[peer] = fd;
  }

  static bool read_all(int fd, void* buf, std::size_t n) {
    auto* p = static_cast<char*>(buf);
    while (n > 0) {
      const ssize_t got = ::recv(fd, p, n, 0);
      if (got <= 0) {
        if (got < 0 && errno == EINTR) continue;
        return false;
      }
      p += got;
      n -= static_cast<std::size_t>(got);
    }
    return true;
  }

  void write_all(int fd, const void* buf, std::size_t n, std::uint32_t peer) {
    const auto* p = static_cast<const char*>(buf);
    while (n > 0) {
      const ssize_t put = ::send(fd, p, n, MSG_NOSIGNAL);
      if (put <= 0) {
        if (put < 0 && errno == EINTR) continue;
        throw CommError("rank " + std::to_string(rank_) + " lost connection to rank " + std::to_string(peer));
      }
      p += put;
      n -= static_cast<std::size_t>(put);
    }
  }

  void read_loop(RankId peer) {
    const int fd = fds_[peer];
    std::vector<std::byte> buf;
    while (!closing_) {
      buf.assign(frame_header_size(0), std::byte{0});
      if (!read_all(fd, buf.data(), buf.size())) return;
      try {
        Frame f;
        const std::size_t ndim = decode_frame_prefix(buf.data(), f);
        std::vector<std::uint64_t> dims(ndim);
        if (ndim && !read_all(fd, dims.data(), 8 * ndim)) return;
        f.dims.assign(dims.begin(), dims.end());
        f.payload.resize(numel(f.dims) * dtype_size(f.dtype));
        if (!f.payload.empty() && !read_all(fd, f.payload.data(), f.payload.size())) return;
        inbox_.push(std::move(f));
      } catch (const CommError& e) {
        inbox_.shutdown(std::string("corrupt stream from rank ") + std::to_string(peer) + ": " + e.what());
        return;
      }
    }
  }

  RankId rank_;
  RankTable table_;
  std::vector<int> fds_;
  std::vector<std::mutex> send_mu_;
  int listen_fd_ = -1;
  Mailbox inbox_;
  std::vector<std::thread> readers_;
  std::atomic<bool> closing_{false};
};

}  // namespace jigsaw
