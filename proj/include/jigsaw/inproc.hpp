// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// In-process backend: one thread per rank, frames handed over by value.

#pragma once

#include <exception>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include "jigsaw/comm.hpp"

namespace jigsaw {

class InProcFabric {
 public:
  explicit InProcFabric(int world) : boxes_(world) {
    for (auto& b : boxes_) b = std::make_unique<Mailbox>();
  }
  int world_size() const { return static_cast<int>(boxes_.size()); }
  Mailbox& box(RankId r) { return *boxes_.at(r); }
  void shutdown(const std::string& reason) {
    for (auto& b : boxes_) b->shutdown(reason);
  }

 private:
  std::vector<std::unique_ptr<Mailbox>> boxes_;
};

class InProcTransport final : public Transport {
 public:
  InProcTransport(std::shared_ptr<InProcFabric> fabric, RankId rank) : fabric_(std::move(fabric)), rank_(rank) {}

  RankId rank() const override { return rank_; }
  int world_size() const override { return fabric_->world_size(); }
  void send(Frame f) override { fabric_->box(static_cast<RankId>(f.dst)).push(std::move(f)); }
  Mailbox& inbox() override { return fabric_->box(rank_); }
  void shutdown(const std::string& reason) override { fabric_->shutdown(reason); }

 private:
  std::shared_ptr<InProcFabric> fabric_;
  RankId rank_;
};

/// Runs `body` on `world` ranks, each on its own thread with its own
/// Communicator, and rethrows the first failure after all ranks finish.
/// A failing rank shuts the fabric down so peers do not wait for the timeout.
inline void run_inproc(int world, const std::function<void(Communicator&)>& body,
                       std::chrono::milliseconds timeout = Communicator::kDefaultTimeout) {
  auto fabric = std::make_shared<InProcFabric>(world);
  std::vector<std::exception_ptr> errors(world);
  std::vector<std::thread> threads;
  threads.reserve(world);
  for (RankId r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      InProcTransport transport(fabric, r);
      Communicator comm(transport, timeout);
      try {
        body(comm);
      } catch (const std::exception& e) {
        errors[r] = std::current_exception();
        fabric->shutdown("rank " + std::to_string(r) + " failed: " + e.what());
      } catch (...) {
        errors[r] = std::current_exception();
        fabric->shutdown("rank " + std::to_string(r) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  // Prefer the originating failure over the shutdown errors it caused in peers.
  std::exception_ptr first;
  for (auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const CommError& ce) {
      if (std::string(ce.what()).find("backend shut down") == std::string::npos) {
        std::rethrow_exception(e);
      }
      if (!first) first = e;
    } catch (...) {
      std::rethrow_exception(e);
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace jigsaw
