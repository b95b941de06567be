// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Runs a rank body on every rank of a world: threads for the in-process
// backend, OS processes over TCP for the sockets backend.

#pragma once

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstring>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "jigsaw/experiment.hpp"
#include "jigsaw/inproc.hpp"
#include "jigsaw/socket.hpp"

extern char** environ;

namespace jigsaw::cli {

using RankBody = std::function<void(Communicator&)>;

/// Rank of this process when it is a socket worker, -1 otherwise.
inline int worker_rank() { return socket_env().rank; }

inline std::string rank_table_path(const ExperimentConfig& cfg) {
  const SocketEnv env = socket_env();
  if (!env.ranktable.empty()) return env.ranktable;
  if (!cfg.world.rank_table.empty()) return cfg.world.rank_table;
  throw ConfigError("sockets backend needs world.rank_table or JIGSAW_RANKTABLE");
}

inline RankTable checked_table(const ExperimentConfig& cfg) {
  RankTable table = load_rank_table(rank_table_path(cfg));
  if (int(table.size()) != cfg.world.size()) {
    throw ConfigError("rank table lists " + std::to_string(table.size()) + " ranks but the world has " +
                      std::to_string(cfg.world.size()));
  }
  const SocketEnv env = socket_env();
  if (env.world >= 0 && env.world != cfg.world.size()) {
    throw ConfigError("JIGSAW_WORLD=" + std::to_string(env.world) + " does not match world size " +
                      std::to_string(cfg.world.size()));
  }
  return table;
}

/// Spawns one copy of this executable per rank with JIGSAW_RANK/WORLD/RANKTABLE
/// set and waits for all of them. Returns the first nonzero child exit code.
inline int spawn_workers(const ExperimentConfig& cfg, const std::vector<std::string>& args) {
  const RankTable table = checked_table(cfg);
  const std::string table_path = rank_table_path(cfg);
  const int world = int(table.size());

  std::vector<std::string> base_env;
  for (char** e = environ; *e; ++e) {
    const std::string kv = *e;
    if (kv.rfind("JIGSAW_RANK=", 0) == 0 || kv.rfind("JIGSAW_WORLD=", 0) == 0 || kv.rfind("JIGSAW_RANKTABLE=", 0) == 0)
      continue;
    base_env.push_back(kv);
  }
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);

  std::vector<pid_t> pids;
  for (int r = 0; r < world; ++r) {
    std::vector<std::string> env = base_env;
    env.push_back("JIGSAW_RANK=" + std::to_string(r));
    env.push_back("JIGSAW_WORLD=" + std::to_string(world));
    env.push_back("JIGSAW_RANKTABLE=" + table_path);
    std::vector<char*> envp;
    for (auto& kv : env) envp.push_back(kv.data());
    envp.push_back(nullptr);
    pid_t pid = 0;
    if (const int rc = posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), envp.data()); rc != 0) {
      for (pid_t p : pids) ::kill(p, SIGTERM);
      throw CommError("cannot spawn rank " + std::to_string(r) + ": " + std::strerror(rc));
    }
    pids.push_back(pid);
  }

  int code = 0;
  for (std::size_t left = pids.size(); left > 0; --left) {
    int status = 0;
    const pid_t done = ::waitpid(-1, &status, 0);
    if (done < 0) break;
    const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : 3;
    if (rc != 0 && code == 0) {
      code = rc;
      for (pid_t p : pids)
        if (p != done) ::kill(p, SIGTERM);
    }
  }
  return code;
}

/// Runs `body` on every rank. In a socket worker this runs the single local
/// rank; in the launcher of a sockets run it spawns the workers instead.
/// Returns the process exit code contribution (0 when the body succeeded).
inline int launch(const ExperimentConfig& cfg, const std::vector<std::string>& args, const RankBody& body) {
  if (cfg.world.backend == Backend::InProc) {
    run_inproc(cfg.world.size(), body);
    return 0;
  }
  const int rank = worker_rank();
  if (rank < 0) return spawn_workers(cfg, args);
  SocketTransport transport(rank, checked_table(cfg));
  Communicator comm(transport);
  body(comm);
  return 0;
}

}  // namespace jigsaw::cli
