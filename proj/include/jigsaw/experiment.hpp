// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and the per-rank object graph built from it.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "jigsaw/train.hpp"

namespace jigsaw {

enum class Backend { InProc, Sockets };

struct WorldConfig {
  int n_way = 1;
  int dp_replicas = 1;
  Backend backend = Backend::InProc;
  std::string rank_table;  // path, sockets backend only

  int size() const { return n_way * dp_replicas; }
  bool operator==(const WorldConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticConfig data;
  WorldConfig world;
  std::uint64_t seed = 0;
  std::size_t halo = 0;
  std::map<std::string, double> var_weights;
  bool include_poles = false;

  /// Every violated constraint, one message per field.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto check = [&](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        out.emplace_back(e.what());
      }
    };
    if (world.n_way != 1 && world.n_way != 2 && world.n_way != 4) {
      out.push_back("world.n_way must be 1, 2 or 4, got " + std::to_string(world.n_way));
    } else {
      check([&] { model.validate_for(world.n_way); });
    }
    if (world.dp_replicas < 1) out.push_back("world.dp_replicas must be >= 1");
    if (world.backend == Backend::Sockets && world.rank_table.empty()) {
      out.push_back("world.rank_table is required for the sockets backend");
    }
    check([&] { train.validate(); });
    check([&] { data.validate(); });
    if (model.n_vars != data.sample.channels()) {
      out.push_back("model.n_vars (" + std::to_string(model.n_vars) + ") must equal data channel count (" +
                    std::to_string(data.sample.channels()) + ")");
    }
    if (model.lat != data.sample.lat || model.lon != data.sample.lon) {
      out.push_back("model.grid must equal data.grid");
    }
    if (train.r_max >= data.n_steps) out.push_back("train.r_max must be < data.n_steps");
    for (const auto& [name, w] : var_weights)
      if (!(w >= 0)) out.push_back("var_weights." + name + " must be >= 0");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ConfigError(msg);
  }

  /// Desk-scale defaults: 8 channels on a 32x64 grid.
  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.data.sample.lat = c.model.lat;
    c.data.sample.lon = c.model.lon;
    return c;
  }

  bool operator==(const ExperimentConfig&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(Backend, {{Backend::InProc, "inproc"}, {Backend::Sockets, "sockets"}})

inline void to_json(nlohmann::json& j, const WorldConfig& w) {
  j = {{"n_way", w.n_way}, {"dp_replicas", w.dp_replicas}, {"backend", w.backend}, {"rank_table", w.rank_table}};
}

inline void from_json(const nlohmann::json& j, WorldConfig& w) {
  if (j.contains("n_way")) j.at("n_way").get_to(w.n_way);
  if (j.contains("dp_replicas")) j.at("dp_replicas").get_to(w.dp_replicas);
  if (j.contains("backend")) {
    const auto b = j.at("backend").get<std::string>();
    if (b != "inproc" && b != "sockets") throw ConfigError("world.backend must be inproc or sockets, got " + b);
    w.backend = j.at("backend").get<Backend>();
  }
  if (j.contains("rank_table")) j.at("rank_table").get_to(w.rank_table);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"model", c.model}, {"train", c.train},         {"data", c.data},
       {"world", c.world}, {"seed", c.seed},           {"halo", c.halo},
       {"var_weights", c.var_weights}, {"include_poles", c.include_poles}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  static const std::vector<std::string> known{"model", "train", "data", "world", "seed", "halo", "var_weights",
                                              "include_poles"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  c = ExperimentConfig::desk();
  try {
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("data")) j.at("data").get_to(c.data);
    if (j.contains("world")) j.at("world").get_to(c.world);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("halo")) j.at("halo").get_to(c.halo);
    if (j.contains("var_weights")) j.at("var_weights").get_to(c.var_weights);
    if (j.contains("include_poles")) j.at("include_poles").get_to(c.include_poles);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
}

/// Everything one rank owns for a run.
template <Scalar T>
class RankSession {
 public:
  RankSession(const ExperimentConfig& cfg, Communicator& comm)
      : cfg_(cfg), comm_(&comm), pg_(cfg.world.size(), cfg.world.n_way, comm.rank()), ctx_(MpContext::from(pg_)),
        gen_(cfg.data), stats_(zscore_fit(gen_)), model_(cfg.model, ctx_, cfg.seed),
        loader_(gen_, stats_, model_.sample_shard(), loader_options(cfg), pg_.replica(), pg_.dp_replicas()),
        trainer_(comm, pg_, model_, loader_, WeightScheme::make(cfg.data.sample, cfg.var_weights, cfg.include_poles),
                 cfg.train) {
    if (comm.world_size() != cfg.world.size()) {
      throw ConfigError("communicator world " + std::to_string(comm.world_size()) + " does not match config world " +
                        std::to_string(cfg.world.size()));
    }
    model_.seed_dropout(cfg.seed * 1000003ull + std::uint64_t(comm.rank()));
  }

  RankSession(const RankSession&) = delete;
  RankSession& operator=(const RankSession&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  Communicator& comm() { return *comm_; }
  const ProcessGroup& group() const { return pg_; }
  const MpContext& context() const { return ctx_; }
  const SyntheticGenerator& generator() const { return gen_; }
  const NormStats& stats() const { return stats_; }
  WeatherMixer<T>& model() { return model_; }
  ShardedLoader<T>& loader() { return loader_; }
  Trainer<T>& trainer() { return trainer_; }

 private:
  static LoaderOptions loader_options(const ExperimentConfig& c) {
    return {.batch = c.train.batch, .halo = c.halo, .seed = c.seed, .r_max = c.train.r_max};
  }

  ExperimentConfig cfg_;
  Communicator* comm_;
  ProcessGroup pg_;
  MpContext ctx_;
  SyntheticGenerator gen_;
  NormStats stats_;
  WeatherMixer<T> model_;
  ShardedLoader<T> loader_;
  Trainer<T> trainer_;
};

}  // namespace jigsaw
