// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop: warmup/cosine schedule, global-norm clipping, per-shard
// Adam, data-parallel gradient averaging, rollout fine-tuning and per-rank
// checkpoints.

#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "jigsaw/data.hpp"
#include "jigsaw/model.hpp"

namespace jigsaw {

// ----------------------------------------------------------------- config

struct TrainConfig {
  double base_lr = 1e-4;
  double encdec_lr = 2e-5;
  double warmup_start = 1e-6;
  double final_lr = 1e-5;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 1;
  double clip_norm = 1.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t r_max = 4;
  std::size_t batch = 1;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0)) throw ConfigError(std::string("train.") + name + " must be > 0");
    };
    positive(base_lr, "base_lr");
    positive(encdec_lr, "encdec_lr");
    positive(warmup_start, "warmup_start");
    positive(final_lr, "final_lr");
    positive(clip_norm, "clip_norm");
    positive(eps, "eps");
    if (!(warmup_start < base_lr)) throw ConfigError("train.warmup_start must be < train.base_lr");
    if (!(final_lr < base_lr)) throw ConfigError("train.final_lr must be < train.base_lr");
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (warmup_epochs > epochs) throw ConfigError("train.warmup_epochs must be <= train.epochs");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.betas must lie in [0, 1)");
    if (r_max == 0) throw ConfigError("train.r_max must be >= 1");
    if (batch == 0) throw ConfigError("train.batch must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},   {"encdec_lr", c.encdec_lr}, {"warmup_start", c.warmup_start},
       {"final_lr", c.final_lr}, {"epochs", c.epochs},       {"warmup_epochs", c.warmup_epochs},
       {"clip_norm", c.clip_norm}, {"betas", {c.beta1, c.beta2}}, {"eps", c.eps},
       {"r_max", c.r_max},       {"batch", c.batch},         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) j.at(key).get_to(out);
  };
  get("base_lr", c.base_lr);
  get("encdec_lr", c.encdec_lr);
  get("warmup_start", c.warmup_start);
  get("final_lr", c.final_lr);
  get("epochs", c.epochs);
  get("warmup_epochs", c.warmup_epochs);
  get("clip_norm", c.clip_norm);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw ConfigError("train.betas must be a 2-element array");
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  get("eps", c.eps);
  get("r_max", c.r_max);
  get("batch", c.batch);
  get("seed", c.seed);
}

// --------------------------------------------------------------- schedule

enum class ParamClass { Body, EncDec };

/// Linear warmup from warmup_start to the class base rate over the first
/// warmup_epochs, then cosine decay to the class final rate at the last step.
/// EncDec scales both base and final by encdec_lr / base_lr.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg,
                    ParamClass cls = ParamClass::Body) {
  if (step >= total_steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const double scale = cls == ParamClass::EncDec ? cfg.encdec_lr / cfg.base_lr : 1.0;
  const double base = cfg.base_lr * scale, floor_lr = cfg.final_lr * scale;
  const std::size_t warm = total_steps * cfg.warmup_epochs / cfg.epochs;
  if (step < warm) return cfg.warmup_start + (base - cfg.warmup_start) * double(step) / double(warm);
  const std::size_t span = total_steps - 1 - std::min(warm, total_steps - 1);
  if (span == 0) return floor_lr;
  if (step == warm) return base;
  const double t = double(step - warm) / double(span);
  return floor_lr + (base - floor_lr) / 2 * (1 + std::cos(std::numbers::pi * t));
}

// -------------------------------------------------------------- optimizer

template <Scalar T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;

  static AdamState for_params(const std::vector<Param<T>*>& params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.emplace_back(p->value.shape());
      s.v.emplace_back(p->value.shape());
    }
    return s;
  }
  std::size_t elements() const {
    std::size_t n = 0;
    for (const auto& t : m) n += t.size();
    for (const auto& t : v) n += t.size();
    return n;
  }
};

/// One bias-corrected Adam update of a single tensor at step t (1-based).
template <Scalar T>
void adam_update(Tensor<T>& value, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, std::uint64_t t, double lr,
                 double beta1, double beta2, double eps) {
  if (grad.shape() != value.shape() || m.shape() != value.shape() || v.shape() != value.shape()) {
    throw ShapeError("adam_update: state shape does not match parameter " + shape_str(value.shape()));
  }
  const double c1 = 1 - std::pow(beta1, double(t)), c2 = 1 - std::pow(beta2, double(t));
  for (std::size_t k = 0; k < value.size(); ++k) {
    const double g = grad[k];
    const double mk = beta1 * m[k] + (1 - beta1) * g;
    const double vk = beta2 * v[k] + (1 - beta2) * g * g;
    m[k] = T(mk);
    v[k] = T(vk);
    value[k] = T(value[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + eps));
  }
}

/// Updates every local shard; encoder/decoder parameters use `lr_encdec`.
template <Scalar T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& state, double lr_body, double lr_encdec,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = *params[i];
    adam_update(p.value, p.grad, state.m[i], state.v[i], state.step, p.encdec ? lr_encdec : lr_body, cfg.beta1,
                cfg.beta2, cfg.eps);
  }
}

// --------------------------------------------------------------- clipping

/// Squared L2 norm of the global gradient. Replicated vectors count once.
template <Scalar T>
double global_grad_norm_sq(Communicator& comm, const MpContext& ctx, const std::vector<Param<T>*>& params) {
  Tensor<double> local({1});
  for (const auto* p : params) {
    if (!is_primary_replica(ctx, p->replication)) continue;
    for (T g : p->grad.values()) local[0] += double(g) * double(g);
  }
  if (ctx.n == 1) return local[0];
  return comm.allreduce_sum(ctx.members, local)[0];
}

/// Scales all gradients by clip_norm / g when the global norm g exceeds
/// clip_norm. Returns g.
template <Scalar T>
double clip_grads(Communicator& comm, const MpContext& ctx, const std::vector<Param<T>*>& params, double clip_norm) {
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be > 0");
  const double g = std::sqrt(global_grad_norm_sq(comm, ctx, params));
  if (g > clip_norm) {
    const double s = clip_norm / g;
    for (auto* p : params)
      for (T& v : p->grad.values()) v = T(v * s);
  }
  return g;
}

// ------------------------------------------------------------ dp reduction

/// Averages local-shard gradients across the dp group of this rank.
template <Scalar T>
void dp_reduce(Communicator& comm, const ProcessGroup& pg, const std::vector<Param<T>*>& params) {
  if (pg.dp_replicas() == 1) return;
  std::size_t total = 0;
  for (const auto* p : params) total += p->grad.size();
  Tensor<T> flat({total});
  std::size_t off = 0;
  for (const auto* p : params) {
    std::copy(p->grad.values().begin(), p->grad.values().end(), flat.data() + off);
    off += p->grad.size();
  }
  const Tensor<T> mean = comm.allreduce_mean(pg.dp_group(), flat);
  off = 0;
  for (auto* p : params) {
    std::copy_n(mean.data() + off, p->grad.size(), p->grad.data());
    off += p->grad.size();
  }
}

// ------------------------------------------------------------------- loss

/// Weighted MSE partial sum over this rank's local block and its gradient
/// with respect to `pred`, normalized by the global element count.
template <Scalar T>
struct LocalLoss {
  long double partial = 0;
  Tensor<T> grad;
};

template <Scalar T>
LocalLoss<T> local_weighted_loss(const Tensor<T>& pred, const Tensor<T>& target, const WeightScheme& w,
                                 const ShardSpec& spec, std::size_t global_count) {
  if (pred.shape() != target.shape() || pred.ndim() != 4) {
    throw ShapeError("loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t lat = pred.dim(1), lon = pred.dim(2), C = pred.dim(3);
  if (w.lat.size() != lat || w.channels() != spec.global_cols) {
    throw ShapeError("loss: weight scheme does not match sample " + shape_str(pred.shape()));
  }
  const std::size_t c_off = spec.col_offset(), vc = spec.valid_cols(), vl = spec.valid_rows();
  LocalLoss<T> out;
  out.grad = Tensor<T>(pred.shape());
  const double inv = 1.0 / double(global_count);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const std::size_t c = k % C, j = (k / C) % lon, i = (k / C / lon) % lat;
    if (c >= vc || j >= vl) continue;
    const double wt = w.lat[i] * w.channel_weight(c_off + c);
    const double e = double(pred[k]) - double(target[k]);
    out.partial += wt * e * e;
    out.grad[k] = T(2 * wt * e * inv);
  }
  return out;
}

// ------------------------------------------------------------------ trainer

/// FNV-1a of a canonical JSON dump.
inline std::string config_fingerprint(const nlohmann::json& j) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : j.dump()) h = (h ^ ch) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Wall-clock seconds per step phase.
struct PhaseTimes {
  double load = 0, transfer = 0, forward = 0, backward = 0, reduce = 0, optimize = 0;

  PhaseTimes& operator+=(const PhaseTimes& o) {
    load += o.load;
    transfer += o.transfer;
    forward += o.forward;
    backward += o.backward;
    reduce += o.reduce;
    optimize += o.optimize;
    return *this;
  }
  double total() const { return load + transfer + forward + backward + reduce + optimize; }
};

struct StepResult {
  double loss = 0;       // mean over the dp world's samples
  double grad_norm = 0;  // global norm before clipping
  double lr = 0;
  int rollout = 1;
  std::vector<std::size_t> indices;
  PhaseTimes times;
};

struct EpochStats {
  double mean_loss = 0;
  std::size_t steps = 0;
  PhaseTimes times;
  MatmulStats matmul;
};

template <Scalar T>
class Trainer {
 public:
  Trainer(Communicator& comm, ProcessGroup pg, WeatherMixer<T>& model, ShardedLoader<T>& loader, WeightScheme weights,
          TrainConfig cfg)
      : comm_(&comm), pg_(pg), model_(&model), loader_(&loader), weights_(std::move(weights)), cfg_(cfg),
        adam_(AdamState<T>::for_params(model.params())), rollout_rng_(cfg.seed ^ 0x5deece66dull) {
    cfg_.validate();
    const ShardSpec ms = model.sample_shard(), ls = loader.spec();
    if (ms.n != ls.n || ms.rank != ls.rank || ms.global_rows != ls.global_rows || ms.global_cols != ls.global_cols) {
      throw ShapeError("model and loader shard specs disagree");
    }
    if (loader.options().batch != cfg_.batch) throw ConfigError("train.batch does not match loader batch");
    if (loader.options().r_max < cfg_.r_max) throw ConfigError("loader r_max is smaller than train.r_max");
  }

  std::size_t total_steps() const { return cfg_.epochs * loader_->steps_per_epoch(); }
  std::uint64_t global_step() const { return global_step_; }
  const AdamState<T>& optimizer() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  WeatherMixer<T>& model() { return *model_; }
  const MatmulStats& matmul_stats() const { return matmul_; }

  /// Rollout length for the next step, identical on every rank.
  int draw_rollout(bool finetune) {
    std::uniform_int_distribution<std::size_t> d(1, cfg_.r_max);
    const std::size_t r = d(rollout_rng_);
    return finetune ? int(r) : 1;
  }

  /// One optimizer step on loader step `s` of the current epoch.
  StepResult step(std::size_t s, int r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batch = loader_->load(s, std::size_t(r));
    const double load = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return step_on(batch, r, load);
  }

  /// One optimizer step on an already loaded batch whose target is r steps
  /// ahead. `load_seconds` is reported as the load phase.
  StepResult step_on(const typename ShardedLoader<T>::Batch& batch, int r, double load_seconds = 0) {
    using clock = std::chrono::steady_clock;
    auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    if (batch.lead != std::size_t(r)) throw ShapeError("batch target lead does not match rollout length");
    StepResult res;
    res.rollout = r;
    res.indices = batch.indices;
    const MpContext& ctx = model_->context();

    auto t1 = clock::now();
    const std::size_t h = loader_->options().halo;
    const Tensor<T> x = strip_halo(batch.input, h), y = strip_halo(batch.target, h);
    auto t2 = clock::now();

    model_->zero_grad();
    typename WeatherMixer<T>::Cache cache;
    const Tensor<T> pred = model_->forward(*comm_, x, r, &cache, &matmul_);
    const std::size_t count = x.dim(0) * x.dim(1) * model_->config().lon * model_->config().n_vars;
    auto loss = local_weighted_loss(pred, y, weights_, model_->sample_shard(), count);
    auto t3 = clock::now();

    model_->backward(*comm_, cache, loss.grad, &matmul_);
    auto t4 = clock::now();

    Tensor<double> l({1});
    l[0] = double(loss.partial / count);
    if (ctx.n > 1) l = comm_->allreduce_sum(ctx.members, l);
    if (pg_.dp_replicas() > 1) l = comm_->allreduce_mean(pg_.dp_group(), l);
    res.loss = l[0];
    dp_reduce(*comm_, pg_, model_->params());
    auto t5 = clock::now();

    res.grad_norm = clip_grads(*comm_, ctx, model_->params(), cfg_.clip_norm);
    const std::size_t total = total_steps();
    const std::size_t at = std::min<std::size_t>(global_step_, total - 1);
    res.lr = lr_at(at, total, cfg_, ParamClass::Body);
    adam_step(model_->params(), adam_, res.lr, lr_at(at, total, cfg_, ParamClass::EncDec), cfg_);
    ++global_step_;
    auto t6 = clock::now();

    res.times = {load_seconds, secs(t1, t2), secs(t2, t3), secs(t3, t4), secs(t4, t5), secs(t5, t6)};
    return res;
  }

  /// Next step of the schedule, starting a new loader epoch when needed.
  /// Pretraining uses r = 1; fine-tuning draws r uniformly from 1..r_max.
  StepResult next(bool finetune = false) {
    const std::size_t spe = loader_->steps_per_epoch();
    const std::size_t e = global_step_ / spe;
    if (loader_->epoch() != e) loader_->start_epoch(e);
    return step(global_step_ % spe, draw_rollout(finetune));
  }

  /// Remaining steps of the current epoch.
  EpochStats train_epoch(bool finetune = false, const std::function<void(const StepResult&)>& on_step = {}) {
    EpochStats st;
    const MatmulStats before = matmul_;
    long double sum = 0;
    const std::size_t spe = loader_->steps_per_epoch();
    do {
      const StepResult r = next(finetune);
      if (on_step) on_step(r);
      sum += r.loss;
      st.times += r.times;
      ++st.steps;
    } while (global_step_ % spe != 0);
    st.mean_loss = double(sum / st.steps);
    st.matmul = matmul_;
    st.matmul.flops -= before.flops;
    st.matmul.elements_sent -= before.elements_sent;
    st.matmul.messages_sent -= before.messages_sent;
    return st;
  }

  std::size_t epoch() const { return global_step_ / loader_->steps_per_epoch(); }

  // ---------------------------------------------------------- checkpoints

  /// Checkpoint file name of a rank inside `dir`.
  static std::filesystem::path checkpoint_file(const std::filesystem::path& dir, RankId rank) {
    return dir / ("rank_" + std::to_string(rank) + ".ckpt");
  }

  /// Writes this rank's shard: a JSON header line, then named tensors
  /// (u32 name length, name, u8 dtype, u8 ndim, u64 dims, payload).
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    const auto path = checkpoint_file(dir, pg_.rank());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    std::ostringstream rng;
    rng << rollout_rng_;
    const nlohmann::json header{{"format_version", kCheckpointVersion},
                                {"rank", pg_.rank()},
                                {"n", pg_.n_way()},
                                {"world", pg_.world_size()},
                                {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                                {"model_config_hash", config_fingerprint(nlohmann::json(model_->config()))},
                                {"global_step", global_step_},
                                {"adam_step", adam_.step},
                                {"rollout_rng", rng.str()}};
    out << header.dump() << '\n';
    const auto& params = model_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_record(out, params[i]->name, params[i]->value);
      write_record(out, params[i]->name + ".adam_m", adam_.m[i]);
      write_record(out, params[i]->name + ".adam_v", adam_.v[i]);
    }
    if (!out) throw std::runtime_error("short write to " + path.string());
  }

  void load(const std::filesystem::path& dir) {
    const auto path = checkpoint_file(dir, pg_.rank());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    std::string line;
    std::getline(in, line);
    const auto h = nlohmann::json::parse(line);
    if (h.at("format_version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
    const int n = h.at("n").get<int>(), world = h.at("world").get<int>();
    if (n != pg_.n_way() || world != pg_.world_size()) {
      throw ShapeError("checkpoint world (n=" + std::to_string(n) + ", world=" + std::to_string(world) +
                       ") does not match current world (n=" + std::to_string(pg_.n_way()) +
                       ", world=" + std::to_string(pg_.world_size()) + ")");
    }
    if (h.at("model_config_hash").get<std::string>() != config_fingerprint(nlohmann::json(model_->config()))) {
      throw ConfigError("checkpoint model configuration differs from the current model");
    }
    if (h.at("dtype").get<std::string>() != (sizeof(T) == 4 ? "f32" : "f64")) {
      throw ConfigError("checkpoint dtype differs from the current model");
    }
    const auto& params = model_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      read_record(in, params[i]->name, params[i]->value);
      read_record(in, params[i]->name + ".adam_m", adam_.m[i]);
      read_record(in, params[i]->name + ".adam_v", adam_.v[i]);
    }
    global_step_ = h.at("global_step").get<std::uint64_t>();
    adam_.step = h.at("adam_step").get<std::uint64_t>();
    std::istringstream rng(h.at("rollout_rng").get<std::string>());
    rng >> rollout_rng_;
  }

 private:
  static constexpr int kCheckpointVersion = 1;

  static void write_record(std::ostream& out, const std::string& name, const Tensor<T>& t) {
    const std::uint32_t len = std::uint32_t(name.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(name.data(), len);
    const auto dtype = static_cast<std::uint8_t>(dtype_of<T>::value), nd = std::uint8_t(t.ndim());
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    out.write(reinterpret_cast<const char*>(&nd), 1);
    for (std::size_t d : t.shape()) {
      const std::uint64_t v = d;
      out.write(reinterpret_cast<const char*>(&v), 8);
    }
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
  }

  static void read_record(std::istream& in, const std::string& name, Tensor<T>& t) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string got(len, '\0');
    in.read(got.data(), len);
    std::uint8_t dtype = 0, nd = 0;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    in.read(reinterpret_cast<char*>(&nd), 1);
    Shape shape(nd);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 8);
      d = std::size_t(v);
    }
    if (!in) throw std::runtime_error("truncated checkpoint record " + name);
    if (got != name) throw ConfigError("checkpoint record '" + got + "' where '" + name + "' was expected");
    if (dtype != static_cast<std::uint8_t>(dtype_of<T>::value)) throw ConfigError("checkpoint record " + name + " has a different dtype");
    if (shape != t.shape()) {
      throw ShapeError("checkpoint record " + name + " has shape " + shape_str(shape) + ", model expects " +
                       shape_str(t.shape()));
    }
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!in) throw std::runtime_error("truncated checkpoint payload " + name);
  }

  Communicator* comm_;
  ProcessGroup pg_;
  WeatherMixer<T>* model_;
  ShardedLoader<T>* loader_;
  WeightScheme weights_;
  TrainConfig cfg_;
  AdamState<T> adam_;
  std::mt19937_64 rollout_rng_;
  std::uint64_t global_step_ = 0;
  MatmulStats matmul_;
};

}  // namespace jigsaw
