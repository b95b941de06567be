// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// FLOP accounting, the timing harness behind the roofline and scaling
// suites, CSV output and the energy-to-CO2 formula.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/utsname.h>

#include "jigsaw/experiment.hpp"
#include "jigsaw/inproc.hpp"

namespace jigsaw {

// ------------------------------------------------------------------ flops

struct FlopBudget {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  std::size_t params = 0;

  std::uint64_t total() const { return forward + backward; }
};

/// Multiply-adds of an (m x k) by (k x n) product, counted as 2*m*k*n.
inline std::uint64_t linear_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }

/// 2*m*k*n over every linear layer of a forward pass with r processor steps.
/// Norms, activations, reductions and the elementwise blend are excluded.
inline FlopBudget count_flops(const ModelConfig& c, int r = 1, std::size_t batch = 1) {
  if (r < 1) throw ConfigError("count_flops: r must be >= 1");
  const std::uint64_t T = c.tokens() * batch, D = c.d_emb, K = c.patch_features();
  const std::uint64_t encdec = 2 * linear_flops(T, K, D);
  const std::uint64_t per_block = 2 * linear_flops(D, T, c.d_tok) + 2 * linear_flops(T, D, c.d_ch);
  FlopBudget b;
  b.forward = encdec + std::uint64_t(r) * c.n_blocks * per_block;
  b.backward = 2 * b.forward;
  b.params = model_param_count(c);
  return b;
}

// ----------------------------------------------------------------- sizing

/// Model whose forward FLOPs and parameter count are both close to `factor`
/// times the base model's, with d_ch / d_emb kept at the base ratio.
inline ModelConfig size_model(const ModelConfig& base, double factor) {
  if (!(factor > 0)) throw ConfigError("size_model: factor must be > 0");
  const double f_target = factor * double(count_flops(base).forward);
  const double p_target = factor * double(model_param_count(base));
  const double ratio = double(base.d_ch) / double(base.d_emb);
  ModelConfig best = base;
  double best_err = std::numeric_limits<double>::infinity();
  const std::size_t d_max = std::max<std::size_t>(8, 4 * base.d_emb * std::size_t(std::ceil(std::sqrt(factor))));
  const std::size_t t_max = std::max<std::size_t>(8, 4 * base.d_tok * std::size_t(std::ceil(factor)));
  for (std::size_t d = 2; d <= d_max; d += 2) {
    ModelConfig c = base;
    c.d_emb = d;
    c.d_ch = std::max<std::size_t>(2, 2 * std::size_t(std::lround(ratio * double(d) / 2)));
    for (std::size_t t = 2; t <= t_max; t += 2) {
      c.d_tok = t;
      const double ef = std::abs(double(count_flops(c).forward) / f_target - 1);
      const double ep = std::abs(double(model_param_count(c)) / p_target - 1);
      const double err = std::max(ef, ep);
      if (err < best_err) {
        best_err = err;
        best = c;
      }
    }
  }
  return best;
}

/// Rungs 2^0 .. 2^(rungs-1) times the base workload.
inline std::vector<ModelConfig> model_ladder(const ModelConfig& base, std::size_t rungs) {
  std::vector<ModelConfig> out{base};
  for (std::size_t k = 1; k < rungs; ++k) out.push_back(size_model(base, double(1u << k)));
  return out;
}

// ----------------------------------------------------------------- timing

enum class BenchMode { FullLoop, NoDataload };

inline std::string to_string(BenchMode m) { return m == BenchMode::FullLoop ? "full_loop" : "no_dataload"; }

struct BenchRecord {
  std::string suite;
  std::size_t rung = 0;
  int n_way = 1, dp_replicas = 1, world = 1;
  BenchMode mode = BenchMode::FullLoop;
  ModelConfig model;
  std::size_t steps = 0;
  std::size_t params_global = 0, params_per_rank = 0;
  std::uint64_t flops_per_fwd = 0;     // serial budget, one sample
  std::vector<std::uint64_t> rank_flops;  // measured matmul flops per step, each rank
  std::uint64_t matmul_elements = 0;   // layer elements sent per step, rank 0
  std::uint64_t comm_bytes = 0;        // all payload bytes sent per step, rank 0
  PhaseTimes phases;                   // medians
  double step_time = 0;                // median wall time per step
  double achieved_rate = 0;            // serial fwd+bwd budget per second, all replicas
  double speedup = 1, efficiency = 1;
  std::string note;

  double io_time() const { return phases.load + phases.transfer; }
  double compute_time() const { return phases.forward + phases.backward + phases.reduce + phases.optimize; }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Times `steps` training steps after `warmup` unrecorded ones. In
/// NoDataload mode the first batch is reused for every step. Collective
/// over the session's world; every rank returns the same record apart from
/// timing, which is rank 0's.
template <Scalar T>
BenchRecord run_mode(RankSession<T>& s, BenchMode mode, std::size_t steps, std::size_t warmup = 3) {
  if (steps < 1) throw ConfigError("bench steps must be >= 1");
  Communicator& comm = s.comm();
  const int world = comm.world_size();
  std::vector<RankId> all(world);
  for (int r = 0; r < world; ++r) all[r] = r;
  auto& tr = s.trainer();
  auto& loader = s.loader();

  std::optional<typename ShardedLoader<T>::Batch> fixed;
  std::vector<PhaseTimes> times;
  std::vector<double> walls;
  MatmulStats mm_before{};
  CommCounters cc_before{};
  using clock = std::chrono::steady_clock;
  for (std::size_t k = 0; k < warmup + steps; ++k) {
    if (k == warmup) {
      mm_before = tr.matmul_stats();
      cc_before = comm.counters();
    }
    comm.barrier(all);
    const auto t0 = clock::now();
    StepResult res;
    if (mode == BenchMode::FullLoop) {
      res = tr.next(false);
    } else {
      double load = 0;
      if (!fixed) {
        const auto l0 = clock::now();
        fixed = loader.load(0, 1);
        load = std::chrono::duration<double>(clock::now() - l0).count();
      }
      res = tr.step_on(*fixed, 1, load);
    }
    const double wall = std::chrono::duration<double>(clock::now() - t0).count();
    if (k >= warmup) {
      times.push_back(res.times);
      walls.push_back(wall);
    }
  }

  BenchRecord rec;
  rec.n_way = s.group().n_way();
  rec.dp_replicas = s.group().dp_replicas();
  rec.world = world;
  rec.mode = mode;
  rec.model = s.model().config();
  rec.steps = steps;
  const FlopBudget fb = count_flops(rec.model);
  rec.params_global = fb.params;
  rec.flops_per_fwd = fb.forward;

  const std::uint64_t my_flops = (tr.matmul_stats().flops - mm_before.flops) / steps;
  Tensor<double> per_rank({std::size_t(world)});
  per_rank[std::size_t(comm.rank())] = double(my_flops);
  Tensor<double> elems({std::size_t(world)});
  elems[std::size_t(comm.rank())] = double(s.model().local_param_elements());
  const Tensor<double> flops_all = comm.allreduce_sum(all, per_rank);
  const Tensor<double> elems_all = comm.allreduce_sum(all, elems);
  for (int r = 0; r < world; ++r) rec.rank_flops.push_back(std::uint64_t(flops_all[std::size_t(r)]));
  rec.params_per_rank = std::size_t(elems_all[0]);

  const CommCounters& cc = comm.counters();
  rec.matmul_elements = (tr.matmul_stats().elements_sent - mm_before.elements_sent) / steps;
  rec.comm_bytes = (cc.payload_bytes_sent - cc_before.payload_bytes_sent) / steps;

  std::vector<double> col;
  auto med = [&](double PhaseTimes::*f) {
    col.clear();
    for (const auto& t : times) col.push_back(t.*f);
    return median(col);
  };
  rec.phases = {med(&PhaseTimes::load),     med(&PhaseTimes::transfer), med(&PhaseTimes::forward),
                med(&PhaseTimes::backward), med(&PhaseTimes::reduce),   med(&PhaseTimes::optimize)};
  rec.step_time = median(walls);
  // Timing is rank 0's view.
  Tensor<double> t0({8});
  if (comm.rank() == 0) {
    const double vals[8] = {rec.phases.load,     rec.phases.transfer, rec.phases.forward, rec.phases.backward,
                            rec.phases.reduce,   rec.phases.optimize, rec.step_time,      0};
    std::copy(vals, vals + 8, t0.data());
  }
  const Tensor<double> tz = comm.allreduce_sum(all, t0);
  rec.phases = {tz[0], tz[1], tz[2], tz[3], tz[4], tz[5]};
  rec.step_time = tz[6];
  const double work = double(fb.total()) * double(s.config().train.batch) * rec.dp_replicas;
  rec.achieved_rate = rec.step_time > 0 ? work / rec.step_time : 0;
  return rec;
}

// ------------------------------------------------------------------ suites

enum class SuiteKind { Roofline, Strong, Weak, DpWeak };

inline std::string to_string(SuiteKind k) {
  switch (k) {
    case SuiteKind::Roofline: return "roofline";
    case SuiteKind::Strong: return "strong";
    case SuiteKind::Weak: return "weak";
    case SuiteKind::DpWeak: return "dp";
  }
  return "?";
}

inline SuiteKind suite_from_string(const std::string& s) {
  if (s == "roofline") return SuiteKind::Roofline;
  if (s == "strong") return SuiteKind::Strong;
  if (s == "weak") return SuiteKind::Weak;
  if (s == "dp") return SuiteKind::DpWeak;
  throw ConfigError("unknown bench suite '" + s + "' (expected roofline, strong, weak or dp)");
}

struct SuiteOptions {
  std::size_t rungs = 3;
  std::size_t steps = 5;
  std::size_t warmup = 3;
  int max_world = 8;
  bool f32 = false;
};

/// Runs one configuration on an in-process world.
inline BenchRecord bench_once(const ExperimentConfig& cfg, BenchMode mode, const SuiteOptions& opt) {
  BenchRecord out;
  std::mutex mu;
  run_inproc(cfg.world.size(), [&](Communicator& comm) {
    auto body = [&](auto tag) {
      using T = decltype(tag);
      RankSession<T> s(cfg, comm);
      const BenchRecord r = run_mode(s, mode, opt.steps, opt.warmup);
      if (comm.rank() == 0) {
        std::lock_guard lock(mu);
        out = r;
      }
    };
    if (opt.f32) body(float{});
    else body(double{});
  });
  return out;
}

/// Strong: fixed model per rung, n in {1, 2, 4}. Weak: model grown n-fold
/// so per-rank work stays fixed. Dp: model grown to n-fold, then 1, 2, 4, ...
/// replicas with the dataset grown in proportion. Roofline: every rung at
/// n in {1, 2, 4} in both modes.
inline std::vector<BenchRecord> scaling_suite(SuiteKind kind, const ExperimentConfig& base, const SuiteOptions& opt) {
  std::vector<BenchRecord> rows;
  const auto ladder = model_ladder(base.model, opt.rungs);
  const std::size_t samples = base.data.n_steps - base.train.r_max;
  auto run = [&](std::size_t rung, ExperimentConfig cfg, BenchMode mode) {
    cfg.train.batch = 1;
    BenchRecord r;
    const auto problems = cfg.problems();
    if (!problems.empty()) {
      r.rung = rung;
      r.n_way = cfg.world.n_way;
      r.dp_replicas = cfg.world.dp_replicas;
      r.world = cfg.world.size();
      r.mode = mode;
      r.model = cfg.model;
      r.note = "skipped: " + problems.front();
    } else {
      r = bench_once(cfg, mode, opt);
      r.rung = rung;
    }
    r.suite = to_string(kind);
    rows.push_back(r);
    return rows.size() - 1;
  };
  auto finish = [&](std::size_t baseline, std::size_t row, double ideal_ratio) {
    const auto& b = rows[baseline];
    auto& r = rows[row];
    if (!r.note.empty() || !b.note.empty() || r.step_time <= 0) return;
    const double ratio = b.step_time / r.step_time;
    if (kind == SuiteKind::Strong) {
      r.speedup = ratio;
      r.efficiency = ratio / ideal_ratio;
    } else {
      r.speedup = ratio * ideal_ratio;
      r.efficiency = ratio;
    }
  };

  const int ns[3] = {1, 2, 4};
  switch (kind) {
    case SuiteKind::Strong:
    case SuiteKind::Roofline:
      for (std::size_t k = 0; k < ladder.size(); ++k) {
        const BenchMode modes[2] = {BenchMode::FullLoop, BenchMode::NoDataload};
        for (int mi = 0; mi < (kind == SuiteKind::Roofline ? 2 : 1); ++mi) {
          std::size_t baseline = 0;
          for (int n : ns) {
            ExperimentConfig cfg = base;
            cfg.model = ladder[k];
            cfg.world = {n, 1, Backend::InProc, ""};
            const std::size_t row = run(k, cfg, modes[mi]);
            if (n == 1) baseline = row;
            finish(baseline, row, n);
          }
        }
      }
      break;
    case SuiteKind::Weak:
      for (std::size_t k = 0; k < ladder.size(); ++k) {
        std::size_t baseline = 0;
        for (int n : ns) {
          ExperimentConfig cfg = base;
          cfg.model = n == 1 ? ladder[k] : size_model(ladder[k], n);
          cfg.world = {n, 1, Backend::InProc, ""};
          const std::size_t row = run(k, cfg, BenchMode::FullLoop);
          if (n == 1) baseline = row;
          finish(baseline, row, n);
        }
      }
      break;
    case SuiteKind::DpWeak:
      for (int n : ns) {
        std::size_t baseline = 0;
        const ModelConfig m = n == 1 ? base.model : size_model(base.model, n);
        for (int R = 1; n * R <= opt.max_world; R *= 2) {
          ExperimentConfig cfg = base;
          cfg.model = m;
          cfg.world = {n, R, Backend::InProc, ""};
          cfg.data.n_steps = samples * std::size_t(R) + base.train.r_max;
          const std::size_t row = run(0, cfg, BenchMode::FullLoop);
          if (R == 1) baseline = row;
          finish(baseline, row, R);
        }
      }
      break;
  }
  return rows;
}

// --------------------------------------------------------------------- csv

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "suite",        "rung",         "n_way",        "dp_replicas",  "world",        "mode",
      "d_emb",        "d_tok",        "d_ch",         "n_blocks",     "params_global", "params_per_rank",
      "flops_per_fwd", "rank_flops",  "rank_flops_sum", "matmul_elements", "comm_bytes", "load_s",
      "transfer_s",   "forward_s",    "backward_s",   "reduce_s",     "optimize_s",   "step_s",
      "achieved_rate", "io_time",     "compute_time", "speedup",      "efficiency",   "note"};
  return cols;
}

/// Columns whose values do not depend on timing.
inline bool is_timing_column(const std::string& c) {
  static const std::vector<std::string> t{"load_s",        "transfer_s", "forward_s",    "backward_s", "reduce_s",
                                          "optimize_s",    "step_s",     "achieved_rate", "io_time",   "compute_time",
                                          "speedup",       "efficiency"};
  return std::find(t.begin(), t.end(), c) != t.end();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

inline std::string fmt_double(double v) {
  std::ostringstream o;
  o.precision(9);
  o << v;
  return o.str();
}

inline std::vector<std::string> csv_row(const BenchRecord& r) {
  std::string rf;
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < r.rank_flops.size(); ++i) {
    rf += (i ? ";" : "") + std::to_string(r.rank_flops[i]);
    sum += r.rank_flops[i];
  }
  return {r.suite,
          std::to_string(r.rung),
          std::to_string(r.n_way),
          std::to_string(r.dp_replicas),
          std::to_string(r.world),
          to_string(r.mode),
          std::to_string(r.model.d_emb),
          std::to_string(r.model.d_tok),
          std::to_string(r.model.d_ch),
          std::to_string(r.model.n_blocks),
          std::to_string(r.params_global),
          std::to_string(r.params_per_rank),
          std::to_string(r.flops_per_fwd),
          rf,
          std::to_string(sum),
          std::to_string(r.matmul_elements),
          std::to_string(r.comm_bytes),
          fmt_double(r.phases.load),
          fmt_double(r.phases.transfer),
          fmt_double(r.phases.forward),
          fmt_double(r.phases.backward),
          fmt_double(r.phases.reduce),
          fmt_double(r.phases.optimize),
          fmt_double(r.step_time),
          fmt_double(r.achieved_rate),
          fmt_double(r.io_time()),
          fmt_double(r.compute_time()),
          fmt_double(r.speedup),
          fmt_double(r.efficiency),
          r.note};
}

inline void write_csv(std::ostream& out, const std::vector<BenchRecord>& rows) {
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\r\n";
  for (const auto& r : rows) {
    const auto cells = csv_row(r);
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
    out << "\r\n";
  }
}

/// RFC 4180 parser: header row plus records.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("CSV has no column '" + name + "'");
    return std::size_t(it - header.begin());
  }
};

inline CsvTable parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  char ch;
  while (in.get(ch)) {
    any = true;
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      rec.push_back(std::move(field));
      field.clear();
    } else if (ch == '\r' || ch == '\n') {
      if (ch == '\r' && in.peek() == '\n') in.get();
      rec.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(rec));
      rec.clear();
      any = false;
    } else {
      field += ch;
    }
  }
  if (quoted) throw ConfigError("CSV ends inside a quoted field");
  if (any) {
    rec.push_back(std::move(field));
    records.push_back(std::move(rec));
  }
  CsvTable t;
  if (records.empty()) throw ConfigError("CSV is empty");
  t.header = std::move(records.front());
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != t.header.size()) {
      throw ConfigError("CSV row " + std::to_string(i) + " has " + std::to_string(records[i].size()) +
                        " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[i]));
  }
  return t;
}

/// Host description for sidecars.
inline nlohmann::json host_fingerprint() {
  nlohmann::json j;
  utsname u{};
  if (uname(&u) == 0) {
    j["system"] = u.sysname;
    j["release"] = u.release;
    j["machine"] = u.machine;
    j["hostname"] = u.nodename;
  }
  j["hardware_threads"] = std::thread::hardware_concurrency();
#if defined(__VERSION__)
  j["compiler"] = __VERSION__;
#endif
  return j;
}

/// Text summary of suite CSVs: one line per row with speedup and
/// efficiency to two decimals.
inline std::string summary_table(const std::vector<CsvTable>& tables) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-9s %4s %5s %3s %-11s %12s %8s %10s  %s\n", "suite", "rung", "n_way", "dp",
                "mode", "step_s", "speedup", "efficiency", "note");
  out << line;
  for (const auto& t : tables) {
    const std::size_t suite = t.column("suite"), rung = t.column("rung"), n = t.column("n_way"),
                      dp = t.column("dp_replicas"), mode = t.column("mode"), step = t.column("step_s"),
                      sp = t.column("speedup"), eff = t.column("efficiency"), note = t.column("note");
    for (const auto& r : t.rows) {
      const bool skipped = !r[note].empty();
      auto fixed = [&](const std::string& v, int prec) {
        if (skipped) return std::string("-");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.*f", prec, std::stod(v));
        return std::string(buf);
      };
      std::snprintf(line, sizeof line, "%-9s %4s %5s %3s %-11s %12s %8s %10s  %s\n", r[suite].c_str(),
                    r[rung].c_str(), r[n].c_str(), r[dp].c_str(), r[mode].c_str(), fixed(r[step], 6).c_str(),
                    fixed(r[sp], 2).c_str(), fixed(r[eff], 2).c_str(), r[note].c_str());
      out << line;
    }
  }
  return out.str();
}

/// Writes <path> and a <path>.json sidecar with the resolved config.
inline void write_suite(const std::filesystem::path& path, SuiteKind kind, const ExperimentConfig& base,
                        const SuiteOptions& opt, const std::vector<BenchRecord>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_csv(out, rows);
  }
  const nlohmann::json cfg = base;
  nlohmann::json side{{"suite", to_string(kind)},
                      {"config", cfg},
                      {"config_hash", config_fingerprint(cfg)},
                      {"options",
                       {{"rungs", opt.rungs},
                        {"steps", opt.steps},
                        {"warmup", opt.warmup},
                        {"max_world", opt.max_world},
                        {"dtype", opt.f32 ? "f32" : "f64"}}},
                      {"host", host_fingerprint()}};
  std::ofstream js(path.string() + ".json");
  if (!js) throw std::runtime_error("cannot write " + path.string() + ".json");
  js << side.dump(2) << '\n';
}

// ------------------------------------------------------------------ energy

/// Rounds to 3 significant figures.
inline double round_sig3(double v) {
  if (v == 0) return 0;
  const double mag = std::pow(10.0, 2 - std::floor(std::log10(std::abs(v))));
  return std::round(v * mag) / mag;
}

struct EnergyReport {
  double energy_kwh = 0, pue = 1, carbon_kg_per_kwh = 0, co2e_kg = 0;
};

/// CO2 equivalent in kg: E_total * PUE * e_C, to 3 significant figures.
inline double co2_equiv(double energy_kwh, double pue, double carbon_kg_per_kwh) {
  if (energy_kwh < 0 || pue < 0 || carbon_kg_per_kwh < 0) throw ConfigError("co2_equiv inputs must be >= 0");
  return round_sig3(energy_kwh * pue * carbon_kg_per_kwh);
}

inline EnergyReport energy_report(double energy_kwh, double pue, double carbon_kg_per_kwh) {
  return {energy_kwh, pue, carbon_kg_per_kwh, co2_equiv(energy_kwh, pue, carbon_kg_per_kwh)};
}

}  // namespace jigsaw
