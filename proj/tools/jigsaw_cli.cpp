// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// jigsaw: verify, train, bench and report over JSON experiment configs.
//
// Exit codes: 0 success, 1 check failure, 2 config error, 3 runtime or
// communication error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "jigsaw/bench.hpp"
#include "jigsaw/verify.hpp"
#include "launcher.hpp"

namespace fs = std::filesystem;
using namespace jigsaw;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeError = 3 };

struct GlobalOptions {
  std::string config;
  std::string backend;
  std::string out = "jigsaw_out";
  std::optional<std::uint64_t> seed;
  std::string dtype = "f64";
};

ExperimentConfig resolve(const GlobalOptions& g) {
  ExperimentConfig cfg = ExperimentConfig::desk();
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw ConfigError("cannot open config " + g.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(g.config + ": " + e.what());
    }
    cfg = j.get<ExperimentConfig>();
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.backend == "inproc") cfg.world.backend = Backend::InProc;
  if (g.backend == "sockets") cfg.world.backend = Backend::Sockets;
  if (const SocketEnv env = socket_env(); !env.ranktable.empty()) cfg.world.rank_table = env.ranktable;
  cfg.validate();
  return cfg;
}

nlohmann::json provenance(const ExperimentConfig& cfg, const GlobalOptions& g, const std::string& command) {
  const nlohmann::json j = cfg;
  return {{"command", command}, {"config", j}, {"config_hash", config_fingerprint(j)}, {"dtype", g.dtype}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_inproc(const ExperimentConfig& cfg, const std::string& command) {
  if (cfg.world.backend != Backend::InProc) throw ConfigError(command + " runs on the inproc backend only");
}

// ----------------------------------------------------------------- verify

int cmd_verify(const GlobalOptions& g) {
  const ExperimentConfig cfg = resolve(g);
  require_inproc(cfg, "verify");
  const auto rep = verify_experiment(cfg, {}, [](const CheckResult& c) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << "  error=" << c.error << " tol=" << c.tolerance << "  "
              << c.detail << '\n';
  });
  nlohmann::json j = provenance(cfg, g, "verify");
  j["dtype"] = "f64";
  j["report"] = rep;
  write_json(fs::path(g.out) / "verify.json", j);
  std::cout << (rep.passed() ? "verify: all checks passed" : "verify: FAILED") << '\n';
  return rep.passed() ? kOk : kCheckFailed;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  std::size_t steps = 0;  // 0: the full schedule
  bool finetune = false;
  bool resume = false;
  std::size_t checkpoint_every = 1;  // epochs
};

template <Scalar T>
void train_rank(Communicator& comm, const ExperimentConfig& cfg, const GlobalOptions& g, const TrainOptions& o) {
  RankSession<T> s(cfg, comm);
  auto& tr = s.trainer();
  const fs::path out = g.out, ckpt = out / "checkpoints";
  if (o.resume) tr.load(ckpt);
  const std::size_t spe = s.loader().steps_per_epoch();
  const std::size_t remaining = tr.total_steps() - std::min<std::size_t>(tr.total_steps(), tr.global_step());
  const std::size_t steps = o.steps ? o.steps : remaining;
  const bool writer = comm.rank() == 0;
  const std::string hash = config_fingerprint(nlohmann::json(cfg));

  std::ofstream epochs_csv, steps_csv;
  if (writer) {
    fs::create_directories(out);
    const auto mode = o.resume ? std::ios::app : std::ios::trunc;
    const bool fresh = !o.resume || !fs::exists(out / "loss.csv");
    epochs_csv.open(out / "loss.csv", std::ios::binary | mode);
    steps_csv.open(out / "steps.csv", std::ios::binary | mode);
    if (!epochs_csv || !steps_csv) throw std::runtime_error("cannot write loss CSVs in " + out.string());
    if (fresh) {
      epochs_csv << "epoch,steps,mean_loss,last_loss,lr,seconds,config_hash\r\n";
      steps_csv << "step,epoch,loss,grad_norm,lr,rollout\r\n";
    }
  }

  long double sum = 0;
  std::size_t in_epoch = 0;
  auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t epoch = tr.epoch();
    const StepResult r = tr.next(o.finetune);
    if (!std::isfinite(r.loss)) {
      throw std::runtime_error("rank " + std::to_string(comm.rank()) + ": non-finite loss at step " +
                               std::to_string(tr.global_step() - 1));
    }
    sum += r.loss;
    ++in_epoch;
    if (writer) {
      steps_csv << tr.global_step() - 1 << ',' << epoch << ',' << fmt_double(r.loss) << ',' << fmt_double(r.grad_norm)
                << ',' << fmt_double(r.lr) << ',' << r.rollout << "\r\n";
    }
    const bool epoch_end = tr.global_step() % spe == 0;
    if (epoch_end || k + 1 == steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (writer) {
        epochs_csv << epoch << ',' << in_epoch << ',' << fmt_double(double(sum / in_epoch)) << ','
                   << fmt_double(r.loss) << ',' << fmt_double(r.lr) << ',' << fmt_double(secs) << ',' << hash << "\r\n";
        epochs_csv.flush();
        std::cout << "epoch " << epoch << "  steps " << in_epoch << "  mean_loss " << double(sum / in_epoch) << '\n';
      }
      if ((epoch_end && (epoch + 1) % o.checkpoint_every == 0) || k + 1 == steps) tr.save(ckpt);
      sum = 0;
      in_epoch = 0;
      t0 = std::chrono::steady_clock::now();
    }
  }
}

int cmd_train(const GlobalOptions& g, const TrainOptions& o, const std::vector<std::string>& args) {
  const ExperimentConfig cfg = resolve(g);
  if (o.checkpoint_every == 0) throw ConfigError("--checkpoint-every must be >= 1");
  if (cli::worker_rank() <= 0) write_json(fs::path(g.out) / "run.json", provenance(cfg, g, "train"));
  return cli::launch(cfg, args, [&](Communicator& comm) {
    if (g.dtype == "f32") train_rank<float>(comm, cfg, g, o);
    else train_rank<double>(comm, cfg, g, o);
  });
}

// ------------------------------------------------------------------ bench

int cmd_bench(const GlobalOptions& g, const std::string& suite, SuiteOptions opt) {
  const ExperimentConfig cfg = resolve(g);
  require_inproc(cfg, "bench");
  const SuiteKind kind = suite_from_string(suite);
  opt.f32 = g.dtype == "f32";
  const auto rows = scaling_suite(kind, cfg, opt);
  const fs::path path = fs::path(g.out) / (suite + ".csv");
  write_suite(path, kind, cfg, opt, rows);
  std::stringstream csv;
  write_csv(csv, rows);
  std::cout << summary_table({parse_csv(csv)}) << "wrote " << path.string() << '\n';
  return kOk;
}

// ----------------------------------------------------------------- report

int cmd_report(const std::vector<std::string>& files) {
  std::vector<CsvTable> tables;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + f);
    tables.push_back(parse_csv(in));
  }
  std::cout << summary_table(tables);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-parallel weather mixer: verification, training and scaling benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config (JSON); desk defaults when omitted");
  app.add_option("--backend", g.backend, "Override world.backend")->check(CLI::IsMember({"inproc", "sockets"}));
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Override the experiment seed");
  app.add_option("--dtype", g.dtype, "Scalar type for train and bench")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  auto* verify = app.add_subcommand("verify", "Serial vs sharded equivalence, gradient and loader checks (f64)");

  TrainOptions to;
  auto* train = app.add_subcommand("train", "Train and write checkpoints plus loss CSVs");
  train->add_option("--steps", to.steps, "Number of steps (default: the full schedule)");
  train->add_flag("--finetune", to.finetune, "Randomized rollout fine-tuning");
  train->add_flag("--resume", to.resume, "Resume from <out>/checkpoints");
  train->add_option("--checkpoint-every", to.checkpoint_every, "Epochs between checkpoints")->capture_default_str();

  std::string suite;
  SuiteOptions so;
  auto* bench = app.add_subcommand("bench", "Run a scaling suite and write <out>/<suite>.csv");
  bench->add_option("suite", suite, "roofline, strong, weak or dp")
      ->required()
      ->check(CLI::IsMember({"roofline", "strong", "weak", "dp"}));
  bench->add_option("--rungs", so.rungs, "Model ladder rungs")->capture_default_str();
  bench->add_option("--steps", so.steps, "Measured steps per row")->capture_default_str();
  bench->add_option("--warmup", so.warmup, "Warmup steps per row")->capture_default_str();
  bench->add_option("--max-world", so.max_world, "Largest world for the dp suite")->capture_default_str();

  std::vector<std::string> files;
  auto* report = app.add_subcommand("report", "Summarize suite CSVs");
  report->add_option("csv", files, "Suite CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  const int rank = cli::worker_rank();
  const std::string who = rank >= 0 ? "rank " + std::to_string(rank) + ": " : "";
  try {
    if (*verify) return cmd_verify(g);
    if (*train) return cmd_train(g, to, std::vector<std::string>(argv, argv + argc));
    if (*bench) return cmd_bench(g, suite, so);
    if (*report) return cmd_report(files);
  } catch (const ConfigError& e) {
    std::cerr << who << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CommError& e) {
    std::cerr << who << "communication error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << who << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
