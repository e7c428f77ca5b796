// equiflow: invariant checks, ensemble training, metric evaluation and the C2 toy demo.
//
// Exit codes: 0 success, 1 a check or run failed, 2 bad usage / config / input files.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "equiflow/checks.hpp"
#include "equiflow/config.hpp"
#include "equiflow/data.hpp"
#include "equiflow/ensemble.hpp"
#include "equiflow/training.hpp"

using namespace equiflow;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> members;
  std::optional<std::size_t> epochs;
  std::optional<std::string> dataset;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--seed", c.seed, "override train.seed");
  cmd->add_option("--out", c.out, "output directory (overrides output.dir)");
  cmd->add_option("--members", c.members, "override ensemble.members");
  cmd->add_option("--epochs", c.epochs, "override train.epochs");
  cmd->add_option("--dataset", c.dataset, "mnist | cifar_gray | toy")
      ->check(CLI::IsMember({"mnist", "cifar_gray", "toy"}));
  cmd->add_option("--threads", c.threads, "worker threads (0: all cores)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.out) cfg.output.dir = *c.out;
  if (c.members) cfg.ensemble.members = *c.members;
  if (c.epochs) cfg.train.epochs = *c.epochs;
  if (c.dataset) cfg.data.dataset = *c.dataset;
  if (c.threads) cfg.ensemble.threads = *c.threads;
  validate(cfg);
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

fs::path ensure_dir(const std::string& d) {
  fs::create_directories(d);
  return fs::path(d);
}

// ---------------------------------------------------------------------------

int cmd_check(const Common& c, bool to_stdout) {
  const auto cfg = resolve(c);
  const auto results = run_check_suite(cfg, cfg.train.seed);
  json report;
  report["checks"] = json::array();
  std::string first_failure;
  for (const auto& r : results) {
    report["checks"].push_back(to_json(r));
    std::fprintf(stderr, "%-14s %-40s residual %.3e\n", r.status().c_str(), r.name.c_str(), r.residual);
    if (!r.ok() && first_failure.empty()) first_failure = r.name;
  }
  report["passed"] = first_failure.empty();
  if (!first_failure.empty()) report["first_failure"] = first_failure;
  const auto dir = ensure_dir(cfg.output.dir);
  write_text(dir / "check_report.json", report.dump(2) + "\n");
  if (to_stdout) std::cout << report.dump(2) << "\n";
  if (!first_failure.empty()) {
    std::fprintf(stderr, "check failed: %s\n", first_failure.c_str());
    return 1;
  }
  return 0;
}

int cmd_train(const Common& c, const std::vector<std::string>& only_models, bool eval_init) {
  auto cfg = resolve(c);
  if (!only_models.empty()) cfg.ensemble.models = only_models;
  validate(cfg);
  if (cfg.data.dataset == "cifar_gray") throw UsageError("train: cifar_gray is evaluation-only; train on mnist or toy");
  const auto dir = ensure_dir(cfg.output.dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const auto train = load_train_data(cfg);
  std::vector<Dataset> tests{load_test_data(cfg, cfg.data.dataset)};
  if (cfg.data.cifar_ood) tests.push_back(load_test_data(cfg, "cifar_gray"));
  std::fprintf(stderr, "[train] %zu training samples; evaluating on %zu set(s)\n", train.size(), tests.size());

  std::ofstream csv(dir / "metrics.csv");
  std::ofstream loss_csv(dir / "loss.csv");
  if (!csv || !loss_csv) throw DataError("cannot write into " + dir.string());
  csv << metrics_csv_header() << "\n";
  loss_csv << "epoch,model,mean_loss\n";
  json all = json::array();
  const std::size_t threads = cfg.ensemble.threads;

  const auto report = [&](std::size_t epoch, const std::string& model, const Ensemble& e) {
    for (const auto& t : tests) {
      auto r = cfg.train.use_float ? evaluate<float>(e, t, threads) : evaluate<double>(e, t, threads);
      r.epoch = epoch;
      r.model = model;
      csv << metrics_csv_row(r) << "\n";
      all.push_back(to_json(r));
    }
    csv.flush();
  };

  for (const auto& model : cfg.ensemble.models) {
    const auto init = initial_ensemble(cfg, model);
    std::fprintf(stderr, "[train] model=%s members=%zu p=%zu\n", model.c_str(), init.size(), init.spec->space.dim());
    if (eval_init) report(0, model, init);
    auto t0 = std::chrono::steady_clock::now();
    const auto on_epoch = [&](std::size_t epoch, const Ensemble& cur, double loss) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[train] model=%s epoch=%zu loss=%.6f time=%.1fs\n", model.c_str(), epoch, loss, secs);
      loss_csv << epoch << "," << model << "," << fmt17(loss) << "\n";
      report(epoch, model, cur);
      t0 = std::chrono::steady_clock::now();
    };
    const auto on_abort = [&](std::size_t member, const std::string& why) {
      std::fprintf(stderr, "[train] model=%s member=%zu aborted: %s\n", model.c_str(), member, why.c_str());
    };
    const auto trained = cfg.train.use_float ? train_ensemble<float>(init, train, cfg.train, threads, on_epoch, on_abort)
                                             : train_ensemble<double>(init, train, cfg.train, threads, on_epoch, on_abort);
    save_checkpoint((dir / (model + ".ckpt")).string(), make_checkpoint(cfg, model, trained, cfg.train.epochs));
  }
  write_text(dir / "metrics.json", all.dump(2) + "\n");
  return 0;
}

int cmd_eval(const std::string& checkpoint, const Common& c) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
  const auto ck = load_checkpoint(checkpoint);
  ExperimentConfig cfg;
  const auto ens = ensemble_from_checkpoint(ck, &cfg);
  if (c.out) cfg.output.dir = *c.out;
  if (c.threads) cfg.ensemble.threads = *c.threads;
  std::vector<std::string> sets{c.dataset ? *c.dataset : cfg.data.dataset};
  if (!c.dataset && cfg.data.cifar_ood) sets.push_back("cifar_gray");
  const auto dir = ensure_dir(cfg.output.dir);
  std::string rows = std::string(metrics_csv_header()) + "\n";
  json all = json::array();
  for (const auto& name : sets) {
    const auto data = load_test_data(cfg, name);
    auto r = cfg.train.use_float ? evaluate<float>(ens, data, cfg.ensemble.threads)
                                 : evaluate<double>(ens, data, cfg.ensemble.threads);
    r.epoch = ck.epoch;
    r.model = ck.model;
    rows += metrics_csv_row(r) + "\n";
    all.push_back(to_json(r));
    std::fprintf(stderr, "[eval] model=%s dataset=%s osp=%.4f log10_kl=%.4f\n", r.model.c_str(), name.c_str(), r.osp,
                 r.log10_kl);
  }
  write_text(dir / "eval.csv", rows);
  write_text(dir / "eval.json", all.dump(2) + "\n");
  return 0;
}

// C2 toy ensemble y = w1 x1 + w2 x2; the group negates x2 (and so w2).
int cmd_demo2d(const Common& c, std::size_t steps, std::size_t every, double lr, bool asymmetric) {
  const auto cfg = resolve(c);
  const std::size_t members = c.members ? *c.members : 10;
  if (members == 0 || every == 0) throw UsageError("demo2d: members and --every must be >= 1");
  const auto spec = make_c2_linear();
  const auto data = make_c2_toy(64, cfg.train.seed);
  auto rng = make_stream(cfg.train.seed, 0, Stream::Init);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> w(members);
  for (std::size_t m = 0; m < members; m += 2) {
    const double a = nd(rng), b = nd(rng);
    w[m] = {a, b};
    if (m + 1 < members) w[m + 1] = {a, asymmetric ? nd(rng) : -b};
    else if (!asymmetric && members > 1) w[m][1] = 0.0;  // an unpaired member sits on the mirror line
  }
  const auto dir = ensure_dir(cfg.output.dir);
  std::ofstream os(dir / "demo2d.csv");
  if (!os) throw DataError("cannot write demo2d.csv");
  os << "t,member,w1,w2\n";
  const auto snapshot = [&](std::size_t t) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t m = 0; m < members; ++m) {
      os << t << "," << m << "," << fmt17(w[m][0]) << "," << fmt17(w[m][1]) << "\n";
      m1 += w[m][0];
      m2 += w[m][1];
    }
    m1 /= static_cast<double>(members);
    m2 /= static_cast<double>(members);
    os << t << ",mean," << fmt17(m1) << "," << fmt17(m2) << "\n";
    return m2;
  };
  double worst = std::abs(snapshot(0));
  for (std::size_t t = 1; t <= steps; ++t) {
    for (auto& m : w) m = step_full_gd<double>(spec, m, data, lr, LossKind::SquaredError);
    if (t % every == 0 || t == steps) worst = std::max(worst, std::abs(snapshot(t)));
  }
  std::fprintf(stderr, "[demo2d] members=%zu steps=%zu max |mean w2| = %.3e\n", members, steps, worst);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equiflow: equivariance checks and ensemble experiments for rotation-equivariant CNNs"};
  app.require_subcommand(1);

  Common check_c, train_c, eval_c, demo_c;
  auto* check = app.add_subcommand("check", "run the invariant-check suite (exit 0 iff all verdicts agree)");
  add_common(check, check_c);
  bool print_report = false;
  check->add_flag("--print", print_report, "also print the JSON report on stdout");

  auto* train = app.add_subcommand("train", "train ensembles, write per-epoch metrics and checkpoints");
  add_common(train, train_c);
  std::vector<std::string> only_models;
  bool eval_init = false;
  train->add_option("--model", only_models, "restrict to these models")
      ->check(CLI::IsMember({"sym", "asym_invariant_init", "asym_naive"}));
  train->add_flag("--eval-init", eval_init, "also evaluate before training (epoch 0 rows)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_c);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();

  auto* demo = app.add_subcommand("demo2d", "C2 toy ensemble trajectories as CSV (t, member, w1, w2)");
  add_common(demo, demo_c);
  std::size_t steps = 200, every = 10;
  double lr = 0.05;
  bool asymmetric = false;
  demo->add_option("--steps", steps, "gradient steps");
  demo->add_option("--every", every, "snapshot interval");
  demo->add_option("--lr", lr, "learning rate");
  demo->add_flag("--asymmetric", asymmetric, "independent w2 draws instead of mirrored pairs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*check) return cmd_check(check_c, print_report);
    if (*train) return cmd_train(train_c, only_models, eval_init);
    if (*eval) return cmd_eval(checkpoint, eval_c);
    if (*demo) return cmd_demo2d(demo_c, steps, every, lr, asymmetric);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
