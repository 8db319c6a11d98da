// Command-line front end: data generation, the perfect policy, CI and RL
// training, evaluation of saved models, and the full results table.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "presc/harness.hpp"

namespace fs = std::filesystem;
using namespace presc;

namespace {

struct Options {
  std::string process;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  std::string mode;
  std::string config;
  std::string out = "out";
  std::string checkpoint;
  std::string policy;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) cfg = load_config(o.config);
  if (!o.process.empty()) cfg.processes = {parse_process(o.process)};
  if (o.seed) cfg.seed = *o.seed;
  if (o.runs) cfg.runs = *o.runs;
  if (!o.mode.empty()) cfg.rl_mode = parse_rl_mode(o.mode);
  validate(cfg);
  return cfg;
}

fs::path out_dir(const Options& o) {
  fs::path p(o.out);
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  return f;
}

std::string pname(ProcessId id) { return std::string(to_string(id)); }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Curve files and checkpoints for every run, plus progress on stderr.
ExperimentHooks file_hooks(const fs::path& dir, const Stopwatch& clock) {
  auto ci_curves = std::make_shared<std::map<std::string, std::ofstream>>();
  auto rl_curves = std::make_shared<std::map<std::string, std::ofstream>>();
  ExperimentHooks h;
  h.log = [&clock](const std::string& s) { std::cerr << "[" << std::fixed << std::setprecision(1) << clock.seconds() << "s] " << s << std::defaultfloat << '\n'; };
  h.ci_epoch = [dir, ci_curves](ProcessId id, int run, const EpochLog& l) {
    const auto name = pname(id) + "_ci_curve_run" + std::to_string(run) + ".csv";
    auto it = ci_curves->find(name);
    if (it == ci_curves->end()) {
      it = ci_curves->emplace(name, open_out(dir / name)).first;
      it->second << "epoch,train_mae,val_mae\n";
    }
    it->second << l.epoch << ',' << format_number(l.train_mae) << ',' << format_number(l.val_mae) << '\n';
  };
  h.rl_eval = [dir, rl_curves](ProcessId id, int run, const RLCurvePoint& p) {
    const auto name = pname(id) + "_rl_curve_run" + std::to_string(run) + ".csv";
    auto it = rl_curves->find(name);
    if (it == rl_curves->end()) {
      it = rl_curves->emplace(name, open_out(dir / name)).first;
      it->second << "transitions,eval_uplift,epsilon\n";
    }
    it->second << p.transitions << ',' << format_number(p.eval_uplift) << ',' << format_number(p.epsilon) << '\n';
  };
  h.ci_done = [dir, ci_curves](ProcessId id, int run, const CIRunResult& r) {
    ci_curves->erase(pname(id) + "_ci_curve_run" + std::to_string(run) + ".csv");
    auto f = open_out(dir / (pname(id) + "_ci_run" + std::to_string(run) + ".ckpt"));
    save_ci_model(f, *r.train.model, r.threshold.threshold);
  };
  h.rl_done = [dir, rl_curves](ProcessId id, int run, const RLRunResult& r) {
    rl_curves->erase(pname(id) + "_rl_curve_run" + std::to_string(run) + ".csv");
    const auto stem = pname(id) + "_rl_run" + std::to_string(run);
    if (auto n = std::dynamic_pointer_cast<const NeuralQAgent>(r.train.agent)) {
      auto f = open_out(dir / (stem + ".ckpt"));
      save_rl_agent(f, *n);
    } else if (auto t = std::dynamic_pointer_cast<const TabularQAgent>(r.train.agent)) {
      auto f = open_out(dir / (stem + "_qtable.csv"));
      t->write_csv(f);
    }
  };
  return h;
}

void print_check(const Check& c) {
  std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ")\n";
}

int cmd_generate(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  for (auto id : cfg.processes) {
    const auto test = make_test_set(id, derive_seed(cfg.seed, id, SeedStream::test_set), cfg.n_test);
    {
      auto f = open_out(dir / (pname(id) + "_test_log.csv"));
      write_event_log(f, test_log(test));
    }
    {
      auto f = open_out(dir / (pname(id) + "_test_counterfactuals.csv"));
      write_counterfactuals(f, test);
    }
    const auto data_seed = derive_seed(cfg.seed, id, SeedStream::rct_data, 1);
    Rng rng(data_seed);
    const auto ds = build_rct_dataset(id, cfg.n_rct, rng, cfg.validation_fraction);
    {
      auto f = open_out(dir / (pname(id) + "_rct_log.csv"));
      write_event_log(f, rct_log(ds, data_seed));
    }
    std::cout << pname(id) << ": " << test.cases.size() << " test cases, " << ds.cases.size() << " RCT cases -> "
              << dir.string() << '\n';
  }
  return 0;
}

int cmd_perfect(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  bool ok = true;
  for (auto id : cfg.processes) {
    const auto pp = std::make_shared<const PerfectPolicy>(build_perfect_policy(id));
    {
      auto f = open_out(dir / (pname(id) + "_perfect_policy.csv"));
      write_perfect_policy_csv(*pp, f);
    }
    const double exact = evaluate_policy_exact(make_policy(pp), id).expected_uplift_per_case;
    const bool consistent = std::abs(exact - pp->expected_uplift()) <= 1e-9;
    ok = ok && consistent;
    std::cout << pname(id) << ": prefixes " << pp->values.size() << ", root value " << format_number(pp->root_value)
              << ", never value " << format_number(pp->never_value) << ", expected uplift per case "
              << format_number(pp->expected_uplift()) << ", enumerated " << format_number(exact)
              << (consistent ? "" : "  MISMATCH") << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_train_ci(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  const Stopwatch clock;
  const auto hooks = file_hooks(dir, clock);
  for (auto id : cfg.processes) {
    const auto test = make_test_set(id, derive_seed(cfg.seed, id, SeedStream::test_set), cfg.n_test);
    for (int run = 1; run <= cfg.runs; ++run) {
      const auto r = run_ci(id, cfg, run, test, hooks);
      std::cout << pname(id) << " CI run " << run << ": epochs " << r.train.epochs << " (best " << r.train.best_epoch
                << "), threshold " << format_number(r.threshold.threshold) << ", test uplift "
                << format_number(r.record.uplift) << ", exact per case " << format_number(r.record.exact_per_case)
                << '\n';
    }
  }
  return 0;
}

int cmd_train_rl(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  const Stopwatch clock;
  const auto hooks = file_hooks(dir, clock);
  for (auto id : cfg.processes) {
    const auto test = make_test_set(id, derive_seed(cfg.seed, id, SeedStream::test_set), cfg.n_test);
    for (int run = 1; run <= cfg.runs; ++run) {
      const auto r = run_rl(id, cfg, run, test, hooks);
      std::cout << pname(id) << " RL (" << to_string(cfg.rl_mode) << ") run " << run << ": transitions "
                << r.train.transitions << " (best at " << r.train.best_at << "), test uplift "
                << format_number(r.record.uplift) << ", exact per case " << format_number(r.record.exact_per_case)
                << '\n';
    }
  }
  return 0;
}

int cmd_evaluate(const Options& o) {
  const auto cfg = resolve(o);
  if (o.checkpoint.empty() == o.policy.empty())
    throw CLI::ValidationError("evaluate", "give exactly one of --checkpoint or --policy");
  std::optional<ProcessId> fixed;
  std::optional<Policy> policy;
  if (!o.checkpoint.empty()) {
    std::ifstream in(o.checkpoint);
    if (!in) throw std::runtime_error("cannot open " + o.checkpoint);
    Metadata meta;
    std::stringstream buf;
    buf << in.rdbuf();
    load_checkpoint<float>(buf, &meta);
    buf.clear();
    buf.seekg(0);
    if (meta.at("kind") == "ci") {
      auto m = load_ci_model(buf);
      policy = ci_policy(m.model, m.threshold);
      fixed = m.model->encoder().process();
    } else {
      auto a = load_rl_agent(buf);
      fixed = a->encoder().process();
      policy = extract_policy(a);
    }
  }
  for (auto id : cfg.processes) {
    if (fixed && *fixed != id) continue;
    const auto test = make_test_set(id, derive_seed(cfg.seed, id, SeedStream::test_set), cfg.n_test);
    Policy pol = policy ? *policy : never_policy();
    if (!policy) {
      if (o.policy == "perfect") {
        pol = make_policy(std::make_shared<const PerfectPolicy>(build_perfect_policy(id)));
      } else if (o.policy == "never") {
        pol = never_policy();
      } else if (o.policy.rfind("always:", 0) == 0) {
        pol = always_at_policy(std::stoi(o.policy.substr(7)));
      } else if (o.policy == "rct") {
        Rng rng(derive_seed(cfg.seed, id, SeedStream::rct_eval));
        std::cout << pname(id) << " rct: test uplift " << format_number(rct_sampled_uplift(test.cases, rng))
                  << ", exact per case " << format_number(rct_expected_uplift(id)) << '\n';
        continue;
      } else {
        throw CLI::ValidationError("--policy", "expected perfect, never, rct or always:K");
      }
    }
    std::cout << pname(id) << ' ' << pol.name() << ": test uplift "
              << format_number(evaluate_policy_sampled(pol, test.cases)) << " over " << test.cases.size()
              << " cases, exact per case " << format_number(evaluate_policy_exact(pol, id).expected_uplift_per_case)
              << '\n';
  }
  return 0;
}

int cmd_table(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  const Stopwatch clock;
  {
    auto f = open_out(dir / "config.txt");
    write_config(f, cfg);
  }
  auto hooks = file_hooks(dir, clock);
  std::vector<std::string> phases;
  hooks.phase_time = [&phases](ProcessId id, const std::string& phase, double seconds) {
    std::ostringstream line;
    line << pname(id) << '_' << phase << "_seconds " << std::fixed << std::setprecision(1) << seconds;
    phases.push_back(line.str());
  };
  const auto table = run_experiment(cfg, hooks);
  for (auto [fmt, name] : {std::pair{ReportFormat::text, "report.txt"}, std::pair{ReportFormat::csv, "report.csv"},
                           std::pair{ReportFormat::json, "report.json"}}) {
    auto f = open_out(dir / name);
    f << emit_report(table, fmt);
  }
  {
    auto f = open_out(dir / "timing.txt");
    for (const auto& line : phases) f << line << '\n';
    f << "elapsed_seconds " << std::fixed << std::setprecision(1) << clock.seconds() << '\n';
  }
  std::cout << emit_report(table, ReportFormat::text) << '\n';
  bool ok = true;
  for (const auto& c : report_checks(table)) {
    print_check(c);
    ok = ok && c.pass;
  }
  std::cout << "elapsed " << std::fixed << std::setprecision(1) << clock.seconds() << " s\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Timed process interventions: causal inference vs. reinforcement learning"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* sub) {
    sub->add_option("--process", o.process, "Process to run (default: all)")->check(CLI::IsMember({"p1", "p2"}));
    sub->add_option("--seed", o.seed, "Base seed");
    sub->add_option("--runs", o.runs, "Runs per method")->check(CLI::PositiveNumber);
    sub->add_option("--mode", o.mode, "RL value function")->check(CLI::IsMember({"neural", "tabular"}));
    sub->add_option("--config", o.config, "Flat key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output directory");
  };

  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
  };
  const Cmd cmds[] = {
      {"generate", "Write the test set and an RCT event log", cmd_generate},
      {"perfect", "Solve and dump the perfect policy", cmd_perfect},
      {"train-ci", "Train CI models and pick their thresholds", cmd_train_ci},
      {"train-rl", "Train Q-learning agents", cmd_train_rl},
      {"evaluate", "Evaluate a checkpoint or a built-in policy on the test set", cmd_evaluate},
      {"reproduce-table3", "Run every method and write the results table", cmd_table},
  };
  int (*chosen)(const Options&) = nullptr;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    common(sub);
    if (std::string(c.name) == "evaluate") {
      sub->add_option("--checkpoint", o.checkpoint, "CI or RL checkpoint")->check(CLI::ExistingFile);
      sub->add_option("--policy", o.policy, "perfect, never, rct or always:K");
    }
    sub->callback([&chosen, fn = c.fn] { chosen = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return chosen(o);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
