#pragma once

// Experiment orchestration: configuration, seed derivation, shared test sets,
// the multi-run protocol behind the results table, report rendering/parsing,
// event-log export and model checkpoints.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "presc/ci_learner.hpp"
#include "presc/policy.hpp"
#include "presc/process.hpp"
#include "presc/rl_learner.hpp"

namespace presc {

// ---------------------------------------------------------------------------
// Number formatting
// ---------------------------------------------------------------------------

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_number(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class RLMode { neural, tabular };

inline std::string_view to_string(RLMode m) { return m == RLMode::neural ? "neural" : "tabular"; }
inline RLMode parse_rl_mode(std::string_view s) {
  if (s == "neural") return RLMode::neural;
  if (s == "tabular") return RLMode::tabular;
  throw std::invalid_argument("unknown RL mode '" + std::string(s) + "' (expected neural or tabular)");
}

/// Tabular Q-learning settings: every step explores, with count-based action
/// choice, and alpha decays as 1/visits.
inline RLConfig tabular_rl_defaults() {
  RLConfig c;
  c.epsilon_start = 1.0;
  c.epsilon_end = 1.0;
  c.epsilon_decay = 1;
  c.alpha = 0.0;
  c.alpha_visit_decay = true;
  c.count_based_exploration = true;
  c.patience = 0;
  c.max_transitions = 200000;
  return c;
}

/// Deep Q-learning settings sized so five seeds of either process fit the
/// runtime budget on a single core.
/// The greedy policy swings between evaluations even late in training, so
/// evaluations are frequent and the best snapshot of a fixed budget is kept.
inline RLConfig neural_rl_defaults() {
  RLConfig c;
  c.hidden = c.dense = 16;
  c.eval_interval = 100;
  c.patience = 0;
  c.max_transitions = 40000;
  return c;
}

struct ExperimentConfig {
  std::vector<ProcessId> processes{ProcessId::p1, ProcessId::p2};
  std::uint64_t seed = 7;
  int runs = 5;
  int n_test = 1000;
  int n_rct = 10000;
  double validation_fraction = 0.2;
  RLMode rl_mode = RLMode::neural;
  bool never_row = false;
  CIConfig ci;
  RLConfig rl = neural_rl_defaults();
  RLConfig tabular = tabular_rl_defaults();

  const RLConfig& rl_config() const { return rl_mode == RLMode::neural ? rl : tabular; }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

inline long parse_long(const std::string& v) {
  long x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
  return x;
}

inline std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t x = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw std::invalid_argument("not a seed: '" + v + "'");
  return x;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// One entry per config key: how to read it and how to print it.
struct ConfigKey {
  const char* name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline std::string bool_text(bool b) { return b ? "true" : "false"; }

template <typename Field>
ConfigKey number_key(const char* name, Field field) {
  return {name,
          [field](ExperimentConfig& c, const std::string& v) {
            auto& ref = field(c);
            using T = std::remove_reference_t<decltype(ref)>;
            if constexpr (std::is_same_v<T, bool>)
              ref = parse_bool(v);
            else if constexpr (std::is_floating_point_v<T>)
              ref = parse_number(v);
            else
              ref = static_cast<T>(parse_long(v));
          },
          [field](const ExperimentConfig& c) {
            auto& ref = field(const_cast<ExperimentConfig&>(c));
            using T = std::remove_reference_t<decltype(ref)>;
            if constexpr (std::is_same_v<T, bool>)
              return bool_text(ref);
            else if constexpr (std::is_floating_point_v<T>)
              return format_number(ref);
            else
              return std::to_string(ref);
          }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"process",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.processes.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) c.processes.push_back(parse_process(trim(item)));
                   if (c.processes.empty()) throw std::invalid_argument("process list is empty");
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (auto p : c.processes) s += (s.empty() ? "" : ",") + std::string(to_string(p));
                   return s;
                 }});
    k.push_back({"seed", [](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64(v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }});
    k.push_back({"rl_mode", [](ExperimentConfig& c, const std::string& v) { c.rl_mode = parse_rl_mode(v); },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.rl_mode)); }});
    k.push_back(number_key("runs", [](ExperimentConfig& c) -> int& { return c.runs; }));
    k.push_back(number_key("n_test", [](ExperimentConfig& c) -> int& { return c.n_test; }));
    k.push_back(number_key("n_rct", [](ExperimentConfig& c) -> int& { return c.n_rct; }));
    k.push_back(number_key("validation_fraction", [](ExperimentConfig& c) -> double& { return c.validation_fraction; }));
    k.push_back(number_key("never_row", [](ExperimentConfig& c) -> bool& { return c.never_row; }));
    // CI
    k.push_back(number_key("ci_hidden", [](ExperimentConfig& c) -> int& { return c.ci.hidden; }));
    k.push_back(number_key("ci_dense", [](ExperimentConfig& c) -> int& { return c.ci.dense; }));
    k.push_back(number_key("ci_batch_size", [](ExperimentConfig& c) -> int& { return c.ci.batch_size; }));
    k.push_back(number_key("ci_patience", [](ExperimentConfig& c) -> int& { return c.ci.patience; }));
    k.push_back(number_key("ci_max_epochs", [](ExperimentConfig& c) -> int& { return c.ci.max_epochs; }));
    k.push_back(number_key("ci_learning_rate", [](ExperimentConfig& c) -> double& { return c.ci.adam.learning_rate; }));
    k.push_back(number_key("ci_adam_beta1", [](ExperimentConfig& c) -> double& { return c.ci.adam.beta1; }));
    k.push_back(number_key("ci_adam_beta2", [](ExperimentConfig& c) -> double& { return c.ci.adam.beta2; }));
    k.push_back(number_key("ci_adam_epsilon", [](ExperimentConfig& c) -> double& { return c.ci.adam.epsilon; }));
    // neural RL
    k.push_back(number_key("rl_hidden", [](ExperimentConfig& c) -> int& { return c.rl.hidden; }));
    k.push_back(number_key("rl_dense", [](ExperimentConfig& c) -> int& { return c.rl.dense; }));
    k.push_back(number_key("rl_learning_rate", [](ExperimentConfig& c) -> double& { return c.rl.adam.learning_rate; }));
    k.push_back(number_key("rl_adam_beta1", [](ExperimentConfig& c) -> double& { return c.rl.adam.beta1; }));
    k.push_back(number_key("rl_adam_beta2", [](ExperimentConfig& c) -> double& { return c.rl.adam.beta2; }));
    k.push_back(number_key("rl_adam_epsilon", [](ExperimentConfig& c) -> double& { return c.rl.adam.epsilon; }));
    k.push_back(number_key("rl_memory", [](ExperimentConfig& c) -> std::size_t& { return c.rl.memory; }));
    k.push_back(number_key("rl_gamma", [](ExperimentConfig& c) -> double& { return c.rl.gamma; }));
    k.push_back(number_key("rl_epsilon_start", [](ExperimentConfig& c) -> double& { return c.rl.epsilon_start; }));
    k.push_back(number_key("rl_epsilon_end", [](ExperimentConfig& c) -> double& { return c.rl.epsilon_end; }));
    k.push_back(number_key("rl_epsilon_decay", [](ExperimentConfig& c) -> long& { return c.rl.epsilon_decay; }));
    k.push_back(number_key("rl_eval_interval", [](ExperimentConfig& c) -> long& { return c.rl.eval_interval; }));
    k.push_back(number_key("rl_patience", [](ExperimentConfig& c) -> int& { return c.rl.patience; }));
    k.push_back(number_key("rl_patience_after_exploration",
                           [](ExperimentConfig& c) -> bool& { return c.rl.patience_after_exploration; }));
    k.push_back(number_key("rl_max_transitions", [](ExperimentConfig& c) -> long& { return c.rl.max_transitions; }));
    k.push_back(number_key("rl_scale_rewards", [](ExperimentConfig& c) -> bool& { return c.rl.scale_rewards; }));
    // tabular RL
    k.push_back(number_key("tabular_alpha", [](ExperimentConfig& c) -> double& { return c.tabular.alpha; }));
    k.push_back(number_key("tabular_alpha_visit_decay",
                           [](ExperimentConfig& c) -> bool& { return c.tabular.alpha_visit_decay; }));
    k.push_back(number_key("tabular_epsilon_start", [](ExperimentConfig& c) -> double& { return c.tabular.epsilon_start; }));
    k.push_back(number_key("tabular_epsilon_end", [](ExperimentConfig& c) -> double& { return c.tabular.epsilon_end; }));
    k.push_back(number_key("tabular_epsilon_decay", [](ExperimentConfig& c) -> long& { return c.tabular.epsilon_decay; }));
    k.push_back(number_key("tabular_count_based_exploration",
                           [](ExperimentConfig& c) -> bool& { return c.tabular.count_based_exploration; }));
    k.push_back(number_key("tabular_eval_interval", [](ExperimentConfig& c) -> long& { return c.tabular.eval_interval; }));
    k.push_back(number_key("tabular_patience", [](ExperimentConfig& c) -> int& { return c.tabular.patience; }));
    k.push_back(number_key("tabular_max_transitions",
                           [](ExperimentConfig& c) -> long& { return c.tabular.max_transitions; }));
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid config: " + what);
  };
  need(!c.processes.empty(), "no process selected");
  need(c.runs >= 1, "runs must be at least 1");
  need(c.n_test >= 1, "n_test must be positive");
  need(c.n_rct >= 2, "n_rct must be at least 2");
  need(c.validation_fraction > 0.0 && c.validation_fraction < 1.0, "validation_fraction must lie in (0, 1)");
  need(c.ci.batch_size >= 1 && c.ci.patience >= 1 && c.ci.max_epochs >= 1, "CI batch/patience/epochs must be positive");
  for (const RLConfig* r : {&c.rl, &c.tabular}) {
    need(r->memory >= 1, "replay memory must be positive");
    need(r->epsilon_start >= 0 && r->epsilon_start <= 1 && r->epsilon_end >= 0 && r->epsilon_end <= 1,
         "epsilon outside [0, 1]");
    need(r->epsilon_decay >= 1 && r->eval_interval >= 1 && r->max_transitions >= 1,
         "epsilon_decay, eval_interval and max_transitions must be positive");
    need(r->patience >= 0, "patience must be non-negative");
  }
}

/// Applies one `key = value` setting.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (key == k.name) {
      try {
        k.set(c, value);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config key '" + key + "': " + e.what());
      }
      return;
    }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

/// Flat `key = value` text; '#' starts a comment. Later lines override earlier ones.
inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate(base);
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

inline void write_config(std::ostream& os, const ExperimentConfig& c) {
  for (const auto& k : detail::config_keys()) os << k.name << " = " << k.get(c) << '\n';
}

// ---------------------------------------------------------------------------
// Seeds and provenance
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class SeedStream : std::uint64_t { test_set = 1, rct_data, ci_init, rl_env, rl_init, rct_eval };

/// Independent seed for one (process, purpose, run) triple.
inline std::uint64_t derive_seed(std::uint64_t base, ProcessId p, SeedStream s, int run = 0) {
  std::uint64_t x = splitmix64(base);
  x = splitmix64(x ^ (static_cast<std::uint64_t>(p) + 1));
  x = splitmix64(x ^ (static_cast<std::uint64_t>(s) << 8));
  return splitmix64(x ^ static_cast<std::uint64_t>(run));
}

enum class CaseSource { test, rct, rl };

inline std::string_view to_string(CaseSource s) {
  switch (s) {
    case CaseSource::test: return "test";
    case CaseSource::rct: return "rct";
    case CaseSource::rl: return "rl";
  }
  return "?";
}

/// Where a case came from: its purpose and the RNG stream that produced it.
struct CaseId {
  CaseSource source = CaseSource::test;
  std::uint64_t stream = 0;
  int index = 0;

  std::string label() const {
    std::ostringstream os;
    os << to_string(source) << '-' << std::setw(6) << std::setfill('0') << index;
    return os.str();
  }
};

class IsolationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TestSet {
  ProcessId process = ProcessId::p1;
  std::uint64_t stream = 0;
  std::vector<CounterfactualTable> cases;
  std::vector<CaseId> ids;
};

inline TestSet make_test_set(ProcessId id, std::uint64_t seed, int n = 1000) {
  if (n < 1) throw std::invalid_argument("test set size must be positive");
  TestSet ts{id, seed, {}, {}};
  Rng rng(seed);
  ts.cases.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ts.cases.push_back(counterfactual_table(sample_trace(id, rng)));
    ts.ids.push_back({CaseSource::test, seed, i});
  }
  return ts;
}

/// Throws unless every case used for fitting or threshold selection comes from a
/// training source and an RNG stream distinct from the test set's.
inline void check_isolation(const TestSet& test, const std::vector<CaseId>& used) {
  for (const auto& c : used) {
    if (c.source == CaseSource::test)
      throw IsolationError("test case " + c.label() + " reached training or threshold selection");
    if (c.stream == test.stream)
      throw IsolationError("case " + c.label() + " was drawn from the test set's RNG stream");
  }
}

// ---------------------------------------------------------------------------
// Event-log export
// ---------------------------------------------------------------------------

struct LoggedCase {
  CaseId id;
  LatentTrace trace;
  InterventionOption option;
  double final_outcome = 0.0;
};

inline void write_event_log(std::ostream& os, std::vector<LoggedCase> cases) {
  std::sort(cases.begin(), cases.end(), [](const LoggedCase& a, const LoggedCase& b) {
    return a.id.label() < b.id.label();
  });
  os << "case_id,event_index,activity,attribute,case_var,intervened,final_outcome\n";
  for (const auto& c : cases) {
    const auto label = c.id.label();
    for (std::size_t k = 0; k < c.trace.events.size(); ++k) {
      const auto& e = c.trace.events[k];
      const bool here = !c.option.is_never() && c.option.index() == static_cast<int>(k) + 1;
      os << label << ',' << k + 1 << ',' << to_string(e.activity) << ',' << e.attribute << ',' << c.trace.case_var
         << ',' << (here ? 1 : 0) << ',' << format_number(c.final_outcome) << '\n';
    }
  }
  if (!os) throw std::runtime_error("failed to write event log");
}

inline void export_event_log(const std::string& path, std::vector<LoggedCase> cases) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  try {
    write_event_log(out, std::move(cases));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

/// The RCT log of a CI dataset (every case with its drawn option).
inline std::vector<LoggedCase> rct_log(const CIDataset& ds, std::uint64_t stream) {
  std::vector<LoggedCase> out;
  for (std::size_t i = 0; i < ds.cases.size(); ++i)
    out.push_back({{CaseSource::rct, stream, static_cast<int>(i)}, ds.cases[i].trace, ds.assigned[i],
                   ds.cases[i].at(ds.assigned[i])});
  return out;
}

/// Test cases as a never-intervened log.
inline std::vector<LoggedCase> test_log(const TestSet& ts) {
  std::vector<LoggedCase> out;
  for (std::size_t i = 0; i < ts.cases.size(); ++i)
    out.push_back({ts.ids[i], ts.cases[i].trace, InterventionOption::never(), ts.cases[i].never()});
  return out;
}

/// Every counterfactual outcome of the test set: `case_id,option,outcome` (option 0 = never).
inline void write_counterfactuals(std::ostream& os, const TestSet& ts) {
  os << "case_id,option,outcome\n";
  for (std::size_t i = 0; i < ts.cases.size(); ++i)
    for (std::size_t o = 0; o < ts.cases[i].outcomes.size(); ++o)
      os << ts.ids[i].label() << ',' << o << ',' << format_number(ts.cases[i].outcomes[o]) << '\n';
  if (!os) throw std::runtime_error("failed to write counterfactuals");
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunRecord {
  int run = 0;
  std::uint64_t seed = 0;
  double uplift = 0.0;          // summed over the test set
  double exact_per_case = 0.0;  // expected uplift over the enumerated state space
  double effort = 0.0;          // epochs (CI) or transitions (RL)
  std::optional<double> threshold;

  bool operator==(const RunRecord&) const = default;
};

struct MethodRow {
  std::string method;
  double mean_uplift = 0.0;
  std::optional<double> std_uplift;
  std::string effort_unit;  // empty for benchmark rows
  std::optional<double> effort_mean, effort_std;
  std::optional<double> exact_per_case;
  std::vector<RunRecord> runs;

  bool operator==(const MethodRow&) const = default;
};

struct ProcessReport {
  ProcessId process = ProcessId::p1;
  int n_test = 0;
  std::vector<MethodRow> rows;

  const MethodRow& row(const std::string& method) const {
    for (const auto& r : rows)
      if (r.method == method) return r;
    throw std::out_of_range("report has no row " + method);
  }
  bool operator==(const ProcessReport&) const = default;
};

struct ReportTable {
  std::uint64_t seed = 0;
  int runs = 0;
  int n_rct = 0;
  RLMode rl_mode = RLMode::neural;
  std::vector<ProcessReport> processes;

  const ProcessReport& process(ProcessId id) const {
    for (const auto& p : processes)
      if (p.process == id) return p;
    throw std::out_of_range("report has no process " + std::string(to_string(id)));
  }
  bool operator==(const ReportTable&) const = default;
};

/// Mean and sample standard deviation (n - 1).
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

inline MethodRow aggregate_runs(std::string method, std::string unit, std::vector<RunRecord> runs) {
  MethodRow row;
  row.method = std::move(method);
  row.effort_unit = std::move(unit);
  std::vector<double> u, e, x;
  for (const auto& r : runs) {
    u.push_back(r.uplift);
    e.push_back(r.effort);
    x.push_back(r.exact_per_case);
  }
  std::tie(row.mean_uplift, row.std_uplift) = mean_std(u);
  auto [em, es] = mean_std(e);
  row.effort_mean = em;
  row.effort_std = es;
  row.exact_per_case = mean_std(x).first;
  row.runs = std::move(runs);
  return row;
}

enum class ReportFormat { text, csv, json };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "text") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw std::invalid_argument("unknown report format '" + std::string(s) + "'");
}

namespace detail {

inline nlohmann::ordered_json json_number(std::optional<double> v) {
  if (!v) return nullptr;
  if (std::isfinite(*v)) return *v;
  return format_number(*v);  // JSON has no infinities
}

inline std::optional<double> json_optional(const nlohmann::ordered_json& j) {
  if (j.is_null()) return std::nullopt;
  if (j.is_string()) return parse_number(j.get<std::string>());
  return j.get<double>();
}

inline std::string opt_text(std::optional<double> v) { return v ? format_number(*v) : "-"; }
inline std::optional<double> opt_parse(const std::string& s) {
  if (s == "-") return std::nullopt;
  return parse_number(s);
}

}  // namespace detail

inline nlohmann::ordered_json report_to_json(const ReportTable& t) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["seed"] = t.seed;
  j["runs"] = t.runs;
  j["n_rct"] = t.n_rct;
  j["rl_mode"] = std::string(to_string(t.rl_mode));
  j["processes"] = ordered_json::array();
  for (const auto& p : t.processes) {
    ordered_json pj;
    pj["process"] = std::string(to_string(p.process));
    pj["n_test"] = p.n_test;
    pj["rows"] = ordered_json::array();
    for (const auto& r : p.rows) {
      ordered_json rj;
      rj["method"] = r.method;
      rj["mean_uplift"] = r.mean_uplift;
      rj["std_uplift"] = detail::json_number(r.std_uplift);
      rj["effort_unit"] = r.effort_unit;
      rj["effort_mean"] = detail::json_number(r.effort_mean);
      rj["effort_std"] = detail::json_number(r.effort_std);
      rj["exact_uplift_per_case"] = detail::json_number(r.exact_per_case);
      rj["runs"] = ordered_json::array();
      for (const auto& run : r.runs) {
        ordered_json x;
        x["run"] = run.run;
        x["seed"] = run.seed;
        x["uplift"] = run.uplift;
        x["exact_uplift_per_case"] = run.exact_per_case;
        x["effort"] = run.effort;
        x["threshold"] = detail::json_number(run.threshold);
        rj["runs"].push_back(std::move(x));
      }
      pj["rows"].push_back(std::move(rj));
    }
    j["processes"].push_back(std::move(pj));
  }
  return j;
}

inline ReportTable report_from_json(const nlohmann::ordered_json& j) {
  ReportTable t;
  t.seed = j.at("seed").get<std::uint64_t>();
  t.runs = j.at("runs").get<int>();
  t.n_rct = j.at("n_rct").get<int>();
  t.rl_mode = parse_rl_mode(j.at("rl_mode").get<std::string>());
  for (const auto& pj : j.at("processes")) {
    ProcessReport p;
    p.process = parse_process(pj.at("process").get<std::string>());
    p.n_test = pj.at("n_test").get<int>();
    for (const auto& rj : pj.at("rows")) {
      MethodRow r;
      r.method = rj.at("method").get<std::string>();
      r.mean_uplift = rj.at("mean_uplift").get<double>();
      r.std_uplift = detail::json_optional(rj.at("std_uplift"));
      r.effort_unit = rj.at("effort_unit").get<std::string>();
      r.effort_mean = detail::json_optional(rj.at("effort_mean"));
      r.effort_std = detail::json_optional(rj.at("effort_std"));
      r.exact_per_case = detail::json_optional(rj.at("exact_uplift_per_case"));
      for (const auto& x : rj.at("runs")) {
        RunRecord run;
        run.run = x.at("run").get<int>();
        run.seed = x.at("seed").get<std::uint64_t>();
        run.uplift = x.at("uplift").get<double>();
        run.exact_per_case = x.at("exact_uplift_per_case").get<double>();
        run.effort = x.at("effort").get<double>();
        run.threshold = detail::json_optional(x.at("threshold"));
        r.runs.push_back(run);
      }
      p.rows.push_back(std::move(r));
    }
    t.processes.push_back(std::move(p));
  }
  return t;
}

inline void write_report_text(std::ostream& os, const ReportTable& t) {
  os << "report seed " << t.seed << " runs " << t.runs << " n_rct " << t.n_rct << " rl_mode " << to_string(t.rl_mode)
     << "\n\n";
  auto cell = [&os](const std::string& s, int w) { os << std::left << std::setw(w) << s << ' '; };
  os << "summary\n";
  cell("process", 8);
  cell("n_test", 7);
  cell("method", 8);
  cell("mean_uplift", 22);
  cell("std_uplift", 22);
  cell("unit", 12);
  cell("effort_mean", 22);
  cell("effort_std", 22);
  os << "exact_per_case\n";
  for (const auto& p : t.processes)
    for (const auto& r : p.rows) {
      cell(std::string(to_string(p.process)), 8);
      cell(std::to_string(p.n_test), 7);
      cell(r.method, 8);
      cell(format_number(r.mean_uplift), 22);
      cell(detail::opt_text(r.std_uplift), 22);
      cell(r.effort_unit.empty() ? "-" : r.effort_unit, 12);
      cell(detail::opt_text(r.effort_mean), 22);
      cell(detail::opt_text(r.effort_std), 22);
      os << detail::opt_text(r.exact_per_case) << '\n';
    }
  os << "\nruns\n";
  cell("process", 8);
  cell("method", 8);
  cell("run", 4);
  cell("seed", 21);
  cell("uplift", 22);
  cell("exact_per_case", 22);
  cell("effort", 10);
  os << "threshold\n";
  for (const auto& p : t.processes)
    for (const auto& r : p.rows)
      for (const auto& run : r.runs) {
        cell(std::string(to_string(p.process)), 8);
        cell(r.method, 8);
        cell(std::to_string(run.run), 4);
        cell(std::to_string(run.seed), 21);
        cell(format_number(run.uplift), 22);
        cell(format_number(run.exact_per_case), 22);
        cell(format_number(run.effort), 10);
        os << detail::opt_text(run.threshold) << '\n';
      }
}

inline ReportTable parse_report_text(std::istream& is) {
  auto fail = [](const std::string& why) { return std::runtime_error("malformed text report: " + why); };
  ReportTable t;
  std::string line, word, mode;
  if (!std::getline(is, line)) throw fail("empty input");
  {
    std::istringstream h(line);
    std::string k1, k2, k3, k4;
    if (!(h >> word >> k1 >> t.seed >> k2 >> t.runs >> k3 >> t.n_rct >> k4 >> mode) || word != "report")
      throw fail("bad header");
    t.rl_mode = parse_rl_mode(mode);
  }
  enum { none, summary, runs } section = none;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::vector<std::string> tok;
    while (ls >> word) tok.push_back(word);
    if (tok.empty()) continue;
    if (tok.size() == 1 && tok[0] == "summary") { section = summary; continue; }
    if (tok.size() == 1 && tok[0] == "runs") { section = runs; continue; }
    if (tok[0] == "process") continue;  // column headers
    if (section == summary) {
      if (tok.size() != 9) throw fail("summary row with " + std::to_string(tok.size()) + " fields");
      const auto pid = parse_process(tok[0]);
      auto it = std::find_if(t.processes.begin(), t.processes.end(), [&](const auto& p) { return p.process == pid; });
      if (it == t.processes.end()) {
        t.processes.push_back({pid, std::stoi(tok[1]), {}});
        it = std::prev(t.processes.end());
      }
      MethodRow r;
      r.method = tok[2];
      r.mean_uplift = parse_number(tok[3]);
      r.std_uplift = detail::opt_parse(tok[4]);
      r.effort_unit = tok[5] == "-" ? "" : tok[5];
      r.effort_mean = detail::opt_parse(tok[6]);
      r.effort_std = detail::opt_parse(tok[7]);
      r.exact_per_case = detail::opt_parse(tok[8]);
      it->rows.push_back(std::move(r));
    } else if (section == runs) {
      if (tok.size() != 8) throw fail("run row with " + std::to_string(tok.size()) + " fields");
      const auto pid = parse_process(tok[0]);
      auto it = std::find_if(t.processes.begin(), t.processes.end(), [&](const auto& p) { return p.process == pid; });
      if (it == t.processes.end()) throw fail("run for unknown process");
      auto rit = std::find_if(it->rows.begin(), it->rows.end(), [&](const auto& r) { return r.method == tok[1]; });
      if (rit == it->rows.end()) throw fail("run for unknown method " + tok[1]);
      RunRecord run;
      run.run = std::stoi(tok[2]);
      run.seed = detail::parse_u64(tok[3]);
      run.uplift = parse_number(tok[4]);
      run.exact_per_case = parse_number(tok[5]);
      run.effort = parse_number(tok[6]);
      run.threshold = detail::opt_parse(tok[7]);
      rit->runs.push_back(run);
    } else {
      throw fail("data before any section");
    }
  }
  return t;
}

inline void write_report_csv(std::ostream& os, const ReportTable& t) {
  os << "process,n_test,method,mean_uplift,std_uplift,effort_unit,effort_mean,effort_std,exact_uplift_per_case\n";
  auto opt = [](std::optional<double> v) { return v ? format_number(*v) : std::string(); };
  for (const auto& p : t.processes)
    for (const auto& r : p.rows)
      os << to_string(p.process) << ',' << p.n_test << ',' << r.method << ',' << format_number(r.mean_uplift) << ','
         << opt(r.std_uplift) << ',' << r.effort_unit << ',' << opt(r.effort_mean) << ',' << opt(r.effort_std) << ','
         << opt(r.exact_per_case) << '\n';
}

inline std::string emit_report(const ReportTable& t, ReportFormat f) {
  std::ostringstream os;
  switch (f) {
    case ReportFormat::text: write_report_text(os, t); break;
    case ReportFormat::csv: write_report_csv(os, t); break;
    case ReportFormat::json: os << report_to_json(t).dump(2) << '\n'; break;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hex(double x) {
  std::ostringstream os;
  os << std::hexfloat << x;
  return os.str();
}

inline double unhex(const Metadata& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::runtime_error("checkpoint lacks metadata '" + key + "'");
  return std::strtod(it->second.c_str(), nullptr);
}

inline void put_standardizer(Metadata& m, const Standardizer& s) {
  m["attribute_mean"] = hex(s.attribute_mean);
  m["attribute_std"] = hex(s.attribute_std);
  m["case_var_mean"] = hex(s.case_var_mean);
  m["case_var_std"] = hex(s.case_var_std);
  m["outcome_mean"] = hex(s.outcome_mean);
  m["outcome_std"] = hex(s.outcome_std);
}

inline Standardizer get_standardizer(const Metadata& m) {
  Standardizer s;
  s.attribute_mean = unhex(m, "attribute_mean");
  s.attribute_std = unhex(m, "attribute_std");
  s.case_var_mean = unhex(m, "case_var_mean");
  s.case_var_std = unhex(m, "case_var_std");
  s.outcome_mean = unhex(m, "outcome_mean");
  s.outcome_std = unhex(m, "outcome_std");
  s.fitted = true;
  return s;
}

inline std::string meta_text(const Metadata& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw std::runtime_error("checkpoint lacks metadata '" + key + "'");
  return it->second;
}

}  // namespace detail

inline void save_ci_model(std::ostream& os, const NeuralOutcomeModel& m, double threshold) {
  Metadata meta;
  meta["kind"] = "ci";
  meta["process"] = std::string(to_string(m.encoder().process()));
  meta["threshold"] = detail::hex(threshold);
  detail::put_standardizer(meta, m.encoder().standardizer());
  save_checkpoint(os, m.regressor(), meta);
}

struct LoadedCIModel {
  std::shared_ptr<const NeuralOutcomeModel> model;
  double threshold = 0.0;
};

inline LoadedCIModel load_ci_model(std::istream& is) {
  Metadata meta;
  auto reg = load_checkpoint<float>(is, &meta);
  if (detail::meta_text(meta, "kind") != "ci") throw std::runtime_error("checkpoint is not a CI model");
  Encoder enc(parse_process(detail::meta_text(meta, "process")), detail::get_standardizer(meta));
  return {std::make_shared<const NeuralOutcomeModel>(std::move(reg), enc), detail::unhex(meta, "threshold")};
}

inline void save_rl_agent(std::ostream& os, const NeuralQAgent& a) {
  if (!a.ready()) throw std::logic_error("cannot checkpoint an RL agent before its first training step");
  Metadata meta;
  meta["kind"] = "rl";
  meta["process"] = std::string(to_string(a.encoder().process()));
  meta["reward_scale"] = detail::hex(a.reward_scale());
  detail::put_standardizer(meta, a.encoder().standardizer());
  save_checkpoint(os, a.regressor(), meta);
}

inline std::shared_ptr<NeuralQAgent> load_rl_agent(std::istream& is, const RLConfig& cfg = {}) {
  Metadata meta;
  auto reg = load_checkpoint<float>(is, &meta);
  if (detail::meta_text(meta, "kind") != "rl") throw std::runtime_error("checkpoint is not an RL agent");
  const auto id = parse_process(detail::meta_text(meta, "process"));
  Encoder enc(id, detail::get_standardizer(meta));
  return std::make_shared<NeuralQAgent>(id, cfg, std::move(reg), enc, detail::unhex(meta, "reward_scale"));
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

struct CIRunResult {
  RunRecord record;
  CITrainResult train;
  ThresholdSelection threshold;
  CIDataset dataset;
};

struct RLRunResult {
  RunRecord record;
  RLTrainResult train;
};

/// Optional observers of a running experiment (progress, curves, checkpoints).
struct ExperimentHooks {
  std::function<void(const std::string&)> log;
  std::function<void(ProcessId, int run, const EpochLog&)> ci_epoch;
  std::function<void(ProcessId, int run, const RLCurvePoint&)> rl_eval;
  std::function<void(ProcessId, int run, const CIRunResult&)> ci_done;
  std::function<void(ProcessId, int run, const RLRunResult&)> rl_done;
  std::function<void(ProcessId, const std::string& phase, double seconds)> phase_time;
};

inline CIRunResult run_ci(ProcessId id, const ExperimentConfig& cfg, int run, const TestSet& test,
                          const ExperimentHooks& hooks = {}) {
  CIRunResult res;
  const auto data_seed = derive_seed(cfg.seed, id, SeedStream::rct_data, run);
  const auto init_seed = derive_seed(cfg.seed, id, SeedStream::ci_init, run);
  Rng rng(data_seed);
  res.dataset = build_rct_dataset(id, cfg.n_rct, rng, cfg.validation_fraction);
  std::vector<CaseId> used;
  for (std::size_t i = 0; i < res.dataset.cases.size(); ++i)
    used.push_back({CaseSource::rct, data_seed, static_cast<int>(i)});
  check_isolation(test, used);

  res.train = train_ci(res.dataset, cfg.ci, init_seed, [&](const EpochLog& l) {
    if (hooks.ci_epoch) hooks.ci_epoch(id, run, l);
  });
  const auto val = validation_tables(res.dataset);
  res.threshold = select_threshold(ite_sequences(*res.train.model, val), val);
  const auto policy = ci_policy(res.train.model, res.threshold.threshold);
  res.record = {run, init_seed, evaluate_policy_sampled(policy, test.cases),
                evaluate_policy_exact(policy, id).expected_uplift_per_case, static_cast<double>(res.train.epochs),
                res.threshold.threshold};
  if (hooks.ci_done) hooks.ci_done(id, run, res);
  return res;
}

inline std::unique_ptr<QAgent> make_agent(ProcessId id, const ExperimentConfig& cfg, int run) {
  if (cfg.rl_mode == RLMode::tabular) return std::make_unique<TabularQAgent>(cfg.tabular);
  return std::make_unique<NeuralQAgent>(id, cfg.rl, derive_seed(cfg.seed, id, SeedStream::rl_init, run));
}

inline RLRunResult run_rl(ProcessId id, const ExperimentConfig& cfg, int run, const TestSet& test,
                          const ExperimentHooks& hooks = {}) {
  RLRunResult res;
  const auto env_seed = derive_seed(cfg.seed, id, SeedStream::rl_env, run);
  check_isolation(test, {{CaseSource::rl, env_seed, 0}});
  auto agent = make_agent(id, cfg, run);
  Rng rng(env_seed);
  res.train = train_rl(id, *agent, cfg.rl_config(), rng, [&](const RLCurvePoint& p) {
    if (hooks.rl_eval) hooks.rl_eval(id, run, p);
  });
  const auto policy = extract_policy(res.train.agent);
  res.record = {run,
                cfg.rl_mode == RLMode::neural ? derive_seed(cfg.seed, id, SeedStream::rl_init, run) : env_seed,
                evaluate_policy_sampled(policy, test.cases),
                evaluate_policy_exact(policy, id).expected_uplift_per_case,
                static_cast<double>(res.train.transitions),
                std::nullopt};
  if (hooks.rl_done) hooks.rl_done(id, run, res);
  return res;
}

/// Full protocol for one process: shared test set, CI and RL runs, perfect and RCT benchmarks.
inline ProcessReport run_process(ProcessId id, const ExperimentConfig& cfg, const ExperimentHooks& hooks = {}) {
  auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };
  ProcessReport rep;
  rep.process = id;
  rep.n_test = cfg.n_test;
  const auto test = make_test_set(id, derive_seed(cfg.seed, id, SeedStream::test_set), cfg.n_test);

  using clock = std::chrono::steady_clock;
  auto timed = [&](const std::string& phase, clock::time_point since) {
    if (hooks.phase_time) hooks.phase_time(id, phase, std::chrono::duration<double>(clock::now() - since).count());
  };
  std::vector<RunRecord> ci_runs, rl_runs;
  auto phase_start = clock::now();
  for (int run = 1; run <= cfg.runs; ++run) {
    const auto ci = run_ci(id, cfg, run, test, hooks);
    log(std::string(to_string(id)) + " CI run " + std::to_string(run) + ": uplift " + format_number(ci.record.uplift) +
        ", " + format_number(ci.record.effort) + " epochs");
    ci_runs.push_back(ci.record);
  }
  timed("CI", phase_start);
  phase_start = clock::now();
  for (int run = 1; run <= cfg.runs; ++run) {
    const auto rl = run_rl(id, cfg, run, test, hooks);
    log(std::string(to_string(id)) + " RL run " + std::to_string(run) + ": uplift " + format_number(rl.record.uplift) +
        ", " + format_number(rl.record.effort) + " transitions");
    rl_runs.push_back(rl.record);
  }
  timed("RL", phase_start);
  rep.rows.push_back(aggregate_runs("CI", "epochs", std::move(ci_runs)));
  rep.rows.push_back(aggregate_runs("RL", "transitions", std::move(rl_runs)));

  const auto perfect = std::make_shared<const PerfectPolicy>(build_perfect_policy(id));
  MethodRow prow;
  prow.method = "perfect";
  prow.mean_uplift = evaluate_policy_sampled(make_policy(perfect), test.cases);
  prow.exact_per_case = perfect->expected_uplift();
  rep.rows.push_back(prow);

  Rng rct_rng(derive_seed(cfg.seed, id, SeedStream::rct_eval));
  MethodRow rrow;
  rrow.method = "RCT";
  rrow.mean_uplift = rct_sampled_uplift(test.cases, rct_rng);
  rrow.exact_per_case = rct_expected_uplift(id);
  rep.rows.push_back(rrow);

  if (cfg.never_row) {
    MethodRow nrow;
    nrow.method = "never";
    nrow.mean_uplift = evaluate_policy_sampled(never_policy(), test.cases);
    nrow.exact_per_case = evaluate_policy_exact(never_policy(), id).expected_uplift_per_case;
    rep.rows.push_back(nrow);
  }
  return rep;
}

inline ReportTable run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {}) {
  validate(cfg);
  ReportTable t;
  t.seed = cfg.seed;
  t.runs = cfg.runs;
  t.n_rct = cfg.n_rct;
  t.rl_mode = cfg.rl_mode;
  for (auto id : cfg.processes) t.processes.push_back(run_process(id, cfg, hooks));
  return t;
}

// ---------------------------------------------------------------------------
// Report checks
// ---------------------------------------------------------------------------

/// Reference perfect-policy uplift per 1,000 test cases.
inline double reference_perfect_uplift(ProcessId id) { return id == ProcessId::p1 ? 1651.0 : 1845.0; }

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Ordering and tolerance checks on a finished report.
inline std::vector<Check> report_checks(const ReportTable& t) {
  std::vector<Check> out;
  auto add = [&](std::string name, bool pass, std::string detail) {
    out.push_back({std::move(name), pass, std::move(detail)});
  };
  for (const auto& p : t.processes) {
    const std::string pn(to_string(p.process));
    const auto& ci = p.row("CI");
    const auto& rl = p.row("RL");
    const auto& perfect = p.row("perfect");
    const auto& rct = p.row("RCT");
    const double ref = reference_perfect_uplift(p.process) * p.n_test / 1000.0;
    add(pn + " perfect uplift within 15% of reference", std::abs(perfect.mean_uplift - ref) <= 0.15 * ref,
        format_number(perfect.mean_uplift) + " vs " + format_number(ref));

    bool dominates = *perfect.exact_per_case > *rct.exact_per_case && *perfect.exact_per_case > 0.0;
    for (const auto* row : {&ci, &rl})
      for (const auto& r : row->runs) dominates = dominates && *perfect.exact_per_case > r.exact_per_case;
    add(pn + " perfect policy strictly dominates", dominates, "exact " + format_number(*perfect.exact_per_case));

    add(pn + " RCT uplift negative", rct.mean_uplift < 0.0 && *rct.exact_per_case < 0.0,
        format_number(rct.mean_uplift));
    add(pn + " RL mean >= 95% of perfect", rl.mean_uplift >= 0.95 * perfect.mean_uplift,
        format_number(rl.mean_uplift) + " vs " + format_number(0.95 * perfect.mean_uplift));
    add(pn + " RL std < CI std", rl.std_uplift.value_or(0) < ci.std_uplift.value_or(0),
        format_number(rl.std_uplift.value_or(0)) + " vs " + format_number(ci.std_uplift.value_or(0)));
    add(pn + " RCT < 0 < CI < RL", rct.mean_uplift < ci.mean_uplift && ci.mean_uplift > 0.0 &&
                                       ci.mean_uplift < rl.mean_uplift,
        format_number(rct.mean_uplift) + " / " + format_number(ci.mean_uplift) + " / " + format_number(rl.mean_uplift));
  }
  return out;
}

}  // namespace presc
