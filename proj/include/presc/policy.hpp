#pragma once

// Decision rules over prefixes, the perfect policy by backward induction,
// the RCT data-gathering policy, and exact / sampled uplift evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "presc/process.hpp"

namespace presc {

/// Canonical key of an observable prefix: process, case variable and the
/// observed (activity, attribute) pairs. Intervention history is excluded.
inline std::string prefix_key(const PrefixObservation& obs) {
  std::string key(to_string(obs.process));
  key += "|cv=" + std::to_string(obs.case_var) + "|";
  for (std::size_t i = 0; i < obs.observed.size(); ++i) {
    if (i) key += ',';
    key += to_string(obs.observed[i].activity);
    key += ':';
    key += std::to_string(obs.observed[i].attribute);
  }
  return key;
}

/// Prefix key extended with the intervention history (a Markov state key).
inline std::string state_key(const PrefixObservation& obs) {
  return prefix_key(obs) + "|i=" + std::to_string(obs.intervened_at);
}

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Type-erased decision rule. Any prefix that already carries an intervention
/// is answered with `wait` before the wrapped rule is consulted.
class Policy {
 public:
  using Decide = std::function<Action(const PrefixObservation&)>;
  using DecideBatch = std::function<std::vector<Action>(const std::vector<PrefixObservation>&)>;

  Policy(std::string name, Decide decide, DecideBatch batch = {})
      : name_(std::move(name)), decide_(std::move(decide)), batch_(std::move(batch)) {}

  const std::string& name() const { return name_; }

  Action decide(const PrefixObservation& obs) const {
    if (obs.intervened_before()) return Action::wait;
    return decide_(obs);
  }

  /// Decisions for many prefixes at once; rules backed by a model evaluate them in one pass.
  std::vector<Action> decide_batch(const std::vector<PrefixObservation>& batch) const {
    std::vector<Action> out(batch.size(), Action::wait);
    if (!batch_) {
      for (std::size_t i = 0; i < batch.size(); ++i) out[i] = decide(batch[i]);
      return out;
    }
    std::vector<PrefixObservation> open;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!batch[i].intervened_before()) {
        open.push_back(batch[i]);
        where.push_back(i);
      }
    }
    if (open.empty()) return out;
    auto got = batch_(open);
    if (got.size() != open.size()) throw PolicyError("batch policy returned a wrong number of decisions");
    for (std::size_t j = 0; j < where.size(); ++j) out[where[j]] = got[j];
    return out;
  }

 private:
  std::string name_;
  Decide decide_;
  DecideBatch batch_;
};

inline Policy never_policy() {
  return Policy("never", [](const PrefixObservation&) { return Action::wait; });
}

/// Intervenes at event `k` regardless of content.
inline Policy always_at_policy(int k) {
  return Policy("always_at_" + std::to_string(k), [k](const PrefixObservation& obs) {
    return obs.length() == k ? Action::intervene : Action::wait;
  });
}

/// The option a policy induces on a trace, consulting it one prefix at a time.
inline InterventionOption induced_option(const Policy& policy, const LatentTrace& trace) {
  const int n = static_cast<int>(trace.events.size());
  for (int k = 1; k <= n; ++k)
    if (policy.decide(prefix_of(trace, k)) == Action::intervene) return InterventionOption::at_event(k);
  return InterventionOption::never();
}

/// Induced options for many traces, querying the policy level by level in batches.
inline std::vector<InterventionOption> induced_options(const Policy& policy,
                                                       const std::vector<const LatentTrace*>& traces) {
  std::vector<InterventionOption> out(traces.size(), InterventionOption::never());
  std::vector<std::size_t> open(traces.size());
  for (std::size_t i = 0; i < open.size(); ++i) open[i] = i;
  for (int k = 1; !open.empty(); ++k) {
    std::vector<PrefixObservation> batch;
    std::vector<std::size_t> still;
    batch.reserve(open.size());
    for (std::size_t i : open)
      if (static_cast<int>(traces[i]->events.size()) >= k) {
        batch.push_back(prefix_of(*traces[i], k));
        still.push_back(i);
      }
    if (batch.empty()) break;
    const auto acts = policy.decide_batch(batch);
    open.clear();
    for (std::size_t j = 0; j < still.size(); ++j) {
      if (acts[j] == Action::intervene)
        out[still[j]] = InterventionOption::at_event(k);
      else
        open.push_back(still[j]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perfect policy
// ---------------------------------------------------------------------------

struct PrefixValue {
  double v_intervene = 0.0;
  double v_wait = 0.0;
  double probability = 0.0;  // marginal probability of reaching this prefix
  int length = 0;
};

/// Exact optimum over no-prior-intervention prefixes. decision is intervene
/// iff v_intervene > v_wait; ties wait.
struct PerfectPolicy {
  ProcessId process = ProcessId::p1;
  std::map<std::string, PrefixValue> values;
  double root_value = 0.0;      // E[max(v_intervene, v_wait)] over first events
  double never_value = 0.0;     // E[outcome(never)]

  double expected_uplift() const { return root_value - never_value; }

  Action decision(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw PolicyError("perfect policy has no entry for prefix " + key);
    return it->second.v_intervene > it->second.v_wait ? Action::intervene : Action::wait;
  }
};

inline PerfectPolicy build_perfect_policy(ProcessId id) {
  const auto traces = enumerate_state_space(id);
  const int n = ProcessSpec::get(id).num_events;
  PerfectPolicy pp;
  pp.process = id;

  struct Acc {
    double p = 0.0, intervene = 0.0, never = 0.0;
  };
  // per level: prefix key -> accumulated probability mass and outcome sums
  std::vector<std::map<std::string, Acc>> level(static_cast<std::size_t>(n) + 1);
  // child keys of each prefix with their conditional masses
  std::vector<std::map<std::string, std::map<std::string, double>>> children(static_cast<std::size_t>(n) + 1);

  for (const auto& t : traces) {
    const double never = outcome(t, InterventionOption::never());
    pp.never_value += t.probability * never;
    std::string parent;
    for (int k = 1; k <= n; ++k) {
      const auto key = prefix_key(prefix_of(t, k));
      auto& acc = level[static_cast<std::size_t>(k)][key];
      acc.p += t.probability;
      acc.intervene += t.probability * outcome(t, InterventionOption::at_event(k));
      acc.never += t.probability * never;
      if (k > 1) children[static_cast<std::size_t>(k - 1)][parent][key] += t.probability;
      parent = key;
    }
  }

  for (int k = n; k >= 1; --k) {
    for (const auto& [key, acc] : level[static_cast<std::size_t>(k)]) {
      PrefixValue v;
      v.length = k;
      v.probability = acc.p;
      v.v_intervene = acc.intervene / acc.p;
      if (k == n) {
        v.v_wait = acc.never / acc.p;
      } else {
        double w = 0.0;
        for (const auto& [child, mass] : children[static_cast<std::size_t>(k)][key]) {
          const auto& cv = pp.values.at(child);
          w += mass * std::max(cv.v_intervene, cv.v_wait);
        }
        v.v_wait = w / acc.p;
      }
      pp.values.emplace(key, v);
    }
  }
  for (const auto& [key, acc] : level[1]) {
    const auto& v = pp.values.at(key);
    pp.root_value += acc.p * std::max(v.v_intervene, v.v_wait);
  }
  return pp;
}

inline Policy make_policy(std::shared_ptr<const PerfectPolicy> pp) {
  return Policy("perfect", [pp = std::move(pp)](const PrefixObservation& obs) {
    return pp->decision(prefix_key(obs));
  });
}

inline void write_perfect_policy_csv(const PerfectPolicy& pp, std::ostream& os) {
  os << "prefix_key,v_intervene,v_wait,decision\n";
  os.precision(17);
  for (const auto& [key, v] : pp.values)
    os << '"' << key << '"' << ',' << v.v_intervene << ',' << v.v_wait << ','
       << to_string(v.v_intervene > v.v_wait ? Action::intervene : Action::wait) << '\n';
}

// ---------------------------------------------------------------------------
// RCT
// ---------------------------------------------------------------------------

/// Uniform over never and every event index, independently per case.
inline InterventionOption rct_policy(ProcessId id, Rng& rng) {
  const int n = ProcessSpec::get(id).num_events;
  const int k = std::uniform_int_distribution<int>(0, n)(rng);
  return k == 0 ? InterventionOption::never() : InterventionOption::at_event(k);
}

inline double rct_expected_uplift(ProcessId id) {
  double total = 0.0;
  for (const auto& t : enumerate_state_space(id)) {
    const auto table = counterfactual_table(t);
    double s = 0.0;
    for (double o : table.outcomes) s += o - table.never();
    total += t.probability * s / static_cast<double>(table.size());
  }
  return total;
}

/// RCT uplift realized on a test set with one seeded draw per case.
inline double rct_sampled_uplift(std::span<const CounterfactualTable> tables, Rng& rng) {
  double total = 0.0;
  for (const auto& t : tables) total += t.at(rct_policy(t.trace.process, rng)) - t.never();
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct PolicyEvaluation {
  double expected_uplift_per_case = 0.0;
  std::map<std::string, double> by_option;  // probability mass of each induced option
};

/// Expected uplift per case over the exhaustively enumerated state space.
inline PolicyEvaluation evaluate_policy_exact(const Policy& policy, ProcessId id) {
  const auto traces = enumerate_state_space(id);
  std::vector<const LatentTrace*> ptrs;
  ptrs.reserve(traces.size());
  for (const auto& t : traces) ptrs.push_back(&t);
  std::vector<InterventionOption> options;
  try {
    options = induced_options(policy, ptrs);
  } catch (const std::out_of_range& e) {
    throw PolicyError(std::string("policy undefined on a reachable prefix: ") + e.what());
  }
  PolicyEvaluation ev;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    ev.expected_uplift_per_case +=
        t.probability * (outcome(t, options[i]) - outcome(t, InterventionOption::never()));
    std::ostringstream name;
    name << options[i];
    ev.by_option[name.str()] += t.probability;
  }
  return ev;
}

/// Uplift summed over the cases of a test set.
inline double evaluate_policy_sampled(const Policy& policy, std::span<const CounterfactualTable> tables) {
  std::vector<const LatentTrace*> ptrs;
  ptrs.reserve(tables.size());
  for (const auto& t : tables) ptrs.push_back(&t.trace);
  const auto options = induced_options(policy, ptrs);
  double total = 0.0;
  for (std::size_t i = 0; i < tables.size(); ++i) total += tables[i].at(options[i]) - tables[i].never();
  return total;
}

}  // namespace presc
