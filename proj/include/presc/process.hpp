#pragma once

// Synthetic intervention-timing processes: trace generation, exhaustive
// enumeration, counterfactual outcomes and a step-wise episode environment.

#include <array>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace presc {

using Rng = std::mt19937_64;

enum class ProcessId : std::uint8_t { p1, p2 };

enum class Activity : std::uint8_t { A, B, C, S, D1, D2, E };

enum class Action : std::uint8_t { wait = 0, intervene = 1 };

inline std::string_view to_string(ProcessId id) { return id == ProcessId::p1 ? "p1" : "p2"; }

inline ProcessId parse_process(std::string_view s) {
  if (s == "p1" || s == "P1" || s == "1") return ProcessId::p1;
  if (s == "p2" || s == "P2" || s == "2") return ProcessId::p2;
  throw std::invalid_argument("unknown process id: " + std::string(s));
}

inline std::string_view to_string(Activity a) {
  switch (a) {
    case Activity::A: return "A";
    case Activity::B: return "B";
    case Activity::C: return "C";
    case Activity::S: return "S";
    case Activity::D1: return "D1";
    case Activity::D2: return "D2";
    case Activity::E: return "E";
  }
  return "?";
}

inline std::string_view to_string(Action a) { return a == Action::intervene ? "intervene" : "wait"; }

/// Static description of one of the two generators.
struct ProcessSpec {
  ProcessId id;
  int num_events;
  double intervention_cost;
  double repeat_penalty;
  std::span<const Activity> alphabet;  // one-hot order used by encoders

  static const ProcessSpec& get(ProcessId id);

  int activity_index(Activity a) const {
    for (std::size_t i = 0; i < alphabet.size(); ++i)
      if (alphabet[i] == a) return static_cast<int>(i);
    throw std::invalid_argument("activity " + std::string(to_string(a)) + " not in alphabet of " +
                                std::string(to_string(id)));
  }
};

namespace detail {
inline constexpr std::array<Activity, 2> kP1Alphabet{Activity::A, Activity::B};
inline constexpr std::array<Activity, 6> kP2Alphabet{Activity::S,  Activity::B,  Activity::C,
                                                     Activity::D1, Activity::D2, Activity::E};
inline constexpr std::array<int, 4> kP1Attributes{0, 1, 2, 5};
inline constexpr double kP1ProbA = 0.25;
inline constexpr double kP2ProbB = 0.2;
inline constexpr int kP2MaxCaseVar = 10;
inline constexpr int kP2D1Max = 3;
inline constexpr int kP2D2Max = 4;
inline constexpr int kP2Orders = 3;
}  // namespace detail

inline const ProcessSpec& ProcessSpec::get(ProcessId id) {
  static const ProcessSpec p1{ProcessId::p1, 3, 0.0, 100.0, detail::kP1Alphabet};
  static const ProcessSpec p2{ProcessId::p2, 5, 5.0, 100.0, detail::kP2Alphabet};
  return id == ProcessId::p1 ? p1 : p2;
}

struct Event {
  Activity activity;
  int attribute;

  friend bool operator==(const Event&, const Event&) = default;
};

/// A fully realized case before any intervention is applied.
struct LatentTrace {
  ProcessId process = ProcessId::p1;
  std::vector<Event> events;
  int case_var = 1;
  double probability = 0.0;

  const ProcessSpec& spec() const { return ProcessSpec::get(process); }
};

/// "never" or the 1-based index of the event at which the single intervention is made.
class InterventionOption {
 public:
  constexpr InterventionOption() = default;
  static constexpr InterventionOption never() { return InterventionOption{}; }
  static constexpr InterventionOption at_event(int index) { return InterventionOption{index}; }

  constexpr bool is_never() const { return index_ == 0; }
  constexpr int index() const { return index_; }

  friend constexpr bool operator==(InterventionOption, InterventionOption) = default;
  friend constexpr auto operator<=>(InterventionOption, InterventionOption) = default;

 private:
  constexpr explicit InterventionOption(int index) : index_(index) {}
  int index_ = 0;
};

inline std::ostream& operator<<(std::ostream& os, InterventionOption o) {
  if (o.is_never()) return os << "never";
  return os << "at_event(" << o.index() << ")";
}

/// What a decision maker sees mid-case.
struct PrefixObservation {
  ProcessId process = ProcessId::p1;
  std::vector<Event> observed;
  int case_var = 1;
  int intervened_at = 0;  // 1-based event index of an earlier intervention, 0 if none

  bool intervened_before() const { return intervened_at != 0; }
  int length() const { return static_cast<int>(observed.size()); }
};

inline PrefixObservation prefix_of(const LatentTrace& trace, int length, int intervened_at = 0) {
  if (length < 1 || length > static_cast<int>(trace.events.size()))
    throw std::out_of_range("prefix length " + std::to_string(length) + " out of range");
  return PrefixObservation{trace.process,
                           std::vector<Event>(trace.events.begin(), trace.events.begin() + length),
                           trace.case_var, intervened_at};
}

inline void validate_option(const LatentTrace& trace, InterventionOption option) {
  if (option.index() < 0 || option.index() > static_cast<int>(trace.events.size()))
    throw std::out_of_range("intervention index " + std::to_string(option.index()) +
                            " out of range for a trace of " + std::to_string(trace.events.size()) +
                            " events");
}

/// Final outcome of `trace` when the single intervention is `option`.
inline double outcome(const LatentTrace& trace, InterventionOption option) {
  validate_option(trace, option);
  const auto& ev = trace.events;
  double sum = 0.0;
  for (const auto& e : ev) sum += e.attribute;
  if (option.is_never()) return trace.process == ProcessId::p1 ? sum : trace.case_var * sum;

  const int k = option.index() - 1;  // 0-based
  if (trace.process == ProcessId::p1) {
    bool any_a = false;
    for (const auto& e : ev) any_a = any_a || e.activity == Activity::A;
    const double att = ev[k].attribute;
    return sum - att + (any_a ? 2.0 : -2.0) * att;
  }

  bool b_branch = false;
  for (const auto& e : ev) b_branch = b_branch || e.activity == Activity::B;
  // effect lands on the first D strictly after the intervention event
  for (std::size_t i = static_cast<std::size_t>(k) + 1; i < ev.size(); ++i) {
    if (ev[i].activity == Activity::D1 || ev[i].activity == Activity::D2) {
      const double att = ev[i].attribute;
      sum += (b_branch ? 2.0 : -4.0) * att - att;
      break;
    }
  }
  return trace.case_var * sum - trace.spec().intervention_cost;
}

/// Outcomes of every option; index 0 is never, index k is at_event(k).
struct CounterfactualTable {
  LatentTrace trace;
  std::vector<double> outcomes;

  double at(InterventionOption o) const { return outcomes.at(static_cast<std::size_t>(o.index())); }
  double never() const { return outcomes.front(); }
  std::size_t size() const { return outcomes.size(); }
};

inline CounterfactualTable counterfactual_table(const LatentTrace& trace) {
  CounterfactualTable t{trace, {}};
  const int n = static_cast<int>(trace.events.size());
  t.outcomes.reserve(static_cast<std::size_t>(n) + 1);
  t.outcomes.push_back(outcome(trace, InterventionOption::never()));
  for (int k = 1; k <= n; ++k) t.outcomes.push_back(outcome(trace, InterventionOption::at_event(k)));
  return t;
}

namespace detail {

// Interleavings of the upper branch (D1) with the lower branch (XOR then D2).
inline std::array<Event, 3> p2_middle(int order, Activity xor_act, int d1, int d2) {
  const Event x{xor_act, 0}, e1{Activity::D1, d1}, e2{Activity::D2, d2};
  switch (order) {
    case 0: return {e1, x, e2};
    case 1: return {x, e1, e2};
    default: return {x, e2, e1};
  }
}

inline LatentTrace make_p2(int case_var, Activity xor_act, int d1, int d2, int order, double p) {
  LatentTrace t{ProcessId::p2, {}, case_var, p};
  t.events.reserve(5);
  t.events.push_back({Activity::S, 0});
  for (const auto& e : p2_middle(order, xor_act, d1, d2)) t.events.push_back(e);
  t.events.push_back({Activity::E, 0});
  return t;
}

inline double p2_probability(Activity xor_act) {
  const double px = xor_act == Activity::B ? kP2ProbB : 1.0 - kP2ProbB;
  return px / (kP2MaxCaseVar * kP2D1Max * kP2D2Max * kP2Orders);
}

}  // namespace detail

inline LatentTrace sample_trace(ProcessId id, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (id == ProcessId::p1) {
    LatentTrace t{ProcessId::p1, {}, 1, 1.0};
    std::uniform_int_distribution<int> att(0, 3);
    for (int i = 0; i < 3; ++i) {
      const bool is_a = unit(rng) < detail::kP1ProbA;
      const int a = detail::kP1Attributes[static_cast<std::size_t>(att(rng))];
      t.events.push_back({is_a ? Activity::A : Activity::B, a});
      t.probability *= (is_a ? detail::kP1ProbA : 1.0 - detail::kP1ProbA) / 4.0;
    }
    return t;
  }
  const int cv = std::uniform_int_distribution<int>(1, detail::kP2MaxCaseVar)(rng);
  const Activity x = unit(rng) < detail::kP2ProbB ? Activity::B : Activity::C;
  const int d1 = std::uniform_int_distribution<int>(1, detail::kP2D1Max)(rng);
  const int d2 = std::uniform_int_distribution<int>(1, detail::kP2D2Max)(rng);
  const int order = std::uniform_int_distribution<int>(0, detail::kP2Orders - 1)(rng);
  return detail::make_p2(cv, x, d1, d2, order, detail::p2_probability(x));
}

/// Every distinct latent trace with its exact generator probability, in a fixed order.
inline std::vector<LatentTrace> enumerate_state_space(ProcessId id) {
  std::vector<LatentTrace> out;
  if (id == ProcessId::p1) {
    std::vector<std::pair<Event, double>> singles;
    for (Activity a : detail::kP1Alphabet)
      for (int att : detail::kP1Attributes)
        singles.push_back({{a, att}, (a == Activity::A ? detail::kP1ProbA : 1.0 - detail::kP1ProbA) / 4.0});
    out.reserve(512);
    for (const auto& [e1, p1] : singles)
      for (const auto& [e2, p2] : singles)
        for (const auto& [e3, p3] : singles)
          out.push_back(LatentTrace{ProcessId::p1, {e1, e2, e3}, 1, p1 * p2 * p3});
    return out;
  }
  out.reserve(720);
  for (int cv = 1; cv <= detail::kP2MaxCaseVar; ++cv)
    for (Activity x : {Activity::B, Activity::C})
      for (int d1 = 1; d1 <= detail::kP2D1Max; ++d1)
        for (int d2 = 1; d2 <= detail::kP2D2Max; ++d2)
          for (int order = 0; order < detail::kP2Orders; ++order)
            out.push_back(detail::make_p2(cv, x, d1, d2, order, detail::p2_probability(x)));
  return out;
}

/// Result of one environment interaction.
struct StepResult {
  PrefixObservation observation;
  double reward = 0.0;
  bool done = false;
};

/// One running case. The agent decides after each revealed event; the final
/// decision is taken on the complete trace and ends the episode.
class Episode {
 public:
  explicit Episode(LatentTrace trace) : trace_(std::move(trace)) {}

  static std::pair<Episode, PrefixObservation> reset(ProcessId id, Rng& rng) {
    Episode ep(sample_trace(id, rng));
    auto obs = ep.observation();
    return {std::move(ep), std::move(obs)};
  }

  PrefixObservation observation() const { return prefix_of(trace_, revealed_, first_intervention_); }

  StepResult step(Action action) {
    if (done_) throw std::logic_error("step() called on a finished episode");
    const auto& spec = trace_.spec();
    double reward = 0.0;
    if (action == Action::intervene) {
      if (first_intervention_ == 0) {
        first_intervention_ = revealed_;
        reward -= spec.intervention_cost;
      } else {
        reward -= spec.repeat_penalty;
      }
    }
    if (revealed_ == spec.num_events) {
      done_ = true;
      const auto opt = first_intervention_ == 0 ? InterventionOption::never()
                                                : InterventionOption::at_event(first_intervention_);
      // the cost was already charged at the intervention step
      reward += outcome(trace_, opt) + (opt.is_never() ? 0.0 : spec.intervention_cost);
      return {observation(), reward, true};
    }
    ++revealed_;
    return {observation(), reward, false};
  }

  bool done() const { return done_; }
  const LatentTrace& trace() const { return trace_; }
  InterventionOption first_intervention() const {
    return first_intervention_ == 0 ? InterventionOption::never()
                                    : InterventionOption::at_event(first_intervention_);
  }

 private:
  LatentTrace trace_;
  int revealed_ = 1;
  int first_intervention_ = 0;
  bool done_ = false;
};

/// Return of an episode replaying `trace` with a fixed action sequence.
inline double replay_return(const LatentTrace& trace, std::span<const Action> actions) {
  Episode ep(trace);
  double total = 0.0;
  for (Action a : actions) {
    auto r = ep.step(a);
    total += r.reward;
    if (r.done) break;
  }
  if (!ep.done()) throw std::invalid_argument("action sequence shorter than the episode");
  return total;
}

/// Action sequence that intervenes exactly once, as `option` prescribes.
inline std::vector<Action> actions_for(const LatentTrace& trace, InterventionOption option) {
  validate_option(trace, option);
  std::vector<Action> acts(trace.events.size(), Action::wait);
  if (!option.is_never()) acts[static_cast<std::size_t>(option.index() - 1)] = Action::intervene;
  return acts;
}

}  // namespace presc
