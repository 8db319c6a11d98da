#pragma once

// Online Q-learning against the process environment. Two value functions:
// the sequence regressor with a FIFO replay memory (one optimization step on
// the whole memory after every transition once it is full), and a lookup
// table updated from each completed episode.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "presc/encoding.hpp"
#include "presc/policy.hpp"
#include "presc/sequence_regressor.hpp"

namespace presc {

struct Transition {
  PrefixObservation state;
  Action action = Action::wait;
  double reward = 0.0;
  PrefixObservation next_state;  // meaningless when done
  bool done = false;
};

/// Fixed-capacity FIFO buffer; index 0 is the oldest retained transition.
class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity = 1024) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay memory capacity must be positive");
    slots_.reserve(capacity);
  }

  /// Stores a transition and returns the slot it occupies.
  std::size_t push(Transition t) {
    std::size_t slot;
    if (slots_.size() < capacity_) {
      slot = slots_.size();
      slots_.push_back(std::move(t));
    } else {
      slot = head_;
      slots_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
    ++pushed_;
    return slot;
  }

  std::size_t size() const { return slots_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool full() const { return slots_.size() == capacity_; }
  long pushed() const { return pushed_; }

  const Transition& operator[](std::size_t i) const { return slots_[(head_ + i) % slots_.size()]; }
  const Transition& slot(std::size_t s) const { return slots_[s]; }

 private:
  std::size_t capacity_;
  std::vector<Transition> slots_;
  std::size_t head_ = 0;  // oldest slot once full
  long pushed_ = 0;
};

using QPair = std::array<double, 2>;  // indexed by Action: wait, intervene

inline Action greedy_action(const QPair& q) { return q[1] > q[0] ? Action::intervene : Action::wait; }

struct RLConfig {
  std::size_t memory = 1024;
  double gamma = 1.0;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  long epsilon_decay = 5000;  // transitions of linear decay
  long eval_interval = 500;
  int patience = 5;           // evaluations without improvement; 0 disables early stopping
  bool patience_after_exploration = true;  // only evaluations at epsilon_end count toward patience
  long max_transitions = 200000;
  // neural
  int hidden = 32;
  int dense = 32;
  AdamConfig adam{};
  // tabular
  double alpha = 0.05;
  bool alpha_visit_decay = true;  // alpha_n = max(alpha, 1/n)
  bool count_based_exploration = false;
  bool scale_rewards = true;  // neural: divide rewards by the warm-up return std

  double epsilon_at(long transitions) const {
    if (transitions >= epsilon_decay) return epsilon_end;
    const double f = static_cast<double>(transitions) / static_cast<double>(epsilon_decay);
    return epsilon_start + f * (epsilon_end - epsilon_start);
  }
};

class QAgent {
 public:
  virtual ~QAgent() = default;

  /// Q-values in outcome units for each state.
  virtual std::vector<QPair> q_values(const std::vector<PrefixObservation>& states) const = 0;
  /// Learns from the newest transition (stored in `memory`).
  virtual void learn(const ReplayMemory& memory, std::size_t newest_slot) = 0;
  /// Immutable copy of the current value function.
  virtual std::shared_ptr<const QAgent> snapshot() const = 0;
  virtual std::string kind() const = 0;

  QPair q(const PrefixObservation& s) const { return q_values({s}).front(); }

  double epsilon() const { return epsilon_; }
  void set_epsilon(double e) {
    if (e < 0.0 || e > 1.0) throw std::invalid_argument("epsilon outside [0, 1]");
    epsilon_ = e;
  }

  /// Epsilon-greedy; greedy ties go to wait.
  Action act(const PrefixObservation& s, Rng& rng) const {
    if (epsilon_ > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon_)
      return explore(s, rng);
    return greedy_action(q(s));
  }

  /// Action taken on an exploration step.
  virtual Action explore(const PrefixObservation&, Rng& rng) const {
    return std::bernoulli_distribution(0.5)(rng) ? Action::intervene : Action::wait;
  }

 private:
  double epsilon_ = 1.0;
};

// ---------------------------------------------------------------------------
// Tabular agent
// ---------------------------------------------------------------------------

class TabularQAgent final : public QAgent {
 public:
  explicit TabularQAgent(RLConfig cfg = {}) : cfg_(cfg) {}

  std::vector<QPair> q_values(const std::vector<PrefixObservation>& states) const override {
    std::vector<QPair> out;
    out.reserve(states.size());
    for (const auto& s : states) {
      auto it = table_.find(state_key(s));
      out.push_back(it == table_.end() ? QPair{0.0, 0.0} : it->second.q);
    }
    return out;
  }

  // Transitions are held until the episode ends and then applied newest first,
  // so each bootstrap target already reflects the successor's latest update.
  void learn(const ReplayMemory& memory, std::size_t newest_slot) override {
    pending_.push_back(memory.slot(newest_slot));
    if (!pending_.back().done) return;
    for (auto it = pending_.rbegin(); it != pending_.rend(); ++it) update(*it);
    pending_.clear();
  }

  void update(const Transition& t) {
    double target = t.reward;
    if (!t.done) {
      const auto next = q(t.next_state);
      target += cfg_.gamma * std::max(next[0], next[1]);
    }
    auto& cell = table_[state_key(t.state)];
    const auto a = static_cast<std::size_t>(t.action);
    ++cell.visits[a];
    const double alpha =
        cfg_.alpha_visit_decay ? std::max(cfg_.alpha, 1.0 / static_cast<double>(cell.visits[a])) : cfg_.alpha;
    cell.q[a] += alpha * (target - cell.q[a]);
  }

  // Count-based exploration: keeps the share of interventions tried at a state
  // near 1 / (remaining intervention options), so exploration spreads the
  // intervention point evenly over the rest of the case.
  Action explore(const PrefixObservation& s, Rng& rng) const override {
    if (!cfg_.count_based_exploration) return QAgent::explore(s, rng);
    const int options = ProcessSpec::get(s.process).num_events - s.length() + 2;
    const double share = 1.0 / static_cast<double>(options);
    const double ni = static_cast<double>(visits(s, Action::intervene));
    const double target = share * (ni + static_cast<double>(visits(s, Action::wait)));
    if (ni < target) return Action::intervene;
    if (ni > target) return Action::wait;
    return std::bernoulli_distribution(share)(rng) ? Action::intervene : Action::wait;
  }

  std::shared_ptr<const QAgent> snapshot() const override { return std::make_shared<TabularQAgent>(*this); }
  std::string kind() const override { return "tabular"; }

  std::size_t states() const { return table_.size(); }

  void write_csv(std::ostream& os) const {
    os << "state_key,q_wait,q_intervene,visits_wait,visits_intervene\n";
    os << std::setprecision(17);
    for (const auto& [key, c] : table_)
      os << key << ',' << c.q[0] << ',' << c.q[1] << ',' << c.visits[0] << ',' << c.visits[1] << '\n';
  }
  long visits(const PrefixObservation& s, Action a) const {
    auto it = table_.find(state_key(s));
    return it == table_.end() ? 0 : it->second.visits[static_cast<std::size_t>(a)];
  }

 private:
  struct Cell {
    QPair q{0.0, 0.0};
    std::array<long, 2> visits{0, 0};
  };
  RLConfig cfg_;
  std::map<std::string, Cell> table_;
  std::vector<Transition> pending_;
};

// ---------------------------------------------------------------------------
// Neural agent
// ---------------------------------------------------------------------------

/// Q-network over RL-encoded prefixes. The network regresses Q / reward_scale;
/// the encoder and reward scale are fixed from the episodes that first fill the memory.
class NeuralQAgent final : public QAgent {
 public:
  NeuralQAgent(ProcessId id, RLConfig cfg, std::uint64_t seed) : process_(id), cfg_(cfg), seed_(seed) {}

  /// Restores a trained agent (e.g. from a checkpoint).
  NeuralQAgent(ProcessId id, RLConfig cfg, SequenceRegressor<float> model, Encoder enc, double reward_scale)
      : process_(id), cfg_(cfg), model_(std::move(model)), encoder_(std::move(enc)), reward_scale_(reward_scale),
        ready_(true) {}

  bool ready() const { return ready_; }
  const SequenceRegressor<float>& regressor() const { return model_; }
  SequenceRegressor<float>& regressor() { return model_; }
  const Encoder& encoder() const { return encoder_; }
  double reward_scale() const { return reward_scale_; }

  std::vector<QPair> q_values(const std::vector<PrefixObservation>& states) const override {
    std::vector<QPair> out(states.size(), QPair{0.0, 0.0});
    if (!ready_ || states.empty()) return out;
    const EncodeMode mode = EncodeMode::rl();
    const auto x = encoder_.encode_batch<float>(states, std::span<const EncodeMode>(&mode, 1));
    const auto y = model_.forward(x);
    for (std::size_t i = 0; i < states.size(); ++i)
      out[i] = {reward_scale_ * y(static_cast<Eigen::Index>(i), 0), reward_scale_ * y(static_cast<Eigen::Index>(i), 1)};
    return out;
  }

  /// Fixes the encoder and reward scale from the traces and returns seen so far.
  void initialize(std::span<const LatentTrace> traces, std::span<const double> episode_returns) {
    encoder_ = Encoder(process_, Standardizer::fit(traces, {}));
    double s = 0.0, ss = 0.0;
    for (double r : episode_returns) {
      s += r;
      ss += r * r;
    }
    const double n = std::max<double>(1.0, static_cast<double>(episode_returns.size()));
    reward_scale_ = cfg_.scale_rewards ? std::max(1.0, std::sqrt(std::max(0.0, ss / n - (s / n) * (s / n)))) : 1.0;
    const RegressorShape shape{encoder_.steps(), encoder_.features(), encoder_.side_features(), cfg_.hidden,
                               cfg_.dense, 2};
    model_ = SequenceRegressor<float>(shape, seed_, cfg_.adam);
    ready_ = true;
  }

  void learn(const ReplayMemory& memory, std::size_t newest_slot) override {
    if (!ready_) return;
    const int B = static_cast<int>(memory.capacity());
    if (states_.batch != B) {
      states_ = SequenceBatch<float>(encoder_.steps(), B, encoder_.features(), encoder_.side_features());
      next_ = SequenceBatch<float>(encoder_.steps(), 1, encoder_.features(), encoder_.side_features());
      encoded_.assign(memory.capacity(), false);
    }
    // keep the encoded states in step with the memory slots
    for (std::size_t s = 0; s < memory.size(); ++s) {
      if (encoded_[s] && s != newest_slot) continue;
      encoder_.encode_into(memory.slot(s).state, EncodeMode::rl(), states_, static_cast<int>(s));
      encoded_[s] = true;
    }
    if (!memory.full()) return;

    // The next state of a non-terminal transition is the state stored in the
    // following slot, so one forward pass yields both predictions and
    // bootstrap values. Only the newest transition needs its own pass.
    const auto& q = model_.forward_for_step(states_);
    const auto& newest = memory.slot(newest_slot);
    float newest_next = 0.0f;
    if (!newest.done) {
      encoder_.encode_into(newest.next_state, EncodeMode::rl(), next_, 0);
      const auto& qn = model_.forward(next_, next_ws_);
      newest_next = std::max(qn(0, 0), qn(0, 1));
    }
    targets_.setZero(B, 2);
    mask_.setZero(B, 2);
    for (int s = 0; s < B; ++s) {
      const auto& t = memory.slot(static_cast<std::size_t>(s));
      double y = t.reward / reward_scale_;
      if (!t.done) {
        const int succ = (s + 1) % B;
        const double v = static_cast<std::size_t>(s) == newest_slot ? newest_next : std::max(q(succ, 0), q(succ, 1));
        y += cfg_.gamma * v;
      }
      const int a = static_cast<int>(t.action);
      targets_(s, a) = static_cast<float>(y);
      mask_(s, a) = 1.0f;
    }
    last_loss_ = model_.train_step_after_forward(states_, targets_, mask_);
  }

  double last_loss() const { return last_loss_; }

  std::shared_ptr<const QAgent> snapshot() const override {
    auto copy = std::make_shared<NeuralQAgent>(process_, cfg_, model_, encoder_, reward_scale_);
    copy->ready_ = ready_;
    return copy;
  }
  std::string kind() const override { return "neural"; }

 private:
  ProcessId process_;
  RLConfig cfg_;
  std::uint64_t seed_ = 0;
  SequenceRegressor<float> model_;
  Encoder encoder_;
  double reward_scale_ = 1.0;
  bool ready_ = false;

  SequenceBatch<float> states_, next_;
  std::vector<bool> encoded_;
  Matrix<float> targets_, mask_;
  SequenceRegressor<float>::Workspace next_ws_;
  double last_loss_ = 0.0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Guarded greedy policy over an immutable snapshot of the agent.
inline Policy extract_policy(std::shared_ptr<const QAgent> agent) {
  auto batch = [agent](const std::vector<PrefixObservation>& obs) {
    const auto q = agent->q_values(obs);
    std::vector<Action> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) out[i] = greedy_action(q[i]);
    return out;
  };
  auto single = [batch](const PrefixObservation& obs) { return batch({obs}).front(); };
  return Policy("rl_" + agent->kind(), single, batch);
}

struct RLCurvePoint {
  long transitions = 0;
  double eval_uplift = 0.0;
  double epsilon = 0.0;
};

struct RLTrainResult {
  std::shared_ptr<const QAgent> agent;  // best evaluated snapshot, latest among ties
  long transitions = 0;
  long episodes = 0;
  double best_eval_uplift = -std::numeric_limits<double>::infinity();
  long best_at = 0;
  std::vector<RLCurvePoint> curve;
};

/// Runs episodes until early stopping (or max_transitions). Evaluation is the
/// exact expected uplift of the guarded greedy policy.
inline RLTrainResult train_rl(ProcessId id, QAgent& agent, const RLConfig& cfg, Rng& rng,
                              const std::function<void(const RLCurvePoint&)>& on_eval = {}) {
  ReplayMemory memory(cfg.memory);
  auto* neural = dynamic_cast<NeuralQAgent*>(&agent);
  std::vector<LatentTrace> warmup_traces;
  std::vector<double> warmup_returns;

  RLTrainResult res;
  std::shared_ptr<const QAgent> best;
  int since_best = 0;
  long t = 0;
  bool stop = false;
  const bool early_stopping = cfg.patience > 0;

  while (!stop && t < cfg.max_transitions) {
    auto [ep, obs] = Episode::reset(id, rng);
    ++res.episodes;
    double episode_return = 0.0;
    bool done = false;
    while (!done) {
      agent.set_epsilon(cfg.epsilon_at(t));
      const Action a = agent.act(obs, rng);
      auto step = ep.step(a);
      episode_return += step.reward;
      done = step.done;
      const std::size_t slot = memory.push({obs, a, step.reward, step.observation, step.done});
      ++t;
      if (neural && !neural->ready() && memory.full()) neural->initialize(warmup_traces, warmup_returns);
      agent.learn(memory, slot);
      obs = std::move(step.observation);

      const bool learning = neural ? memory.full() : true;  // nothing to evaluate before the first update
      if (learning && t % cfg.eval_interval == 0) {
        auto snap = agent.snapshot();
        const double u = evaluate_policy_exact(extract_policy(snap), id).expected_uplift_per_case;
        RLCurvePoint pt{t, u, agent.epsilon()};
        res.curve.push_back(pt);
        if (on_eval) on_eval(pt);
        if (u >= res.best_eval_uplift) {  // latest snapshot among equals
          res.best_eval_uplift = u;
          res.best_at = t;
          best = std::move(snap);
          since_best = 0;
        } else if (early_stopping && (!cfg.patience_after_exploration || t >= cfg.epsilon_decay) &&
                   ++since_best >= cfg.patience) {
          stop = true;
        }
      }
      if (t >= cfg.max_transitions) break;
    }
    if (neural && !neural->ready()) {
      warmup_traces.push_back(ep.trace());
      warmup_returns.push_back(episode_return);
    }
  }
  res.transitions = t;
  res.agent = best ? best : agent.snapshot();
  return res;
}

}  // namespace presc
