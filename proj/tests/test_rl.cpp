#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "presc/harness.hpp"
#include "presc/rl_learner.hpp"

using namespace presc;

namespace {

class FixedQ final : public QAgent {
 public:
  explicit FixedQ(QPair q) : q_(q) {}
  std::vector<QPair> q_values(const std::vector<PrefixObservation>& s) const override {
    return std::vector<QPair>(s.size(), q_);
  }
  void learn(const ReplayMemory&, std::size_t) override {}
  std::shared_ptr<const QAgent> snapshot() const override { return std::make_shared<FixedQ>(q_); }
  std::string kind() const override { return "fixed"; }

 private:
  QPair q_;
};

PrefixObservation any_state() { return {ProcessId::p1, {{Activity::A, 1}}, 1, 0}; }

struct TrainedTabular {
  std::shared_ptr<const TabularQAgent> agent;
  RLTrainResult result;
};

TrainedTabular train_tabular_p1(long transitions) {
  auto cfg = tabular_rl_defaults();
  cfg.max_transitions = transitions;
  TabularQAgent agent(cfg);
  Rng rng(41);
  auto res = train_rl(ProcessId::p1, agent, cfg, rng);
  auto snap = std::dynamic_pointer_cast<const TabularQAgent>(res.agent);
  return TrainedTabular{snap, std::move(res)};
}

const TrainedTabular& tabular_p1() {
  static const TrainedTabular t = train_tabular_p1(tabular_rl_defaults().max_transitions);
  return t;
}

}  // namespace

TEST(ReplayMemory, FifoEviction) {
  ReplayMemory mem(1024);
  for (int i = 1; i <= 1030; ++i) {
    Transition t;
    t.reward = i;
    mem.push(t);
  }
  ASSERT_EQ(mem.size(), 1024u);
  EXPECT_TRUE(mem.full());
  for (std::size_t i = 0; i < mem.size(); ++i) ASSERT_EQ(mem[i].reward, static_cast<double>(i + 7));
  EXPECT_THROW(ReplayMemory(0), std::invalid_argument);
}

TEST(Act, UniformExplorationAtEpsilonOne) {
  FixedQ agent({0.0, 10.0});
  agent.set_epsilon(1.0);
  Rng rng(7);
  const int n = 10000;
  int intervene = 0;
  for (int i = 0; i < n; ++i) intervene += agent.act(any_state(), rng) == Action::intervene;
  EXPECT_NEAR(intervene, n / 2.0, 3.0 * std::sqrt(n * 0.25));
}

TEST(Act, GreedyArgmaxAndTie) {
  Rng rng(1);
  FixedQ better({3.0, 5.0});
  better.set_epsilon(0.0);
  EXPECT_EQ(better.act(any_state(), rng), Action::intervene);
  FixedQ tie({4.0, 4.0});
  tie.set_epsilon(0.0);
  EXPECT_EQ(tie.act(any_state(), rng), Action::wait);
  EXPECT_THROW(tie.set_epsilon(1.5), std::invalid_argument);
}

TEST(Schedule, LinearDecayThenFloor) {
  RLConfig c;
  EXPECT_EQ(c.epsilon_at(0), 1.0);
  EXPECT_NEAR(c.epsilon_at(2500), 0.525, 1e-12);
  EXPECT_EQ(c.epsilon_at(5000), 0.05);
  EXPECT_EQ(c.epsilon_at(100000), 0.05);
}

TEST(Environment, RepeatInterventionCostsExactlyOneHundred) {
  for (auto id : {ProcessId::p1, ProcessId::p2})
    for (const auto& t : enumerate_state_space(id)) {
      const int n = static_cast<int>(t.events.size());
      for (int k = 1; k < n; ++k) {
        const auto single = actions_for(t, InterventionOption::at_event(k));
        const double base = replay_return(t, single);
        for (int j = k + 1; j <= n; ++j) {
          auto twice = single;
          twice[static_cast<std::size_t>(j - 1)] = Action::intervene;
          ASSERT_EQ(replay_return(t, twice), base - 100.0);
        }
      }
    }
}

TEST(ExtractPolicy, UntrainedAgentsNeverIntervene) {
  const auto tab = std::make_shared<TabularQAgent>();
  EXPECT_EQ(evaluate_policy_exact(extract_policy(tab), ProcessId::p1).expected_uplift_per_case, 0.0);
  const auto net = std::make_shared<NeuralQAgent>(ProcessId::p2, RLConfig{}, 1);
  EXPECT_EQ(evaluate_policy_exact(extract_policy(net), ProcessId::p2).expected_uplift_per_case, 0.0);
}

TEST(ExtractPolicy, GreedyPolicyIntervenesAtMostOnce) {
  FixedQ eager({0.0, 1.0});
  const auto policy = extract_policy(eager.snapshot());
  for (const auto& t : enumerate_state_space(ProcessId::p2)) {
    Episode ep(t);
    int n = 0;
    while (!ep.done()) {
      const auto a = policy.decide(ep.observation());
      n += a == Action::intervene;
      ep.step(a);
    }
    ASSERT_EQ(n, 1);
  }
}

TEST(Tabular, CountBasedExplorationSpreadsInterventions) {
  RLConfig cfg = tabular_rl_defaults();
  TabularQAgent agent(cfg);
  ReplayMemory mem(1);
  Rng rng(3);
  const auto s = any_state();  // length 1 of 3: four options remain, one intervenes here
  for (int i = 0; i < 400; ++i) {
    const auto a = agent.explore(s, rng);
    agent.update({s, a, 0.0, s, true});
  }
  EXPECT_EQ(agent.visits(s, Action::intervene), 100);
  EXPECT_EQ(agent.visits(s, Action::wait), 300);
}

TEST(Tabular, UpdateUsesDecayingStep) {
  RLConfig cfg;
  cfg.alpha = 0.0;
  cfg.alpha_visit_decay = true;
  TabularQAgent agent(cfg);
  const auto s = any_state();
  for (double r : {2.0, 4.0, 9.0}) agent.update({s, Action::wait, r, s, true});
  EXPECT_DOUBLE_EQ(agent.q(s)[0], 5.0);  // 1/n steps give the running mean
}

TEST(Tabular, BellmanConsistencyAndTerminalValues) {
  // running means still carry ~0.1 of sampling noise after the default budget
  const auto tr = train_tabular_p1(3000000);
  const auto& agent = *tr.agent;
  const auto& spec = ProcessSpec::get(ProcessId::p1);
  struct Acc {
    double p = 0, target = 0;
  };
  std::map<std::pair<std::string, int>, Acc> acc;
  std::map<std::pair<std::string, int>, PrefixObservation> states;
  for (const auto& t : enumerate_state_space(ProcessId::p1))
    for (int k = 1; k <= spec.num_events; ++k)
      for (int iv = 0; iv < k; ++iv)
        for (Action a : {Action::wait, Action::intervene}) {
          const auto s = prefix_of(t, k, iv);
          const bool first = a == Action::intervene && iv == 0;
          double r = a == Action::intervene ? (iv == 0 ? -spec.intervention_cost : -spec.repeat_penalty) : 0.0;
          const int now = first ? k : iv;
          double target;
          if (k == spec.num_events) {
            const auto opt = now == 0 ? InterventionOption::never() : InterventionOption::at_event(now);
            target = r + outcome(t, opt) + (now ? spec.intervention_cost : 0.0);
          } else {
            const auto q = agent.q(prefix_of(t, k + 1, now));
            target = r + std::max(q[0], q[1]);
          }
          auto key = std::pair{state_key(s), static_cast<int>(a)};
          acc[key].p += t.probability;
          acc[key].target += t.probability * target;
          states.emplace(key, s);
        }
  double err = 0, mass = 0, worst_terminal = 0;
  for (const auto& [key, a] : acc) {
    const auto& s = states.at(key);
    const auto act = static_cast<Action>(key.second);
    if (agent.visits(s, act) == 0) continue;
    const double q = agent.q(s)[static_cast<std::size_t>(key.second)];
    const double d = std::abs(q - a.target / a.p);
    err += a.p * d;
    mass += a.p;
    if (s.length() == spec.num_events) worst_terminal = std::max(worst_terminal, d);
  }
  EXPECT_LT(err / mass, 0.05);
  EXPECT_LT(worst_terminal, 1e-9);
}

TEST(Tabular, ConvergedAgentIsNearPerfect) {
  const auto& tr = tabular_p1();
  const double perfect = build_perfect_policy(ProcessId::p1).expected_uplift();
  const double got = evaluate_policy_exact(extract_policy(tr.agent), ProcessId::p1).expected_uplift_per_case;
  EXPECT_GE(got, 0.98 * perfect);
  EXPECT_LE(got, perfect + 1e-9);
  EXPECT_EQ(tr.result.transitions, 200000);
}

TEST(Tabular, CsvDump) {
  std::ostringstream os;
  tabular_p1().agent->write_csv(os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "state_key,q_wait,q_intervene,visits_wait,visits_intervene");
}

TEST(Neural, WarmupTrainingAndCheckpoint) {
  RLConfig cfg;
  cfg.max_transitions = 1200;
  cfg.eval_interval = 600;
  cfg.hidden = cfg.dense = 8;
  NeuralQAgent agent(ProcessId::p2, cfg, 5);
  Rng rng(5);
  const auto res = train_rl(ProcessId::p2, agent, cfg, rng);
  ASSERT_TRUE(agent.ready());
  EXPECT_EQ(res.transitions, 1200);
  ASSERT_EQ(res.curve.size(), 1u);  // no evaluation before the memory first fills
  EXPECT_EQ(res.curve[0].transitions, 1200);
  EXPECT_GE(agent.reward_scale(), 1.0);
  EXPECT_EQ(agent.regressor().optimizer_steps(), 1200 - 1024 + 1);

  std::stringstream ss;
  save_rl_agent(ss, agent);
  const auto back = load_rl_agent(ss, cfg);
  EXPECT_EQ(back->reward_scale(), agent.reward_scale());
  std::vector<PrefixObservation> states;
  for (const auto& t : enumerate_state_space(ProcessId::p2))
    for (int k = 1; k <= 5; k += 2) states.push_back(prefix_of(t, k, k > 1 ? 1 : 0));
  const auto a = agent.q_values(states), b = back->q_values(states);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(std::isfinite(a[i][0]) && std::isfinite(a[i][1]));
    ASSERT_EQ(a[i], b[i]);
  }
}

TEST(Neural, TrainingIsDeterministic) {
  RLConfig cfg;
  cfg.max_transitions = 1100;
  cfg.eval_interval = 1100;
  cfg.hidden = cfg.dense = 8;
  auto run = [&] {
    NeuralQAgent agent(ProcessId::p1, cfg, 9);
    Rng rng(9);
    train_rl(ProcessId::p1, agent, cfg, rng);
    return agent.regressor().parameters();
  };
  const auto a = run(), b = run();
  for (Eigen::Index i = 0; i < a.size(); ++i) ASSERT_EQ(a(i), b(i));
}
