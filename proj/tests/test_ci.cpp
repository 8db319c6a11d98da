#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "presc/ci_learner.hpp"

using namespace presc;

namespace {

const CIDataset& p1_dataset() {
  static const CIDataset ds = [] {
    Rng rng(2024);
    return build_rct_dataset(ProcessId::p1, 10000, rng);
  }();
  return ds;
}

std::shared_ptr<const TabularOutcomeModel> exact_p1() {
  static const auto m = std::make_shared<const TabularOutcomeModel>(fit_tabular_exact(ProcessId::p1));
  return m;
}

struct ExactTables {
  std::vector<CounterfactualTable> tables;
  std::vector<double> weights;
};

ExactTables enumerated(ProcessId id) {
  ExactTables e;
  for (const auto& t : enumerate_state_space(id)) {
    e.tables.push_back(counterfactual_table(t));
    e.weights.push_back(t.probability);
  }
  return e;
}

// One-event synthetic validation case with a chosen gain from intervening.
CounterfactualTable synthetic(double gain) {
  CounterfactualTable t;
  t.trace = LatentTrace{ProcessId::p1, {{Activity::B, 1}}, 1, 0.0};
  t.outcomes = {0.0, gain};
  return t;
}

}  // namespace

TEST(Expansion, NeverCaseGivesAllPrefixesWithoutFlag) {
  const LatentTrace t{ProcessId::p1, {{Activity::B, 1}, {Activity::A, 2}, {Activity::B, 5}}, 1, 0.0};
  const auto s = expand_case(t, InterventionOption::never(), 8.0, 0);
  ASSERT_EQ(s.size(), 3u);
  for (const auto& x : s) EXPECT_FALSE(x.intervene_now);
}

TEST(Expansion, InterventionTruncatesAndFlagsLastPrefix) {
  const LatentTrace t{ProcessId::p1, {{Activity::B, 1}, {Activity::A, 2}, {Activity::B, 5}}, 1, 0.0};
  const auto s = expand_case(t, InterventionOption::at_event(2), 10.0, 0);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].prefix.length(), 1);
  EXPECT_FALSE(s[0].intervene_now);
  EXPECT_EQ(s[1].prefix.length(), 2);
  EXPECT_TRUE(s[1].intervene_now);
  EXPECT_EQ(s[1].outcome, 10.0);
}

TEST(Dataset, SizesAndCaseLevelSplit) {
  const auto& ds = p1_dataset();
  EXPECT_EQ(ds.cases.size(), 10000u);
  EXPECT_EQ(ds.train_cases.size(), 8000u);
  EXPECT_EQ(ds.validation_cases.size(), 2000u);
  std::set<int> train(ds.train_cases.begin(), ds.train_cases.end());
  for (const auto& s : ds.train) EXPECT_TRUE(train.count(s.case_index));
  for (const auto& s : ds.validation) EXPECT_FALSE(train.count(s.case_index));
  for (const auto& s : ds.train)
    ASSERT_EQ(s.outcome, ds.cases[static_cast<std::size_t>(s.case_index)].at(ds.assigned[static_cast<std::size_t>(s.case_index)]));
}

TEST(Dataset, StandardizerUsesTrainingSplitOnly) {
  const auto& ds = p1_dataset();
  double sum = 0;
  for (int c : ds.train_cases) sum += ds.cases[static_cast<std::size_t>(c)].at(ds.assigned[static_cast<std::size_t>(c)]);
  EXPECT_NEAR(ds.standardizer.outcome_mean, sum / 8000.0, 1e-9);
}

TEST(Ite, ExactTabularValues) {
  const auto m = exact_p1();
  const PrefixObservation terminal{ProcessId::p1, {{Activity::B, 2}, {Activity::A, 5}, {Activity::B, 5}}, 1, 0};
  EXPECT_NEAR(m->ite({terminal}).front(), 5.0, 1e-9);
  // Intervening on a zero attribute changes nothing, but under the RCT waiting
  // still leaves a doubling of event 3 (mean attribute 2) on the table half the
  // time: E[intervene] = 2 + 2, E[wait] = 2 + 1.5 * 2.
  const PrefixObservation zero{ProcessId::p1, {{Activity::A, 2}, {Activity::B, 0}}, 1, 0};
  EXPECT_NEAR(m->ite({zero}).front(), -1.0, 1e-9);
}

TEST(Ite, MissingDataIsReported) {
  TabularEstimator est;
  est.fit("p1|cv=1|A:1", Action::wait, 1.0);
  const TabularOutcomeModel m(est);
  const PrefixObservation obs{ProcessId::p1, {{Activity::A, 1}}, 1, 0};
  EXPECT_THROW(m.ite({obs}), PolicyError);
}

TEST(Threshold, NoProfitableTreatmentSelectsInfinity) {
  std::vector<CounterfactualTable> tables;
  std::vector<std::vector<double>> ites;
  for (const auto& t : enumerate_state_space(ProcessId::p1)) {
    bool any_a = false, zero = false;
    for (const auto& e : t.events) {
      any_a |= e.activity == Activity::A;
      zero |= e.attribute == 0;
    }
    if (any_a || zero) continue;  // every intervention strictly hurts
    tables.push_back(counterfactual_table(t));
    ites.push_back({-1.0 - t.events[0].attribute, -2.0, -0.5 - t.events[2].attribute});
  }
  ASSERT_FALSE(tables.empty());
  const auto sel = select_threshold(ites, tables);
  EXPECT_EQ(sel.threshold, std::numeric_limits<double>::infinity());
  EXPECT_EQ(sel.validation_uplift, 0.0);
}

TEST(Threshold, ConstructedOptimumAtThree) {
  const std::vector<double> ite{1.0, 2.0, 2.5, 3.5, 4.0, 6.0};
  std::vector<CounterfactualTable> tables;
  std::vector<std::vector<double>> ites;
  for (double v : ite) {
    tables.push_back(synthetic(v > 3 ? 1.0 : -1.0));
    ites.push_back({v});
  }
  const auto sel = select_threshold(ites, tables);
  EXPECT_GT(sel.threshold, 2.5);
  EXPECT_LT(sel.threshold, 3.5);
  EXPECT_EQ(sel.validation_uplift, 3.0);
  EXPECT_EQ(sel.candidates, ite.size() + 1);
}

TEST(Threshold, EmptyValidationIsAnError) {
  EXPECT_THROW(select_threshold({}, std::span<const CounterfactualTable>{}), std::invalid_argument);
}

TEST(Threshold, InterventionCountNonIncreasing) {
  const auto val = validation_tables(p1_dataset());
  const auto ites = ite_sequences(*exact_p1(), val);
  long last = std::numeric_limits<long>::max();
  for (double th = -12; th <= 12; th += 0.25) {
    long n = 0;
    for (const auto& seq : ites) n += !threshold_option(seq, th).is_never();
    EXPECT_LE(n, last) << th;
    last = n;
  }
}

TEST(CiPolicy, NeverIntervenesTwice) {
  const auto policy = ci_policy(exact_p1(), -100.0);  // would intervene everywhere
  for (const auto& t : enumerate_state_space(ProcessId::p1)) {
    std::vector<Action> acts;
    Episode ep(t);
    while (!ep.done()) {
      const auto a = policy.decide(ep.observation());
      acts.push_back(a);
      ep.step(a);
    }
    ASSERT_EQ(std::count(acts.begin(), acts.end(), Action::intervene), 1);
  }
}

TEST(CiPolicy, ExactTabularSandwich) {
  const auto e = enumerated(ProcessId::p1);
  const auto m = exact_p1();
  const auto sel = select_threshold(ite_sequences(*m, e.tables), e.tables, e.weights);
  const double ci = evaluate_policy_exact(ci_policy(m, sel.threshold), ProcessId::p1).expected_uplift_per_case;
  EXPECT_NEAR(ci, sel.validation_uplift, 1e-9);
  EXPECT_GT(ci, rct_expected_uplift(ProcessId::p1));
  EXPECT_GT(ci, 0.0);
  EXPECT_LT(ci, build_perfect_policy(ProcessId::p1).expected_uplift());
}

TEST(TrainCi, LinearToyFitsWithinFiftyEpochs) {
  // label is a linear function of the last observed attribute
  Rng rng(8);
  CIDataset ds;
  ds.process = ProcessId::p1;
  std::vector<LatentTrace> traces;
  std::vector<double> labels;
  auto add = [&](std::vector<CISample>& split, int n) {
    for (int i = 0; i < n; ++i) {
      const auto t = sample_trace(ProcessId::p1, rng);
      const int k = std::uniform_int_distribution<int>(1, 3)(rng);
      const double y = 3.0 * t.events[static_cast<std::size_t>(k - 1)].attribute - 4.0;
      split.push_back({prefix_of(t, k), false, y, i});
      traces.push_back(t);
      labels.push_back(y);
    }
  };
  add(ds.train, 4000);
  add(ds.validation, 1000);
  ds.standardizer = Standardizer::fit(traces, labels);
  CIConfig cfg;
  cfg.batch_size = 128;
  cfg.max_epochs = 50;
  cfg.patience = 50;
  const auto res = train_ci(ds, cfg, 1);
  double best = 1e9;
  for (const auto& e : res.curve) best = std::min(best, e.val_mae);
  EXPECT_LT(best, 0.05);
  EXPECT_LE(res.epochs, 50);
}

TEST(TrainCi, EarlyStoppingAndAgreementWithExactModel) {
  const auto& ds = p1_dataset();
  const auto res = train_ci(ds, CIConfig{}, 3);
  ASSERT_LT(res.epochs, CIConfig{}.max_epochs);
  EXPECT_GE(res.epochs, 6);
  EXPECT_EQ(res.epochs - res.best_epoch, CIConfig{}.patience);

  std::vector<PrefixObservation> prefixes;
  std::set<std::string> seen;
  for (const auto& t : enumerate_state_space(ProcessId::p1))
    for (int k = 1; k <= 3; ++k) {
      auto p = prefix_of(t, k);
      if (seen.insert(prefix_key(p)).second) prefixes.push_back(std::move(p));
    }
  // An MAE fit estimates conditional medians, so short prefixes (much future
  // left) sit visibly off the exact means; ranking and sign should still agree.
  const auto neural = res.model->ite(prefixes);
  const auto exact = exact_p1()->ite(prefixes);
  const double n = static_cast<double>(prefixes.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  std::size_t decisive = 0, agree = 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    sa += neural[i];
    sb += exact[i];
    sab += neural[i] * exact[i];
    saa += neural[i] * neural[i];
    sbb += exact[i] * exact[i];
    if (std::abs(exact[i]) > 1.0) {
      ++decisive;
      agree += (neural[i] > 0) == (exact[i] > 0);
    }
  }
  const double corr = (sab - sa * sb / n) / std::sqrt((saa - sa * sa / n) * (sbb - sb * sb / n));
  EXPECT_GT(corr, 0.95);
  ASSERT_GT(decisive, 0u);
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(decisive), 0.95) << agree << " of " << decisive;
}
