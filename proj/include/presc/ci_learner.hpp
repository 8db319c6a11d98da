#pragma once

// Direct causal-inference pipeline: an RCT log expanded into one sample per
// decision prefix, an outcome regressor that takes the intervention decision
// as an input feature, ITE = f(prefix, intervene) - f(prefix, wait), and an
// intervention threshold chosen on a held-out validation split.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "presc/encoding.hpp"
#include "presc/policy.hpp"
#include "presc/sequence_regressor.hpp"
#include "presc/tabular.hpp"

namespace presc {

/// One training example: a prefix, the decision taken at its last event, and the case's final outcome.
struct CISample {
  PrefixObservation prefix;
  bool intervene_now = false;
  double outcome = 0.0;
  int case_index = 0;
};

struct CIDataset {
  ProcessId process = ProcessId::p1;
  std::vector<CounterfactualTable> cases;   // every RCT case with its full counterfactual table
  std::vector<InterventionOption> assigned; // option drawn by the RCT
  std::vector<int> train_cases, validation_cases;
  std::vector<CISample> train, validation;
  Standardizer standardizer;  // fitted on the training split only
};

/// Prefixes of a case that carry a decision under the one-off constraint.
inline std::vector<CISample> expand_case(const LatentTrace& trace, InterventionOption assigned, double final_outcome,
                                         int case_index) {
  const int n = static_cast<int>(trace.events.size());
  const int last = assigned.is_never() ? n : assigned.index();
  std::vector<CISample> out;
  out.reserve(static_cast<std::size_t>(last));
  for (int k = 1; k <= last; ++k)
    out.push_back({prefix_of(trace, k), !assigned.is_never() && k == assigned.index(), final_outcome, case_index});
  return out;
}

inline CIDataset build_rct_dataset(ProcessId id, int n_cases, Rng& rng, double validation_fraction = 0.2) {
  if (n_cases < 2) throw std::invalid_argument("an RCT dataset needs at least two cases");
  CIDataset ds;
  ds.process = id;
  ds.cases.reserve(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) {
    ds.cases.push_back(counterfactual_table(sample_trace(id, rng)));
    ds.assigned.push_back(rct_policy(id, rng));
  }
  std::vector<int> order(static_cast<std::size_t>(n_cases));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::lround(validation_fraction * n_cases));
  ds.validation_cases.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  ds.train_cases.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(ds.validation_cases.begin(), ds.validation_cases.end());
  std::sort(ds.train_cases.begin(), ds.train_cases.end());

  std::vector<LatentTrace> train_traces;
  std::vector<double> train_outcomes;
  for (int c : ds.train_cases) {
    const auto& t = ds.cases[static_cast<std::size_t>(c)];
    const double y = t.at(ds.assigned[static_cast<std::size_t>(c)]);
    train_traces.push_back(t.trace);
    train_outcomes.push_back(y);
    for (auto& s : expand_case(t.trace, ds.assigned[static_cast<std::size_t>(c)], y, c)) ds.train.push_back(std::move(s));
  }
  for (int c : ds.validation_cases) {
    const auto& t = ds.cases[static_cast<std::size_t>(c)];
    const double y = t.at(ds.assigned[static_cast<std::size_t>(c)]);
    for (auto& s : expand_case(t.trace, ds.assigned[static_cast<std::size_t>(c)], y, c))
      ds.validation.push_back(std::move(s));
  }
  ds.standardizer = Standardizer::fit(train_traces, train_outcomes);
  return ds;
}

// ---------------------------------------------------------------------------
// Outcome models
// ---------------------------------------------------------------------------

/// Anything that predicts the final outcome of a prefix under a decision, in outcome units.
class OutcomeModel {
 public:
  virtual ~OutcomeModel() = default;
  /// ITE for each prefix (none of which carries an earlier intervention).
  virtual std::vector<double> ite(const std::vector<PrefixObservation>& prefixes) const = 0;
};

struct CIConfig {
  int hidden = 32;
  int dense = 32;
  int batch_size = 1024;
  int patience = 5;
  int max_epochs = 2000;
  AdamConfig adam{};
};

struct EpochLog {
  int epoch = 0;
  double train_mae = 0.0;
  double val_mae = 0.0;
};

class NeuralOutcomeModel final : public OutcomeModel {
 public:
  NeuralOutcomeModel(SequenceRegressor<float> model, Encoder encoder)
      : model_(std::move(model)), encoder_(std::move(encoder)) {}

  const SequenceRegressor<float>& regressor() const { return model_; }
  const Encoder& encoder() const { return encoder_; }

  /// De-standardized prediction of the final outcome.
  std::vector<double> predict(const std::vector<PrefixObservation>& prefixes, bool intervene_now) const {
    if (prefixes.empty()) return {};
    const EncodeMode mode = EncodeMode::ci(intervene_now);
    const auto batch = encoder_.encode_batch<float>(prefixes, std::span<const EncodeMode>(&mode, 1));
    const auto y = model_.forward(batch);
    std::vector<double> out(prefixes.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = encoder_.standardizer().outcome_inverse(y(static_cast<Eigen::Index>(i), 0));
    return out;
  }

  std::vector<double> ite(const std::vector<PrefixObservation>& prefixes) const override {
    if (prefixes.empty()) return {};
    const EncodeMode modes[2] = {EncodeMode::ci(true), EncodeMode::ci(false)};
    std::vector<PrefixObservation> both;
    both.reserve(prefixes.size() * 2);
    for (int m = 0; m < 2; ++m) both.insert(both.end(), prefixes.begin(), prefixes.end());
    std::vector<EncodeMode> per(both.size(), modes[1]);
    std::fill(per.begin(), per.begin() + static_cast<std::ptrdiff_t>(prefixes.size()), modes[0]);
    const auto batch = encoder_.encode_batch<float>(both, per);
    const auto y = model_.forward(batch);
    const double scale = encoder_.standardizer().outcome_std;
    std::vector<double> out(prefixes.size());
    const auto n = static_cast<Eigen::Index>(prefixes.size());
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = scale * (double(y(i, 0)) - double(y(n + i, 0)));
    return out;
  }

 private:
  SequenceRegressor<float> model_;
  Encoder encoder_;
};

/// Conditional means per (prefix, decision); the exact counterpart of the regressor.
class TabularOutcomeModel final : public OutcomeModel {
 public:
  explicit TabularOutcomeModel(TabularEstimator est) : est_(std::move(est)) {}

  const TabularEstimator& estimator() const { return est_; }

  std::vector<double> ite(const std::vector<PrefixObservation>& prefixes) const override {
    std::vector<double> out;
    out.reserve(prefixes.size());
    for (const auto& p : prefixes) {
      const auto key = prefix_key(p);
      const auto yes = est_.predict(key, Action::intervene);
      const auto no = est_.predict(key, Action::wait);
      if (!yes || !no) throw PolicyError("no data for prefix " + key);
      out.push_back(*yes - *no);
    }
    return out;
  }

 private:
  TabularEstimator est_;
};

/// Tabular model from dataset samples (each weighted 1).
inline TabularOutcomeModel fit_tabular(std::span<const CISample> samples) {
  TabularEstimator est;
  for (const auto& s : samples)
    est.fit(prefix_key(s.prefix), s.intervene_now ? Action::intervene : Action::wait, s.outcome);
  return TabularOutcomeModel(std::move(est));
}

/// Tabular model from the full enumerated state space under the RCT's option
/// distribution, with exact probabilities as weights.
inline TabularOutcomeModel fit_tabular_exact(ProcessId id) {
  TabularEstimator est;
  const int n = ProcessSpec::get(id).num_events;
  for (const auto& t : enumerate_state_space(id)) {
    const auto table = counterfactual_table(t);
    for (int o = 0; o <= n; ++o) {
      const auto opt = o == 0 ? InterventionOption::never() : InterventionOption::at_event(o);
      const double w = t.probability / (n + 1);
      for (const auto& s : expand_case(t, opt, table.at(opt), 0))
        est.fit(prefix_key(s.prefix), s.intervene_now ? Action::intervene : Action::wait, s.outcome, w);
    }
  }
  return TabularOutcomeModel(std::move(est));
}

struct CITrainResult {
  std::shared_ptr<const NeuralOutcomeModel> model;
  int epochs = 0;
  int best_epoch = 0;
  std::vector<EpochLog> curve;
};

namespace detail {

inline SequenceBatch<float> gather_rows(const SequenceBatch<float>& all, std::span<const int> rows) {
  SequenceBatch<float> out(all.steps, static_cast<int>(rows.size()), static_cast<int>(all.inputs.cols()),
                           static_cast<int>(all.side.cols()));
  for (int t = 0; t < all.steps; ++t)
    for (std::size_t j = 0; j < rows.size(); ++j)
      out.inputs.row(static_cast<Eigen::Index>(t) * out.batch + static_cast<Eigen::Index>(j)) =
          all.inputs.row(static_cast<Eigen::Index>(t) * all.batch + rows[j]);
  for (std::size_t j = 0; j < rows.size(); ++j)
    out.side.row(static_cast<Eigen::Index>(j)) = all.side.row(rows[j]);
  return out;
}

inline SequenceBatch<float> encode_samples(const Encoder& enc, std::span<const CISample> samples) {
  std::vector<PrefixObservation> obs;
  std::vector<EncodeMode> modes;
  obs.reserve(samples.size());
  modes.reserve(samples.size());
  for (const auto& s : samples) {
    obs.push_back(s.prefix);
    modes.push_back(EncodeMode::ci(s.intervene_now));
  }
  return enc.encode_batch<float>(obs, modes);
}

inline Matrix<float> standardized_labels(const Standardizer& st, std::span<const CISample> samples) {
  Matrix<float> y(static_cast<Eigen::Index>(samples.size()), 1);
  for (std::size_t i = 0; i < samples.size(); ++i)
    y(static_cast<Eigen::Index>(i), 0) = static_cast<float>(st.outcome(samples[i].outcome));
  return y;
}

}  // namespace detail

/// Mini-batch training with early stopping on validation MAE; the best
/// validation parameters are restored before returning.
inline CITrainResult train_ci(const CIDataset& ds, const CIConfig& cfg, std::uint64_t seed,
                              const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (ds.train.empty() || ds.validation.empty()) throw std::invalid_argument("train_ci needs both splits");
  const Encoder enc(ds.process, ds.standardizer);
  const RegressorShape shape{enc.steps(), enc.features(), enc.side_features(), cfg.hidden, cfg.dense, 1};
  SequenceRegressor<float> model(shape, seed, cfg.adam);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

  const auto train_x = detail::encode_samples(enc, ds.train);
  const auto train_y = detail::standardized_labels(ds.standardizer, ds.train);
  const auto val_x = detail::encode_samples(enc, ds.validation);
  const auto val_y = detail::standardized_labels(ds.standardizer, ds.validation);
  const Matrix<float> val_mask = Matrix<float>::Ones(val_y.rows(), 1);
  SequenceRegressor<float>::Workspace ws;

  std::vector<int> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);

  CITrainResult res;
  double best = std::numeric_limits<double>::infinity();
  Vector<float> best_params = model.parameters();
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const int> rows(order.data() + start, end - start);
      const auto xb = detail::gather_rows(train_x, rows);
      Matrix<float> yb(static_cast<Eigen::Index>(rows.size()), 1);
      for (std::size_t j = 0; j < rows.size(); ++j) yb(static_cast<Eigen::Index>(j), 0) = train_y(rows[j], 0);
      train_sum += model.train_step(xb, yb) * static_cast<double>(rows.size());
    }
    const auto& pred = model.forward(val_x, ws);
    const double val = static_cast<double>((pred - val_y).cwiseAbs().sum()) / static_cast<double>(val_y.rows());
    if (!std::isfinite(val)) throw DivergenceError("validation MAE is not finite at epoch " + std::to_string(epoch));
    EpochLog log{epoch, train_sum / static_cast<double>(order.size()), val};
    res.curve.push_back(log);
    if (on_epoch) on_epoch(log);
    res.epochs = epoch;
    if (val < best) {
      best = val;
      best_params = model.parameters();
      res.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model.parameters() = best_params;
  res.model = std::make_shared<const NeuralOutcomeModel>(std::move(model), enc);
  return res;
}

// ---------------------------------------------------------------------------
// Threshold selection and the CI policy
// ---------------------------------------------------------------------------

/// ITE of every prefix of every case (no prior intervention), per case in event order.
inline std::vector<std::vector<double>> ite_sequences(const OutcomeModel& model,
                                                      std::span<const CounterfactualTable> tables) {
  std::vector<PrefixObservation> all;
  for (const auto& t : tables)
    for (int k = 1; k <= static_cast<int>(t.trace.events.size()); ++k) all.push_back(prefix_of(t.trace, k));
  const auto ites = model.ite(all);
  std::vector<std::vector<double>> out;
  out.reserve(tables.size());
  std::size_t pos = 0;
  for (const auto& t : tables) {
    const auto n = t.trace.events.size();
    out.emplace_back(ites.begin() + static_cast<std::ptrdiff_t>(pos), ites.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  return out;
}

/// First event whose ITE exceeds the threshold.
inline InterventionOption threshold_option(std::span<const double> ites, double threshold) {
  for (std::size_t k = 0; k < ites.size(); ++k)
    if (ites[k] > threshold) return InterventionOption::at_event(static_cast<int>(k) + 1);
  return InterventionOption::never();
}

struct ThresholdSelection {
  double threshold = std::numeric_limits<double>::infinity();
  double validation_uplift = 0.0;
  std::size_t candidates = 0;
};

/// Threshold maximizing realized validation uplift. Candidates are the midpoints
/// of consecutive distinct ITE values plus -inf and +inf; ties prefer the larger threshold.
inline ThresholdSelection select_threshold(const std::vector<std::vector<double>>& ites,
                                           std::span<const CounterfactualTable> tables,
                                           std::span<const double> weights = {}) {
  if (tables.empty()) throw std::invalid_argument("select_threshold needs a non-empty validation set");
  if (ites.size() != tables.size() || (!weights.empty() && weights.size() != tables.size()))
    throw std::invalid_argument("select_threshold: ITE, table and weight counts differ");
  std::vector<double> values;
  for (const auto& seq : ites) values.insert(values.end(), seq.begin(), seq.end());
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());

  std::vector<double> candidates{-std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i + 1 < values.size(); ++i) candidates.push_back(0.5 * (values[i] + values[i + 1]));
  candidates.push_back(std::numeric_limits<double>::infinity());

  ThresholdSelection best;
  best.candidates = candidates.size();
  best.validation_uplift = -std::numeric_limits<double>::infinity();
  for (double th : candidates) {
    double u = 0.0;
    for (std::size_t i = 0; i < tables.size(); ++i) {
      const auto opt = threshold_option(ites[i], th);
      u += (weights.empty() ? 1.0 : weights[i]) * (tables[i].at(opt) - tables[i].never());
    }
    if (u >= best.validation_uplift) {  // ascending candidates: >= keeps the larger threshold on ties
      best.validation_uplift = u;
      best.threshold = th;
    }
  }
  return best;
}

/// Intervene iff ITE > threshold and nothing was done earlier.
inline Policy ci_policy(std::shared_ptr<const OutcomeModel> model, double threshold) {
  auto batch = [model, threshold](const std::vector<PrefixObservation>& obs) {
    const auto ites = model->ite(obs);
    std::vector<Action> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) out[i] = ites[i] > threshold ? Action::intervene : Action::wait;
    return out;
  };
  auto single = [batch](const PrefixObservation& obs) { return batch({obs}).front(); };
  return Policy("ci", single, batch);
}

/// The validation cases of a dataset as counterfactual tables.
inline std::vector<CounterfactualTable> validation_tables(const CIDataset& ds) {
  std::vector<CounterfactualTable> out;
  out.reserve(ds.validation_cases.size());
  for (int c : ds.validation_cases) out.push_back(ds.cases[static_cast<std::size_t>(c)]);
  return out;
}

}  // namespace presc
