#pragma once

// Prefix -> fixed-length feature sequence. Per step:
//   [one-hot activity | padding flag | standardized attribute | intervention flag]
// Steps past the prefix are zero with the padding flag set. The case variable
// (P2) is routed to a side input consumed after the recurrent layers.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "presc/process.hpp"

namespace presc {

/// z-scoring statistics estimated on a training split.
struct Standardizer {
  double attribute_mean = 0.0, attribute_std = 1.0;
  double case_var_mean = 0.0, case_var_std = 1.0;
  double outcome_mean = 0.0, outcome_std = 1.0;
  bool fitted = false;

  static double safe_std(double var) {
    const double s = std::sqrt(std::max(var, 0.0));
    return s > 1e-12 ? s : 1.0;
  }

  /// Attribute and case-variable statistics from traces; outcome statistics from labels.
  static Standardizer fit(std::span<const LatentTrace> traces, std::span<const double> outcomes) {
    if (traces.empty()) throw std::invalid_argument("cannot fit a standardizer on no traces");
    Standardizer s;
    double sa = 0, saa = 0, sc = 0, scc = 0;
    std::size_t na = 0;
    for (const auto& t : traces) {
      for (const auto& e : t.events) {
        sa += e.attribute;
        saa += double(e.attribute) * e.attribute;
        ++na;
      }
      sc += t.case_var;
      scc += double(t.case_var) * t.case_var;
    }
    const double nt = static_cast<double>(traces.size());
    s.attribute_mean = sa / static_cast<double>(na);
    s.attribute_std = safe_std(saa / static_cast<double>(na) - s.attribute_mean * s.attribute_mean);
    s.case_var_mean = sc / nt;
    s.case_var_std = safe_std(scc / nt - s.case_var_mean * s.case_var_mean);
    if (!outcomes.empty()) {
      double so = 0, soo = 0;
      for (double o : outcomes) {
        so += o;
        soo += o * o;
      }
      const double no = static_cast<double>(outcomes.size());
      s.outcome_mean = so / no;
      s.outcome_std = safe_std(soo / no - s.outcome_mean * s.outcome_mean);
    }
    s.fitted = true;
    return s;
  }

  double attribute(double x) const { return (x - attribute_mean) / attribute_std; }
  double case_var(double x) const { return (x - case_var_mean) / case_var_std; }
  double outcome(double x) const { return (x - outcome_mean) / outcome_std; }
  double outcome_inverse(double z) const { return z * outcome_std + outcome_mean; }
};

/// How the intervention-flag channel is filled.
struct EncodeMode {
  enum class Kind { ci, rl } kind = Kind::rl;
  bool intervene_now = false;

  /// CI query: the flag of the last observed step carries the hypothetical decision.
  static EncodeMode ci(bool intervene_now) { return {Kind::ci, intervene_now}; }
  /// RL state: the flag marks the step at which an earlier intervention was taken.
  static EncodeMode rl() { return {Kind::rl, false}; }
};

struct EncodedPrefix {
  int steps = 0;
  int features = 0;
  std::vector<double> values;  // steps x features, row-major by step
  std::vector<double> side;

  double at(int step, int feature) const {
    return values[static_cast<std::size_t>(step * features + feature)];
  }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// A batch of encoded prefixes. Step t of sample b lives in row t*batch + b.
template <typename Scalar>
struct SequenceBatch {
  int steps = 0;
  int batch = 0;
  Matrix<Scalar> inputs;  // (steps * batch) x features
  Matrix<Scalar> side;    // batch x side_features

  SequenceBatch() = default;
  SequenceBatch(int steps_, int batch_, int features, int side_features)
      : steps(steps_),
        batch(batch_),
        inputs(Matrix<Scalar>::Zero(static_cast<Eigen::Index>(steps_) * batch_, features)),
        side(Matrix<Scalar>::Zero(batch_, side_features)) {}
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ProcessId id, Standardizer st) : process_(id), standardizer_(st) {}

  ProcessId process() const { return process_; }
  const Standardizer& standardizer() const { return standardizer_; }
  const ProcessSpec& spec() const { return ProcessSpec::get(process_); }

  int steps() const { return spec().num_events; }
  int features() const { return static_cast<int>(spec().alphabet.size()) + 3; }
  int side_features() const { return process_ == ProcessId::p2 ? 1 : 0; }
  int padding_channel() const { return static_cast<int>(spec().alphabet.size()); }
  int attribute_channel() const { return padding_channel() + 1; }
  int flag_channel() const { return padding_channel() + 2; }

  /// Writes one prefix as sample `b` of a batch.
  template <typename Scalar>
  void encode_into(const PrefixObservation& obs, EncodeMode mode, SequenceBatch<Scalar>& out, int b) const {
    if (!standardizer_.fitted) throw std::logic_error("encoder used with an unfitted standardizer");
    const int n = steps();
    if (obs.length() < 1 || obs.length() > n) throw std::invalid_argument("prefix length out of range");
    const int flag_step = mode.kind == EncodeMode::Kind::ci
                              ? (mode.intervene_now ? obs.length() : obs.intervened_at)
                              : obs.intervened_at;
    for (int t = 0; t < n; ++t) {
      auto row = out.inputs.row(static_cast<Eigen::Index>(t) * out.batch + b);
      row.setZero();
      if (t >= obs.length()) {
        row(padding_channel()) = Scalar(1);
        continue;
      }
      const auto& e = obs.observed[static_cast<std::size_t>(t)];
      row(spec().activity_index(e.activity)) = Scalar(1);
      row(attribute_channel()) = static_cast<Scalar>(standardizer_.attribute(e.attribute));
      if (flag_step == t + 1) row(flag_channel()) = Scalar(1);
    }
    if (side_features() > 0) out.side(b, 0) = static_cast<Scalar>(standardizer_.case_var(obs.case_var));
  }

  template <typename Scalar>
  SequenceBatch<Scalar> encode_batch(std::span<const PrefixObservation> obs, std::span<const EncodeMode> modes) const {
    if (modes.size() != obs.size() && modes.size() != 1)
      throw std::invalid_argument("encode_batch: modes must be one per prefix or a single shared mode");
    SequenceBatch<Scalar> out(steps(), static_cast<int>(obs.size()), features(), side_features());
    for (std::size_t i = 0; i < obs.size(); ++i)
      encode_into(obs[i], modes.size() == 1 ? modes[0] : modes[i], out, static_cast<int>(i));
    return out;
  }

  EncodedPrefix encode(const PrefixObservation& obs, EncodeMode mode) const {
    SequenceBatch<double> one(steps(), 1, features(), side_features());
    encode_into(obs, mode, one, 0);
    EncodedPrefix e{steps(), features(), {}, {}};
    for (int t = 0; t < steps(); ++t)
      for (int f = 0; f < features(); ++f) e.values.push_back(one.inputs(t, f));
    for (int s = 0; s < side_features(); ++s) e.side.push_back(one.side(0, s));
    return e;
  }

 private:
  ProcessId process_ = ProcessId::p1;
  Standardizer standardizer_;
};

}  // namespace presc
