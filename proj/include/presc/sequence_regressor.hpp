#pragma once

// Two stacked LSTM layers, a tanh dense layer and a linear head, trained with
// (masked) mean absolute error and Adam. Gradients are hand-derived BPTT.
//
// Parameters live in one flat vector; tensors are column-major views into it:
//   lstm1.wx (4H x F)  lstm1.wh (4H x H)  lstm1.b (4H)
//   lstm2.wx (4H x H)  lstm2.wh (4H x H)  lstm2.b (4H)
//   dense1.w (D x (H+S))  dense1.b (D)  dense2.w (O x D)  dense2.b (O)
// Gate order inside the 4H block is input, forget, cell, output.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "presc/encoding.hpp"

namespace presc {

struct RegressorShape {
  int steps = 3;
  int features = 5;
  int side_features = 0;
  int hidden = 32;
  int dense = 32;
  int outputs = 1;

  friend bool operator==(const RegressorShape&, const RegressorShape&) = default;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TensorInfo {
  std::string name;
  Eigen::Index rows = 0, cols = 0, offset = 0;
  Eigen::Index size() const { return rows * cols; }
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
class SequenceRegressor {
 public:
  using Mat = Matrix<Scalar>;
  using Vec = Vector<Scalar>;
  using ConstMap = Eigen::Map<const Mat>;
  using MutMap = Eigen::Map<Mat>;

  SequenceRegressor() = default;

  SequenceRegressor(RegressorShape shape, std::uint64_t seed, AdamConfig adam = {})
      : shape_(shape), adam_(adam) {
    layout();
    params_ = Vec::Zero(total_);
    initialize(seed);
    reset_optimizer();
  }

  const RegressorShape& shape() const { return shape_; }
  const AdamConfig& adam() const { return adam_; }
  void set_adam(AdamConfig a) { adam_ = a; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  Eigen::Index parameter_count() const { return total_; }
  const Vec& parameters() const { return params_; }
  Vec& parameters() { return params_; }
  long optimizer_steps() const { return adam_t_; }

  void reset_optimizer() {
    adam_m_ = Vec::Zero(total_);
    adam_v_ = Vec::Zero(total_);
    adam_t_ = 0;
  }

  // All activations are batch-major: row t*B + b holds step t of sample b.
  struct LayerCache {
    Mat gates;   // post-activation [i f g o]: TB x 4H
    Mat c;       // TB x H
    Mat tanh_c;  // TB x H
    Mat h;       // TB x H
  };
  /// Reusable buffers for forward and backward passes. Reusing one across
  /// calls avoids re-faulting large activations on every step.
  struct Workspace {
    LayerCache l1, l2;
    Mat z;   // B x (H + S)
    Mat d1;  // B x D
    Mat y;   // B x O
    Mat dy, da3, dz, dh1, dh2, dA1, dA2;
    Mat dh, dh_next, dc;
    Vec grad;
  };

  /// Predictions, batch x outputs.
  Mat forward(const SequenceBatch<Scalar>& x) const {
    Workspace ws;
    run_forward(x, ws);
    return ws.y;
  }

  const Mat& forward(const SequenceBatch<Scalar>& x, Workspace& ws) const {
    run_forward(x, ws);
    return ws.y;
  }

  /// Masked MAE: sum(mask * |y - target|) / batch.
  double loss(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask) const {
    check_targets(x, targets, mask);
    const Mat y = forward(x);
    return static_cast<double>((mask.array() * (y - targets).array().abs()).sum()) / x.batch;
  }

  /// Loss and its gradient with respect to the flat parameter vector.
  std::pair<double, Vec> gradient(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask) const {
    Workspace ws;
    const double l = gradient(x, targets, mask, ws);
    return {l, std::move(ws.grad)};
  }

  /// Loss; the gradient is left in ws.grad.
  double gradient(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask, Workspace& ws) const {
    check_targets(x, targets, mask);
    run_forward(x, ws);
    return backward(x, targets, mask, ws);
  }

  /// Like gradient(), but reuses the activations left in ws by forward(x, ws).
  double gradient_after_forward(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask,
                                Workspace& ws) const {
    check_targets(x, targets, mask);
    if (ws.y.rows() != x.batch) throw std::logic_error("workspace does not hold a forward pass of this batch");
    return backward(x, targets, mask, ws);
  }

  /// One Adam update on the batch; returns the loss before the update.
  double train_step(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask) {
    return apply_update(gradient(x, targets, mask, ws_));
  }

  /// Forward pass into the model's own workspace, to be followed by train_step_after_forward.
  const Mat& forward_for_step(const SequenceBatch<Scalar>& x) { return forward(x, ws_); }

  /// Adam update reusing the activations of the preceding forward_for_step(x).
  double train_step_after_forward(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask) {
    return apply_update(gradient_after_forward(x, targets, mask, ws_));
  }

  /// Convenience overload with an all-ones mask.
  double train_step(const SequenceBatch<Scalar>& x, const Mat& targets) {
    return train_step(x, targets, Mat::Ones(targets.rows(), targets.cols()));
  }

  ConstMap tensor(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return ConstMap(params_.data() + t.offset, t.rows, t.cols);
    throw std::out_of_range("no tensor named " + name);
  }

 private:
  double backward(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask, Workspace& ws) const {
    ws.dy = ws.y - targets;
    const double l = static_cast<double>((mask.array() * ws.dy.array().abs()).sum()) / x.batch;
    ws.dy = (mask.array() * ws.dy.array().sign() / static_cast<Scalar>(x.batch)).matrix();
    ws.grad.setZero(total_);
    run_backward(x, ws);
    return l;
  }

  double apply_update(double l) {
    const Vec& g = ws_.grad;
    if (!std::isfinite(l) || !g.allFinite()) throw DivergenceError("non-finite loss or gradient");
    ++adam_t_;
    const Scalar b1 = static_cast<Scalar>(adam_.beta1), b2 = static_cast<Scalar>(adam_.beta2);
    adam_m_ = b1 * adam_m_ + (Scalar(1) - b1) * g;
    adam_v_ = b2 * adam_v_ + (Scalar(1) - b2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(adam_t_));
    const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(adam_t_));
    const Scalar step = static_cast<Scalar>(adam_.learning_rate * std::sqrt(c2) / c1);
    const Scalar eps = static_cast<Scalar>(adam_.epsilon * std::sqrt(c2));
    params_.array() -= step * adam_m_.array() / (adam_v_.array().sqrt() + eps);
    return l;
  }

  void layout() {
    const int H = shape_.hidden, F = shape_.features, S = shape_.side_features, D = shape_.dense,
              O = shape_.outputs;
    if (H <= 0 || F <= 0 || D <= 0 || O <= 0 || S < 0 || shape_.steps <= 0)
      throw std::invalid_argument("invalid regressor shape");
    tensors_.clear();
    Eigen::Index off = 0;
    auto add = [&](std::string name, Eigen::Index r, Eigen::Index c) {
      tensors_.push_back({std::move(name), r, c, off});
      off += r * c;
    };
    add("lstm1.wx", 4 * H, F);
    add("lstm1.wh", 4 * H, H);
    add("lstm1.b", 4 * H, 1);
    add("lstm2.wx", 4 * H, H);
    add("lstm2.wh", 4 * H, H);
    add("lstm2.b", 4 * H, 1);
    add("dense1.w", D, H + S);
    add("dense1.b", D, 1);
    add("dense2.w", O, D);
    add("dense2.b", O, 1);
    total_ = off;
  }

  ConstMap view(std::size_t i) const {
    const auto& t = tensors_[i];
    return ConstMap(params_.data() + t.offset, t.rows, t.cols);
  }
  static MutMap view(Vec& v, const TensorInfo& t) { return MutMap(v.data() + t.offset, t.rows, t.cols); }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int H = shape_.hidden;
    for (const auto& t : tensors_) {
      auto m = view(params_, t);
      const bool lstm = t.name.starts_with("lstm");
      const bool bias = t.name.ends_with(".b");
      double a = 0.0;
      if (lstm)
        a = 1.0 / std::sqrt(static_cast<double>(H));
      else if (!bias)
        a = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = a > 0 ? static_cast<Scalar>(u(rng)) : Scalar(0);
      if (lstm && bias) m.block(H, 0, H, 1).array() += Scalar(1);  // forget gate
    }
  }

  void check_targets(const SequenceBatch<Scalar>& x, const Mat& targets, const Mat& mask) const {
    if (x.batch <= 0) throw std::invalid_argument("empty batch");
    if (targets.cols() != shape_.outputs || targets.rows() != x.batch || mask.rows() != targets.rows() ||
        mask.cols() != targets.cols())
      throw std::invalid_argument("target/mask shape does not match batch x outputs");
  }

  void check_input(const SequenceBatch<Scalar>& x) const {
    if (x.batch <= 0) throw std::invalid_argument("empty batch");
    if (x.steps != shape_.steps || x.inputs.cols() != shape_.features ||
        x.inputs.rows() != static_cast<Eigen::Index>(x.steps) * x.batch || x.side.cols() != shape_.side_features ||
        x.side.rows() != x.batch)
      throw std::invalid_argument("input batch does not match the regressor shape");
  }

  static void lstm_forward(const ConstMap& wx, const ConstMap& wh, const ConstMap& b, const Mat& in, int T, int B,
                           int H, LayerCache& lc) {
    const Eigen::Index TB = static_cast<Eigen::Index>(T) * B;
    lc.gates.resize(TB, 4 * H);
    lc.gates.noalias() = in * wx.transpose();
    lc.gates.rowwise() += b.col(0).transpose();
    lc.c.resize(TB, H);
    lc.tanh_c.resize(TB, H);
    lc.h.resize(TB, H);
    for (int t = 0; t < T; ++t) {
      const Eigen::Index row = static_cast<Eigen::Index>(t) * B;
      auto a = lc.gates.middleRows(row, B);
      if (t > 0) a.noalias() += lc.h.middleRows(row - B, B) * wh.transpose();
      a.leftCols(2 * H) = a.leftCols(2 * H).array().logistic();
      a.middleCols(2 * H, H) = a.middleCols(2 * H, H).array().tanh();
      a.rightCols(H) = a.rightCols(H).array().logistic();
      auto c = lc.c.middleRows(row, B);
      if (t > 0)
        c.array() = a.leftCols(H).array() * a.middleCols(2 * H, H).array() +
                    a.middleCols(H, H).array() * lc.c.middleRows(row - B, B).array();
      else
        c.array() = a.leftCols(H).array() * a.middleCols(2 * H, H).array();
      lc.tanh_c.middleRows(row, B) = c.array().tanh();
      lc.h.middleRows(row, B).array() = a.rightCols(H).array() * lc.tanh_c.middleRows(row, B).array();
    }
  }

  // Pre-activation gradients dA (TB x 4H) given dL/dh for every step.
  static void lstm_backward(const ConstMap& wh, const LayerCache& lc, const Mat& dh_out, int T, int B, int H,
                            Workspace& ws, Mat& dA) {
    dA.resize(static_cast<Eigen::Index>(T) * B, 4 * H);
    Mat& dh_next = ws.dh_next;
    Mat& dc = ws.dc;
    Mat& dh = ws.dh;
    dh_next.setZero(B, H);
    dc.setZero(B, H);
    dh.resize(B, H);
    for (int t = T - 1; t >= 0; --t) {
      const Eigen::Index row = static_cast<Eigen::Index>(t) * B;
      const auto g = lc.gates.middleRows(row, B);
      const auto ig = g.leftCols(H).array();
      const auto fg = g.middleCols(H, H).array();
      const auto cg = g.middleCols(2 * H, H).array();
      const auto og = g.rightCols(H).array();
      const auto tc = lc.tanh_c.middleRows(row, B).array();
      dh.array() = dh_out.middleRows(row, B).array() + dh_next.array();
      dc.array() += dh.array() * og * (Scalar(1) - tc.square());
      auto da = dA.middleRows(row, B);
      da.leftCols(H).array() = dc.array() * cg * ig * (Scalar(1) - ig);
      if (t > 0)
        da.middleCols(H, H).array() = dc.array() * lc.c.middleRows(row - B, B).array() * fg * (Scalar(1) - fg);
      else
        da.middleCols(H, H).setZero();
      da.middleCols(2 * H, H).array() = dc.array() * ig * (Scalar(1) - cg.square());
      da.rightCols(H).array() = dh.array() * tc * og * (Scalar(1) - og);
      dc.array() *= fg;
      if (t > 0) dh_next.noalias() = da * wh;
    }
  }

  void run_forward(const SequenceBatch<Scalar>& x, Workspace& c) const {
    check_input(x);
    const int T = x.steps, B = x.batch, H = shape_.hidden, S = shape_.side_features;
    lstm_forward(view(0), view(1), view(2), x.inputs, T, B, H, c.l1);
    lstm_forward(view(3), view(4), view(5), c.l1.h, T, B, H, c.l2);
    c.z.resize(B, H + S);
    c.z.leftCols(H) = c.l2.h.bottomRows(B);
    if (S > 0) c.z.rightCols(S) = x.side;
    c.d1.resize(B, shape_.dense);
    c.d1.noalias() = c.z * view(6).transpose();
    c.d1.rowwise() += view(7).col(0).transpose();
    c.d1 = c.d1.array().tanh();
    c.y.resize(B, shape_.outputs);
    c.y.noalias() = c.d1 * view(8).transpose();
    c.y.rowwise() += view(9).col(0).transpose();
  }

  void run_backward(const SequenceBatch<Scalar>& x, Workspace& c) const {
    const int T = x.steps, B = x.batch, H = shape_.hidden;
    const Eigen::Index TB = static_cast<Eigen::Index>(T) * B;
    auto G = [&](std::size_t i) { return view(c.grad, tensors_[i]); };
    const Mat& dy = c.dy;

    G(8).noalias() = dy.transpose() * c.d1;
    G(9) = dy.colwise().sum().transpose();
    c.da3.noalias() = dy * view(8);
    c.da3.array() *= Scalar(1) - c.d1.array().square();
    G(6).noalias() = c.da3.transpose() * c.z;
    G(7) = c.da3.colwise().sum().transpose();
    c.dz.noalias() = c.da3 * view(6);

    c.dh2.setZero(TB, H);
    c.dh2.bottomRows(B) = c.dz.leftCols(H);
    lstm_backward(view(4), c.l2, c.dh2, T, B, H, c, c.dA2);
    const Mat& dA2 = c.dA2;
    G(3).noalias() = dA2.transpose() * c.l1.h;
    if (T > 1) G(4).noalias() = dA2.bottomRows(TB - B).transpose() * c.l2.h.topRows(TB - B);
    G(5) = dA2.colwise().sum().transpose();
    c.dh1.noalias() = dA2 * view(3);

    lstm_backward(view(1), c.l1, c.dh1, T, B, H, c, c.dA1);
    const Mat& dA1 = c.dA1;
    G(0).noalias() = dA1.transpose() * x.inputs;
    if (T > 1) G(1).noalias() = dA1.bottomRows(TB - B).transpose() * c.l1.h.topRows(TB - B);
    G(2) = dA1.colwise().sum().transpose();
  }

  RegressorShape shape_;
  AdamConfig adam_;
  std::vector<TensorInfo> tensors_;
  Eigen::Index total_ = 0;
  Vec params_;
  Vec adam_m_, adam_v_;
  long adam_t_ = 0;
  Workspace ws_;
};

struct GradientCheck {
  double max_relative_error = 0.0;
  Eigen::Index worst_parameter = -1;
  Eigen::Index parameters = 0;
};

/// Analytic gradient against central finite differences on every parameter.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// parameters with a vanishing gradient from dividing round-off by zero.
inline GradientCheck gradient_check(const SequenceRegressor<double>& model, const SequenceBatch<double>& x,
                                    const Matrix<double>& targets, const Matrix<double>& mask, double step = 1e-3,
                                    double floor = 1e-7) {
  const auto analytic = model.gradient(x, targets, mask).second;
  SequenceRegressor<double> probe = model;
  GradientCheck out;
  out.parameters = model.parameter_count();
  for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
    const double orig = probe.parameters()(i);
    auto at = [&](double offset) {
      probe.parameters()(i) = orig + offset;
      return probe.loss(x, targets, mask);
    };
    // fourth-order central stencil; some gradients are ~1e-7, where a plain
    // two-point difference drowns in rounding error
    const double numeric = (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step);
    probe.parameters()(i) = orig;
    const double err =
        std::abs(analytic(i) - numeric) / std::max({std::abs(analytic(i)), std::abs(numeric), floor});
    if (err > out.max_relative_error || out.worst_parameter < 0) {
      out.max_relative_error = err;
      out.worst_parameter = i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a text blob with hexfloat parameters, so a round trip is bit-exact.

using Metadata = std::map<std::string, std::string>;

template <typename Scalar>
constexpr const char* scalar_tag() {
  return std::is_same_v<Scalar, float> ? "f32" : "f64";
}

template <typename Scalar>
void save_checkpoint(std::ostream& os, const SequenceRegressor<Scalar>& model, const Metadata& meta = {}) {
  const auto& s = model.shape();
  os << "presc-checkpoint 1\n";
  os << "scalar " << scalar_tag<Scalar>() << '\n';
  os << "shape " << s.steps << ' ' << s.features << ' ' << s.side_features << ' ' << s.hidden << ' ' << s.dense
     << ' ' << s.outputs << '\n';
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("metadata keys may not contain spaces or newlines: " + k);
    os << "meta " << k << ' ' << v << '\n';
  }
  const auto& p = model.parameters();
  os << std::hexfloat;
  for (const auto& t : model.tensors()) {
    os << "tensor " << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
    for (Eigen::Index i = 0; i < t.size(); ++i) os << (i ? " " : "") << static_cast<double>(p(t.offset + i));
    os << '\n';
  }
  os << std::defaultfloat << "end\n";
  if (!os) throw std::runtime_error("failed to write checkpoint");
}

template <typename Scalar>
SequenceRegressor<Scalar> load_checkpoint(std::istream& is, Metadata* meta = nullptr) {
  auto fail = [](const std::string& why) { return std::runtime_error("malformed checkpoint: " + why); };
  std::string word;
  int version = 0;
  if (!(is >> word >> version) || word != "presc-checkpoint" || version != 1) throw fail("bad header");
  std::string tag;
  if (!(is >> word >> tag) || word != "scalar") throw fail("missing scalar tag");
  if (tag != scalar_tag<Scalar>()) throw fail("scalar type " + tag + " does not match the requested type");
  RegressorShape s;
  if (!(is >> word >> s.steps >> s.features >> s.side_features >> s.hidden >> s.dense >> s.outputs) ||
      word != "shape")
    throw fail("missing shape");
  SequenceRegressor<Scalar> model(s, 0);
  auto& p = model.parameters();
  std::size_t next_tensor = 0;
  while (is >> word) {
    if (word == "end") break;
    if (word == "meta") {
      std::string k, v;
      is >> k;
      std::getline(is, v);
      if (!v.empty() && v.front() == ' ') v.erase(0, 1);
      if (meta) (*meta)[k] = v;
    } else if (word == "tensor") {
      std::string name;
      Eigen::Index r = 0, c = 0;
      is >> name >> r >> c;
      if (next_tensor >= model.tensors().size()) throw fail("too many tensors");
      const auto& t = model.tensors()[next_tensor++];
      if (t.name != name || t.rows != r || t.cols != c) throw fail("unexpected tensor " + name);
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        std::string tok;
        if (!(is >> tok)) throw fail("truncated tensor " + name);
        p(t.offset + i) = static_cast<Scalar>(std::strtod(tok.c_str(), nullptr));
      }
    } else {
      throw fail("unknown record " + word);
    }
  }
  if (word != "end" || next_tensor != model.tensors().size()) throw fail("truncated file");
  return model;
}

}  // namespace presc
