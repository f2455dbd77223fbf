#pragma once

// Toy detector head: a two-layer GELU MLP scoring ROI features as object vs
// background, with analytic backprop of a per-ROI weighted BCE, Adam, and
// confidence-threshold pseudo-labelling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoadapt/numcore.hpp"
#include "protoadapt/transformer.hpp"

namespace protoadapt {

struct MlpParams {
  Matrix w1;  // F_in x H
  Vector b1;  // H
  Matrix w2;  // H x 1
  double b2 = 0.0;

  std::size_t input_dim() const { return w1.rows(); }
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + 1; }

  static MlpParams zeros(std::size_t input_dim, std::size_t hidden_dim) {
    return {Matrix(input_dim, hidden_dim), Vector(hidden_dim, 0.0), Matrix(hidden_dim, 1), 0.0};
  }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Gradients share the parameter layout.
using MlpGrads = MlpParams;

inline MlpParams init_mlp(Rng& rng, std::size_t input_dim, std::size_t hidden_dim,
                          double init_scale = 1.0) {
  if (input_dim == 0 || hidden_dim == 0) throw std::invalid_argument("init_mlp: empty layer");
  MlpParams p = MlpParams::zeros(input_dim, hidden_dim);
  p.w1 = detail::init_weight(rng, input_dim, hidden_dim, init_scale);
  p.w2 = detail::init_weight(rng, hidden_dim, 1, init_scale);
  return p;
}

inline Vector flatten(const MlpParams& p) {
  Vector out;
  out.reserve(p.parameter_count());
  out.insert(out.end(), p.w1.values().begin(), p.w1.values().end());
  out.insert(out.end(), p.b1.begin(), p.b1.end());
  out.insert(out.end(), p.w2.values().begin(), p.w2.values().end());
  out.push_back(p.b2);
  return out;
}

inline void unflatten(MlpParams& p, std::span<const double> flat) {
  if (flat.size() != p.parameter_count()) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(p.parameter_count()) +
                                " values, got " + std::to_string(flat.size()));
  }
  auto it = flat.begin();
  auto take = [&it](std::span<double> dst) {
    std::copy_n(it, dst.size(), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  take(p.w1.values());
  take(p.b1);
  take(p.w2.values());
  p.b2 = *it;
}

namespace detail {

inline void check_features(const MlpParams& p, const Matrix& feats) {
  if (feats.cols() != p.input_dim()) {
    throw std::invalid_argument("detector expects " + std::to_string(p.input_dim()) +
                                " feature columns, got " + feats.shape_string());
  }
}

}  // namespace detail

/// Pre-activation of the hidden layer, X W_1 + b_1.
inline Matrix hidden_preactivation(const MlpParams& p, const Matrix& feats) {
  detail::check_features(p, feats);
  return add_row_vector(matmul(feats, p.w1), p.b1);
}

inline Vector logits(const MlpParams& p, const Matrix& feats) {
  const Matrix h = gelu(hidden_preactivation(p, feats));
  const Matrix z = matmul(h, p.w2);
  Vector out(z.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z(i, 0) + p.b2;
  return out;
}

/// Per-row object probability sigmoid(GELU(X W_1 + b_1) W_2 + b_2).
inline Vector forward(const MlpParams& p, const Matrix& feats) {
  Vector z = logits(p, feats);
  for (double& x : z) x = sigmoid(x);
  return z;
}

inline constexpr double kProbClamp = 1e-7;

inline double bce_loss_per_roi(double p, int y) {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return y == 1 ? -std::log(pc) : -std::log1p(-pc);
}

/// sum_i w_i * BCE(p_i, y_i). Pass w_i already divided by the batch
/// normaliser to get a weighted mean.
inline double weighted_bce(const MlpParams& p, const Matrix& feats, std::span<const int> labels,
                           std::span<const double> weights) {
  const Vector probs = forward(p, feats);
  if (labels.size() != probs.size() || weights.size() != probs.size()) {
    throw std::invalid_argument("weighted_bce: batch length mismatch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) total += weights[i] * bce_loss_per_roi(probs[i], labels[i]);
  return total;
}

/// Analytic gradient of weighted_bce. Weights are constants. The probability
/// clamp is ignored in the derivative (dL/dz = p - y).
inline MlpGrads backward(const MlpParams& p, const Matrix& feats, std::span<const int> labels,
                         std::span<const double> weights) {
  const std::size_t n = feats.rows();
  if (labels.size() != n || weights.size() != n) {
    throw std::invalid_argument("backward: " + std::to_string(n) + " rows vs " +
                                std::to_string(labels.size()) + " labels and " +
                                std::to_string(weights.size()) + " weights");
  }
  const Matrix pre = hidden_preactivation(p, feats);
  const Matrix hidden = gelu(pre);
  const std::size_t hdim = p.hidden_dim();

  MlpGrads g = MlpParams::zeros(p.input_dim(), hdim);
  Vector dpre(hdim);
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    double z = p.b2;
    for (std::size_t k = 0; k < hdim; ++k) z += hidden(i, k) * p.w2(k, 0);
    const double dz = weights[i] * (sigmoid(z) - static_cast<double>(labels[i]));

    g.b2 += dz;
    for (std::size_t k = 0; k < hdim; ++k) {
      g.w2(k, 0) += dz * hidden(i, k);
      dpre[k] = dz * p.w2(k, 0) * gelu_derivative(pre(i, k));
      g.b1[k] += dpre[k];
    }
    const auto x = feats.row(i);
    for (std::size_t f = 0; f < x.size(); ++f) {
      auto grow = g.w1.row(f);
      for (std::size_t k = 0; k < hdim; ++k) grow[k] += x[f] * dpre[k];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
  AdamConfig config;
  Vector m;
  Vector v;
  std::size_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig cfg) : config(cfg), m(n, 0.0), v(n, 0.0) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// In-place bias-corrected Adam update on a flat parameter vector.
inline void adam_update(std::span<double> theta, std::span<const double> grad, AdamState& s) {
  if (theta.size() != grad.size() || s.m.size() != theta.size() || s.v.size() != theta.size()) {
    throw std::invalid_argument("adam: parameter/gradient/moment length mismatch");
  }
  ++s.step;
  const auto& c = s.config;
  const double t = static_cast<double>(s.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * grad[i];
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double mhat = s.m[i] / bc1;
    const double vhat = s.v[i] / bc2;
    theta[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

inline void adam_step(MlpParams& p, const MlpGrads& g, AdamState& s) {
  Vector theta = flatten(p);
  adam_update(theta, flatten(g), s);
  unflatten(p, theta);
}

// ---------------------------------------------------------------------------
// Pseudo labels

enum class PseudoLabelKind { positive, negative, ignored };

struct PseudoLabel {
  std::size_t roi_index = 0;
  PseudoLabelKind label = PseudoLabelKind::ignored;
  double confidence = 0.0;
  std::size_t origin_meta_iter = 0;

  friend bool operator==(const PseudoLabel&, const PseudoLabel&) = default;
};

struct PseudoLabelSet {
  std::vector<PseudoLabel> labels;

  std::size_t count(PseudoLabelKind k) const {
    return static_cast<std::size_t>(std::count_if(
        labels.begin(), labels.end(), [k](const PseudoLabel& l) { return l.label == k; }));
  }

  friend bool operator==(const PseudoLabelSet&, const PseudoLabelSet&) = default;
};

/// p >= tau_pos -> positive, p <= tau_neg -> negative, otherwise ignored.
inline PseudoLabelSet threshold_labels(std::span<const double> probs, double tau_pos,
                                       double tau_neg, std::size_t meta_iter = 0) {
  if (!(0.0 <= tau_neg && tau_neg < tau_pos && tau_pos <= 1.0)) {
    throw std::invalid_argument("threshold_labels: need 0 <= tau_neg < tau_pos <= 1 (got tau_neg=" +
                                std::to_string(tau_neg) + ", tau_pos=" + std::to_string(tau_pos) +
                                ")");
  }
  PseudoLabelSet out;
  out.labels.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    PseudoLabelKind k = PseudoLabelKind::ignored;
    if (probs[i] >= tau_pos) {
      k = PseudoLabelKind::positive;
    } else if (probs[i] <= tau_neg) {
      k = PseudoLabelKind::negative;
    }
    out.labels.push_back({i, k, probs[i], meta_iter});
  }
  return out;
}

inline std::string_view to_string(PseudoLabelKind k) {
  switch (k) {
    case PseudoLabelKind::positive: return "positive";
    case PseudoLabelKind::negative: return "negative";
    case PseudoLabelKind::ignored: return "ignored";
  }
  return "ignored";
}

// ---------------------------------------------------------------------------
// Checkpoint: {"mlp": {...}, "adam": {...}, "meta_iteration": k}

struct DetectorCheckpoint {
  MlpParams mlp;
  AdamState adam;
  std::size_t meta_iteration = 0;

  friend bool operator==(const DetectorCheckpoint&, const DetectorCheckpoint&) = default;
};

inline nlohmann::ordered_json to_json(const MlpParams& p) {
  nlohmann::ordered_json j;
  j["input_dim"] = p.input_dim();
  j["hidden_dim"] = p.hidden_dim();
  j["w1"] = detail::matrix_to_json(p.w1);
  j["b1"] = p.b1;
  j["w2"] = detail::matrix_to_json(p.w2);
  j["b2"] = p.b2;
  return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
  const auto in = j.at("input_dim").get<std::size_t>();
  const auto hid = j.at("hidden_dim").get<std::size_t>();
  MlpParams p;
  p.w1 = detail::matrix_from_json(j.at("w1"), in, hid, "w1");
  p.b1 = detail::vector_from_json(j.at("b1"), hid, "b1");
  p.w2 = detail::matrix_from_json(j.at("w2"), hid, 1, "w2");
  p.b2 = j.at("b2").get<double>();
  return p;
}

inline nlohmann::ordered_json to_json(const AdamState& s) {
  nlohmann::ordered_json j;
  j["lr"] = s.config.lr;
  j["beta1"] = s.config.beta1;
  j["beta2"] = s.config.beta2;
  j["eps"] = s.config.eps;
  j["step"] = s.step;
  j["m"] = s.m;
  j["v"] = s.v;
  return j;
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.config = {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
              j.at("eps").get<double>()};
  s.step = j.at("step").get<std::size_t>();
  s.m = j.at("m").get<Vector>();
  s.v = j.at("v").get<Vector>();
  if (s.m.size() != s.v.size()) throw std::invalid_argument("adam state: moment length mismatch");
  return s;
}

inline nlohmann::ordered_json to_json(const DetectorCheckpoint& c) {
  nlohmann::ordered_json j;
  j["mlp"] = to_json(c.mlp);
  j["adam"] = to_json(c.adam);
  j["meta_iteration"] = c.meta_iteration;
  return j;
}

inline DetectorCheckpoint checkpoint_from_json(const nlohmann::json& j) {
  DetectorCheckpoint c;
  c.mlp = mlp_from_json(j.at("mlp"));
  c.adam = adam_from_json(j.at("adam"));
  c.meta_iteration = j.at("meta_iteration").get<std::size_t>();
  if (!c.adam.m.empty() && c.adam.m.size() != c.mlp.parameter_count()) {
    throw std::invalid_argument("checkpoint: adam moments do not match mlp parameter count");
  }
  return c;
}

}  // namespace protoadapt
