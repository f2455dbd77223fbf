#pragma once

// Entropy-weighted attentive prototype, its EMA accumulation, and the
// cosine-similarity weights that scale positive-region classification
// losses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "protoadapt/numcore.hpp"

namespace protoadapt {

/// Natural-log binary entropy with 0 ln 0 = 0.
inline double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("binary_entropy: probability " + std::to_string(p) +
                                " outside [0, 1]");
  }
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

enum class EntropyMode {
  /// w_i = 1 - H_i / sum_j H_j; all ones when the batch has zero entropy.
  normalized_sum,
  /// w_i = 1 - H_i / ln 2, batch independent and bounded in [0, 1].
  one_minus_raw,
};

struct EntropyWeights {
  Vector weights;
  EntropyMode mode = EntropyMode::one_minus_raw;
};

inline EntropyWeights entropy_weights(std::span<const double> probs, EntropyMode mode) {
  if (probs.empty()) throw std::invalid_argument("entropy_weights: empty batch");
  Vector h(probs.size());
  std::transform(probs.begin(), probs.end(), h.begin(), binary_entropy);

  EntropyWeights out{Vector(probs.size(), 1.0), mode};
  switch (mode) {
    case EntropyMode::normalized_sum: {
      double total = 0.0;
      for (double x : h) total += x;
      if (total > 0.0) {
        for (std::size_t i = 0; i < h.size(); ++i) out.weights[i] = 1.0 - h[i] / total;
      }
      break;
    }
    case EntropyMode::one_minus_raw:
      for (std::size_t i = 0; i < h.size(); ++i) {
        out.weights[i] = std::clamp(1.0 - h[i] / std::numbers::ln2, 0.0, 1.0);
      }
      break;
  }
  return out;
}

/// (1/N) sum_i w_i f_i. The 1/N factor is kept even though the weights do
/// not sum to N; downstream cosine similarity ignores the scale.
inline Vector attentive_prototype(const Matrix& att_feats, std::span<const double> weights) {
  if (att_feats.rows() != weights.size()) {
    throw std::invalid_argument("attentive_prototype: " + std::to_string(att_feats.rows()) +
                                " features vs " + std::to_string(weights.size()) + " weights");
  }
  if (att_feats.rows() == 0) throw std::invalid_argument("attentive_prototype: no features");
  Vector out(att_feats.cols(), 0.0);
  for (std::size_t i = 0; i < att_feats.rows(); ++i) {
    const auto r = att_feats.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += weights[i] * r[j];
  }
  const double inv_n = 1.0 / static_cast<double>(att_feats.rows());
  for (double& x : out) x *= inv_n;
  return out;
}

inline Vector attentive_prototype(const Matrix& att_feats, const EntropyWeights& w) {
  return attentive_prototype(att_feats, w.weights);
}

/// Running prototype for one meta-iteration. Unset until the first batch.
struct PrototypeState {
  std::optional<Vector> prototype;
  double alpha = 0.99;
  std::size_t iteration = 0;

  explicit PrototypeState(double keep_ratio = 0.99) : alpha(keep_ratio) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw std::invalid_argument("PrototypeState: alpha must lie in (0, 1)");
    }
  }

  bool is_set() const noexcept { return prototype.has_value(); }
};

inline PrototypeState ema_update(PrototypeState state, std::span<const double> f_att) {
  if (!all_finite(f_att)) throw std::invalid_argument("ema_update: non-finite prototype");
  if (!state.prototype) {
    state.prototype = Vector(f_att.begin(), f_att.end());
  } else {
    Vector& f = *state.prototype;
    if (f.size() != f_att.size()) {
      throw std::invalid_argument("ema_update: prototype length " + std::to_string(f.size()) +
                                  " vs " + std::to_string(f_att.size()));
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = state.alpha * f[i] + (1.0 - state.alpha) * f_att[i];
    }
  }
  ++state.iteration;
  return state;
}

enum class SimilarityMode {
  /// d_i = max(0, cos(prototype, f_i)).
  raw_clamped,
  /// d = softmax over the batch of cos(prototype, f_i).
  softmax,
  /// d_i = 1: plain self-training, the refinement switched off.
  unit,
};

struct SimilarityWeights {
  Vector d;
  SimilarityMode mode = SimilarityMode::raw_clamped;
  std::size_t degenerate_rows = 0;
};

/// Throws DegenerateInput for a zero-norm prototype. Zero-norm rows get
/// weight 0 and are counted in degenerate_rows.
inline SimilarityWeights similarity_weights(std::span<const double> prototype,
                                            const Matrix& roi_feats, SimilarityMode mode) {
  if (prototype.size() != roi_feats.cols()) {
    throw std::invalid_argument("similarity_weights: prototype length " +
                                std::to_string(prototype.size()) + " vs feature width " +
                                std::to_string(roi_feats.cols()));
  }
  SimilarityWeights out{Vector(roi_feats.rows(), 1.0), mode, 0};
  if (mode == SimilarityMode::unit) return out;
  if (norm(prototype) == 0.0) throw DegenerateInput("similarity_weights: zero-norm prototype");

  Vector cos(roi_feats.rows(), 0.0);
  std::vector<bool> degenerate(roi_feats.rows(), false);
  for (std::size_t i = 0; i < roi_feats.rows(); ++i) {
    if (norm(roi_feats.row(i)) == 0.0) {
      degenerate[i] = true;
      ++out.degenerate_rows;
      continue;
    }
    cos[i] = cosine_similarity(prototype, roi_feats.row(i));
  }

  if (mode == SimilarityMode::raw_clamped) {
    for (std::size_t i = 0; i < cos.size(); ++i) out.d[i] = degenerate[i] ? 0.0 : std::max(0.0, cos[i]);
  } else {
    out.d = softmax(cos);
    for (std::size_t i = 0; i < cos.size(); ++i)
      if (degenerate[i]) out.d[i] = 0.0;
  }
  return out;
}

/// (1/N_roi) (sum_pos d_i l_i + sum_neg l_j), N_roi = |pos| + |neg|.
inline double weighted_cls_loss(std::span<const double> pos_losses,
                                std::span<const double> neg_losses, std::span<const double> d) {
  if (d.size() != pos_losses.size()) {
    throw std::invalid_argument("weighted_cls_loss: " + std::to_string(pos_losses.size()) +
                                " positive losses vs " + std::to_string(d.size()) + " weights");
  }
  const std::size_t n = pos_losses.size() + neg_losses.size();
  if (n == 0) throw std::invalid_argument("weighted_cls_loss: no labelled regions");
  double total = 0.0;
  for (std::size_t i = 0; i < pos_losses.size(); ++i) total += d[i] * pos_losses[i];
  for (double l : neg_losses) total += l;
  return total / static_cast<double>(n);
}

inline double weighted_cls_loss(std::span<const double> pos_losses,
                                std::span<const double> neg_losses, const SimilarityWeights& d) {
  return weighted_cls_loss(pos_losses, neg_losses, d.d);
}

// ---------------------------------------------------------------------------
// Mode names used by configs and reports.

inline std::string_view to_string(EntropyMode m) {
  return m == EntropyMode::normalized_sum ? "normalized-sum" : "one-minus-raw";
}

inline EntropyMode parse_entropy_mode(std::string_view s) {
  if (s == "normalized-sum") return EntropyMode::normalized_sum;
  if (s == "one-minus-raw") return EntropyMode::one_minus_raw;
  throw std::invalid_argument("unknown entropy mode '" + std::string(s) + "'");
}

inline std::string_view to_string(SimilarityMode m) {
  switch (m) {
    case SimilarityMode::raw_clamped: return "raw-clamped";
    case SimilarityMode::softmax: return "softmax";
    case SimilarityMode::unit: return "unit";
  }
  return "raw-clamped";
}

inline SimilarityMode parse_similarity_mode(std::string_view s) {
  if (s == "raw-clamped") return SimilarityMode::raw_clamped;
  if (s == "softmax") return SimilarityMode::softmax;
  if (s == "unit") return SimilarityMode::unit;
  throw std::invalid_argument("unknown similarity mode '" + std::string(s) + "'");
}

}  // namespace protoadapt
