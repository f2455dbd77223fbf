#pragma once

// Source training, the meta-iteration adaptation loop, the prototype-mode
// ablation, and run records.
//
// Adaptation is source free: `adapt` takes the source-trained head and an
// UnlabeledView of the target, nothing else. Metrics are produced by a
// caller-supplied hook that owns the labels.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoadapt/detector.hpp"
#include "protoadapt/numcore.hpp"
#include "protoadapt/prototype.hpp"
#include "protoadapt/synthbench.hpp"
#include "protoadapt/transformer.hpp"

namespace protoadapt {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AdaptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PrototypeMode { average, self_attention, transformer, transformer_entropy };

inline std::string_view to_string(PrototypeMode m) {
  switch (m) {
    case PrototypeMode::average: return "average";
    case PrototypeMode::self_attention: return "self-attention";
    case PrototypeMode::transformer: return "transformer";
    case PrototypeMode::transformer_entropy: return "transformer-entropy";
  }
  return "average";
}

inline PrototypeMode parse_prototype_mode(std::string_view s) {
  if (s == "average") return PrototypeMode::average;
  if (s == "self-attention") return PrototypeMode::self_attention;
  if (s == "transformer") return PrototypeMode::transformer;
  if (s == "transformer-entropy") return PrototypeMode::transformer_entropy;
  throw std::invalid_argument("unknown prototype mode '" + std::string(s) + "'");
}

inline constexpr PrototypeMode kAllPrototypeModes[] = {
    PrototypeMode::average, PrototypeMode::self_attention, PrototypeMode::transformer,
    PrototypeMode::transformer_entropy};

struct AdaptConfig {
  std::uint64_t seed = 0;
  PrototypeMode prototype_mode = PrototypeMode::transformer_entropy;
  EntropyMode entropy_mode = EntropyMode::one_minus_raw;
  SimilarityMode similarity_mode = SimilarityMode::raw_clamped;
  double alpha = 0.99;
  double tau_pos = 0.7;
  double tau_neg = 0.3;
  std::size_t n_meta = 4;
  std::size_t iterations_per_meta = 200;
  std::size_t batch_size = 64;
  double lr = 1e-3;

  // Small init keeps the frozen stack close to its linear embedding, which
  // preserves the angular layout cosine similarity relies on.
  TransformerDims transformer{.init_scale = 0.1};
  bool train_transformer = false;
  double transformer_lr = 1e-3;

  std::size_t hidden_dim = 16;
  std::size_t source_steps = 2000;
  double source_loss_target = 0.05;
  double source_lr = 1e-2;

  void validate() const {
    if (n_meta < 1) throw std::invalid_argument("config: n_meta must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("config: alpha must lie in (0, 1)");
    if (!(0.0 <= tau_neg && tau_neg < tau_pos && tau_pos <= 1.0)) {
      throw std::invalid_argument("config: need 0 <= tau_neg < tau_pos <= 1");
    }
    if (!(lr > 0.0) || !(source_lr > 0.0) || !(transformer_lr > 0.0)) {
      throw std::invalid_argument("config: learning rates must be positive");
    }
    if (hidden_dim == 0) throw std::invalid_argument("config: hidden_dim must be positive");
    if (transformer.heads == 0 || transformer.model_dim % transformer.heads != 0) {
      throw std::invalid_argument("config: transformer model_dim must be divisible by heads");
    }
    if (transformer.layers == 0) throw std::invalid_argument("config: transformer layers must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Config JSON. Unknown keys are rejected; missing keys keep their defaults.

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                           std::string_view where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const AdaptConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["prototype_mode"] = to_string(c.prototype_mode);
  j["entropy_mode"] = to_string(c.entropy_mode);
  j["similarity_mode"] = to_string(c.similarity_mode);
  j["alpha"] = c.alpha;
  j["tau_pos"] = c.tau_pos;
  j["tau_neg"] = c.tau_neg;
  j["n_meta"] = c.n_meta;
  j["iterations_per_meta"] = c.iterations_per_meta;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  nlohmann::ordered_json t;
  t["layers"] = c.transformer.layers;
  t["model_dim"] = c.transformer.model_dim;
  t["ff_dim"] = c.transformer.ff_dim;
  t["heads"] = c.transformer.heads;
  t["init_scale"] = c.transformer.init_scale;
  j["transformer"] = std::move(t);
  j["train_transformer"] = c.train_transformer;
  j["transformer_lr"] = c.transformer_lr;
  j["hidden_dim"] = c.hidden_dim;
  j["source_steps"] = c.source_steps;
  j["source_loss_target"] = c.source_loss_target;
  j["source_lr"] = c.source_lr;
  return j;
}

inline AdaptConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"seed", "prototype_mode", "entropy_mode", "similarity_mode", "alpha",
                          "tau_pos", "tau_neg", "n_meta", "iterations_per_meta", "batch_size", "lr",
                          "transformer", "train_transformer", "transformer_lr", "hidden_dim",
                          "source_steps", "source_loss_target", "source_lr"},
                         "config");
  AdaptConfig c;
  detail::read_if(j, "seed", c.seed);
  if (j.contains("prototype_mode")) c.prototype_mode = parse_prototype_mode(j.at("prototype_mode").get<std::string>());
  if (j.contains("entropy_mode")) c.entropy_mode = parse_entropy_mode(j.at("entropy_mode").get<std::string>());
  if (j.contains("similarity_mode")) c.similarity_mode = parse_similarity_mode(j.at("similarity_mode").get<std::string>());
  detail::read_if(j, "alpha", c.alpha);
  detail::read_if(j, "tau_pos", c.tau_pos);
  detail::read_if(j, "tau_neg", c.tau_neg);
  detail::read_if(j, "n_meta", c.n_meta);
  detail::read_if(j, "iterations_per_meta", c.iterations_per_meta);
  detail::read_if(j, "batch_size", c.batch_size);
  detail::read_if(j, "lr", c.lr);
  if (j.contains("transformer")) {
    const auto& t = j.at("transformer");
    detail::reject_unknown(t, {"layers", "model_dim", "ff_dim", "heads", "init_scale"}, "config.transformer");
    detail::read_if(t, "layers", c.transformer.layers);
    detail::read_if(t, "model_dim", c.transformer.model_dim);
    detail::read_if(t, "ff_dim", c.transformer.ff_dim);
    detail::read_if(t, "heads", c.transformer.heads);
    detail::read_if(t, "init_scale", c.transformer.init_scale);
  }
  detail::read_if(j, "train_transformer", c.train_transformer);
  detail::read_if(j, "transformer_lr", c.transformer_lr);
  detail::read_if(j, "hidden_dim", c.hidden_dim);
  detail::read_if(j, "source_steps", c.source_steps);
  detail::read_if(j, "source_loss_target", c.source_loss_target);
  detail::read_if(j, "source_lr", c.source_lr);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// RNG streams. Every consumer gets its own stream derived from config.seed.

namespace streams {
inline constexpr std::uint64_t head_init = 1;
inline constexpr std::uint64_t source_batches = 2;
inline constexpr std::uint64_t transformer_init = 3;
inline constexpr std::uint64_t attention_init = 4;
inline constexpr std::uint64_t adapt_batches = 100;  // + meta-iteration
}  // namespace streams

/// Cycles through a shuffled index pool in fixed-size batches, reshuffling
/// at every epoch. A short tail is dropped unless the pool itself is
/// smaller than one batch.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> pool, std::size_t batch_size, Rng rng)
      : pool_(std::move(pool)), batch_size_(batch_size), rng_(rng) {
    if (pool_.empty()) throw std::invalid_argument("BatchSampler: empty pool");
    if (batch_size_ == 0) throw std::invalid_argument("BatchSampler: zero batch size");
    cursor_ = pool_.size();  // forces a shuffle on first use
  }

  std::vector<std::size_t> next() {
    const std::size_t take = std::min(batch_size_, pool_.size());
    if (cursor_ + take > pool_.size()) {
      shuffle(pool_, rng_);
      cursor_ = 0;
    }
    std::vector<std::size_t> out(pool_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 pool_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return out;
  }

 private:
  std::vector<std::size_t> pool_;
  std::size_t batch_size_;
  Rng rng_;
  std::size_t cursor_;
};

// ---------------------------------------------------------------------------
// Source training

inline DetectorCheckpoint train_source(const AdaptConfig& config, const Dataset& source) {
  config.validate();
  if (source.size() == 0) throw std::invalid_argument("train_source: empty source set");
  Rng init_rng = Rng::derive(config.seed, streams::head_init);
  DetectorCheckpoint ckpt;
  ckpt.mlp = init_mlp(init_rng, source.features.cols(), config.hidden_dim);
  ckpt.adam = AdamState(ckpt.mlp.parameter_count(), AdamConfig{.lr = config.source_lr});

  std::vector<int> labels(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) labels[i] = is_object(source.true_labels[i]) ? 1 : 0;
  const Vector full_weights(source.size(), 1.0 / static_cast<double>(source.size()));

  std::vector<std::size_t> pool(source.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  BatchSampler sampler(std::move(pool), config.batch_size,
                       Rng::derive(config.seed, streams::source_batches));

  constexpr std::size_t kLossCheckEvery = 50;
  for (std::size_t step = 0; step < config.source_steps; ++step) {
    const auto idx = sampler.next();
    const Matrix x = select_rows(source.features, idx);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
    const Vector w(idx.size(), 1.0 / static_cast<double>(idx.size()));
    adam_step(ckpt.mlp, backward(ckpt.mlp, x, y, w), ckpt.adam);

    if ((step + 1) % kLossCheckEvery == 0) {
      const double loss = weighted_bce(ckpt.mlp, source.features, labels, full_weights);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("train_source: non-finite loss at step " + std::to_string(step + 1));
      }
      if (loss < config.source_loss_target) break;
    }
  }
  if (!all_finite(flatten(ckpt.mlp))) throw TrainingDiverged("train_source: non-finite parameters");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Prototype feature maps

/// Produces attentive features for the positive ROIs of a batch, according
/// to the prototype mode.
class PrototypeMapper {
 public:
  PrototypeMapper(const AdaptConfig& config, std::size_t input_dim) : mode_(config.prototype_mode) {
    if (mode_ == PrototypeMode::self_attention) {
      Rng rng = Rng::derive(config.seed, streams::attention_init);
      block_ = init_attention_block(rng, input_dim, config.transformer.heads,
                                    config.transformer.init_scale);
    } else if (mode_ == PrototypeMode::transformer || mode_ == PrototypeMode::transformer_entropy) {
      Rng rng = Rng::derive(config.seed, streams::transformer_init);
      TransformerDims dims = config.transformer;
      dims.input_dim = input_dim;
      transformer_ = init_transformer(rng, dims);
    }
  }

  PrototypeMode mode() const { return mode_; }
  bool uses_entropy() const { return mode_ == PrototypeMode::transformer_entropy; }
  bool has_transformer() const { return transformer_.has_value(); }

  TransformerParams& transformer() { return transformer_.value(); }
  const TransformerParams& transformer() const { return transformer_.value(); }

  Matrix map(const Matrix& tokens) const {
    switch (mode_) {
      case PrototypeMode::average: return tokens;
      case PrototypeMode::self_attention: return attention_block_forward(*block_, tokens);
      case PrototypeMode::transformer:
      case PrototypeMode::transformer_entropy: return transformer_forward(*transformer_, tokens);
    }
    return tokens;
  }

  /// Uniformly weighted prototype of `tokens`, processed in chunks of
  /// `chunk` rows and averaged. Used as the reference for purity.
  Vector reference_prototype(const Matrix& tokens, std::size_t chunk) const {
    if (tokens.rows() == 0) return {};
    Vector acc;
    std::size_t n = 0;
    for (std::size_t start = 0; start < tokens.rows(); start += chunk) {
      const std::size_t len = std::min(chunk, tokens.rows() - start);
      std::vector<std::size_t> idx(len);
      for (std::size_t i = 0; i < len; ++i) idx[i] = start + i;
      const Vector p = attentive_prototype(map(select_rows(tokens, idx)), Vector(len, 1.0));
      if (acc.empty()) acc.assign(p.size(), 0.0);
      for (std::size_t k = 0; k < p.size(); ++k) acc[k] += p[k];
      ++n;
    }
    for (double& x : acc) x /= static_cast<double>(n);
    return acc;
  }

 private:
  PrototypeMode mode_;
  std::optional<AttentionBlock> block_;
  std::optional<TransformerParams> transformer_;
};

// ---------------------------------------------------------------------------
// Adaptation

/// What the evaluation hook may look at besides the head.
struct PrototypeProbe {
  const std::optional<Vector>& prototype;
  const PrototypeMapper& mapper;
  std::size_t chunk;
};

using EvaluationHook =
    std::function<MetricsReport(const MlpParams&, const PseudoLabelSet&, const PrototypeProbe&)>;

struct StepEvent {
  std::size_t meta_iter = 0;   // 1-based
  std::size_t step = 0;        // 0-based within the meta-iteration
  const MlpParams& params;
  const PrototypeState& prototype;
  const std::optional<Vector>& batch_prototype;  // F_att of this batch, if any
  std::span<const double> similarity;             // d_i of the batch positives
};

using StepObserver = std::function<void(const StepEvent&)>;

struct RunRecord {
  AdaptConfig config;
  std::vector<MetricsReport> metrics;  // [0] = direct transfer
  std::vector<std::size_t> empty_positive_batches;
  std::vector<std::size_t> degenerate_prototype_batches;
  std::vector<std::optional<Vector>> prototypes;  // final prototype per meta-iteration
  DetectorCheckpoint final_checkpoint;
  std::vector<double> meta_seconds;
  double total_seconds = 0.0;
};

namespace detail {

/// Finite-difference step on the transformer parameters through the
/// similarity weights. Experimental: O(parameter count) forward passes.
inline void transformer_fd_step(PrototypeMapper& mapper, const AdaptConfig& config,
                                const Matrix& pos_tokens, std::span<const double> ent_w,
                                const PrototypeState& before, std::span<const double> pos_losses,
                                std::span<const double> neg_losses, AdamState& adam) {
  auto& tp = mapper.transformer();
  auto loss_of = [&](std::span<const double> theta) {
    TransformerParams probe = tp;
    unflatten(probe, theta);
    const Matrix att = transformer_forward(probe, pos_tokens);
    const PrototypeState s = ema_update(before, attentive_prototype(att, ent_w));
    try {
      const auto d = similarity_weights(*s.prototype, att, config.similarity_mode);
      return weighted_cls_loss(pos_losses, neg_losses, d);
    } catch (const DegenerateInput&) {
      return weighted_cls_loss(pos_losses, neg_losses, Vector(pos_losses.size(), 1.0));
    }
  };
  Vector theta = flatten(tp);
  const Vector grad = finite_diff_grad(loss_of, theta);
  adam_update(theta, grad, adam);
  unflatten(tp, theta);
}

}  // namespace detail

inline RunRecord adapt(const AdaptConfig& config, const MlpParams& source_head,
                       const UnlabeledView& target, const EvaluationHook& evaluate_hook,
                       const StepObserver& observer = {}) {
  using clock = std::chrono::steady_clock;
  config.validate();
  const auto t_start = clock::now();
  const Matrix& feats = target.features();
  if (feats.rows() == 0) throw std::invalid_argument("adapt: empty target set");

  RunRecord rec;
  rec.config = config;
  PrototypeMapper mapper(config, feats.cols());
  const std::size_t chunk = config.batch_size;

  MlpParams head = source_head;
  {
    const auto pseudo = threshold_labels(forward(head, feats), config.tau_pos, config.tau_neg, 0);
    const std::optional<Vector> none;
    MetricsReport dt = evaluate_hook(head, pseudo, PrototypeProbe{none, mapper, chunk});
    dt.meta_iter = 0;
    rec.metrics.push_back(std::move(dt));
  }

  AdamState transformer_adam;
  if (config.train_transformer && mapper.has_transformer()) {
    transformer_adam = AdamState(mapper.transformer().parameter_count(),
                                 AdamConfig{.lr = config.transformer_lr});
  }

  AdamState adam;
  for (std::size_t meta = 1; meta <= config.n_meta; ++meta) {
    const auto t_meta = clock::now();
    const auto pseudo = threshold_labels(forward(head, feats), config.tau_pos, config.tau_neg, meta);

    std::vector<std::size_t> pool;
    for (const auto& l : pseudo.labels)
      if (l.label != PseudoLabelKind::ignored) pool.push_back(l.roi_index);
    if (pool.empty()) {
      throw AdaptError("adapt: every pseudo label is ignored at meta-iteration " +
                       std::to_string(meta) + "; thresholds leave nothing to train on");
    }

    PrototypeState state(config.alpha);
    adam = AdamState(head.parameter_count(), AdamConfig{.lr = config.lr});
    BatchSampler sampler(std::move(pool), config.batch_size,
                         Rng::derive(config.seed, streams::adapt_batches + meta));
    std::size_t empty_positive = 0;
    std::size_t degenerate = 0;

    for (std::size_t step = 0; step < config.iterations_per_meta; ++step) {
      const auto idx = sampler.next();
      const Matrix x = select_rows(feats, idx);
      const Vector probs = forward(head, x);

      std::vector<int> y(idx.size());
      std::vector<std::size_t> pos_rows;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        y[i] = pseudo.labels[idx[i]].label == PseudoLabelKind::positive ? 1 : 0;
        if (y[i] == 1) pos_rows.push_back(i);
      }

      std::optional<Vector> batch_proto;
      Vector d(pos_rows.size(), 1.0);
      if (pos_rows.empty()) {
        ++empty_positive;
      } else {
        const Matrix tokens = select_rows(x, pos_rows);
        const Matrix att = mapper.map(tokens);
        Vector ent_w(pos_rows.size(), 1.0);
        if (mapper.uses_entropy()) {
          Vector pos_probs(pos_rows.size());
          for (std::size_t k = 0; k < pos_rows.size(); ++k) pos_probs[k] = probs[pos_rows[k]];
          ent_w = entropy_weights(pos_probs, config.entropy_mode).weights;
        }
        const PrototypeState before = state;
        batch_proto = attentive_prototype(att, ent_w);
        state = ema_update(std::move(state), *batch_proto);
        try {
          d = similarity_weights(*state.prototype, att, config.similarity_mode).d;
        } catch (const DegenerateInput&) {
          ++degenerate;
          std::fill(d.begin(), d.end(), 1.0);
        }

        if (config.train_transformer && mapper.has_transformer()) {
          Vector pos_l, neg_l;
          for (std::size_t i = 0; i < idx.size(); ++i) {
            (y[i] == 1 ? pos_l : neg_l).push_back(bce_loss_per_roi(probs[i], y[i]));
          }
          detail::transformer_fd_step(mapper, config, tokens, ent_w, before, pos_l, neg_l,
                                      transformer_adam);
        }
      }

      // Loss weights over the labelled batch: d_i / N for positives, 1 / N for negatives.
      const double inv_n = 1.0 / static_cast<double>(idx.size());
      Vector w(idx.size(), inv_n);
      for (std::size_t k = 0; k < pos_rows.size(); ++k) w[pos_rows[k]] = d[k] * inv_n;

      adam_step(head, backward(head, x, y, w), adam);
      if (!all_finite(flatten(head))) {
        throw TrainingDiverged("adapt: non-finite parameters at meta-iteration " +
                               std::to_string(meta) + ", step " + std::to_string(step));
      }
      if (observer) observer(StepEvent{meta, step, head, state, batch_proto, d});
    }

    const auto next_pseudo = threshold_labels(forward(head, feats), config.tau_pos, config.tau_neg, meta);
    MetricsReport m = evaluate_hook(head, next_pseudo, PrototypeProbe{state.prototype, mapper, chunk});
    m.meta_iter = meta;
    rec.metrics.push_back(std::move(m));
    rec.empty_positive_batches.push_back(empty_positive);
    rec.degenerate_prototype_batches.push_back(degenerate);
    rec.prototypes.push_back(state.prototype);
    rec.meta_seconds.push_back(std::chrono::duration<double>(clock::now() - t_meta).count());
  }

  rec.final_checkpoint = DetectorCheckpoint{head, adam, config.n_meta};
  rec.total_seconds = std::chrono::duration<double>(clock::now() - t_start).count();
  return rec;
}

/// Evaluation hook backed by a labelled dataset: scores the head and pseudo
/// labels and measures prototype purity as the cosine between the running
/// prototype and the reference prototype of the true objects.
inline EvaluationHook labeled_evaluator(const Dataset& data) {
  return [&data](const MlpParams& head, const PseudoLabelSet& pseudo, const PrototypeProbe& probe) {
    MetricsReport r = evaluate(head, data, pseudo);
    if (probe.prototype) {
      std::vector<std::size_t> objects;
      for (std::size_t i = 0; i < data.size(); ++i)
        if (is_object(data.true_labels[i])) objects.push_back(i);
      if (!objects.empty()) {
        const Vector ref =
            probe.mapper.reference_prototype(select_rows(data.features, objects), probe.chunk);
        try {
          r.proto_purity = cosine_similarity(*probe.prototype, ref);
        } catch (const DegenerateInput&) {
          r.proto_purity.reset();
        }
      }
    }
    return r;
  };
}

/// Plain pseudo-label self-training: same loop with the mean prototype and
/// the similarity weights pinned to 1.
inline AdaptConfig self_training_config(AdaptConfig c) {
  c.prototype_mode = PrototypeMode::average;
  c.similarity_mode = SimilarityMode::unit;
  c.train_transformer = false;
  return c;
}

// ---------------------------------------------------------------------------
// Ablation over prototype modes

struct AblationRow {
  PrototypeMode mode = PrototypeMode::average;
  MetricsReport direct_transfer;
  MetricsReport final_metrics;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

inline AblationTable run_ablation(const AdaptConfig& base, const MlpParams& source_head,
                                  const UnlabeledView& target, const EvaluationHook& hook) {
  AblationTable table;
  for (PrototypeMode mode : kAllPrototypeModes) {
    AdaptConfig c = base;
    c.prototype_mode = mode;
    const RunRecord rec = adapt(c, source_head, target, hook);
    table.rows.push_back({mode, rec.metrics.front(), rec.metrics.back()});
  }
  return table;
}

inline nlohmann::ordered_json to_json(const AblationTable& t) {
  using detail::optional_json;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : t.rows) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(r.mode);
    j["dt_target_f1"] = optional_json(r.direct_transfer.target_f1);
    j["target_f1"] = optional_json(r.final_metrics.target_f1);
    j["target_accuracy"] = r.final_metrics.target_accuracy;
    j["pseudo_precision"] = optional_json(r.final_metrics.pseudo_precision);
    j["pseudo_recall"] = optional_json(r.final_metrics.pseudo_recall);
    j["pseudo_f1"] = optional_json(r.final_metrics.pseudo_f1);
    j["confounder_positive_rate"] = r.final_metrics.confounder_positive_rate;
    j["proto_purity"] = optional_json(r.final_metrics.proto_purity);
    rows.push_back(std::move(j));
  }
  nlohmann::ordered_json out;
  out["rows"] = std::move(rows);
  return out;
}

// ---------------------------------------------------------------------------
// RunRecord JSON and CSV exports

inline constexpr std::string_view kRunRecordSchema = "protoadapt.run_record/1";

inline nlohmann::ordered_json to_json(const RunRecord& r, bool include_timings = false) {
  nlohmann::ordered_json j;
  j["schema"] = kRunRecordSchema;
  j["config"] = to_json(r.config);
  auto metrics = nlohmann::ordered_json::array();
  for (const auto& m : r.metrics) metrics.push_back(to_json(m));
  j["metrics"] = std::move(metrics);
  j["empty_positive_batches"] = r.empty_positive_batches;
  j["degenerate_prototype_batches"] = r.degenerate_prototype_batches;
  auto protos = nlohmann::ordered_json::array();
  for (const auto& p : r.prototypes) {
    protos.push_back(p ? nlohmann::ordered_json(*p) : nlohmann::ordered_json(nullptr));
  }
  j["prototypes"] = std::move(protos);
  j["final_checkpoint"] = to_json(r.final_checkpoint);
  if (include_timings) {
    nlohmann::ordered_json t;
    t["meta_seconds"] = r.meta_seconds;
    t["total_seconds"] = r.total_seconds;
    j["timings"] = std::move(t);
  }
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  if (j.at("schema").get<std::string>() != kRunRecordSchema) {
    throw std::invalid_argument("run record: unsupported schema '" +
                                j.at("schema").get<std::string>() + "'");
  }
  RunRecord r;
  r.config = config_from_json(j.at("config"));
  for (const auto& m : j.at("metrics")) r.metrics.push_back(metrics_from_json(m));
  r.empty_positive_batches = j.at("empty_positive_batches").get<std::vector<std::size_t>>();
  r.degenerate_prototype_batches = j.at("degenerate_prototype_batches").get<std::vector<std::size_t>>();
  for (const auto& p : j.at("prototypes")) {
    r.prototypes.push_back(p.is_null() ? std::nullopt : std::optional<Vector>(p.get<Vector>()));
  }
  r.final_checkpoint = checkpoint_from_json(j.at("final_checkpoint"));
  if (j.contains("timings")) {
    r.meta_seconds = j.at("timings").at("meta_seconds").get<std::vector<double>>();
    r.total_seconds = j.at("timings").at("total_seconds").get<double>();
  }
  return r;
}

namespace detail {

inline std::string csv_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace detail

/// meta_iter,precision,recall,f1,target_f1,proto_purity. Undefined cells are empty.
inline std::string metrics_series_csv(const RunRecord& r) {
  std::string out = "meta_iter,precision,recall,f1,target_f1,proto_purity\n";
  for (const auto& m : r.metrics) {
    out += std::to_string(m.meta_iter) + ',' + detail::csv_cell(m.pseudo_precision) + ',' +
           detail::csv_cell(m.pseudo_recall) + ',' + detail::csv_cell(m.pseudo_f1) + ',' +
           detail::csv_cell(m.target_f1) + ',' + detail::csv_cell(m.proto_purity) + '\n';
  }
  return out;
}

inline nlohmann::ordered_json metrics_series_json(const RunRecord& r) {
  using detail::optional_json;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& m : r.metrics) {
    nlohmann::ordered_json j;
    j["meta_iter"] = m.meta_iter;
    j["precision"] = optional_json(m.pseudo_precision);
    j["recall"] = optional_json(m.pseudo_recall);
    j["f1"] = optional_json(m.pseudo_f1);
    j["target_f1"] = optional_json(m.target_f1);
    j["proto_purity"] = optional_json(m.proto_purity);
    j["mean_conf_incorrect"] = optional_json(m.mean_conf_incorrect);
    j["hist_correct"] = m.hist_correct;
    j["hist_incorrect"] = m.hist_incorrect;
    rows.push_back(std::move(j));
  }
  return rows;
}

/// confidence,correct; one row per target ROI.
inline std::string confidence_csv(const MetricsReport& m) {
  std::ostringstream os;
  os.precision(17);
  os << "confidence,correct\n";
  for (const auto& s : m.samples) os << s.confidence << ',' << (s.correct ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace protoadapt
