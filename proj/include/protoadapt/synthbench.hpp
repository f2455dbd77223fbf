#pragma once

// Synthetic domain-shift benchmark: axis-aligned Gaussian mixtures of ROI
// features with an object class, background, and a confounder that sits next
// to the object class. The target domain drifts every mean by a common
// vector and inflates the scales. Metrics live here too, since they are the
// only code allowed to look at true labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoadapt/detector.hpp"
#include "protoadapt/numcore.hpp"

namespace protoadapt {

/// Ground-truth class of a generated ROI. Only `positive` is the object
/// class; background and confounder are both negatives for metrics.
enum class ClassKind : int { background = 0, positive = 1, confounder = 2 };

inline bool is_object(ClassKind k) { return k == ClassKind::positive; }

enum class Domain { source, target };

inline std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + std::string(s) + "'");
}

struct MixtureComponent {
  Vector mean;
  Vector scales;
  double weight = 0.0;
  ClassKind kind = ClassKind::background;
};

struct DomainSpec {
  std::size_t feature_dim = 16;
  std::vector<MixtureComponent> components;
  std::uint64_t seed = 0;

  void validate() const {
    if (components.empty()) throw std::invalid_argument("DomainSpec: no components");
    double total = 0.0;
    for (const auto& c : components) {
      if (c.mean.size() != feature_dim || c.scales.size() != feature_dim) {
        throw std::invalid_argument("DomainSpec: component dimension mismatch");
      }
      if (!(c.weight >= 0.0)) throw std::invalid_argument("DomainSpec: negative mixing weight");
      for (double s : c.scales)
        if (!(s >= 0.0)) throw std::invalid_argument("DomainSpec: negative scale");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("DomainSpec: mixing weights sum to " + std::to_string(total));
    }
  }
};

struct Dataset {
  Matrix features;
  std::vector<ClassKind> true_labels;
  Domain domain = Domain::source;

  std::size_t size() const { return features.rows(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Features only. This is all the adaptation loop ever receives; there is no
/// way to reach the labels from here.
class UnlabeledView {
 public:
  explicit UnlabeledView(const Matrix& features) : features_(&features) {}
  const Matrix& features() const { return *features_; }
  std::size_t size() const { return features_->rows(); }

 private:
  const Matrix* features_;
};

inline UnlabeledView strip_labels(const Dataset& d) { return UnlabeledView(d.features); }

/// Draws a component by mixing weight, then mean + scale * N(0, 1).
inline Dataset gen_domain(const DomainSpec& spec, std::size_t n, Domain domain = Domain::source) {
  spec.validate();
  if (n == 0) throw std::invalid_argument("gen_domain: n must be at least 1");
  Rng rng(spec.seed);
  Dataset out{Matrix(n, spec.feature_dim), std::vector<ClassKind>(n), domain};
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t c = 0;
    double acc = spec.components[0].weight;
    while (u >= acc && c + 1 < spec.components.size()) acc += spec.components[++c].weight;
    const auto& comp = spec.components[c];
    const Matrix z = randn(rng, 1, spec.feature_dim);
    auto row = out.features.row(i);
    for (std::size_t j = 0; j < spec.feature_dim; ++j) row[j] = comp.mean[j] + comp.scales[j] * z(0, j);
    out.true_labels[i] = comp.kind;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Default shift benchmark

/// Knobs of the default benchmark. Mean and drift vectors give the leading
/// coordinates; the remaining coordinates are zero. Dims 0..2 carry the
/// informative scale, the rest the nuisance scale.
struct ShiftGeometry {
  std::size_t feature_dim = 16;
  Vector object_mean = {1.5, 1.5, 0.0};
  Vector confounder_mean = {-1.5, 4.5, 0.0};
  Vector background_mean = {0.0, 0.0, 8.0};
  double informative_scale = 0.5;
  double nuisance_scale = 0.2;
  std::array<double, 3> mix{0.3, 0.5, 0.2};  // object, background, confounder
  Vector drift = {1.5, -2.5, 0.0};
  double target_scale_factor = 1.3;
  std::size_t source_size = 2000;
  std::size_t target_size = 2000;
};

struct Benchmark {
  Dataset source;
  Dataset target;
  DomainSpec source_spec;
  DomainSpec target_spec;
  ShiftGeometry geometry;
  std::uint64_t seed = 0;
};

inline std::array<DomainSpec, 2> shift_specs(const ShiftGeometry& g, std::uint64_t seed) {
  const std::size_t d = g.feature_dim;
  if (d < 3) throw std::invalid_argument("shift benchmark needs at least 3 feature dims");
  auto lead = [d](const Vector& v, const char* what) {
    if (v.size() > d) throw std::invalid_argument(std::string(what) + " longer than feature dim");
    Vector out(d, 0.0);
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  };
  Vector scales(d, g.nuisance_scale);
  for (std::size_t k = 0; k < 3; ++k) scales[k] = g.informative_scale;

  const Vector obj = lead(g.object_mean, "object mean");
  const Vector conf = lead(g.confounder_mean, "confounder mean");
  const Vector bg = lead(g.background_mean, "background mean");
  const Vector drift = lead(g.drift, "drift");

  DomainSpec src;
  src.feature_dim = d;
  src.components = {{obj, scales, g.mix[0], ClassKind::positive},
                    {bg, scales, g.mix[1], ClassKind::background},
                    {conf, scales, g.mix[2], ClassKind::confounder}};
  {
    std::uint64_t sm = seed;
    src.seed = splitmix64(sm);
  }

  DomainSpec tgt = src;
  {
    std::uint64_t sm = seed ^ 0x7461726765740000ULL;
    tgt.seed = splitmix64(sm);
  }
  for (auto& c : tgt.components) {
    for (std::size_t k = 0; k < d; ++k) c.mean[k] += drift[k];
    for (double& s : c.scales) s *= g.target_scale_factor;
  }
  return {src, tgt};
}

inline Benchmark default_shift_benchmark(std::uint64_t seed, const ShiftGeometry& g = {}) {
  auto [src, tgt] = shift_specs(g, seed);
  Benchmark b;
  b.source = gen_domain(src, g.source_size, Domain::source);
  b.target = gen_domain(tgt, g.target_size, Domain::target);
  b.source_spec = std::move(src);
  b.target_spec = std::move(tgt);
  b.geometry = g;
  b.seed = seed;
  return b;
}

inline nlohmann::ordered_json to_json(const ShiftGeometry& g) {
  nlohmann::ordered_json j;
  j["feature_dim"] = g.feature_dim;
  j["object_mean"] = g.object_mean;
  j["confounder_mean"] = g.confounder_mean;
  j["background_mean"] = g.background_mean;
  j["informative_scale"] = g.informative_scale;
  j["nuisance_scale"] = g.nuisance_scale;
  j["mix"] = g.mix;
  j["drift"] = g.drift;
  j["target_scale_factor"] = g.target_scale_factor;
  j["source_size"] = g.source_size;
  j["target_size"] = g.target_size;
  return j;
}

// ---------------------------------------------------------------------------
// CSV: f0..f{D-1},true_label,domain

inline void write_csv(std::ostream& os, const std::vector<const Dataset*>& parts) {
  if (parts.empty()) throw std::invalid_argument("write_csv: nothing to write");
  const std::size_t d = parts.front()->features.cols();
  for (std::size_t j = 0; j < d; ++j) os << 'f' << j << ',';
  os << "true_label,domain\n";
  std::ostringstream line;
  line.precision(17);
  for (const Dataset* ds : parts) {
    if (ds->features.cols() != d) throw std::invalid_argument("write_csv: width mismatch");
    for (std::size_t i = 0; i < ds->size(); ++i) {
      line.str("");
      for (double x : ds->features.row(i)) line << x << ',';
      line << static_cast<int>(ds->true_labels[i]) << ',' << to_string(ds->domain) << '\n';
      os << line.str();
    }
  }
}

/// Returns {source, target}; either may be empty.
inline std::array<Dataset, 2> read_csv(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("dataset csv: empty input");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  if (cols.size() < 3 || cols[cols.size() - 2] != "true_label" || cols.back() != "domain") {
    throw std::runtime_error("dataset csv: header must end with true_label,domain");
  }
  const std::size_t d = cols.size() - 2;
  for (std::size_t j = 0; j < d; ++j) {
    if (cols[j] != "f" + std::to_string(j)) {
      throw std::runtime_error("dataset csv: unexpected column '" + cols[j] + "'");
    }
  }

  std::array<Vector, 2> values;
  std::array<std::vector<ClassKind>, 2> labels;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vector row;
    row.reserve(d);
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::getline(ss, cell, ',')) {
        throw std::runtime_error("dataset csv: short row at line " + std::to_string(line_no));
      }
      row.push_back(std::stod(cell));
    }
    std::string label_cell, domain_cell;
    if (!std::getline(ss, label_cell, ',') || !std::getline(ss, domain_cell)) {
      throw std::runtime_error("dataset csv: short row at line " + std::to_string(line_no));
    }
    const int code = std::stoi(label_cell);
    if (code < 0 || code > 2) {
      throw std::runtime_error("dataset csv: bad label at line " + std::to_string(line_no));
    }
    const auto idx = static_cast<std::size_t>(parse_domain(domain_cell));
    values[idx].insert(values[idx].end(), row.begin(), row.end());
    labels[idx].push_back(static_cast<ClassKind>(code));
  }

  std::array<Dataset, 2> out;
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t n = labels[k].size();
    out[k] = Dataset{Matrix(n, d, std::move(values[k])), std::move(labels[k]),
                     k == 0 ? Domain::source : Domain::target};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct BinaryCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::optional<double> precision() const {
    if (tp + fp == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  std::optional<double> recall() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  std::optional<double> f1() const {
    const auto p = precision();
    const auto r = recall();
    if (!p || !r) return std::nullopt;
    if (*p + *r == 0.0) return 0.0;
    return 2.0 * *p * *r / (*p + *r);
  }
  double accuracy() const {
    const std::size_t n = tp + fp + fn + tn;
    return n == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(n);
  }
};

inline constexpr std::size_t kConfidenceBins = 20;

struct ConfidenceSample {
  double confidence = 0.0;
  bool correct = false;
};

struct MetricsReport {
  std::size_t meta_iter = 0;

  // Pseudo labels produced by the evaluated head.
  std::size_t pseudo_positive = 0;
  std::size_t pseudo_negative = 0;
  std::size_t pseudo_ignored = 0;
  std::optional<double> pseudo_precision;
  std::optional<double> pseudo_recall;
  std::optional<double> pseudo_f1;

  // Head as a classifier at 0.5.
  double target_accuracy = 0.0;
  std::optional<double> target_precision;
  std::optional<double> target_recall;
  std::optional<double> target_f1;
  double confounder_positive_rate = 0.0;

  // Confidence vs correctness of every scored ROI.
  std::array<std::size_t, kConfidenceBins> hist_correct{};
  std::array<std::size_t, kConfidenceBins> hist_incorrect{};
  std::optional<double> mean_conf_correct;
  std::optional<double> mean_conf_incorrect;
  std::vector<ConfidenceSample> samples;

  std::optional<double> proto_purity;
};

inline std::size_t confidence_bin(double c) {
  const auto b = static_cast<std::size_t>(std::floor(std::clamp(c, 0.0, 1.0) * kConfidenceBins));
  return std::min(b, kConfidenceBins - 1);
}

/// Scores `head` against the true labels of `data`.
///
/// Every ROI is a scored candidate (confidence = object probability), and a
/// candidate is correct iff it really is an object; the confidence histogram
/// and mean confidences are taken over all of them. When thresholded pseudo
/// labels are given, their precision/recall is scored as well, leaving
/// ignored ROIs out of the confusion counts.
inline MetricsReport evaluate(const MlpParams& head, const Dataset& data,
                              const std::optional<PseudoLabelSet>& pseudo = std::nullopt) {
  MetricsReport r;
  const Vector probs = forward(head, data.features);

  BinaryCounts cls;
  std::size_t confounders = 0, confounders_pos = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool truth = is_object(data.true_labels[i]);
    const bool pred = probs[i] >= 0.5;
    if (pred && truth) ++cls.tp;
    else if (pred && !truth) ++cls.fp;
    else if (!pred && truth) ++cls.fn;
    else ++cls.tn;
    if (data.true_labels[i] == ClassKind::confounder) {
      ++confounders;
      if (probs[i] > 0.5) ++confounders_pos;
    }
  }
  r.target_accuracy = cls.accuracy();
  r.target_precision = cls.precision();
  r.target_recall = cls.recall();
  r.target_f1 = cls.f1();
  r.confounder_positive_rate =
      confounders == 0 ? 0.0 : static_cast<double>(confounders_pos) / static_cast<double>(confounders);

  // Confidence/correctness over every scored ROI: a fixed population, so
  // two heads are compared like for like.
  double sum_correct = 0.0, sum_incorrect = 0.0;
  std::size_t n_correct = 0, n_incorrect = 0;
  r.samples.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool correct = is_object(data.true_labels[i]);
    const std::size_t bin = confidence_bin(probs[i]);
    if (correct) {
      ++r.hist_correct[bin];
      sum_correct += probs[i];
      ++n_correct;
    } else {
      ++r.hist_incorrect[bin];
      sum_incorrect += probs[i];
      ++n_incorrect;
    }
    r.samples.push_back({probs[i], correct});
  }
  if (n_correct > 0) r.mean_conf_correct = sum_correct / static_cast<double>(n_correct);
  if (n_incorrect > 0) r.mean_conf_incorrect = sum_incorrect / static_cast<double>(n_incorrect);

  if (!pseudo) return r;
  if (pseudo->labels.size() != data.size()) {
    throw std::invalid_argument("evaluate: pseudo label count does not match dataset");
  }
  BinaryCounts pl;
  for (const auto& l : pseudo->labels) {
    const bool truth = is_object(data.true_labels.at(l.roi_index));
    switch (l.label) {
      case PseudoLabelKind::positive: ++r.pseudo_positive; truth ? ++pl.tp : ++pl.fp; break;
      case PseudoLabelKind::negative: ++r.pseudo_negative; truth ? ++pl.fn : ++pl.tn; break;
      case PseudoLabelKind::ignored: ++r.pseudo_ignored; break;
    }
  }
  r.pseudo_precision = pl.precision();
  r.pseudo_recall = pl.recall();
  r.pseudo_f1 = pl.f1();
  return r;
}

namespace detail {

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

/// Stable key order; undefined metrics are null.
inline nlohmann::ordered_json to_json(const MetricsReport& r, bool include_samples = true) {
  using detail::optional_json;
  nlohmann::ordered_json j;
  j["meta_iter"] = r.meta_iter;
  j["pseudo_positive"] = r.pseudo_positive;
  j["pseudo_negative"] = r.pseudo_negative;
  j["pseudo_ignored"] = r.pseudo_ignored;
  j["pseudo_precision"] = optional_json(r.pseudo_precision);
  j["pseudo_recall"] = optional_json(r.pseudo_recall);
  j["pseudo_f1"] = optional_json(r.pseudo_f1);
  j["target_accuracy"] = r.target_accuracy;
  j["target_precision"] = optional_json(r.target_precision);
  j["target_recall"] = optional_json(r.target_recall);
  j["target_f1"] = optional_json(r.target_f1);
  j["confounder_positive_rate"] = r.confounder_positive_rate;
  j["mean_conf_correct"] = optional_json(r.mean_conf_correct);
  j["mean_conf_incorrect"] = optional_json(r.mean_conf_incorrect);
  j["hist_correct"] = r.hist_correct;
  j["hist_incorrect"] = r.hist_incorrect;
  j["proto_purity"] = optional_json(r.proto_purity);
  if (include_samples) {
    auto samples = nlohmann::ordered_json::array();
    for (const auto& s : r.samples) samples.push_back({s.confidence, s.correct ? 1 : 0});
    j["samples"] = std::move(samples);
  }
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  using detail::optional_from_json;
  MetricsReport r;
  r.meta_iter = j.at("meta_iter").get<std::size_t>();
  r.pseudo_positive = j.at("pseudo_positive").get<std::size_t>();
  r.pseudo_negative = j.at("pseudo_negative").get<std::size_t>();
  r.pseudo_ignored = j.at("pseudo_ignored").get<std::size_t>();
  r.pseudo_precision = optional_from_json(j.at("pseudo_precision"));
  r.pseudo_recall = optional_from_json(j.at("pseudo_recall"));
  r.pseudo_f1 = optional_from_json(j.at("pseudo_f1"));
  r.target_accuracy = j.at("target_accuracy").get<double>();
  r.target_precision = optional_from_json(j.at("target_precision"));
  r.target_recall = optional_from_json(j.at("target_recall"));
  r.target_f1 = optional_from_json(j.at("target_f1"));
  r.confounder_positive_rate = j.at("confounder_positive_rate").get<double>();
  r.mean_conf_correct = optional_from_json(j.at("mean_conf_correct"));
  r.mean_conf_incorrect = optional_from_json(j.at("mean_conf_incorrect"));
  r.hist_correct = j.at("hist_correct").get<std::array<std::size_t, kConfidenceBins>>();
  r.hist_incorrect = j.at("hist_incorrect").get<std::array<std::size_t, kConfidenceBins>>();
  r.proto_purity = optional_from_json(j.at("proto_purity"));
  if (j.contains("samples")) {
    for (const auto& s : j.at("samples")) {
      r.samples.push_back({s.at(0).get<double>(), s.at(1).get<int>() != 0});
    }
  }
  return r;
}

}  // namespace protoadapt
