#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>
#include <type_traits>

#include "protoadapt/pipeline.hpp"
#include "protoadapt/synthbench.hpp"

using namespace protoadapt;

namespace {

DomainSpec three_way_spec() {
  DomainSpec s;
  s.feature_dim = 16;
  s.seed = 5;
  const Vector scales(16, 1.0);
  Vector a(16, 0.0), b(16, 0.0), c(16, 0.0);
  a[0] = 3.0;
  b[1] = -3.0;
  c[2] = 2.0;
  s.components = {{a, scales, 0.3, ClassKind::positive},
                  {b, scales, 0.5, ClassKind::background},
                  {c, scales, 0.2, ClassKind::confounder}};
  return s;
}

template <typename T>
concept HasLabels = requires(const T& t) { t.true_labels; };
template <typename T>
concept HasLabelAccessor = requires(const T& t) { t.true_labels(); } || requires(const T& t) { t.labels(); };

}  // namespace

TEST(GenDomain, SizesAndErrors) {
  const auto spec = three_way_spec();
  EXPECT_THROW(gen_domain(spec, 0), std::invalid_argument);
  const auto one = gen_domain(spec, 1);
  EXPECT_EQ(one.size(), 1u);
  EXPECT_EQ(one.features.cols(), 16u);
}

TEST(GenDomain, ZeroScalesSitOnMeans) {
  auto spec = three_way_spec();
  for (auto& c : spec.components) c.scales.assign(16, 0.0);
  const auto d = gen_domain(spec, 50);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& comp = *std::find_if(spec.components.begin(), spec.components.end(),
                                     [&](const auto& c) { return c.kind == d.true_labels[i]; });
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(d.features(i, j), comp.mean[j]);
  }
}

TEST(GenDomain, ComponentProportions) {
  const auto d = gen_domain(three_way_spec(), 10000);
  std::array<double, 3> counts{};
  for (auto k : d.true_labels) counts[static_cast<int>(k)] += 1.0;
  EXPECT_NEAR(counts[1] / 10000.0, 0.3, 0.02);
  EXPECT_NEAR(counts[0] / 10000.0, 0.5, 0.02);
  EXPECT_NEAR(counts[2] / 10000.0, 0.2, 0.02);
}

TEST(Benchmark, Deterministic) {
  const auto a = default_shift_benchmark(4), b = default_shift_benchmark(4);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.source.size(), 2000u);
  EXPECT_EQ(a.target.size(), 2000u);
  EXPECT_EQ(a.source.features.cols(), 16u);
  EXPECT_NE(a.source.features, default_shift_benchmark(5).source.features);
}

TEST(Benchmark, NoDriftMeansSameParameters) {
  ShiftGeometry g;
  g.drift = {0.0};
  g.target_scale_factor = 1.0;
  const auto [src, tgt] = shift_specs(g, 3);
  ASSERT_EQ(src.components.size(), tgt.components.size());
  for (std::size_t c = 0; c < src.components.size(); ++c) {
    EXPECT_EQ(src.components[c].mean, tgt.components[c].mean);
    EXPECT_EQ(src.components[c].scales, tgt.components[c].scales);
    EXPECT_EQ(src.components[c].weight, tgt.components[c].weight);
  }
}

TEST(Benchmark, DefaultMixing) {
  const auto [src, tgt] = shift_specs(ShiftGeometry{}, 0);
  EXPECT_EQ(src.components[0].weight, 0.3);
  EXPECT_EQ(src.components[1].weight, 0.5);
  EXPECT_EQ(src.components[2].weight, 0.2);
  EXPECT_NEAR(tgt.components[0].scales[0], 1.3 * src.components[0].scales[0], 1e-15);
}

TEST(Csv, RoundTrip) {
  const auto b = default_shift_benchmark(2);
  std::stringstream ss;
  write_csv(ss, {&b.source, &b.target});
  const std::string header = ss.str().substr(0, ss.str().find('\n'));
  EXPECT_EQ(header.substr(0, 6), "f0,f1,");
  EXPECT_EQ(header.substr(header.size() - 21), "f15,true_label,domain");
  const auto back = read_csv(ss);
  EXPECT_EQ(back[0], b.source);
  EXPECT_EQ(back[1], b.target);
}

TEST(Csv, RejectsBadHeader) {
  std::stringstream ss("a,b,true_label,domain\n1,2,0,source\n");
  EXPECT_THROW(read_csv(ss), std::runtime_error);
}

TEST(Firewall, UnlabeledViewExposesNoLabels) {
  static_assert(HasLabels<Dataset>);
  static_assert(!HasLabels<UnlabeledView>);
  static_assert(!HasLabelAccessor<UnlabeledView>);
  static_assert(!std::is_constructible_v<UnlabeledView, const Dataset&>);
  static_assert(!std::is_convertible_v<const Matrix&, UnlabeledView>);
  // adapt only admits the head and the view.
  static_assert(std::is_invocable_v<decltype(&adapt), const AdaptConfig&, const MlpParams&,
                                    const UnlabeledView&, const EvaluationHook&, const StepObserver&>);
  static_assert(!std::is_invocable_v<decltype(&adapt), const AdaptConfig&, const MlpParams&,
                                     const Dataset&, const EvaluationHook&, const StepObserver&>);
  const auto b = default_shift_benchmark(1);
  const auto view = strip_labels(b.target);
  EXPECT_EQ(view.size(), b.target.size());
  EXPECT_EQ(&view.features(), &b.target.features);
}

TEST(Metrics, ConfusionArithmetic) {
  BinaryCounts c{8, 2, 4, 0};
  EXPECT_DOUBLE_EQ(*c.precision(), 0.8);
  EXPECT_DOUBLE_EQ(*c.recall(), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*c.f1(), 2 * 0.8 * (2.0 / 3.0) / (0.8 + 2.0 / 3.0));
  EXPECT_FALSE(BinaryCounts{}.precision().has_value());
}

TEST(Metrics, PerfectPredictions) {
  // Two well separated points and a head that scores them perfectly.
  Dataset d{Matrix::from_rows({{1.0}, {-1.0}}), {ClassKind::positive, ClassKind::background}, Domain::target};
  MlpParams h = MlpParams::zeros(1, 1);
  h.w1(0, 0) = 20.0;
  h.w2(0, 0) = 5.0;
  h.b2 = -2.0;
  const auto probs = forward(h, d.features);
  const auto pseudo = threshold_labels(probs, 0.7, 0.3);
  const auto r = evaluate(h, d, pseudo);
  EXPECT_EQ(*r.target_precision, 1.0);
  EXPECT_EQ(*r.target_recall, 1.0);
  EXPECT_EQ(*r.pseudo_precision, 1.0);
  EXPECT_EQ(*r.pseudo_recall, 1.0);
}

TEST(Metrics, AllIgnoredIsUndefinedNotNan) {
  const auto b = default_shift_benchmark(1);
  const auto h = MlpParams::zeros(16, 4);  // p = 0.5 everywhere
  const auto pseudo = threshold_labels(forward(h, b.target.features), 0.7, 0.3);
  const auto r = evaluate(h, b.target, pseudo);
  EXPECT_EQ(r.pseudo_ignored, b.target.size());
  EXPECT_FALSE(r.pseudo_precision.has_value());
  EXPECT_FALSE(r.pseudo_recall.has_value());
  const auto j = to_json(r, false);
  EXPECT_TRUE(j.at("pseudo_precision").is_null());
  EXPECT_TRUE(j.at("pseudo_recall").is_null());
}

TEST(Metrics, HistogramCoversEveryRoi) {
  const auto b = default_shift_benchmark(3);
  Rng rng(1);
  const auto h = init_mlp(rng, 16, 4);
  const auto r = evaluate(h, b.target);
  std::size_t total = 0;
  for (std::size_t k = 0; k < kConfidenceBins; ++k) total += r.hist_correct[k] + r.hist_incorrect[k];
  EXPECT_EQ(total, b.target.size());
  EXPECT_EQ(confidence_bin(1.0), kConfidenceBins - 1);
  EXPECT_EQ(confidence_bin(0.0), 0u);
  EXPECT_EQ(confidence_bin(0.26), 5u);
}

TEST(Metrics, JsonRoundTripKeepsKeyOrder) {
  const auto b = default_shift_benchmark(3);
  Rng rng(2);
  const auto h = init_mlp(rng, 16, 4);
  const auto r = evaluate(h, b.target, threshold_labels(forward(h, b.target.features), 0.6, 0.4));
  const auto j = to_json(r);
  EXPECT_EQ(j.begin().key(), "meta_iter");
  const auto back = metrics_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(to_json(back).dump(), j.dump());
}
