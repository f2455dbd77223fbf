#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "protoadapt/transformer.hpp"

using namespace protoadapt;

namespace {

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  return select_rows(m, perm);
}

void expect_near(const Matrix& a, const Matrix& b, double tol) {
  ASSERT_EQ(a.rows(), b.rows());
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], tol) << i;
}

TransformerDims small_dims(std::size_t layers = 2) {
  return {.input_dim = 5, .model_dim = 8, .ff_dim = 12, .heads = 2, .layers = layers, .init_scale = 1.0};
}

}  // namespace

TEST(Init, Deterministic) {
  Rng a(3), b(3);
  EXPECT_EQ(init_transformer(a, TransformerDims{}), init_transformer(b, TransformerDims{}));
}

TEST(Init, ZeroScaleGivesZeroWeightsUnitGains) {
  Rng rng(1);
  TransformerDims d;
  d.init_scale = 0.0;
  const auto p = init_transformer(rng, d);
  for (double x : p.embed.values()) EXPECT_EQ(x, 0.0);
  for (const auto& e : p.encoders) {
    for (const auto& h : e.attention.heads)
      for (double x : h.query.values()) EXPECT_EQ(x, 0.0);
    for (double x : e.ff_out.values()) EXPECT_EQ(x, 0.0);
    for (double g : e.attention.norm_gain) EXPECT_EQ(g, 1.0);
    for (double g : e.ff_norm_gain) EXPECT_EQ(g, 1.0);
  }
}

TEST(Init, ParameterCountMatchesShapeAudit) {
  Rng rng(0);
  const auto p = init_transformer(rng, TransformerDims{});
  const std::size_t expected =
      2 * (3 * 4 * 32 * 8 + 32 * 32 + 32 * 64 + 64 + 64 * 32 + 32 + 4 * 32) + 16 * 32 + 32;
  EXPECT_EQ(p.parameter_count(), expected);
  EXPECT_EQ(flatten(p).size(), expected);
}

TEST(Init, RejectsIndivisibleHeads) {
  Rng rng(0);
  TransformerDims d;
  d.heads = 5;
  EXPECT_THROW(init_transformer(rng, d), std::invalid_argument);
}

TEST(Attention, SingleToken) {
  Rng rng(4);
  const AttentionHead h{randn(rng, 3, 2), randn(rng, 3, 2), randn(rng, 3, 2)};
  const Matrix x = randn(rng, 1, 3);
  const Matrix a = attention_weights(x, h);
  EXPECT_EQ(a, Matrix::from_rows({{1.0}}));
  expect_near(attention_head(x, h), matmul(x, h.value), 0.0);
}

TEST(Attention, IdenticalTokensGiveIdenticalRows) {
  Rng rng(8);
  const AttentionHead h{randn(rng, 4, 2), randn(rng, 4, 2), randn(rng, 4, 2)};
  const Matrix t = randn(rng, 1, 4);
  const Matrix x = select_rows(t, std::vector<std::size_t>{0, 0});
  const Matrix out = attention_head(x, h);
  for (std::size_t j = 0; j < out.cols(); ++j) EXPECT_EQ(out(0, j), out(1, j));
}

TEST(Attention, HandComputedTwoTokens) {
  const Matrix x = Matrix::from_rows({{1, 0}, {0, 1}});
  const AttentionHead h{Matrix::from_rows({{1, 2}, {0, 1}}), Matrix::from_rows({{1, 0}, {1, 1}}),
                        Matrix::from_rows({{2, 0}, {0, 3}})};
  // Q = [[1,2],[0,1]], K = [[1,0],[1,1]], V = [[2,0],[0,3]].
  // Scores / sqrt 2: row 0 -> [1, 3] / sqrt 2, row 1 -> [0, 1] / sqrt 2.
  const double r2 = std::sqrt(2.0);
  auto row = [](double s0, double s1) {
    const double e0 = std::exp(s0), e1 = std::exp(s1);
    return std::pair{e0 / (e0 + e1), e1 / (e0 + e1)};
  };
  const auto [a00, a01] = row(1 / r2, 3 / r2);
  const auto [a10, a11] = row(0.0, 1 / r2);
  const Matrix want = Matrix::from_rows({{2 * a00, 3 * a01}, {2 * a10, 3 * a11}});
  expect_near(attention_head(x, h), want, 1e-15);
}

TEST(Encoder, ZeroWeightsPassThrough) {
  Rng rng(2);
  TransformerDims d = small_dims(1);
  d.init_scale = 0.0;
  const auto p = init_transformer(rng, d);
  const Matrix x = randn(rng, 4, d.model_dim);
  EXPECT_EQ(encoder_forward(p.encoders[0], x), x);
}

TEST(Encoder, MatchesCompositionOfParts) {
  Rng rng(12);
  const auto p = init_transformer(rng, small_dims(1));
  const auto& e = p.encoders[0];
  const Matrix x = randn(rng, 3, 8);

  const Matrix n1 = layer_norm_rows(x, e.attention.norm_gain, e.attention.norm_bias);
  std::vector<Matrix> heads;
  for (const auto& h : e.attention.heads) {
    heads.push_back(matmul(softmax_rows(scale(matmul(matmul(n1, h.query), transpose(matmul(n1, h.key))),
                                              1.0 / std::sqrt(4.0))),
                           matmul(n1, h.value)));
  }
  const Matrix y = add(x, matmul(hconcat(heads), e.attention.output));
  const Matrix n2 = layer_norm_rows(y, e.ff_norm_gain, e.ff_norm_bias);
  const Matrix ff =
      add_row_vector(matmul(gelu(add_row_vector(matmul(n2, e.ff_in), e.ff_in_bias)), e.ff_out), e.ff_out_bias);
  expect_near(encoder_forward(e, x), add(y, ff), 1e-13);
}

TEST(Transformer, ZeroWeightsOutputIsBiases) {
  Rng rng(0);
  TransformerDims d = small_dims(1);
  d.init_scale = 0.0;
  auto p = init_transformer(rng, d);
  p.embed_bias.assign(d.model_dim, 0.5);
  p.encoders[0].ff_out_bias.assign(d.model_dim, -0.25);
  const Matrix out = transformer_forward(p, randn(rng, 3, d.input_dim));
  // Embedding is the bias row; attention adds nothing; FF adds its output bias.
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Transformer, PermutationEquivariance) {
  Rng rng(21);
  const auto p = init_transformer(rng, small_dims());
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(6);
    const Matrix x = randn(rng, n, 5);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    shuffle(perm, rng);
    expect_near(transformer_forward(p, permute_rows(x, perm)),
                permute_rows(transformer_forward(p, x), perm), 1e-9);
  }
}

TEST(Transformer, Errors) {
  Rng rng(0);
  const auto p = init_transformer(rng, small_dims());
  EXPECT_THROW(transformer_forward(p, Matrix(2, 4)), std::invalid_argument);
  EXPECT_THROW(transformer_forward(p, Matrix(0, 5)), std::invalid_argument);
}

TEST(Transformer, JsonRoundTrip) {
  Rng rng(6);
  const auto p = init_transformer(rng, small_dims());
  const auto j = to_json(p);
  const auto back = transformer_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back, p);
  Vector flat = flatten(p);
  TransformerParams q = p;
  for (double& v : flat) v *= 2.0;
  unflatten(q, flat);
  EXPECT_EQ(flatten(q), flat);
}

TEST(Transformer, GoldenFixture) {
  std::ifstream in(std::string(PROTOADAPT_FIXTURE_DIR) + "/transformer_golden.json");
  ASSERT_TRUE(in) << "fixture missing";
  const auto fx = nlohmann::json::parse(in);
  Rng rng(fx.at("seed").get<std::uint64_t>());
  const auto p = init_transformer(rng, TransformerDims{});
  Rng input_rng(fx.at("input_seed").get<std::uint64_t>());
  const Matrix x = randn(input_rng, fx.at("tokens").get<std::size_t>(), 16);
  const Matrix out = transformer_forward(p, x);
  ASSERT_TRUE(all_finite(out.values()));
  const auto want = fx.at("output").get<std::vector<Vector>>();
  ASSERT_EQ(want.size(), out.rows());
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) EXPECT_NEAR(out(i, j), want[i][j], 1e-12);
  EXPECT_LT(norm(out.values()), fx.at("norm_bound").get<double>());
}
