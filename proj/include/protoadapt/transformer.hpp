#pragma once

// Token embedding followed by a stack of pre-norm encoder blocks
// (multi-head self-attention + GELU feed-forward, both residual). Tokens are
// an unordered set of ROI features: there is no positional encoding, so the
// whole stack is permutation equivariant over rows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoadapt/numcore.hpp"

namespace protoadapt {

struct TransformerDims {
  std::size_t input_dim = 16;
  std::size_t model_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  double init_scale = 1.0;

  std::size_t head_dim() const { return model_dim / heads; }

  friend bool operator==(const TransformerDims&, const TransformerDims&) = default;
};

struct AttentionHead {
  Matrix query;  // D x d_h
  Matrix key;    // D x d_h
  Matrix value;  // D x d_h

  friend bool operator==(const AttentionHead&, const AttentionHead&) = default;
};

/// Pre-norm multi-head self-attention sublayer: x + concat(heads(LN(x))) W_o.
struct AttentionBlock {
  std::vector<AttentionHead> heads;
  Matrix output;  // D x D
  Vector norm_gain;
  Vector norm_bias;

  std::size_t dim() const { return output.rows(); }

  friend bool operator==(const AttentionBlock&, const AttentionBlock&) = default;
};

struct EncoderParams {
  AttentionBlock attention;
  Matrix ff_in;  // D x D_ff
  Vector ff_in_bias;
  Matrix ff_out;  // D_ff x D
  Vector ff_out_bias;
  Vector ff_norm_gain;
  Vector ff_norm_bias;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct TransformerParams {
  TransformerDims dims;
  Matrix embed;  // F_in x D
  Vector embed_bias;
  std::vector<EncoderParams> encoders;

  std::size_t parameter_count() const {
    std::size_t n = embed.size() + embed_bias.size();
    for (const auto& e : encoders) {
      for (const auto& h : e.attention.heads) n += h.query.size() + h.key.size() + h.value.size();
      n += e.attention.output.size() + e.attention.norm_gain.size() +
           e.attention.norm_bias.size();
      n += e.ff_in.size() + e.ff_in_bias.size() + e.ff_out.size() + e.ff_out_bias.size();
      n += e.ff_norm_gain.size() + e.ff_norm_bias.size();
    }
    return n;
  }

  friend bool operator==(const TransformerParams&, const TransformerParams&) = default;
};

/// Calls fn(std::span<double>) on every weight tensor in a fixed order.
template <typename Params, typename Fn>
  requires std::is_same_v<std::remove_const_t<Params>, TransformerParams>
void for_each_tensor(Params& p, Fn&& fn) {
  fn(p.embed.values());
  fn(std::span(p.embed_bias));
  for (auto& e : p.encoders) {
    for (auto& h : e.attention.heads) {
      fn(h.query.values());
      fn(h.key.values());
      fn(h.value.values());
    }
    fn(e.attention.output.values());
    fn(std::span(e.attention.norm_gain));
    fn(std::span(e.attention.norm_bias));
    fn(e.ff_in.values());
    fn(std::span(e.ff_in_bias));
    fn(e.ff_out.values());
    fn(std::span(e.ff_out_bias));
    fn(std::span(e.ff_norm_gain));
    fn(std::span(e.ff_norm_bias));
  }
}

inline Vector flatten(const TransformerParams& p) {
  Vector out;
  out.reserve(p.parameter_count());
  for_each_tensor(p, [&](auto t) { out.insert(out.end(), t.begin(), t.end()); });
  return out;
}

inline void unflatten(TransformerParams& p, std::span<const double> flat) {
  if (flat.size() != p.parameter_count()) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(p.parameter_count()) +
                                " values, got " + std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for_each_tensor(p, [&](std::span<double> t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.begin());
    offset += t.size();
  });
}

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

/// Normal(0, init_scale^2 / fan_in).
inline Matrix init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out, double init_scale) {
  return scale(randn(rng, fan_in, fan_out), init_scale / std::sqrt(static_cast<double>(fan_in)));
}

inline void check_heads(std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw std::invalid_argument("model dim " + std::to_string(dim) +
                                " is not divisible by head count " + std::to_string(heads));
  }
}

}  // namespace detail

inline AttentionBlock init_attention_block(Rng& rng, std::size_t dim, std::size_t heads,
                                           double init_scale) {
  detail::check_heads(dim, heads);
  if (!(init_scale >= 0.0)) throw std::invalid_argument("init_scale must be non-negative");
  const std::size_t dh = dim / heads;
  AttentionBlock block;
  block.heads.resize(heads);
  for (auto& h : block.heads) {
    h.query = detail::init_weight(rng, dim, dh, init_scale);
    h.key = detail::init_weight(rng, dim, dh, init_scale);
    h.value = detail::init_weight(rng, dim, dh, init_scale);
  }
  block.output = detail::init_weight(rng, dim, dim, init_scale);
  block.norm_gain.assign(dim, 1.0);
  block.norm_bias.assign(dim, 0.0);
  return block;
}

inline TransformerParams init_transformer(Rng& rng, const TransformerDims& dims) {
  detail::check_heads(dims.model_dim, dims.heads);
  if (dims.layers == 0) throw std::invalid_argument("transformer needs at least one encoder");
  if (dims.input_dim == 0 || dims.ff_dim == 0) {
    throw std::invalid_argument("transformer dimensions must be positive");
  }
  if (!(dims.init_scale >= 0.0)) throw std::invalid_argument("init_scale must be non-negative");

  TransformerParams p;
  p.dims = dims;
  p.embed = detail::init_weight(rng, dims.input_dim, dims.model_dim, dims.init_scale);
  p.embed_bias.assign(dims.model_dim, 0.0);
  p.encoders.reserve(dims.layers);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    EncoderParams e;
    e.attention = init_attention_block(rng, dims.model_dim, dims.heads, dims.init_scale);
    e.ff_in = detail::init_weight(rng, dims.model_dim, dims.ff_dim, dims.init_scale);
    e.ff_in_bias.assign(dims.ff_dim, 0.0);
    e.ff_out = detail::init_weight(rng, dims.ff_dim, dims.model_dim, dims.init_scale);
    e.ff_out_bias.assign(dims.model_dim, 0.0);
    e.ff_norm_gain.assign(dims.model_dim, 1.0);
    e.ff_norm_bias.assign(dims.model_dim, 0.0);
    p.encoders.push_back(std::move(e));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Row-stochastic attention matrix softmax(Q K^T / sqrt(d_h)).
inline Matrix attention_weights(const Matrix& embeds, const AttentionHead& head) {
  if (embeds.cols() != head.query.rows()) {
    throw std::invalid_argument("attention: token width " + std::to_string(embeds.cols()) +
                                " vs projection " + head.query.shape_string());
  }
  const Matrix q = matmul(embeds, head.query);
  const Matrix k = matmul(embeds, head.key);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head.query.cols()));
  return softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
}

/// One head: A V with V = embeds W_v. Shape N x d_h.
inline Matrix attention_head(const Matrix& embeds, const AttentionHead& head) {
  return matmul(attention_weights(embeds, head), matmul(embeds, head.value));
}

inline Matrix multi_head_attention(const AttentionBlock& block, const Matrix& x) {
  std::vector<Matrix> outs;
  outs.reserve(block.heads.size());
  for (const auto& h : block.heads) outs.push_back(attention_head(x, h));
  return matmul(hconcat(outs), block.output);
}

inline Matrix attention_block_forward(const AttentionBlock& block, const Matrix& x) {
  if (x.cols() != block.dim()) {
    throw std::invalid_argument("attention block expects width " + std::to_string(block.dim()) +
                                ", got " + x.shape_string());
  }
  const Matrix normed = layer_norm_rows(x, block.norm_gain, block.norm_bias);
  return add(x, multi_head_attention(block, normed));
}

inline Matrix feed_forward(const EncoderParams& p, const Matrix& x) {
  const Matrix hidden = gelu(add_row_vector(matmul(x, p.ff_in), p.ff_in_bias));
  return add_row_vector(matmul(hidden, p.ff_out), p.ff_out_bias);
}

inline Matrix encoder_forward(const EncoderParams& p, const Matrix& x) {
  const Matrix y = attention_block_forward(p.attention, x);
  const Matrix normed = layer_norm_rows(y, p.ff_norm_gain, p.ff_norm_bias);
  return add(y, feed_forward(p, normed));
}

inline Matrix embed_tokens(const TransformerParams& p, const Matrix& tokens) {
  if (tokens.cols() != p.dims.input_dim) {
    throw std::invalid_argument("transformer expects " + std::to_string(p.dims.input_dim) +
                                " feature columns, got " + tokens.shape_string());
  }
  return add_row_vector(matmul(tokens, p.embed), p.embed_bias);
}

/// Attentive features, one row per input token.
inline Matrix transformer_forward(const TransformerParams& p, const Matrix& tokens) {
  if (tokens.rows() == 0) throw std::invalid_argument("transformer: empty token batch");
  Matrix x = embed_tokens(p, tokens);
  for (const auto& e : p.encoders) x = encoder_forward(e, x);
  return x;
}

// ---------------------------------------------------------------------------
// Checkpoint serialisation: {"config": {...}, "weights": {...}}.

namespace detail {

inline nlohmann::ordered_json matrix_to_json(const Matrix& m) {
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    rows.push_back(Vector(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, std::size_t rows, std::size_t cols,
                               const std::string& what) {
  if (!j.is_array() || j.size() != rows) {
    throw std::invalid_argument(what + ": expected " + std::to_string(rows) + " rows");
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& r = j.at(i);
    if (!r.is_array() || r.size() != cols) {
      throw std::invalid_argument(what + ": expected " + std::to_string(cols) + " columns");
    }
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = r.at(c).get<double>();
  }
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j, std::size_t n, const std::string& what) {
  if (!j.is_array() || j.size() != n) {
    throw std::invalid_argument(what + ": expected length " + std::to_string(n));
  }
  return j.get<Vector>();
}

inline nlohmann::ordered_json attention_block_to_json(const AttentionBlock& b) {
  nlohmann::ordered_json j;
  auto heads = nlohmann::ordered_json::array();
  for (const auto& h : b.heads) {
    nlohmann::ordered_json hj;
    hj["query"] = matrix_to_json(h.query);
    hj["key"] = matrix_to_json(h.key);
    hj["value"] = matrix_to_json(h.value);
    heads.push_back(std::move(hj));
  }
  j["heads"] = std::move(heads);
  j["output"] = matrix_to_json(b.output);
  j["norm_gain"] = b.norm_gain;
  j["norm_bias"] = b.norm_bias;
  return j;
}

inline AttentionBlock attention_block_from_json(const nlohmann::json& j, std::size_t dim,
                                                std::size_t heads) {
  const std::size_t dh = dim / heads;
  AttentionBlock b;
  const auto& hs = j.at("heads");
  if (!hs.is_array() || hs.size() != heads) {
    throw std::invalid_argument("attention block: expected " + std::to_string(heads) + " heads");
  }
  for (const auto& hj : hs) {
    b.heads.push_back({matrix_from_json(hj.at("query"), dim, dh, "query"),
                       matrix_from_json(hj.at("key"), dim, dh, "key"),
                       matrix_from_json(hj.at("value"), dim, dh, "value")});
  }
  b.output = matrix_from_json(j.at("output"), dim, dim, "output");
  b.norm_gain = vector_from_json(j.at("norm_gain"), dim, "norm_gain");
  b.norm_bias = vector_from_json(j.at("norm_bias"), dim, "norm_bias");
  return b;
}

}  // namespace detail

inline nlohmann::ordered_json dims_to_json(const TransformerDims& d) {
  nlohmann::ordered_json j;
  j["input_dim"] = d.input_dim;
  j["model_dim"] = d.model_dim;
  j["ff_dim"] = d.ff_dim;
  j["heads"] = d.heads;
  j["layers"] = d.layers;
  j["init_scale"] = d.init_scale;
  return j;
}

inline TransformerDims dims_from_json(const nlohmann::json& j) {
  TransformerDims d;
  d.input_dim = j.at("input_dim").get<std::size_t>();
  d.model_dim = j.at("model_dim").get<std::size_t>();
  d.ff_dim = j.at("ff_dim").get<std::size_t>();
  d.heads = j.at("heads").get<std::size_t>();
  d.layers = j.at("layers").get<std::size_t>();
  d.init_scale = j.at("init_scale").get<double>();
  detail::check_heads(d.model_dim, d.heads);
  return d;
}

inline nlohmann::ordered_json to_json(const TransformerParams& p) {
  nlohmann::ordered_json weights;
  weights["embed"] = detail::matrix_to_json(p.embed);
  weights["embed_bias"] = p.embed_bias;
  auto encoders = nlohmann::ordered_json::array();
  for (const auto& e : p.encoders) {
    nlohmann::ordered_json ej;
    ej["attention"] = detail::attention_block_to_json(e.attention);
    ej["ff_in"] = detail::matrix_to_json(e.ff_in);
    ej["ff_in_bias"] = e.ff_in_bias;
    ej["ff_out"] = detail::matrix_to_json(e.ff_out);
    ej["ff_out_bias"] = e.ff_out_bias;
    ej["ff_norm_gain"] = e.ff_norm_gain;
    ej["ff_norm_bias"] = e.ff_norm_bias;
    encoders.push_back(std::move(ej));
  }
  weights["encoders"] = std::move(encoders);

  nlohmann::ordered_json j;
  j["config"] = dims_to_json(p.dims);
  j["weights"] = std::move(weights);
  return j;
}

inline TransformerParams transformer_from_json(const nlohmann::json& j) {
  TransformerParams p;
  p.dims = dims_from_json(j.at("config"));
  const auto& d = p.dims;
  const auto& w = j.at("weights");
  p.embed = detail::matrix_from_json(w.at("embed"), d.input_dim, d.model_dim, "embed");
  p.embed_bias = detail::vector_from_json(w.at("embed_bias"), d.model_dim, "embed_bias");
  const auto& encs = w.at("encoders");
  if (!encs.is_array() || encs.size() != d.layers) {
    throw std::invalid_argument("transformer checkpoint: encoder count does not match config");
  }
  for (const auto& ej : encs) {
    EncoderParams e;
    e.attention = detail::attention_block_from_json(ej.at("attention"), d.model_dim, d.heads);
    e.ff_in = detail::matrix_from_json(ej.at("ff_in"), d.model_dim, d.ff_dim, "ff_in");
    e.ff_in_bias = detail::vector_from_json(ej.at("ff_in_bias"), d.ff_dim, "ff_in_bias");
    e.ff_out = detail::matrix_from_json(ej.at("ff_out"), d.ff_dim, d.model_dim, "ff_out");
    e.ff_out_bias = detail::vector_from_json(ej.at("ff_out_bias"), d.model_dim, "ff_out_bias");
    e.ff_norm_gain = detail::vector_from_json(ej.at("ff_norm_gain"), d.model_dim, "ff_norm_gain");
    e.ff_norm_bias = detail::vector_from_json(ej.at("ff_norm_bias"), d.model_dim, "ff_norm_bias");
    p.encoders.push_back(std::move(e));
  }
  return p;
}

}  // namespace protoadapt
