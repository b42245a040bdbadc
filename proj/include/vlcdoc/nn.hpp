// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vlcdoc/autodiff.hpp"
#include "vlcdoc/random.hpp"

namespace vlcdoc {

using NamedParams = std::vector<std::pair<std::string, Parameter*>>;

struct LinearParams {
  Parameter weight;  // [d_in, d_out]
  Parameter bias;    // [d_out]

  std::size_t d_in() const { return weight.value.dim(0); }
  std::size_t d_out() const { return weight.value.dim(1); }

  void collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

/// Xavier-uniform weights, zero bias.
inline LinearParams make_linear(std::size_t d_in, std::size_t d_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  Tensor w(Shape{d_in, d_out});
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return LinearParams{Parameter(std::move(w)), Parameter(Tensor(Shape{d_out}))};
}

inline Var linear(Tape& t, const LinearParams& p, const Var& x) {
  if (x.shape().empty() || x.shape().back() != p.d_in()) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not end in d_in=" +
                     std::to_string(p.d_in()));
  }
  return add_broadcast(matmul(x, t.param(p.weight)), t.param(p.bias));
}

struct LayerNormParams {
  Parameter gamma;
  Parameter beta;
  double epsilon = 1e-5;

  void collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }
};

inline LayerNormParams make_layer_norm(std::size_t d, double epsilon = 1e-5) {
  if (!(epsilon > 0.0)) throw ConfigError("layer norm epsilon must be positive");
  return LayerNormParams{Parameter(Tensor::ones(Shape{d})), Parameter(Tensor::zeros(Shape{d})), epsilon};
}

inline Var layer_norm(Tape& t, const LayerNormParams& p, const Var& x) {
  if (x.shape().empty() || x.shape().back() < 2) {
    throw ShapeError("layer_norm: feature dimension must be at least 2, got " + to_string(x.shape()));
  }
  return layer_norm(x, t.param(p.gamma), t.param(p.beta), p.epsilon);
}

struct FeedForwardParams {
  LinearParams up;
  LinearParams down;

  void collect(const std::string& prefix, NamedParams& out) {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }
};

inline FeedForwardParams make_feed_forward(std::size_t d, std::size_t hidden, Rng& rng) {
  return FeedForwardParams{make_linear(d, hidden, rng), make_linear(hidden, d, rng)};
}

/// linear -> GELU -> linear
inline Var feed_forward(Tape& t, const FeedForwardParams& p, const Var& x) {
  return linear(t, p.down, gelu(linear(t, p.up, x)));
}

struct MHAParams {
  LinearParams query;
  LinearParams key;
  LinearParams value;
  LinearParams output;
  std::size_t heads = 1;

  std::size_t d_model() const { return query.d_in(); }
  std::size_t d_k() const { return d_model() / heads; }

  void collect(const std::string& prefix, NamedParams& out) {
    query.collect(prefix + ".q", out);
    key.collect(prefix + ".k", out);
    value.collect(prefix + ".v", out);
    output.collect(prefix + ".o", out);
  }
};

inline MHAParams make_mha(std::size_t d_model, std::size_t heads, Rng& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MHAParams p;
  p.query = make_linear(d_model, d_model, rng);
  p.key = make_linear(d_model, d_model, rng);
  p.value = make_linear(d_model, d_model, rng);
  p.output = make_linear(d_model, d_model, rng);
  p.heads = heads;
  return p;
}

/// Multi-head scaled dot-product attention. Queries come from `q_src`, keys
/// and values from `kv_src`; both are [B, m, d] (or unbatched [m, d]).
/// Keys with a zero mask flag get no weight. When `weights` is non-null it
/// receives the per-head attention matrix [B, h, m_q, m_kv].
inline Var multi_head_attention(Tape& t, const MHAParams& p, const Var& q_src, const Var& kv_src,
                                const KeyMask* mask = nullptr, Var* weights = nullptr) {
  const Shape& sq = q_src.shape();
  const Shape& skv = kv_src.shape();
  const bool unbatched = sq.size() == 2;
  const std::size_t rank = unbatched ? 2 : 3;
  if (sq.size() != rank || skv.size() != rank || sq.back() != p.d_model() || skv.back() != p.d_model() ||
      (rank == 3 && sq[0] != skv[0])) {
    throw ShapeError("multi_head_attention: query source " + to_string(sq) + " and key/value source " +
                     to_string(skv) + " incompatible with d_model=" + std::to_string(p.d_model()));
  }
  Var q_in = unbatched ? reshape(q_src, Shape{1, sq[0], sq[1]}) : q_src;
  Var kv_in = unbatched ? reshape(kv_src, Shape{1, skv[0], skv[1]}) : kv_src;
  if (mask && (mask->batch != q_in.shape()[0] || mask->keys != kv_in.shape()[1])) {
    throw ShapeError("multi_head_attention: key mask length does not match key/value sequence");
  }

  Var q = split_heads(linear(t, p.query, q_in), p.heads);
  Var k = split_heads(linear(t, p.key, kv_in), p.heads);
  Var v = split_heads(linear(t, p.value, kv_in), p.heads);
  Var scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(p.d_k())));
  Var attn = softmax_last(scores, mask);
  if (weights) *weights = attn;
  Var out = linear(t, p.output, merge_heads(matmul(attn, v)));
  return unbatched ? reshape(out, sq) : out;
}

enum class Activation { gelu, identity };

struct ProjectionHeadParams {
  LinearParams hidden;  // d_f -> d_h
  LinearParams out;     // d_h -> d_p
  Activation activation = Activation::gelu;

  void collect(const std::string& prefix, NamedParams& out_list) {
    hidden.collect(prefix + ".hidden", out_list);
    out.collect(prefix + ".out", out_list);
  }
};

inline ProjectionHeadParams make_projection_head(std::size_t d_f, std::size_t d_h, std::size_t d_p, Rng& rng,
                                                 Activation act = Activation::gelu) {
  if (d_h < 1 || d_p < 2) throw ConfigError("projection head needs d_h >= 1 and d_p >= 2");
  return ProjectionHeadParams{make_linear(d_f, d_h, rng), make_linear(d_h, d_p, rng), act};
}

/// One-hidden-layer MLP followed by L2 normalisation of the last axis.
inline Var project_and_normalize(Tape& t, const ProjectionHeadParams& p, const Var& x) {
  Var h = linear(t, p.hidden, x);
  if (p.activation == Activation::gelu) h = gelu(h);
  return l2_normalize_last(linear(t, p.out, h));
}

}  // namespace vlcdoc
