// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vlcdoc/autodiff.hpp"
#include "vlcdoc/encoders.hpp"
#include "vlcdoc/nn.hpp"

namespace vlcdoc {

/// Inter-modality cross-attention. One layer norm per modality is shared by
/// both residual sub-layers of that modality; the feed-forward sub-layer is
/// shared across modalities.
struct InterMCAParams {
  MHAParams language_to_vision;  // queries V, keys/values L
  MHAParams vision_to_language;  // queries L, keys/values V
  LayerNormParams ln_vision;
  LayerNormParams ln_language;
  FeedForwardParams ff;

  void collect(const std::string& prefix, NamedParams& out) {
    language_to_vision.collect(prefix + ".l2v", out);
    vision_to_language.collect(prefix + ".v2l", out);
    ln_vision.collect(prefix + ".ln_v", out);
    ln_language.collect(prefix + ".ln_l", out);
    ff.collect(prefix + ".ff", out);
  }
};

/// Intra-modality gated self-attention for one modality.
struct IntraModalityParams {
  LinearParams fuse;  // f_FC, d_f -> d_f
  MHAParams self_attention;
  LayerNormParams ln_attention;
  LayerNormParams ln_output;
  FeedForwardParams ff;

  void collect(const std::string& prefix, NamedParams& out) {
    fuse.collect(prefix + ".fuse", out);
    self_attention.collect(prefix + ".attn", out);
    ln_attention.collect(prefix + ".ln_attn", out);
    ln_output.collect(prefix + ".ln_out", out);
    ff.collect(prefix + ".ff", out);
  }
};

struct IntraMSAParams {
  IntraModalityParams vision;
  IntraModalityParams language;

  void collect(const std::string& prefix, NamedParams& out) {
    vision.collect(prefix + ".vision", out);
    language.collect(prefix + ".language", out);
  }
};

struct CrossModalBlock {
  InterMCAParams inter;
  IntraMSAParams intra;
};

/// `depth` (InterMCA, IntraMSA) pairs, unshared. A disabled block kind is
/// replaced by identity pass-through; its parameters still exist.
struct CrossModalStack {
  std::vector<CrossModalBlock> blocks;
  bool use_inter = true;
  bool use_intra = true;

  std::size_t depth() const { return blocks.size(); }

  void collect(const std::string& prefix, NamedParams& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      blocks[i].inter.collect(p + ".inter", out);
      blocks[i].intra.collect(p + ".intra", out);
    }
  }
};

struct CrossModalDims {
  std::size_t d_f = 32;
  std::size_t heads = 4;
  std::size_t d_ff = 64;
  std::size_t depth = 2;
  double ln_epsilon = 1e-5;
};

inline InterMCAParams make_inter_mca(const CrossModalDims& d, Rng& rng) {
  InterMCAParams p;
  p.language_to_vision = make_mha(d.d_f, d.heads, rng);
  p.vision_to_language = make_mha(d.d_f, d.heads, rng);
  p.ln_vision = make_layer_norm(d.d_f, d.ln_epsilon);
  p.ln_language = make_layer_norm(d.d_f, d.ln_epsilon);
  p.ff = make_feed_forward(d.d_f, d.d_ff, rng);
  return p;
}

inline IntraModalityParams make_intra_modality(const CrossModalDims& d, Rng& rng) {
  IntraModalityParams p;
  p.fuse = make_linear(d.d_f, d.d_f, rng);
  p.self_attention = make_mha(d.d_f, d.heads, rng);
  p.ln_attention = make_layer_norm(d.d_f, d.ln_epsilon);
  p.ln_output = make_layer_norm(d.d_f, d.ln_epsilon);
  p.ff = make_feed_forward(d.d_f, d.d_ff, rng);
  return p;
}

inline CrossModalStack make_cross_modal_stack(const CrossModalDims& d, Rng& rng) {
  if (d.depth < 1) throw ConfigError("cross-modal stack depth must be at least 1");
  CrossModalStack s;
  for (std::size_t i = 0; i < d.depth; ++i) {
    CrossModalBlock b;
    b.inter = make_inter_mca(d, rng);
    b.intra.vision = make_intra_modality(d, rng);
    b.intra.language = make_intra_modality(d, rng);
    s.blocks.push_back(std::move(b));
  }
  return s;
}

namespace detail {
inline void require_same_features(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": modality shapes differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}
}  // namespace detail

struct ModalityPair {
  Var vision;
  Var language;
};

/// V_att = LN_V(CrossAttn_{L->V}(V) + V), V' = LN_V(FF(V_att) + V_att), and
/// symmetrically for L with queries from L over keys/values from V.
/// `text_mask` masks padded language rows wherever they act as keys.
inline ModalityPair inter_mca(Tape& t, const InterMCAParams& p, const Var& vision, const Var& language,
                              const KeyMask* text_mask) {
  detail::require_same_features("inter_mca", vision, language);
  Var v_att = layer_norm(
      t, p.ln_vision, add(multi_head_attention(t, p.language_to_vision, vision, language, text_mask), vision));
  Var v_next = layer_norm(t, p.ln_vision, add(feed_forward(t, p.ff, v_att), v_att));
  Var l_att = layer_norm(
      t, p.ln_language, add(multi_head_attention(t, p.vision_to_language, language, vision, nullptr), language));
  Var l_next = layer_norm(t, p.ln_language, add(feed_forward(t, p.ff, l_att), l_att));
  return {v_next, l_next};
}

/// f_FC((next ⊙ prev) + prev)
inline Var intra_fusion(Tape& t, const IntraModalityParams& p, const Var& prev, const Var& next) {
  detail::require_same_features("intra_msa", prev, next);
  return linear(t, p.fuse, add(mul(next, prev), prev));
}

/// Gated fusion of the cross-attended features with the block input,
/// followed by a self-attention transformer unit (attention + residual/norm,
/// feed-forward + residual/norm).
inline Var intra_msa(Tape& t, const IntraModalityParams& p, const Var& prev, const Var& next,
                     const KeyMask* mask) {
  Var fused = intra_fusion(t, p, prev, next);
  Var att = layer_norm(t, p.ln_attention, add(multi_head_attention(t, p.self_attention, fused, fused, mask), fused));
  return layer_norm(t, p.ln_output, add(feed_forward(t, p.ff, att), att));
}

/// One (InterMCA, IntraMSA) block with ablation switches.
inline ModalityPair cross_modal_block(Tape& t, const CrossModalBlock& b, bool use_inter, bool use_intra,
                                      const Var& vision, const Var& language, const KeyMask* text_mask) {
  detail::require_same_features("cross_modal_block", vision, language);
  ModalityPair next{vision, language};
  if (use_inter) next = inter_mca(t, b.inter, vision, language, text_mask);
  if (!use_intra) return next;
  return {intra_msa(t, b.intra.vision, vision, next.vision, nullptr),
          intra_msa(t, b.intra.language, language, next.language, text_mask)};
}

struct StackOutput {
  Var vision;           // final features [B, m, d_f]
  Var language;         // final features [B, m, d_f]
  Var vision_pooled;    // [B, d_f]
  Var language_pooled;  // [B, d_f]
  Var vision_embedding;    // unit norm [B, d_p]
  Var language_embedding;  // unit norm [B, d_p]
};

/// Runs every block in order, pools the [CLS] row of each modality and maps
/// it through that modality's projection head.
inline StackOutput stack_forward(Tape& t, const CrossModalStack& s, const ProjectionHeadParams& head_vision,
                                 const ProjectionHeadParams& head_language, const Var& vision,
                                 const Var& language, const KeyMask* text_mask) {
  if (s.depth() < 1) throw ConfigError("cross-modal stack depth must be at least 1");
  ModalityPair cur{vision, language};
  for (const CrossModalBlock& b : s.blocks) {
    cur = cross_modal_block(t, b, s.use_inter, s.use_intra, cur.vision, cur.language, text_mask);
  }
  StackOutput out;
  out.vision = cur.vision;
  out.language = cur.language;
  out.vision_pooled = pool_cls(cur.vision);
  out.language_pooled = pool_cls(cur.language);
  out.vision_embedding = project_and_normalize(t, head_vision, out.vision_pooled);
  out.language_embedding = project_and_normalize(t, head_language, out.language_pooled);
  return out;
}

}  // namespace vlcdoc
