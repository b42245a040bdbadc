// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vlcdoc/cross_modal.hpp"
#include "vlcdoc/data_synth.hpp"
#include "vlcdoc/encoders.hpp"
#include "vlcdoc/nn.hpp"

namespace vlcdoc {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t d_ff = 64;
  std::size_t d_h = 32;
  std::size_t d_p = 16;
  double ln_epsilon = 1e-5;
  bool use_inter = true;
  bool use_intra = true;

  std::size_t d_f() const { return encoder.d_f; }

  void validate() const {
    encoder.validate();
    if (heads < 1 || d_f() % heads != 0) throw ConfigError("d_f must be divisible by the head count");
    if (depth < 1) throw ConfigError("depth must be at least 1");
    if (d_ff < 1 || d_h < 1 || d_p < 2) throw ConfigError("d_ff, d_h must be >= 1 and d_p >= 2");
    if (!(ln_epsilon > 0.0)) throw ConfigError("layer norm epsilon must be positive");
  }
};

/// Both encoders, the cross-modal stack and one projection head per modality.
struct Model {
  ModelConfig config;
  EncoderParams encoders;
  CrossModalStack stack;
  ProjectionHeadParams head_vision;
  ProjectionHeadParams head_language;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Model m;
    m.config = cfg;
    m.encoders = make_encoders(cfg.encoder, rng);
    CrossModalDims dims{cfg.d_f(), cfg.heads, cfg.d_ff, cfg.depth, cfg.ln_epsilon};
    m.stack = make_cross_modal_stack(dims, rng);
    m.stack.use_inter = cfg.use_inter;
    m.stack.use_intra = cfg.use_intra;
    m.head_vision = make_projection_head(cfg.d_f(), cfg.d_h, cfg.d_p, rng);
    m.head_language = make_projection_head(cfg.d_f(), cfg.d_h, cfg.d_p, rng);
    return m;
  }

  /// Stable, ordered list of every trainable tensor.
  NamedParams named_parameters() {
    NamedParams out;
    encoders.collect("encoders", out);
    stack.collect("stack", out);
    head_vision.collect("head_vision", out);
    head_language.collect("head_language", out);
    return out;
  }

  std::vector<std::pair<std::string, const Parameter*>> named_parameters() const {
    std::vector<std::pair<std::string, const Parameter*>> out;
    for (auto& [name, p] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(name, p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p->value.size();
    return n;
  }
};

/// Full forward pass over a batch of records.
inline StackOutput model_forward(Tape& t, const Model& m, std::span<const CorpusRecord* const> batch) {
  std::vector<const DocumentImage*> images;
  std::vector<const TokenSequence*> seqs;
  images.reserve(batch.size());
  seqs.reserve(batch.size());
  for (const CorpusRecord* r : batch) {
    images.push_back(&r->image);
    seqs.push_back(&r->tokens);
  }
  Var vision = patch_embed(t, m.config.encoder, m.encoders, images);
  TextFeatures text = token_embed(t, m.config.encoder, m.encoders, seqs);
  return stack_forward(t, m.stack, m.head_vision, m.head_language, vision, text.features, &text.mask);
}

inline std::vector<Label> labels_of(std::span<const CorpusRecord* const> batch) {
  std::vector<Label> y;
  y.reserve(batch.size());
  for (const CorpusRecord* r : batch) y.push_back(r->label);
  return y;
}

}  // namespace vlcdoc
