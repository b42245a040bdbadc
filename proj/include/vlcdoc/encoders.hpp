// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vlcdoc/autodiff.hpp"
#include "vlcdoc/nn.hpp"
#include "vlcdoc/random.hpp"

namespace vlcdoc {

/// H x W x C image, row-major with channels innermost, values in [0, 1].
/// Stored as f32 so corpus files round-trip bit-exactly.
struct DocumentImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const DocumentImage&) const = default;
};

namespace tokens {
inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kCls = 1;
inline constexpr std::uint32_t kSep = 2;
inline constexpr std::uint32_t kFirstContent = 3;
}  // namespace tokens

/// Fixed-length token ids: [CLS] content... [SEP] [PAD]...
struct TokenSequence {
  std::vector<std::uint32_t> ids;

  std::size_t length() const { return ids.size(); }
  bool real(std::size_t i) const { return ids[i] != tokens::kPad; }
  std::size_t real_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) n += real(i);
    return n;
  }
  bool operator==(const TokenSequence&) const = default;
};

/// Wraps raw content ids with [CLS]/[SEP], truncating the content so that the
/// result fits `n_max`, then pads with [PAD].
inline TokenSequence make_token_sequence(std::span<const std::uint32_t> content, std::size_t n_max) {
  if (n_max < 2) throw ConfigError("n_max must leave room for [CLS] and [SEP]");
  TokenSequence seq;
  seq.ids.reserve(n_max);
  seq.ids.push_back(tokens::kCls);
  const std::size_t keep = std::min(content.size(), n_max - 2);
  seq.ids.insert(seq.ids.end(), content.begin(), content.begin() + static_cast<std::ptrdiff_t>(keep));
  seq.ids.push_back(tokens::kSep);
  seq.ids.resize(n_max, tokens::kPad);
  return seq;
}

struct EncoderConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t vocab_size = 64;
  std::size_t n_max = 17;
  std::size_t d_f = 32;

  std::size_t num_patches() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t rows() const { return num_patches() + 1; }

  void validate() const {
    if (patch < 1) throw ConfigError("patch size must be at least 1");
    if (height % patch != 0 || width % patch != 0) {
      throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by patch size " + std::to_string(patch));
    }
    if (n_max != rows()) {
      throw ConfigError("n_max must equal 1 + H*W/P^2 = " + std::to_string(rows()) + ", got " +
                        std::to_string(n_max));
    }
    if (vocab_size <= tokens::kFirstContent) throw ConfigError("vocabulary too small for reserved tokens");
    if (d_f < 2) throw ConfigError("d_f must be at least 2");
  }
};

struct EncoderParams {
  LinearParams patch_proj;  // P^2*C -> d_f
  Parameter vision_cls;     // [d_f]
  Parameter vision_pos;     // [m, d_f]
  Parameter token_table;    // [vocab, d_f]
  Parameter text_pos;       // [n_max, d_f]

  void collect(const std::string& prefix, NamedParams& out) {
    patch_proj.collect(prefix + ".patch_proj", out);
    out.emplace_back(prefix + ".vision_cls", &vision_cls);
    out.emplace_back(prefix + ".vision_pos", &vision_pos);
    out.emplace_back(prefix + ".token_table", &token_table);
    out.emplace_back(prefix + ".text_pos", &text_pos);
  }
};

inline EncoderParams make_encoders(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  auto small_normal = [&](Shape s) {
    Tensor t(std::move(s));
    for (double& v : t.data()) v = 0.02 * rng.normal();
    return Parameter(std::move(t));
  };
  EncoderParams p;
  p.patch_proj = make_linear(cfg.patch_dim(), cfg.d_f, rng);
  p.vision_cls = small_normal({cfg.d_f});
  p.vision_pos = small_normal({cfg.rows(), cfg.d_f});
  {
    const double limit = std::sqrt(6.0 / static_cast<double>(cfg.vocab_size + cfg.d_f));
    Tensor t(Shape{cfg.vocab_size, cfg.d_f});
    for (double& v : t.data()) v = rng.uniform(-limit, limit);
    p.token_table = Parameter(std::move(t));
  }
  p.text_pos = small_normal({cfg.n_max, cfg.d_f});
  return p;
}

/// Splits each image into N = HW/P^2 flattened patches: [B, N, P^2*C].
/// Patches are ordered row-major; inside a patch the layout is (py, px, c).
inline Tensor patchify(const EncoderConfig& cfg, std::span<const DocumentImage* const> images) {
  cfg.validate();
  const std::size_t P = cfg.patch, C = cfg.channels, gw = cfg.width / P, N = cfg.num_patches(),
                    D = cfg.patch_dim();
  Tensor out(Shape{images.size(), N, D});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const DocumentImage& img = *images[b];
    if (img.height != cfg.height || img.width != cfg.width || img.channels != C ||
        img.pixels.size() != cfg.height * cfg.width * C) {
      throw ConfigError("image of size " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                        std::to_string(img.channels) + " does not match encoder configuration");
    }
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t py0 = (n / gw) * P, px0 = (n % gw) * P;
      double* dst = out.data().data() + (b * N + n) * D;
      for (std::size_t py = 0; py < P; ++py)
        for (std::size_t px = 0; px < P; ++px)
          for (std::size_t c = 0; c < C; ++c) *dst++ = img.at(py0 + py, px0 + px, c);
    }
  }
  return out;
}

/// Patch features: project patches, prepend [CLS], add positions. [B, N+1, d_f].
inline Var patch_embed(Tape& t, const EncoderConfig& cfg, const EncoderParams& p,
                       std::span<const DocumentImage* const> images) {
  Var patches = t.constant(patchify(cfg, images));
  Var rows = prepend_row(t.param(p.vision_cls), linear(t, p.patch_proj, patches));
  return add_broadcast(rows, t.param(p.vision_pos));
}

struct TextFeatures {
  Var features;  // [B, n_max, d_f]
  KeyMask mask;  // real-token flags, [B, n_max]
};

inline TextFeatures token_embed(Tape& t, const EncoderConfig& cfg, const EncoderParams& p,
                                std::span<const TokenSequence* const> seqs) {
  std::vector<std::uint32_t> ids;
  ids.reserve(seqs.size() * cfg.n_max);
  KeyMask mask{seqs.size(), cfg.n_max, {}};
  mask.keep.reserve(seqs.size() * cfg.n_max);
  for (const TokenSequence* s : seqs) {
    if (s->length() != cfg.n_max) {
      throw DataError("token sequence of length " + std::to_string(s->length()) + " but n_max is " +
                      std::to_string(cfg.n_max));
    }
    for (std::size_t i = 0; i < s->length(); ++i) {
      ids.push_back(s->ids[i]);
      mask.keep.push_back(s->real(i) ? 1 : 0);
    }
  }
  Var emb = gather_rows(t.param(p.token_table), ids, Shape{seqs.size(), cfg.n_max});
  return {add_broadcast(emb, t.param(p.text_pos)), std::move(mask)};
}

/// Row 0, the [CLS] position: [..., m, d] -> [..., d].
inline Var pool_cls(const Var& features) { return select_row(features, 0); }

}  // namespace vlcdoc
