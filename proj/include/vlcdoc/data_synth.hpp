// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vlcdoc/binary_io.hpp"
#include "vlcdoc/encoders.hpp"
#include "vlcdoc/losses.hpp"
#include "vlcdoc/random.hpp"

namespace vlcdoc {

/// Parameters of the synthetic paired-document corpus. Each class owns a
/// patchwise intensity template (derived from `seed`) and a disjoint block of
/// `class_block_size` vocabulary ids.
struct CorpusSpec {
  std::uint32_t num_classes = 4;
  std::uint32_t per_class = 100;
  std::uint32_t height = 16;
  std::uint32_t width = 16;
  std::uint32_t channels = 1;
  std::uint32_t patch = 4;
  std::uint32_t vocab_size = 64;
  std::uint32_t n_max = 17;
  std::uint32_t class_block_size = 8;
  std::uint32_t min_content = 8;
  std::uint32_t max_content = 20;
  double class_token_prob = 0.6;  // chance a token comes from the class block
  double pixel_noise = 0.35;      // Gaussian std added to the template
  double token_corruption = 0.2;  // chance a token is replaced uniformly at random
  std::uint64_t seed = 0;

  bool operator==(const CorpusSpec&) const = default;

  EncoderConfig encoder_config(std::size_t d_f) const {
    EncoderConfig c;
    c.height = height;
    c.width = width;
    c.channels = channels;
    c.patch = patch;
    c.vocab_size = vocab_size;
    c.n_max = n_max;
    c.d_f = d_f;
    return c;
  }

  std::size_t num_patches() const { return patch ? (height / patch) * (width / patch) : 0; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("corpus needs at least 2 classes");
    if (per_class < 1) throw ConfigError("corpus needs at least 1 sample per class");
    if (channels < 1) throw ConfigError("images need at least one channel");
    if (patch < 1 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("image size is not divisible by the patch size");
    }
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(pixel_noise) || !unit(token_corruption) || !unit(class_token_prob)) {
      throw ConfigError("noise levels and probabilities must lie in [0, 1]");
    }
    if (class_block_size < 1) throw ConfigError("class token block must be non-empty");
    if (vocab_size < tokens::kFirstContent + static_cast<std::uint64_t>(num_classes) * class_block_size) {
      throw ConfigError("vocabulary of " + std::to_string(vocab_size) + " cannot hold " +
                        std::to_string(num_classes) + " disjoint blocks of " + std::to_string(class_block_size));
    }
    if (min_content > max_content) throw ConfigError("min_content exceeds max_content");
    if (n_max != num_patches() + 1) {
      throw ConfigError("n_max must equal 1 + H*W/P^2 so both modalities share one sequence length");
    }
    // 2^N binary patterns must cover K distinct templates.
    if (num_patches() < 64 && (std::uint64_t{1} << num_patches()) < num_classes) {
      throw ConfigError("too few patches to give every class a distinct template");
    }
  }
};

struct CorpusRecord {
  DocumentImage image;
  TokenSequence tokens;
  Label label = 0;

  bool operator==(const CorpusRecord&) const = default;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<CorpusRecord> train;
  std::vector<CorpusRecord> val;
  std::vector<CorpusRecord> test;

  bool operator==(const Corpus&) const = default;
};

inline constexpr float kTemplateLow = 0.2f;
inline constexpr float kTemplateHigh = 0.8f;

/// Per-class patch intensity patterns (one value per patch), pairwise distinct.
inline std::vector<std::vector<float>> class_templates(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed ^ 0x7465'6d70'6c61'7465ULL);
  const std::size_t n = spec.num_patches();
  std::vector<std::vector<float>> out;
  while (out.size() < spec.num_classes) {
    std::vector<float> t(n);
    for (float& v : t) v = rng.below(2) ? kTemplateHigh : kTemplateLow;
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(std::move(t));
  }
  return out;
}

inline std::uint32_t class_block_start(const CorpusSpec& spec, Label k) {
  return tokens::kFirstContent + k * spec.class_block_size;
}

namespace detail {

inline DocumentImage render_image(const CorpusSpec& spec, const std::vector<float>& tmpl, Rng& rng) {
  DocumentImage img{spec.height, spec.width, spec.channels, {}};
  img.pixels.resize(std::size_t{spec.height} * spec.width * spec.channels);
  const std::size_t gw = spec.width / spec.patch;
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x)
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double base = tmpl[(y / spec.patch) * gw + x / spec.patch];
        const double v = spec.pixel_noise > 0.0 ? base + spec.pixel_noise * rng.normal() : base;
        img.pixels[(y * spec.width + x) * spec.channels + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

inline TokenSequence draw_tokens(const CorpusSpec& spec, Label k, Rng& rng) {
  const std::uint32_t content_ids = spec.vocab_size - tokens::kFirstContent;
  const std::size_t len = spec.min_content + rng.below(spec.max_content - spec.min_content + 1);
  std::vector<std::uint32_t> content(len);
  for (auto& id : content) {
    if (rng.uniform() < spec.class_token_prob) {
      id = class_block_start(spec, k) + static_cast<std::uint32_t>(rng.below(spec.class_block_size));
    } else {
      id = tokens::kFirstContent + static_cast<std::uint32_t>(rng.below(content_ids));
    }
    if (spec.token_corruption > 0.0 && rng.uniform() < spec.token_corruption) {
      id = tokens::kFirstContent + static_cast<std::uint32_t>(rng.below(content_ids));
    }
  }
  return make_token_sequence(content, spec.n_max);
}

}  // namespace detail

/// Deterministic in `spec.seed`. Each class is split 80/10/10 into
/// train/val/test, so the splits stay class-balanced.
inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto templates = class_templates(spec);
  Rng rng(spec.seed);
  Corpus corpus{spec, {}, {}, {}};
  const std::size_t n_train = spec.per_class * 8 / 10;
  const std::size_t n_val = spec.per_class / 10;
  for (Label k = 0; k < spec.num_classes; ++k) {
    std::vector<CorpusRecord> records;
    records.reserve(spec.per_class);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      CorpusRecord r;
      r.image = detail::render_image(spec, templates[k], rng);
      r.tokens = detail::draw_tokens(spec, k, rng);
      r.label = k;
      records.push_back(std::move(r));
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto& dst = i < n_train ? corpus.train : i < n_train + n_val ? corpus.val : corpus.test;
      dst.push_back(std::move(records[i]));
    }
  }
  rng.shuffle(corpus.train.begin(), corpus.train.end());
  rng.shuffle(corpus.val.begin(), corpus.val.end());
  rng.shuffle(corpus.test.begin(), corpus.test.end());
  return corpus;
}

/// Class-balanced minibatch: c = min(#classes, N/2) classes are drawn, and N
/// is split across them as evenly as possible, so every class present
/// appears at least twice and every anchor has a positive.
inline std::vector<const CorpusRecord*> make_batch(const std::vector<CorpusRecord>& records, std::size_t n, Rng& rng) {
  if (n < 4) throw ConfigError("batch size must be at least 4, got " + std::to_string(n));
  std::vector<Label> classes;
  for (const auto& r : records)
    if (std::find(classes.begin(), classes.end(), r.label) == classes.end()) classes.push_back(r.label);
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ConfigError("class-balanced batches need at least 2 classes");

  rng.shuffle(classes.begin(), classes.end());
  const std::size_t c = std::min(classes.size(), n / 2);
  std::vector<const CorpusRecord*> batch;
  batch.reserve(n);
  for (std::size_t ci = 0; ci < c; ++ci) {
    std::vector<const CorpusRecord*> pool;
    for (const auto& r : records)
      if (r.label == classes[ci]) pool.push_back(&r);
    const std::size_t want = n / c + (ci < n % c ? 1 : 0);
    if (pool.size() >= want) {
      // Partial Fisher-Yates: first `want` entries become a uniform sample.
      for (std::size_t i = 0; i < want; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      batch.insert(batch.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
    } else {
      for (std::size_t i = 0; i < want; ++i) batch.push_back(pool[rng.below(pool.size())]);
    }
  }
  rng.shuffle(batch.begin(), batch.end());
  return batch;
}

inline std::vector<const CorpusRecord*> make_batch(const std::vector<CorpusRecord>& records, std::size_t n,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  return make_batch(records, n, rng);
}

// Corpus container, little-endian:
//   "XCLC" u16 version
//   spec: u32 x 11 (num_classes, per_class, height, width, channels, patch,
//         vocab_size, n_max, class_block_size, min_content, max_content),
//         f64 x 3 (class_token_prob, pixel_noise, token_corruption), u64 seed
//   u32 train count, u32 val count, u32 test count
//   records (train, then val, then test):
//         f32 pixels[H*W*C], u32 token count, u32 ids[count], u16 label
inline constexpr char kCorpusMagic[4] = {'X', 'C', 'L', 'C'};
inline constexpr std::uint16_t kCorpusVersion = 1;

inline std::string encode_corpus(const Corpus& c) {
  ByteWriter w;
  w.bytes(kCorpusMagic, 4);
  w.u16(kCorpusVersion);
  const CorpusSpec& s = c.spec;
  for (std::uint32_t v : {s.num_classes, s.per_class, s.height, s.width, s.channels, s.patch, s.vocab_size, s.n_max,
                          s.class_block_size, s.min_content, s.max_content})
    w.u32(v);
  w.f64(s.class_token_prob);
  w.f64(s.pixel_noise);
  w.f64(s.token_corruption);
  w.u64(s.seed);
  for (const auto* split : {&c.train, &c.val, &c.test}) w.u32(static_cast<std::uint32_t>(split->size()));
  for (const auto* split : {&c.train, &c.val, &c.test}) {
    for (const CorpusRecord& r : *split) {
      for (float p : r.image.pixels) w.f32(p);
      w.u32(static_cast<std::uint32_t>(r.tokens.ids.size()));
      for (std::uint32_t id : r.tokens.ids) w.u32(id);
      w.u16(static_cast<std::uint16_t>(r.label));
    }
  }
  return w.buffer();
}

inline Corpus decode_corpus(std::string bytes) {
  ByteReader r(std::move(bytes));
  if (r.bytes(4) != std::string(kCorpusMagic, 4)) throw FormatError("bad corpus magic", 0);
  const std::size_t version_at = r.offset();
  if (auto v = r.u16(); v != kCorpusVersion) throw UnsupportedVersionError(v, kCorpusVersion, version_at);
  Corpus c;
  CorpusSpec& s = c.spec;
  for (std::uint32_t* f : {&s.num_classes, &s.per_class, &s.height, &s.width, &s.channels, &s.patch, &s.vocab_size,
                           &s.n_max, &s.class_block_size, &s.min_content, &s.max_content})
    *f = r.u32();
  s.class_token_prob = r.f64();
  s.pixel_noise = r.f64();
  s.token_corruption = r.f64();
  s.seed = r.u64();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid corpus spec: ") + e.what(), r.offset());
  }
  std::uint32_t counts[3];
  for (auto& n : counts) n = r.u32();
  const std::size_t pixels = std::size_t{s.height} * s.width * s.channels;
  std::vector<CorpusRecord>* splits[3] = {&c.train, &c.val, &c.test};
  for (int si = 0; si < 3; ++si) {
    for (std::uint32_t i = 0; i < counts[si]; ++i) {
      CorpusRecord rec;
      rec.image = DocumentImage{s.height, s.width, s.channels, std::vector<float>(pixels)};
      for (float& p : rec.image.pixels) p = r.f32();
      const std::size_t at = r.offset();
      const std::uint32_t n = r.u32();
      if (n != s.n_max) throw FormatError("token count " + std::to_string(n) + " differs from n_max", at);
      rec.tokens.ids.resize(n);
      for (auto& id : rec.tokens.ids) {
        const std::size_t id_at = r.offset();
        id = r.u32();
        if (id >= s.vocab_size) throw FormatError("token id outside vocabulary", id_at);
      }
      const std::size_t label_at = r.offset();
      rec.label = r.u16();
      if (rec.label >= s.num_classes) throw FormatError("label outside class range", label_at);
      splits[si]->push_back(std::move(rec));
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last record", r.offset());
  return c;
}

inline void write_corpus(const Corpus& c, const std::string& path) { write_file_atomic(path, encode_corpus(c)); }

inline Corpus read_corpus(const std::string& path) { return decode_corpus(read_file(path)); }

}  // namespace vlcdoc
