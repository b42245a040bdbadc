// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "reference.hpp"
#include "test_support.hpp"
#include "vlcdoc/encoders.hpp"

namespace vlcdoc {
namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.height = 4;
  c.width = 4;
  c.channels = 1;
  c.patch = 2;
  c.vocab_size = 10;
  c.n_max = 5;
  c.d_f = 3;
  return c;
}

DocumentImage ramp_image(std::size_t h, std::size_t w, std::size_t c) {
  DocumentImage img{h, w, c, std::vector<float>(h * w * c)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i);
  return img;
}

TEST(TokenSequence, WrapsPadsAndTruncates) {
  const std::vector<std::uint32_t> short_content{5, 6};
  EXPECT_EQ(make_token_sequence(short_content, 6).ids, (std::vector<std::uint32_t>{1, 5, 6, 2, 0, 0}));
  const std::vector<std::uint32_t> long_content{3, 4, 5, 6, 7, 8, 9};
  const TokenSequence t = make_token_sequence(long_content, 5);
  EXPECT_EQ(t.ids, (std::vector<std::uint32_t>{1, 3, 4, 5, 2}));
  EXPECT_EQ(t.real_count(), 5u);
  EXPECT_THROW(make_token_sequence(short_content, 1), ConfigError);
}

TEST(Patchify, RowMajorPatchesOfSingleChannelImage) {
  const EncoderConfig cfg = tiny_config();
  const DocumentImage img = ramp_image(4, 4, 1);
  const DocumentImage* batch[] = {&img};
  const Tensor p = patchify(cfg, batch);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 4}));
  testing::expect_near(p, {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15}, 0.0);
}

TEST(Patchify, ChannelsInnermostWithinPatch) {
  EncoderConfig cfg = tiny_config();
  cfg.channels = 2;
  const DocumentImage img = ramp_image(4, 4, 2);
  const DocumentImage* batch[] = {&img};
  const Tensor p = patchify(cfg, batch);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 8}));
  // First patch covers pixels (0,0) (0,1) (1,0) (1,1), each with 2 channels.
  for (std::size_t i = 0; i < 8; ++i) {
    const std::size_t py = i / 4, px = (i / 2) % 2, c = i % 2;
    EXPECT_EQ(p[i], img.at(py, px, c));
  }
}

TEST(Patchify, RejectsMismatchedImage) {
  const EncoderConfig cfg = tiny_config();
  const DocumentImage img = ramp_image(6, 4, 1);
  const DocumentImage* batch[] = {&img};
  EXPECT_THROW(patchify(cfg, batch), ConfigError);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c = tiny_config();
  c.patch = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.n_max = 6;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(PatchEmbed, ClsRowThenProjectedPatchesPlusPositions) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(1);
  EncoderParams p = make_encoders(cfg, rng);
  p.patch_proj.bias.value = testing::random_tensor({3}, rng);
  const DocumentImage a = ramp_image(4, 4, 1);
  DocumentImage b = a;
  for (float& v : b.pixels) v = 1.0f - v / 16.0f;
  const DocumentImage* batch[] = {&a, &b};
  Tape t;
  Var e = patch_embed(t, cfg, p, batch);
  ASSERT_EQ(e.shape(), (Shape{2, 5, 3}));

  const Tensor patches = patchify(cfg, batch);
  for (std::size_t s = 0; s < 2; ++s) {
    const ref::Mat proj = ref::linear(ref::rows_of(patches, s), p.patch_proj);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t j = 0; j < 3; ++j) {
        const double base = r == 0 ? p.vision_cls.value[j] : proj[r - 1][j];
        EXPECT_NEAR(e.data()[(s * 5 + r) * 3 + j], base + p.vision_pos.value.at(r, j), 1e-12);
      }
  }
}

TEST(TokenEmbed, LooksUpRowsAddsPositionsAndMasksPadding) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(2);
  EncoderParams p = make_encoders(cfg, rng);
  const std::vector<std::uint32_t> c1{7}, c2{3, 4, 9};
  const TokenSequence s1 = make_token_sequence(c1, 5), s2 = make_token_sequence(c2, 5);
  const TokenSequence* batch[] = {&s1, &s2};
  Tape t;
  TextFeatures f = token_embed(t, cfg, p, batch);
  ASSERT_EQ(f.features.shape(), (Shape{2, 5, 3}));
  EXPECT_EQ(f.mask.keep, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1}));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t j = 0; j < 3; ++j) {
        const std::uint32_t id = batch[s]->ids[r];
        EXPECT_EQ(f.features.data()[(s * 5 + r) * 3 + j], p.token_table.value.at(id, j) + p.text_pos.value.at(r, j));
      }
}

TEST(TokenEmbed, RejectsOutOfVocabularyAndWrongLength) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(3);
  EncoderParams p = make_encoders(cfg, rng);
  const std::vector<std::uint32_t> bad{10};
  const TokenSequence s = make_token_sequence(bad, 5);
  const TokenSequence* batch[] = {&s};
  Tape t;
  EXPECT_THROW(token_embed(t, cfg, p, batch), DataError);
  const std::vector<std::uint32_t> ok{4};
  const TokenSequence s6 = make_token_sequence(ok, 6);
  const TokenSequence* batch6[] = {&s6};
  EXPECT_THROW(token_embed(t, cfg, p, batch6), DataError);
}

TEST(PoolCls, SelectsFirstRow) {
  Tape t;
  Var x = t.constant(Tensor({2, 3, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
  Var c = pool_cls(x);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  testing::expect_near(c.data(), {1, 2, 7, 8}, 0.0);
}

TEST(Encoders, InitialisationIsDeterministic) {
  const EncoderConfig cfg = tiny_config();
  Rng r1(42), r2(42);
  const EncoderParams a = make_encoders(cfg, r1), b = make_encoders(cfg, r2);
  EXPECT_EQ(a.token_table.value, b.token_table.value);
  EXPECT_EQ(a.vision_pos.value, b.vision_pos.value);
  EXPECT_EQ(a.patch_proj.weight.value, b.patch_proj.weight.value);
}

TEST(EncoderConfig, PatchCountFollowsImageAndPatchSize) {
  EncoderConfig c = tiny_config();
  c.height = c.width = 8;
  c.patch = 4;
  EXPECT_EQ(c.num_patches(), 4u);
  EXPECT_EQ(c.rows(), 5u);
  c.patch = 8;
  EXPECT_EQ(c.num_patches(), 1u);
}

TEST(PatchEmbed, ZeroImageWithZeroBiasGivesPositionalRows) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(4);
  const EncoderParams p = make_encoders(cfg, rng);
  const DocumentImage img{4, 4, 1, std::vector<float>(16, 0.0f)};
  const DocumentImage* batch[] = {&img};
  Tape t;
  Var e = patch_embed(t, cfg, p, batch);
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(e.data()[r * 3 + j], p.vision_pos.value.at(r, j));
}

TEST(TokenEmbed, RepeatedIdsDifferOnlyByPosition) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(5);
  const EncoderParams p = make_encoders(cfg, rng);
  const std::vector<std::uint32_t> content{6, 6, 6};
  const TokenSequence s = make_token_sequence(content, 5);
  const TokenSequence* batch[] = {&s};
  Tape t;
  TextFeatures f = token_embed(t, cfg, p, batch);
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(f.features.data()[1 * 3 + j] - f.features.data()[3 * 3 + j],
                p.text_pos.value.at(1, j) - p.text_pos.value.at(3, j), 1e-15);
}

TEST(PoolCls, IgnoresOrderOfNonClsRows) {
  Rng rng(6);
  for (std::size_t m : {1u, 2u, 5u}) {
    const Tensor x = testing::random_tensor({1, m, 4}, rng);
    Tensor shuffled = x;
    for (std::size_t i = 1; i < m; ++i)
      for (std::size_t j = 0; j < 4; ++j) shuffled[i * 4 + j] = x[(m - i) * 4 + j];
    Tape t;
    EXPECT_EQ(pool_cls(t.constant(x)).value(), pool_cls(t.constant(shuffled)).value());
    testing::expect_near(pool_cls(t.constant(x)).data(), {x[0], x[1], x[2], x[3]}, 0.0);
  }
}

}  // namespace
}  // namespace vlcdoc
