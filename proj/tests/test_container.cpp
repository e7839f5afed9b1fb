#include <gtest/gtest.h>

#include <random>

#include "tc3dgs/container.hpp"
#include "tc3dgs/pipeline.hpp"
#include "test_support.hpp"

using namespace tc3dgs;
using namespace tc3dgs::testing;

namespace {

// Small container exercising quantized, sparse and float payloads.
std::vector<std::uint8_t> sample_bytes(bool quantize = true) {
  const auto s = make_synthetic_scene(6, 3, 8, MotionSpec::standard(8), 21);
  PipelineConfig cfg;
  cfg.masking = false;
  cfg.quantization = quantize;
  cfg.qat.steps = 3;
  cfg.threads = 1;
  return compress(s, frame_views(8, 12), cfg).bytes;
}

}  // namespace

TEST(Container, RoundTrip) {
  for (bool q : {true, false}) {
    const auto bytes = sample_bytes(q);
    const auto c = decode_container(bytes);
    EXPECT_EQ(encode_container(c), bytes);
    EXPECT_EQ(decode_container(encode_container(c)), c);
  }
}

TEST(Container, HandBuiltDense) {
  Container c;
  c.original_gaussians = 3;
  c.num_gaussians = 2;
  c.num_frames = 1;
  c.depth_order = {1, 0};
  for (Group g : kAllGroups) {
    auto& p = c.groups[static_cast<int>(g)];
    p.width = 5;
    p.step = 0.25;
    p.offset = -0.5;
    p.words.assign(2 * group_dim(g), 0);
    for (std::size_t i = 0; i < p.words.size(); ++i) p.words[i] = static_cast<std::uint32_t>(i % 32);
  }
  const auto bytes = encode_container(c);
  EXPECT_EQ(decode_container(bytes), c);
  const auto s = decompress(c);
  EXPECT_EQ(s.opacity_logits[1], (1 - 16) * 0.25 - 0.5);
}

TEST(Container, DeterministicEncoding) { EXPECT_EQ(sample_bytes(), sample_bytes()); }

TEST(Container, TruncationAlwaysRejected) {
  const auto bytes = sample_bytes();
  for (std::size_t cut = 0; cut < bytes.size(); cut += 1 + cut / 16) {
    EXPECT_THROW(decode_container(std::span(bytes).first(cut)), DecodeError) << cut;
  }
}

TEST(Container, BitFlipsRejected) {
  const auto bytes = sample_bytes();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> at(0, bytes.size() - 1);
  std::uniform_int_distribution<int> bit(0, 7);
  for (int trial = 0; trial < 500; ++trial) {
    auto bad = bytes;
    bad[at(rng)] ^= static_cast<std::uint8_t>(1u << bit(rng));
    EXPECT_THROW(decode_container(bad), DecodeError) << trial;
  }
}

TEST(Container, TrailingBytesRejected) {
  auto bytes = sample_bytes();
  bytes.push_back(0);
  EXPECT_THROW(decode_container(bytes), DecodeError);
}

TEST(Container, ErrorsCarryOffsets) {
  auto bytes = sample_bytes();
  bytes[0] = 'X';
  try {
    decode_container(bytes);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bytes = sample_bytes();
  bytes[4] = 0x02;
  try {
    decode_container(bytes);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  // A damaged section is reported at that section's offset.
  bytes = sample_bytes();
  const auto d = decode_container_detailed(bytes);
  const auto& colors = d.sections[1 + static_cast<int>(Group::colors)];
  bytes[colors.offset + colors.length / 2] ^= 0x10;
  try {
    decode_container(bytes);
    FAIL();
  } catch (const DecodeError& e) {
    EXPECT_EQ(e.offset(), colors.offset);
    EXPECT_NE(std::string(e.what()).find("colors"), std::string::npos);
  }
}

TEST(Container, InvalidHeaderFieldsRejectedAfterChecksum) {
  Container c;
  c.original_gaussians = 1;
  c.num_gaussians = 1;
  c.num_frames = 1;
  c.depth_order = {0};
  for (Group g : kAllGroups) c.groups[static_cast<int>(g)].words.assign(group_dim(g), 0);
  c.groups[static_cast<int>(Group::colors)].offset = std::nan("");
  EXPECT_THROW(decode_container(encode_container(c)), DecodeError);
  c.groups[static_cast<int>(Group::colors)].offset = 0.0;
  c.groups[static_cast<int>(Group::log_scales)].sparse = true;
  EXPECT_THROW(decode_container(encode_container(c)), DecodeError);
  c.groups[static_cast<int>(Group::log_scales)].sparse = false;
  c.num_gaussians = 2;
  EXPECT_THROW(decode_container(encode_container(c)), DecodeError);
}

TEST(IndexWidth, Values) {
  EXPECT_EQ(index_width(0), 1);
  EXPECT_EQ(index_width(2), 1);
  EXPECT_EQ(index_width(3), 2);
  EXPECT_EQ(index_width(1024), 10);
  EXPECT_EQ(index_width(1025), 11);
}
