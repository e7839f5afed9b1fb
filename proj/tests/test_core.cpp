#include <gtest/gtest.h>

#include <cmath>

#include "tc3dgs/core.hpp"
#include "tc3dgs/keypoints.hpp"

using namespace tc3dgs;

TEST(DenseBytes, SingleGaussianSingleFrame) { EXPECT_EQ(dense_storage_bytes(1, 1), 56u); }

TEST(DenseBytes, TwoGaussiansThreeFrames) { EXPECT_EQ(dense_storage_bytes(2, 3), 272u); }

TEST(DenseBytes, BasketballScaleWithinFactorTwo) {
  // Dynamic 3DGS reports 2161 MB for a 349K-Gaussian, 150-frame scene.
  const double mb = static_cast<double>(dense_storage_bytes(349000, 150)) / (1024.0 * 1024.0);
  EXPECT_GT(mb, 2161.0 / 2.0);
  EXPECT_LT(mb, 2161.0 * 2.0);
}

TEST(DenseBytes, SceneOverloadMatches) {
  const auto s = DynamicScene::zeros(7, 4);
  EXPECT_EQ(dense_storage_bytes(s), dense_storage_bytes(7, 4));
}

TEST(Synthetic, StaticTrajectoriesAreConstant) {
  const auto s = make_synthetic_scene(10, 0, 5, {}, 1);
  s.validate();
  for (std::size_t n = 0; n < 10; ++n) {
    for (std::size_t t = 1; t < 5; ++t) {
      for (int k = 0; k < 3; ++k) EXPECT_EQ(s.position(t, n)[k], s.position(0, n)[k]);
      for (int k = 0; k < 4; ++k) EXPECT_EQ(s.rotation(t, n)[k], s.rotation(0, n)[k]);
    }
  }
}

TEST(Synthetic, SingleBreakpointRecoversThreeKeypoints) {
  MotionSpec m;
  m.breakpoints = {75};
  const auto s = make_synthetic_scene(0, 1, 150, m, 7);
  for (int k = 0; k < 3; ++k) {
    std::vector<double> row(150);
    for (std::size_t t = 0; t < 150; ++t) row[t] = s.position(t, 0)[k];
    const auto idx = select_keypoints(row, {1e-12, 30});
    EXPECT_EQ(idx, (std::vector<std::uint32_t>{0, 75, 149})) << "axis " << k;
    const auto rec = interpolate(idx, gather(row, idx), 150);
    EXPECT_LE(mean_squared_error(rec, row), 1e-12);
  }
}

TEST(Synthetic, DeterministicForSeed) {
  const auto a = make_synthetic_scene(900, 100, 20, MotionSpec::standard(20), 42);
  const auto b = make_synthetic_scene(900, 100, 20, MotionSpec::standard(20), 42);
  const auto c = make_synthetic_scene(900, 100, 20, MotionSpec::standard(20), 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  a.validate();
}

TEST(Synthetic, RejectsBreakpointOutsideRange) {
  MotionSpec m;
  m.breakpoints = {10};
  EXPECT_THROW(make_synthetic_scene(0, 1, 10, m, 1), InvalidArgument);
  m.breakpoints = {-1};
  EXPECT_THROW(make_synthetic_scene(0, 1, 10, m, 1), InvalidArgument);
  EXPECT_THROW(make_synthetic_scene(1, 0, 0, {}, 1), InvalidArgument);
}

TEST(Synthetic, FaintFractionSetsOpacity) {
  Appearance look;
  look.faint_fraction = 0.4;
  const auto s = make_synthetic_scene(100, 0, 1, {}, 3, look);
  int faint = 0;
  for (double o : s.opacity_logits) faint += sigmoid(o) < 0.02;
  EXPECT_EQ(faint, 40);
}

TEST(Synthetic, NoiseOnlyTouchesMovingGaussians) {
  MotionSpec m;
  m.noise_sigma = 0.01;
  const auto s = make_synthetic_scene(3, 2, 6, m, 5);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t t = 1; t < 6; ++t) EXPECT_EQ(s.position(t, n)[0], s.position(0, n)[0]);
  }
  bool moved = false;
  for (std::size_t t = 1; t < 6; ++t) moved |= s.position(t, 4)[0] != s.position(0, 4)[0];
  EXPECT_TRUE(moved);
}

TEST(Validate, CatchesBrokenInvariants) {
  auto s = make_synthetic_scene(4, 1, 3, {}, 9);
  EXPECT_NO_THROW(s.validate());
  auto bad = s;
  bad.rotations[0] *= 1.01;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = s;
  bad.colors[2] = 1.5;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = s;
  bad.depth_order[0] = bad.depth_order[1];
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = s;
  bad.positions.pop_back();
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(SceneIo, BinaryRoundTripIsBitExact) {
  MotionSpec m = MotionSpec::standard(12);
  m.noise_sigma = 0.003;
  const auto s = make_synthetic_scene(20, 5, 12, m, 11);
  const auto bytes = encode_scene(s);
  EXPECT_EQ(decode_scene(bytes), s);
  EXPECT_EQ(encode_scene(decode_scene(bytes)), bytes);
}

TEST(SceneIo, JsonRoundTripIsBitExact) {
  const auto s = make_synthetic_scene(3, 2, 4, MotionSpec::standard(4), 2);
  EXPECT_EQ(scene_from_json(nlohmann::json::parse(scene_to_json(s).dump())), s);
}

TEST(SceneIo, RejectsTruncatedAndForeignFiles) {
  const auto bytes = encode_scene(make_synthetic_scene(3, 1, 2, {}, 1));
  for (std::size_t cut : {0ul, 3ul, 9ul, bytes.size() - 1}) {
    EXPECT_THROW(decode_scene(std::span(bytes).first(cut)), DecodeError) << cut;
  }
  auto wrong = bytes;
  wrong[0] = 'X';
  EXPECT_THROW(decode_scene(wrong), DecodeError);
}

TEST(SelectGaussians, RemapsDepthOrder) {
  auto s = make_synthetic_scene(5, 0, 2, {}, 4);
  s.depth_order = {4, 2, 0, 3, 1};
  const std::vector<std::uint32_t> keep{1, 2, 4};
  const auto sub = select_gaussians(s, keep);
  EXPECT_EQ(sub.num_gaussians, 3u);
  EXPECT_EQ(sub.depth_order, (std::vector<std::uint32_t>{2, 1, 0}));
  EXPECT_EQ(sub.position(1, 2)[0], s.position(1, 4)[0]);
  EXPECT_EQ(sub.opacity_logits[0], s.opacity_logits[1]);
}
