#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <limits>
#include <set>

#include "tc3dgs/quant.hpp"
#include "test_support.hpp"

using namespace tc3dgs;
using namespace tc3dgs::testing;

TEST(FakeQuantize, RoundsToGrid) {
  const QuantizerState q{0.5, 3, true};
  EXPECT_EQ(q.qn(), -4);
  EXPECT_EQ(q.qp(), 3);
  EXPECT_DOUBLE_EQ(fake_quantize(std::vector<double>{1.26}, q)[0], 1.5);
}

TEST(FakeQuantize, ClipBranch) {
  const QuantizerState q{0.5, 3, true};
  const std::vector<double> v{10.0};
  EXPECT_DOUBLE_EQ(fake_quantize(v, q)[0], 1.5);
  const auto g = fake_quantize_backward(v, q, std::vector<double>{1.0});
  EXPECT_EQ(g.values[0], 0.0);
  EXPECT_DOUBLE_EQ(g.step, 3.0 * step_grad_scale(1, q));
  EXPECT_DOUBLE_EQ(step_grad_element(-10.0, q), -4.0);
}

TEST(FakeQuantize, RejectsBadWidth) {
  EXPECT_THROW(fake_quantize(std::vector<double>{1.0}, QuantizerState{0.5, 1, true}), InvalidArgument);
  EXPECT_THROW(fake_quantize(std::vector<double>{1.0}, QuantizerState{0.5, 17, true}), InvalidArgument);
  EXPECT_THROW(fake_quantize(std::vector<double>{1.0}, QuantizerState{0.0, 8, true}), InvalidArgument);
}

TEST(FakeQuantize, StepGradientMatchesStraightThroughFiniteDifferences) {
  // Straight-through surrogate of one element: the rounding residual r0 is
  // frozen at the current step size, the clip is not.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(1000);
  for (double& x : v) x = 1.3 * u(rng);
  for (double offset : {0.0, 0.2}) {
    QuantizerState q{0.0, 4, true, offset};
    std::vector<double> centred = v;
    for (double& x : centred) x -= offset;
    q.step_size = init_step_size(centred, 4);
    auto surrogate = [&](double vi, double d) {
      const double x0 = (vi - offset) / q.step_size;
      const double r0 = std::nearbyint(x0) - x0;
      const double x = (vi - offset) / d;
      if (x <= q.qn()) return q.qn() * d + offset;
      if (x >= q.qp()) return q.qp() * d + offset;
      return d * (x + r0) + offset;
    };
    const double h = 1e-7 * q.step_size;
    std::vector<double> up(v.size());
    for (double& x : up) x = u(rng);
    double fd_total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = (v[i] - offset) / q.step_size;
      if (std::abs(x - q.qn()) < 1e-3 || std::abs(x - q.qp()) < 1e-3) continue;
      const double fd = (surrogate(v[i], q.step_size + h) - surrogate(v[i], q.step_size - h)) / (2 * h);
      EXPECT_NEAR(step_grad_element(v[i], q), fd, 1e-5) << i;
      fd_total += up[i] * fd;
      ++used;
    }
    ASSERT_EQ(used, v.size());
    const auto g = fake_quantize_backward(v, q, up);
    EXPECT_NEAR(g.step, fd_total * step_grad_scale(v.size(), q), 1e-5);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = (v[i] - offset) / q.step_size;
      EXPECT_EQ(g.values[i], (x >= q.qn() && x <= q.qp()) ? up[i] : 0.0);
    }
  }
}

TEST(InitStep, Examples) {
  EXPECT_EQ(init_step_size(std::vector<double>{0, 0, 0}, 8), 1e-8);
  EXPECT_NEAR(init_step_size(std::vector<double>{1, 1, 1}, 4), 2.0 / std::sqrt(7.0), 1e-12);
  EXPECT_THROW(init_step_size(std::vector<double>{}, 4), InvalidArgument);
}

TEST(InitStep, MonteCarloUniform) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(100000);
  for (double& x : v) x = u(rng);
  for (int bits : {4, 8}) {
    const double qp = (1 << (bits - 1)) - 1;
    const double expect = 2.0 * 0.5 / std::sqrt(qp);
    EXPECT_NEAR(init_step_size(v, bits), expect, 0.02 * expect);
  }
}

TEST(Finalize, DequantizeReproducesFakeQuantize) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(500);
  for (double& x : v) x = u(rng);
  for (double offset : {0.0, 0.3}) {
    const QuantizerState q{1.0 / 127, 8, true, offset};
    const auto codes = quantize_finalize(v, q);
    const auto deq = dequantize(codes, q.step_size, q.offset);
    EXPECT_EQ(deq, fake_quantize(v, q));
    EXPECT_EQ(quantize_finalize(deq, q), codes);
    std::set<double> distinct(deq.begin(), deq.end());
    EXPECT_LE(distinct.size(), 256u);
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_GE(deq[i], q.qn() * q.step_size + offset - 1e-15);
      EXPECT_LE(deq[i], q.qp() * q.step_size + offset + 1e-15);
      if (offset == 0.0) {
        EXPECT_LE(std::abs(deq[i] - v[i]), q.step_size / 2 + 1e-15);
      }
    }
  }
}

TEST(Normalize, Examples) {
  EXPECT_EQ(normalize(std::vector<double>{1, 3, 5}), (std::vector<double>{0, 0.5, 1}));
  EXPECT_EQ(normalize(std::vector<double>{7, 7, 7}), (std::vector<double>{0, 0, 0}));
  EXPECT_NEAR(normalize(std::vector<double>{0.01, 0.21, 0.11})[2], 0.5, 1e-12);
  const auto joint = normalize(std::vector<std::vector<double>>{{1.0, 2.0}, {3.0}});
  EXPECT_EQ(joint[0], (std::vector<double>{0.0, 0.5}));
  EXPECT_EQ(joint[1], (std::vector<double>{1.0}));
}

TEST(AllocateBits, Examples) {
  const BitRange r{4, 8};
  EXPECT_EQ(allocate_bits(0.0, r), 4);
  EXPECT_EQ(allocate_bits(1.0, r), 8);
  EXPECT_EQ(allocate_bits(0.5, r), 6);
  int prev = 0;
  for (double s = 0.0; s <= 1.0; s += 0.01) {
    const int b = allocate_bits(s, r);
    EXPECT_GE(b, prev);
    prev = b;
  }
  EXPECT_THROW(allocate_bits(0.5, BitRange{1, 8}), InvalidArgument);
  EXPECT_THROW(allocate_bits(0.5, BitRange{6, 5}), InvalidArgument);
}

TEST(Sensitivity, ZeroOpacityHasZeroColorSensitivity) {
  std::mt19937_64 rng(1);
  auto s = random_scene(rng, 3, 1);
  s.opacity_logits[1] = -1e4;
  const auto sens = sensitivity(s, frame_views(1, 16), Group::colors);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(sens[3 + k], 0.0);
}

TEST(Sensitivity, OpaqueCoveringGaussianGivesOne) {
  auto s = DynamicScene::zeros(1, 1);
  s.opacity_logits[0] = 1e4;
  s.log_scales = {std::log(1e4), std::log(1e4), 0.0};
  const View v{10, 10, 0, 1.0, 1.0, 0.0, 0.0};
  const auto sens = sensitivity(s, std::vector<View>{v}, Group::colors);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(sens[k], 1.0, 1e-5);
}

TEST(Sensitivity, OutsideEveryViewIsZero) {
  std::mt19937_64 rng(2);
  auto s = random_scene(rng, 4, 1);
  s.positions[2 * 3 + 0] = 50.0;
  for (Group g : kAllGroups) {
    const auto sens = sensitivity(s, frame_views(1, 16), g);
    const std::size_t d = group_dim(g);
    for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(sens[2 * d + k], 0.0) << group_name(g);
  }
}

TEST(Sensitivity, MatchesFiniteDifferenceOfIntensity) {
  std::mt19937_64 rng(6);
  const auto s = random_scene(rng, 5, 1);
  const View v = View::square(20, 0);
  auto intensity = [&](const DynamicScene& sc) {
    double q = 0.0;
    for (double p : render(sc, v).pixels) q += p;
    return q;
  };
  const double h = 1e-4;
  // Exclude parameters whose Gaussians straddle a pixel's 3-sigma edge.
  for (Group g : {Group::colors, Group::opacity_logits}) {
    const auto sens = sensitivity(s, std::vector<View>{v}, g);
    for (std::size_t i = 0; i < sens.size(); ++i) {
      auto p = s, m = s;
      p.tensor(g)[i] += h;
      m.tensor(g)[i] -= h;
      const double fd = std::abs(intensity(p) - intensity(m)) / (2 * h) / v.pixel_count();
      EXPECT_TRUE(grad_close(sens[i], fd)) << group_name(g) << i << " " << sens[i] << " vs " << fd;
    }
  }
}

TEST(Sensitivity, PermutationEquivariant) {
  std::mt19937_64 rng(7);
  const auto s = random_scene(rng, 6, 1);
  const std::vector<std::uint32_t> perm{5, 3, 1, 0, 2, 4};
  const auto p = select_gaussians(s, perm);
  const auto views = frame_views(1, 16);
  const auto a = sensitivity(s, views, Group::log_scales);
  const auto b = sensitivity(p, views, Group::log_scales);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(b[j * 3 + k], a[perm[j] * 3 + k], 1e-12);
  }
}

TEST(AnalyzeSensitivity, PositionsSixteenAndOthersInRange) {
  const auto s = make_synthetic_scene(40, 5, 3, MotionSpec::standard(3), 4);
  const auto rep = analyze_sensitivity(s, frame_views(3, 32), {4, 8});
  EXPECT_EQ(rep.bits[static_cast<int>(Group::positions)], 16);
  for (Group g : kQuantizedGroups) {
    const int gi = static_cast<int>(g);
    EXPECT_GE(rep.bits[gi], 4);
    EXPECT_LE(rep.bits[gi], 8);
    for (double x : rep.normalized[gi]) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  for (Group a : kQuantizedGroups) {
    for (Group b : kQuantizedGroups) {
      if (rep.mean_normalized[static_cast<int>(a)] >= rep.mean_normalized[static_cast<int>(b)]) {
        EXPECT_GE(rep.bits[static_cast<int>(a)], rep.bits[static_cast<int>(b)]);
      }
    }
  }
}

namespace {

double min_psnr(const DynamicScene& a, const DynamicScene& b, const std::vector<View>& views) {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& v : views) lo = std::min(lo, psnr(render(a, v), render(b, v)));
  return lo;
}

}  // namespace

TEST(Quantize, EightBitsBeatsFourBits) {
  const auto s = make_synthetic_scene(50, 0, 1, {}, 3);
  const auto views = frame_views(1, 48);
  auto quantized = [&](int bits) {
    auto q = apply_quantizers(s, init_quantizers(s, uniform_bits(bits)));
    normalize_quaternions(q.rotations);
    return q;
  };
  const double p8 = min_psnr(s, quantized(8), views), p4 = min_psnr(s, quantized(4), views);
  EXPECT_GT(p8, p4);
}

TEST(Finetune, ZeroStepsEqualsStraightFakeQuantize) {
  const auto s = make_synthetic_scene(10, 2, 2, MotionSpec::standard(2), 8);
  const auto views = frame_views(2, 24);
  std::vector<Image> targets;
  for (const auto& v : views) targets.push_back(render(s, v));
  QatConfig cfg;
  cfg.steps = 0;
  const auto bits = uniform_bits(5);
  const auto r = quantization_aware_finetune(s, views, targets, bits, cfg);
  EXPECT_EQ(r.scene, s);
  const auto fresh = init_quantizers(s, bits);
  for (Group g : kAllGroups) {
    EXPECT_EQ(r.quantizers[static_cast<int>(g)].step_size, fresh[static_cast<int>(g)].step_size);
  }
  EXPECT_EQ(apply_quantizers(r.scene, r.quantizers), apply_quantizers(s, fresh));
}

TEST(Finetune, SingleGaussianColorWithinHalfStep) {
  auto s = DynamicScene::zeros(1, 1);
  s.opacity_logits[0] = 1e4;
  s.log_scales = {std::log(50.0), std::log(50.0), std::log(50.0)};
  s.colors = {0.137, 0.52, 0.911};
  const View v{6, 6, 0, 1.0, 1.0, 0.0, 0.0};
  const std::vector<View> views{v};
  const std::vector<Image> targets{render(s, v)};
  BitTable bits = uniform_bits(8);
  const auto r = quantization_aware_finetune(s, views, targets, bits, {});
  const auto out = render(apply_quantizers(r.scene, r.quantizers), v);
  const double half = r.quantizers[static_cast<int>(Group::colors)].step_size / 2;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    EXPECT_LE(std::abs(out.pixels[i] - targets[0].pixels[i]), half + 1e-6);
  }
}

TEST(Finetune, AdaptiveAtLeastUniformFour) {
  const auto s = make_synthetic_scene(50, 0, 1, {}, 3);
  const auto views = frame_views(1, 48);
  std::vector<Image> targets{render(s, views[0])};
  auto run = [&](const BitTable& bits) {
    const auto r = quantization_aware_finetune(s, views, targets, bits, {});
    auto q = apply_quantizers(r.scene, r.quantizers);
    normalize_quaternions(q.rotations);
    return min_psnr(s, q, views);
  };
  const auto rep = analyze_sensitivity(s, views, {4, 8});
  EXPECT_GE(run(rep.bits), run(uniform_bits(4)));
}

TEST(Finetune, StepSizesStayPositive) {
  const auto s = make_synthetic_scene(5, 0, 1, {}, 2);
  const auto views = frame_views(1, 16);
  std::vector<Image> targets{render(s, views[0])};
  QatConfig cfg;
  cfg.steps = 5;
  cfg.step_lr = 1e6;
  const auto r = quantization_aware_finetune(s, views, targets, uniform_bits(4), cfg);
  for (Group g : kQuantizedGroups) EXPECT_GE(r.quantizers[static_cast<int>(g)].step_size, 1e-8);
}
