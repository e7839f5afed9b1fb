#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tc3dgs/core.hpp"
#include "tc3dgs/renderer.hpp"

namespace tc3dgs {

// Per-Gaussian, per-frame mask logits m[t][n] plus the binarization threshold.
struct MaskState {
  std::size_t num_frames = 0;
  std::size_t num_gaussians = 0;
  std::vector<double> logits;  // T x N
  double threshold = 0.01;

  MaskState() = default;
  MaskState(std::size_t t, std::size_t n, double eps, double init = 0.0)
      : num_frames(t), num_gaussians(n), logits(t * n, init), threshold(eps) {
    if (!(eps > 0.0 && eps < 1.0)) throw InvalidArgument("mask threshold must lie in (0,1)");
  }

  std::span<double> frame(std::size_t t) { return {logits.data() + t * num_gaussians, num_gaussians}; }
  std::span<const double> frame(std::size_t t) const {
    return {logits.data() + t * num_gaussians, num_gaussians};
  }
};

struct MaskLossWeights {
  double lambda_mask = 0.01;
  double lambda_mc = 0.01;
};

// Straight-through binarization: the forward value is the indicator
// sigma(m) > eps, the backward value is d sigma / dm.
struct Binarized {
  std::vector<double> forward;
  std::vector<double> surrogate_grad;
};

inline Binarized binarize(std::span<const double> logits, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidArgument("binarize: threshold must lie in (0,1)");
  Binarized b;
  b.forward.resize(logits.size());
  b.surrogate_grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = sigmoid(logits[i]);
    b.forward[i] = s > eps ? 1.0 : 0.0;
    b.surrogate_grad[i] = s * (1.0 - s);
  }
  return b;
}

inline std::vector<double> hard_mask(const MaskState& mask, std::size_t t) {
  return binarize(mask.frame(t), mask.threshold).forward;
}

// Linear-space scales and effective opacities after masking.
struct MaskedStatic {
  std::vector<double> scales;     // N x 3
  std::vector<double> opacities;  // N
};

inline MaskedStatic apply_mask(std::span<const double> log_scales, std::span<const double> opacity_logits,
                               std::span<const double> mask) {
  const std::size_t n = opacity_logits.size();
  if (log_scales.size() != n * 3 || mask.size() != n) {
    throw InvalidArgument("apply_mask: expected N x 3 scales and N mask entries");
  }
  MaskedStatic out{std::vector<double>(n * 3), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) out.scales[i * 3 + k] = mask[i] * std::exp(log_scales[i * 3 + k]);
    out.opacities[i] = mask[i] * sigmoid(opacity_logits[i]);
  }
  return out;
}

inline double mask_loss(std::span<const double> logits) {
  double sum = 0.0;
  for (double m : logits) sum += sigmoid(m);
  return sum;
}

inline std::vector<double> mask_loss_grad(std::span<const double> logits) {
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = sigmoid(logits[i]);
    g[i] = s * (1.0 - s);
  }
  return g;
}

inline double mask_consistency_loss(std::span<const double> logits, std::span<const double> prev) {
  if (logits.size() != prev.size()) throw InvalidArgument("mask_consistency_loss: length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += std::abs(logits[i] - prev[i]);
  return sum;
}

// Gradient w.r.t. the current frame only; the previous frame is a constant.
inline std::vector<double> mask_consistency_grad(std::span<const double> logits, std::span<const double> prev) {
  if (logits.size() != prev.size()) throw InvalidArgument("mask_consistency_grad: length mismatch");
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double d = logits[i] - prev[i];
    g[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  }
  return g;
}

// Mean of sigma(m[t][n]) over frames, per Gaussian.
inline std::vector<double> temporal_mean_activation(const MaskState& mask) {
  std::vector<double> mean(mask.num_gaussians, 0.0);
  for (std::size_t t = 0; t < mask.num_frames; ++t) {
    const auto f = mask.frame(t);
    for (std::size_t n = 0; n < mask.num_gaussians; ++n) mean[n] += sigmoid(f[n]);
  }
  for (double& v : mean) v /= static_cast<double>(mask.num_frames);
  return mean;
}

// Indices (ascending) of Gaussians whose temporal mean activation is >= eps.
inline std::vector<std::uint32_t> prune(const MaskState& mask) {
  std::vector<std::uint32_t> keep;
  const auto mean = temporal_mean_activation(mask);
  for (std::size_t n = 0; n < mean.size(); ++n) {
    if (!(mean[n] < mask.threshold)) keep.push_back(static_cast<std::uint32_t>(n));
  }
  return keep;
}

inline DynamicScene apply_prune(const DynamicScene& scene, std::span<const std::uint32_t> keep) {
  return select_gaussians(scene, keep);
}

// Per-Gaussian mask-value gradient mapped onto logits via the surrogate path.
inline std::vector<double> mask_logit_grad(const FrameGrad& grad, std::span<const double> logits) {
  auto g = mask_loss_grad(logits);  // sigma'(m)
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= grad.mask[i];
  return g;
}

enum class PhotometricLoss { l1, l2 };

struct MaskTrainConfig {
  MaskLossWeights weights;
  double threshold = 0.01;
  std::size_t steps = 30;               // per frame
  std::size_t first_frame_steps = 600;  // 0 means `steps`
  double step_size = 20.0;
  PhotometricLoss loss = PhotometricLoss::l2;
  // Multiplies the per-pixel-mean photometric term.
  double photometric_weight = 20000.0;
};

// Photometric loss against `target` plus the gradient image it induces.
inline double photometric(const Image& img, const Image& target, PhotometricLoss kind, double weight,
                          Image* upstream) {
  if (img.width != target.width || img.height != target.height) {
    throw InvalidArgument("photometric: target shape does not match view");
  }
  const double norm = weight / static_cast<double>(img.pixels.size());
  double loss = 0.0;
  if (upstream) *upstream = Image(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double d = img.pixels[i] - target.pixels[i];
    if (kind == PhotometricLoss::l1) {
      loss += std::abs(d) * norm;
      if (upstream) upstream->pixels[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * norm;
    } else {
      loss += d * d * norm;
      if (upstream) upstream->pixels[i] = 2.0 * d * norm;
    }
  }
  return loss;
}

// Frame-by-frame mask optimization. Frame 0 starts from logits 0; every
// later frame starts from the previous frame's result. The smooth terms take
// a fixed-size gradient step; the consistency term is applied as its
// proximal map, so a logit only leaves the previous frame's value when the
// smooth gradient outweighs lambda_mc.
// `targets[i]` is the reference image for `views[i]`.
inline MaskState train_masks(const DynamicScene& scene, std::span<const View> views,
                             std::span<const Image> targets, const MaskTrainConfig& cfg) {
  if (views.size() != targets.size()) throw InvalidArgument("train_masks: views/targets length mismatch");
  if (cfg.steps < 1) throw InvalidArgument("train_masks: steps must be >= 1");
  if (cfg.weights.lambda_mask < 0.0 || cfg.weights.lambda_mc < 0.0) {
    throw InvalidArgument("train_masks: loss weights must be non-negative");
  }
  const std::size_t T = scene.num_frames, N = scene.num_gaussians;
  MaskState state(T, N, cfg.threshold);
  std::vector<std::vector<std::size_t>> by_frame(T);
  for (std::size_t i = 0; i < views.size(); ++i) by_frame.at(views[i].frame).push_back(i);

  std::vector<double> grad(N);
  for (std::size_t t = 0; t < T; ++t) {
    auto cur = state.frame(t);
    std::vector<double> prev;
    if (t > 0) {
      const auto p = state.frame(t - 1);
      prev.assign(p.begin(), p.end());
      std::copy(prev.begin(), prev.end(), cur.begin());
    }
    const std::size_t steps = (t == 0 && cfg.first_frame_steps > 0) ? cfg.first_frame_steps : cfg.steps;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto bin = binarize(cur, cfg.threshold);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t vi : by_frame[t]) {
        const Image img = render(scene, bin.forward, views[vi]);
        Image upstream;
        loss += photometric(img, targets[vi], cfg.loss, cfg.photometric_weight, &upstream);
        const FrameGrad fg = render_grad(scene, bin.forward, views[vi], upstream);
        for (std::size_t n = 0; n < N; ++n) grad[n] += fg.mask[n] * bin.surrogate_grad[n];
      }
      loss += cfg.weights.lambda_mask * mask_loss(cur);
      for (std::size_t n = 0; n < N; ++n) grad[n] += cfg.weights.lambda_mask * bin.surrogate_grad[n];
      const bool consistency = t > 0 && cfg.weights.lambda_mc > 0.0;
      if (consistency) loss += cfg.weights.lambda_mc * mask_consistency_loss(cur, prev);
      if (!std::isfinite(loss)) {
        throw StageError("train_masks", "non-finite loss at frame " + std::to_string(t) + ", step " +
                                            std::to_string(step));
      }
      for (std::size_t n = 0; n < N; ++n) cur[n] -= cfg.step_size * grad[n];
      if (consistency) {
        // Proximal step for lambda_mc * |m - prev|: soft-threshold toward prev.
        const double shrink = cfg.step_size * cfg.weights.lambda_mc;
        for (std::size_t n = 0; n < N; ++n) {
          const double d = cur[n] - prev[n];
          cur[n] = prev[n] + (d > shrink ? d - shrink : (d < -shrink ? d + shrink : 0.0));
        }
      }
    }
  }
  return state;
}

// Mask checkpoint: "TC3M", u16 version, u32 N, u32 T, f32 threshold, T x N float32 logits.
inline std::vector<std::uint8_t> encode_mask(const MaskState& m) {
  ByteWriter w;
  w.tag("TC3M");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(m.num_gaussians));
  w.u32(static_cast<std::uint32_t>(m.num_frames));
  w.f32(static_cast<float>(m.threshold));
  for (double v : m.logits) w.f32(static_cast<float>(v));
  return w.take();
}

inline MaskState decode_mask(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("TC3M");
  if (r.u16() != 1) throw DecodeError("unsupported mask version", 4);
  const std::size_t n = r.u32(), t = r.u32();
  const double eps = r.f32();
  if (!(eps > 0.0 && eps < 1.0)) throw DecodeError("mask threshold outside (0,1)", r.offset() - 4);
  if (static_cast<std::uint64_t>(n) * t * 4 != r.remaining()) {
    throw DecodeError("mask payload size does not match header", r.offset());
  }
  MaskState m(t, n, eps);
  for (double& v : m.logits) v = r.f32();
  return m;
}

}  // namespace tc3dgs
