#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tc3dgs/core.hpp"
#include "tc3dgs/masking.hpp"
#include "tc3dgs/renderer.hpp"

namespace tc3dgs {

inline constexpr int kPositionBits = 16;

struct BitRange {
  int b_min = 4;
  int b_max = 8;

  void validate() const {
    if (!(2 <= b_min && b_min <= b_max && b_max <= 16)) {
      throw InvalidArgument("bit range must satisfy 2 <= b_min <= b_max <= 16, got [" + std::to_string(b_min) +
                            ", " + std::to_string(b_max) + "]");
    }
  }
};

// Signed uniform quantizer with a (learnable) step size around a fixed zero
// point: value = code * step_size + offset.
struct QuantizerState {
  double step_size = 1.0;
  int bit_width = 8;
  bool is_signed = true;
  double offset = 0.0;

  void validate() const {
    if (!(bit_width >= 2 && bit_width <= 16)) throw InvalidArgument("quantizer bit width must be in [2,16]");
    if (!(step_size > 0.0)) throw InvalidArgument("quantizer step size must be positive");
  }
  std::int32_t qn() const { return is_signed ? -(1 << (bit_width - 1)) : 0; }
  std::int32_t qp() const { return is_signed ? (1 << (bit_width - 1)) - 1 : (1 << bit_width) - 1; }
};

// Mid-range of `v`, rounded to float32 so it survives serialization.
inline double zero_point(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return snap_f32(0.5 * (*lo + *hi));
}

inline std::int32_t quantize_code(double v, const QuantizerState& q) {
  return static_cast<std::int32_t>(std::clamp(std::nearbyint((v - q.offset) / q.step_size),
                                              static_cast<double>(q.qn()), static_cast<double>(q.qp())));
}

inline double quantize_one(double v, const QuantizerState& q) {
  return quantize_code(v, q) * q.step_size + q.offset;
}

inline std::vector<double> fake_quantize(std::span<const double> v, const QuantizerState& q) {
  q.validate();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = quantize_one(v[i], q);
  return out;
}

// Straight-through backward pass of fake_quantize for upstream gradient `up`.
// `step` already includes the gradient scale 1/sqrt(count * Q_p).
struct FakeQuantGrad {
  std::vector<double> values;
  double step = 0.0;
};

inline double step_grad_scale(std::size_t count, const QuantizerState& q) {
  return 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(count, 1)) * q.qp());
}

// d out / d step for a single element, before the gradient scale.
inline double step_grad_element(double v, const QuantizerState& q) {
  const double x = (v - q.offset) / q.step_size;
  if (x <= q.qn()) return q.qn();
  if (x >= q.qp()) return q.qp();
  return std::nearbyint(x) - x;
}

inline FakeQuantGrad fake_quantize_backward(std::span<const double> v, const QuantizerState& q,
                                            std::span<const double> up) {
  if (up.size() != v.size()) throw InvalidArgument("fake_quantize_backward: length mismatch");
  FakeQuantGrad g;
  g.values.resize(v.size());
  const double lo = q.qn() * q.step_size + q.offset, hi = q.qp() * q.step_size + q.offset;
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    g.values[i] = (v[i] >= lo && v[i] <= hi) ? up[i] : 0.0;
    acc += up[i] * step_grad_element(v[i], q);
  }
  g.step = acc * step_grad_scale(v.size(), q);
  return g;
}

inline double init_step_size(std::span<const double> v, int bits) {
  if (v.empty()) throw InvalidArgument("init_step_size: empty input");
  double mean_abs = 0.0;
  for (double x : v) mean_abs += std::abs(x);
  mean_abs /= static_cast<double>(v.size());
  const double qp = static_cast<double>((1 << (bits - 1)) - 1);
  return std::max(2.0 * mean_abs / std::sqrt(qp), 1e-8);
}

// Step size that covers max|v| without clipping (used for 16-bit positions).
inline double absmax_step_size(std::span<const double> v, int bits) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return std::max(m / ((1 << (bits - 1)) - 1), 1e-8);
}

inline std::vector<std::int32_t> quantize_finalize(std::span<const double> v, const QuantizerState& q) {
  q.validate();
  std::vector<std::int32_t> codes(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) codes[i] = quantize_code(v[i], q);
  return codes;
}

inline std::vector<double> dequantize(std::span<const std::int32_t> codes, double step, double offset = 0.0) {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = codes[i] * step + offset;
  return out;
}

// ---------------------------------------------------------------------------
// Sensitivity and bit allocation

// Mean absolute gradient of the summed RGB intensity of each view w.r.t.
// every scalar of `group`, normalized by the pixel count of the views that
// can see it: all views for static groups, the views of its own frame for
// time-varying ones.
inline std::vector<double> sensitivity(const DynamicScene& scene, std::span<const View> views, Group group) {
  std::vector<double> s(scene.expected_size(group), 0.0);
  const std::size_t d = static_cast<std::size_t>(group_dim(group));
  const std::size_t frame_size = scene.num_gaussians * d;
  std::vector<std::size_t> pixels(is_dynamic(group) ? scene.num_frames : 1, 0);
  for (const View& v : views) {
    const Image ones(v.width, v.height, 1.0);
    const FrameGrad g = render_grad(scene, {}, v, ones);
    const auto& slice = g.group(group);
    const std::size_t base = is_dynamic(group) ? v.frame * frame_size : 0;
    for (std::size_t i = 0; i < slice.size(); ++i) s[base + i] += std::abs(slice[i]);
    pixels[is_dynamic(group) ? v.frame : 0] += v.pixel_count();
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t p = pixels[is_dynamic(group) ? i / frame_size : 0];
    if (p > 0) s[i] /= static_cast<double>(p);
  }
  return s;
}

// Min-max normalization across all tables jointly; all-equal input maps to zeros.
inline std::vector<std::vector<double>> normalize(const std::vector<std::vector<double>>& raw) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& t : raw) {
    for (double x : t) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  std::vector<std::vector<double>> out;
  for (const auto& t : raw) {
    std::vector<double> n(t.size(), 0.0);
    if (hi > lo) {
      for (std::size_t i = 0; i < t.size(); ++i) n[i] = (t[i] - lo) / (hi - lo);
    }
    out.push_back(std::move(n));
  }
  return out;
}

inline std::vector<double> normalize(std::span<const double> raw) {
  return normalize(std::vector<std::vector<double>>{{raw.begin(), raw.end()}}).front();
}

inline int allocate_bits(double mean_normalized, const BitRange& range) {
  range.validate();
  const double b = range.b_min + std::clamp(mean_normalized, 0.0, 1.0) * (range.b_max - range.b_min);
  return std::clamp(static_cast<int>(std::lround(b)), range.b_min, range.b_max);
}

using BitTable = std::array<int, 5>;  // indexed by Group

struct SensitivityReport {
  std::array<std::vector<double>, 5> raw;
  std::array<std::vector<double>, 5> normalized;
  std::array<double, 5> mean_normalized{};
  BitTable bits{};

  double average_bits(const DynamicScene& scene) const {
    double total = 0.0, count = 0.0;
    for (Group g : kQuantizedGroups) {
      const double n = static_cast<double>(scene.expected_size(g));
      total += n * bits[static_cast<int>(g)];
      count += n;
    }
    return count > 0 ? total / count : 0.0;
  }
};

// Sensitivities for every quantized group, normalized jointly (positions
// excluded from the pool), then one bit width per group. Positions get 16.
inline SensitivityReport analyze_sensitivity(const DynamicScene& scene, std::span<const View> views,
                                             const BitRange& range) {
  range.validate();
  SensitivityReport rep;
  std::vector<std::vector<double>> pool;
  for (Group g : kQuantizedGroups) {
    rep.raw[static_cast<int>(g)] = sensitivity(scene, views, g);
    pool.push_back(rep.raw[static_cast<int>(g)]);
  }
  const auto norm = normalize(pool);
  for (std::size_t k = 0; k < kQuantizedGroups.size(); ++k) {
    const int gi = static_cast<int>(kQuantizedGroups[k]);
    rep.normalized[gi] = norm[k];
    double mean = 0.0;
    for (double x : norm[k]) mean += x;
    rep.mean_normalized[gi] = norm[k].empty() ? 0.0 : mean / static_cast<double>(norm[k].size());
    rep.bits[gi] = allocate_bits(rep.mean_normalized[gi], range);
  }
  rep.bits[static_cast<int>(Group::positions)] = kPositionBits;
  return rep;
}

inline BitTable uniform_bits(int bits) {
  BitTable t;
  t.fill(bits);
  t[static_cast<int>(Group::positions)] = kPositionBits;
  return t;
}

// ---------------------------------------------------------------------------
// Quantization-aware fine-tuning

using QuantizerTable = std::array<QuantizerState, 5>;  // indexed by Group

struct QatConfig {
  std::size_t steps = 150;
  std::size_t quantize_after = 0;   // plain photometric steps before fake quantization kicks in
  double step_lr = 0.02;            // Adam learning rate of the step sizes, relative to their initial value
  double param_lr = 0.05;           // static groups (log_scales, opacity_logits)
  double dynamic_param_lr = 0.0;    // per-frame groups (rotations, colors)
  std::size_t views_per_step = 4;
  double photometric_weight = 100.0;
  PhotometricLoss loss = PhotometricLoss::l2;
};

struct QatResult {
  DynamicScene scene;  // latent (unquantized) parameters after fine-tuning
  QuantizerTable quantizers{};
  std::size_t step_clamps = 0;  // times a step size was clamped to the floor
};

inline QuantizerTable init_quantizers(const DynamicScene& scene, const BitTable& bits) {
  QuantizerTable qt{};
  for (Group g : kAllGroups) {
    const int gi = static_cast<int>(g);
    qt[gi].bit_width = bits[gi];
    std::vector<double> centred = scene.tensor(g);
    if (g != Group::positions) qt[gi].offset = zero_point(centred);
    for (double& x : centred) x -= qt[gi].offset;
    qt[gi].step_size = g == Group::positions || centred.empty() ? absmax_step_size(centred, bits[gi])
                                                                : init_step_size(centred, bits[gi]);
  }
  return qt;
}

// Scene whose quantized groups hold their dequantized values. Positions are
// left untouched; rotations keep their raw (non-normalized) dequantized form.
inline DynamicScene apply_quantizers(const DynamicScene& scene, const QuantizerTable& qt) {
  DynamicScene out = scene;
  for (Group g : kQuantizedGroups) {
    const auto& q = qt[static_cast<int>(g)];
    for (double& x : out.tensor(g)) x = quantize_one(x, q);
  }
  return out;
}

inline QatResult quantization_aware_finetune(const DynamicScene& scene, std::span<const View> views,
                                             std::span<const Image> targets, const BitTable& bits,
                                             const QatConfig& cfg) {
  if (views.size() != targets.size()) throw InvalidArgument("finetune: views/targets length mismatch");
  for (Group g : kQuantizedGroups) {
    const int b = bits[static_cast<int>(g)];
    if (b < 2 || b > 16) throw InvalidArgument("finetune: bit width outside [2,16]");
  }
  QatResult res{scene, init_quantizers(scene, bits), 0};
  std::array<double, 5> delta0{};
  for (int gi = 0; gi < 5; ++gi) delta0[gi] = res.quantizers[gi].step_size;
  DynamicScene& latent = res.scene;
  const std::size_t N = scene.num_gaussians;
  std::size_t cursor = 0;
  // Adam moments for the step sizes.
  std::array<double, 5> m1{}, m2{};
  std::size_t adam_t = 0;

  for (std::size_t step = 0; step < cfg.steps && !views.empty(); ++step) {
    const bool quantize = step >= cfg.quantize_after;
    const DynamicScene forward = quantize ? apply_quantizers(latent, res.quantizers) : latent;
    std::array<std::vector<double>, 5> up;
    for (Group g : kAllGroups) up[static_cast<int>(g)].assign(scene.expected_size(g), 0.0);

    const std::size_t batch = std::min(cfg.views_per_step, views.size());
    for (std::size_t b = 0; b < batch; ++b, cursor = (cursor + 1) % views.size()) {
      const View& v = views[cursor];
      Image img = render(forward, v), upstream;
      photometric(img, targets[cursor], cfg.loss, cfg.photometric_weight, &upstream);
      const FrameGrad fg = render_grad(forward, {}, v, upstream);
      for (Group g : kAllGroups) {
        const auto& slice = fg.group(g);
        const std::size_t base = is_dynamic(g) ? v.frame * N * group_dim(g) : 0;
        auto& dst = up[static_cast<int>(g)];
        for (std::size_t i = 0; i < slice.size(); ++i) dst[base + i] += slice[i];
      }
    }

    for (Group g : kQuantizedGroups) {
      const int gi = static_cast<int>(g);
      auto& values = latent.tensor(g);
      const double lr = is_dynamic(g) ? cfg.dynamic_param_lr : cfg.param_lr;
      if (quantize) {
        const auto qg = fake_quantize_backward(values, res.quantizers[gi], up[gi]);
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * qg.values[i];
        double& delta = res.quantizers[gi].step_size;
        constexpr double b1 = 0.9, b2 = 0.999;
        if (g == kQuantizedGroups.front()) ++adam_t;
        m1[gi] = b1 * m1[gi] + (1 - b1) * qg.step;
        m2[gi] = b2 * m2[gi] + (1 - b2) * qg.step * qg.step;
        const double mh = m1[gi] / (1 - std::pow(b1, adam_t)), vh = m2[gi] / (1 - std::pow(b2, adam_t));
        delta -= cfg.step_lr * delta0[gi] * mh / (std::sqrt(vh) + 1e-12);
        if (!(delta > 1e-8)) {
          delta = 1e-8;
          ++res.step_clamps;
        }
      } else {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * up[gi][i];
      }
    }
    if (cfg.dynamic_param_lr > 0.0) {
      for (double& c : latent.colors) c = std::clamp(c, 0.0, 1.0);
    }
  }
  return res;
}

}  // namespace tc3dgs
