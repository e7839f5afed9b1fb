#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tc3dgs/core.hpp"

namespace tc3dgs {

// Orthographic 2D camera: pixel (col, row) samples the world point
// ((col - offset_x) / scale_x, (row - offset_y) / scale_y) of frame `frame`.
struct View {
  int width = 1;
  int height = 1;
  std::size_t frame = 0;
  double scale_x = 1.0, scale_y = 1.0;
  double offset_x = 0.0, offset_y = 0.0;

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  // View covering [-extent, extent]^2 with a square image of `size` pixels.
  static View square(int size, std::size_t frame, double extent = 1.0) {
    const double s = (size - 1) / (2.0 * extent);
    return View{size, size, frame, s, s, extent * s, extent * s};
  }
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;  // H x W x 3

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  double& at(int row, int col, int ch) { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  double at(int row, int col, int ch) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }
  bool operator==(const Image&) const = default;
};

// Gradients for one rendered frame. Dynamic groups hold only the rendered
// frame's slice (N x D); position z never receives gradient.
struct FrameGrad {
  std::vector<double> positions, rotations, colors, log_scales, opacity_logits;
  std::vector<double> mask;  // dL/dM per Gaussian (mask value, not logit)

  explicit FrameGrad(std::size_t n = 0)
      : positions(n * 3, 0.0), rotations(n * 4, 0.0), colors(n * 3, 0.0), log_scales(n * 3, 0.0),
        opacity_logits(n, 0.0), mask(n, 0.0) {}

  std::vector<double>& group(Group g) {
    switch (g) {
      case Group::positions: return positions;
      case Group::rotations: return rotations;
      case Group::colors: return colors;
      case Group::log_scales: return log_scales;
      case Group::opacity_logits: return opacity_logits;
    }
    return positions;
  }
  const std::vector<double>& group(Group g) const { return const_cast<FrameGrad*>(this)->group(g); }

  FrameGrad& operator+=(const FrameGrad& o) {
    for (Group g : kAllGroups) {
      auto& a = group(g);
      const auto& b = o.group(g);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    }
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] += o.mask[i];
    return *this;
  }
};

struct RenderResult {
  Image image;
  std::vector<double> weight_sum;  // per pixel, sum_i alpha_i * T_i
  std::size_t skipped_singular = 0;
};

namespace detail {

inline constexpr double kMinScale = 1e-8;
inline constexpr double kCutoffSq = 9.0;  // 3 sigma

// In-plane angle of the quaternion's rotation about z. Homogeneous in q, so
// a non-unit quaternion gives the same angle as its normalized form.
inline double quat_yaw(const double* q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return std::atan2(2.0 * (w * z + x * y), w * w + x * x - y * y - z * z);
}

struct Splat {
  std::uint32_t id;
  double mx, my;      // world mean
  double cos_t, sin_t;
  double a, b;        // masked world std devs
  double opacity;     // masked effective opacity
  const double* color;
  bool ghost;         // masked out; present only for gradient bookkeeping
  int c0, c1, r0, r1;
};

// Per-Gaussian 2D footprint for one frame. Returns false when the Gaussian
// cannot contribute (and is not needed as a ghost either).
inline bool make_splat(const DynamicScene& s, std::size_t n, double m, const View& v, bool keep_ghost,
                       Splat& out, std::size_t& singular) {
  const std::size_t t = v.frame;
  const double* p = s.positions.data() + (t * s.num_gaussians + n) * 3;
  const double* q = s.rotations.data() + (t * s.num_gaussians + n) * 4;
  const double theta = quat_yaw(q);
  const double sx = std::exp(s.log_scales[n * 3 + 0]);
  const double sy = std::exp(s.log_scales[n * 3 + 1]);
  const double base_opacity = sigmoid(s.opacity_logits[n]);
  const bool ghost = m == 0.0;
  if (ghost && !keep_ghost) return false;
  const double mm = ghost ? 1.0 : m;
  out.id = static_cast<std::uint32_t>(n);
  out.mx = p[0];
  out.my = p[1];
  out.cos_t = std::cos(theta);
  out.sin_t = std::sin(theta);
  out.a = mm * sx;
  out.b = mm * sy;
  out.opacity = ghost ? 0.0 : m * base_opacity;
  out.color = s.colors.data() + (t * s.num_gaussians + n) * 3;
  out.ghost = ghost;
  if (out.a < kMinScale || out.b < kMinScale) {
    ++singular;
    return false;
  }
  const double radius = 3.0 * std::max(out.a, out.b);
  const double cx = out.mx * v.scale_x + v.offset_x, cy = out.my * v.scale_y + v.offset_y;
  const double rx = radius * v.scale_x, ry = radius * v.scale_y;
  const double lo_c = std::ceil(cx - rx) - 1, hi_c = std::floor(cx + rx) + 1;
  const double lo_r = std::ceil(cy - ry) - 1, hi_r = std::floor(cy + ry) + 1;
  if (!(hi_c >= 0 && lo_c < v.width && hi_r >= 0 && lo_r < v.height)) return false;
  out.c0 = static_cast<int>(std::max(lo_c, 0.0));
  out.c1 = static_cast<int>(std::min(hi_c, v.width - 1.0));
  out.r0 = static_cast<int>(std::max(lo_r, 0.0));
  out.r1 = static_cast<int>(std::min(hi_r, v.height - 1.0));
  return true;
}

// One Gaussian touching one pixel, recorded in compositing order.
struct Fragment {
  std::uint32_t pixel;
  std::uint32_t splat;
  double alpha;   // 0 for ghosts
  double trans;   // transmittance before this fragment
  double gauss;   // exp(-q/2)
  double u0, u1, dx, dy;
};

struct Raster {
  std::vector<Splat> splats;
  std::vector<Fragment> frags;
  RenderResult result;
};

inline void check_inputs(const DynamicScene& s, std::span<const double> mask, const View& v) {
  if (v.width < 1 || v.height < 1) throw InvalidArgument("view must be at least 1x1 pixels");
  if (!(v.scale_x > 0.0 && v.scale_y > 0.0)) throw InvalidArgument("view scale must be positive");
  if (v.frame >= s.num_frames) throw InvalidArgument("view frame_index outside [0, T-1]");
  if (!mask.empty() && mask.size() != s.num_gaussians) {
    throw InvalidArgument("mask length " + std::to_string(mask.size()) + " != N " +
                          std::to_string(s.num_gaussians));
  }
}

inline Raster rasterize(const DynamicScene& s, std::span<const double> mask, const View& v,
                        bool record) {
  check_inputs(s, mask, v);
  Raster r;
  r.result.image = Image(v.width, v.height);
  r.result.weight_sum.assign(v.pixel_count(), 0.0);
  std::vector<double> trans(v.pixel_count(), 1.0);
  auto& img = r.result.image.pixels;

  for (std::uint32_t n : s.depth_order) {
    const double m = mask.empty() ? 1.0 : mask[n];
    Splat sp;
    if (!make_splat(s, n, m, v, record, sp, r.result.skipped_singular)) continue;
    const auto splat_idx = static_cast<std::uint32_t>(r.splats.size());
    r.splats.push_back(sp);
    for (int row = sp.r0; row <= sp.r1; ++row) {
      const double wy = (row - v.offset_y) / v.scale_y;
      for (int col = sp.c0; col <= sp.c1; ++col) {
        const double wx = (col - v.offset_x) / v.scale_x;
        const double dx = wx - sp.mx, dy = wy - sp.my;
        const double u0 = sp.cos_t * dx + sp.sin_t * dy;
        const double u1 = -sp.sin_t * dx + sp.cos_t * dy;
        const double q = (u0 / sp.a) * (u0 / sp.a) + (u1 / sp.b) * (u1 / sp.b);
        if (q > kCutoffSq) continue;
        const double g = std::exp(-0.5 * q);
        const double alpha = sp.opacity * g;
        const auto p = static_cast<std::uint32_t>(row * v.width + col);
        const double tr = trans[p];
        if (record) r.frags.push_back(Fragment{p, splat_idx, alpha, tr, g, u0, u1, dx, dy});
        if (sp.ghost) continue;
        const double w = alpha * tr;
        for (int ch = 0; ch < 3; ++ch) img[p * 3 + ch] += sp.color[ch] * w;
        r.result.weight_sum[p] += w;
        trans[p] = tr * (1.0 - alpha);
      }
    }
  }
  return r;
}

}  // namespace detail

// Composites the scene's Gaussians for view.frame in depth order.
// `mask` holds one multiplier M_n per Gaussian applied to effective opacity
// and to linear scale; empty means all ones.
inline RenderResult render_detailed(const DynamicScene& scene, std::span<const double> mask,
                                    const View& view) {
  return std::move(detail::rasterize(scene, mask, view, false).result);
}

inline Image render(const DynamicScene& scene, std::span<const double> mask, const View& view) {
  return std::move(render_detailed(scene, mask, view).image);
}

inline Image render(const DynamicScene& scene, const View& view) { return render(scene, {}, view); }

// Reverse-mode gradients of <upstream, render(scene, mask, view)>.
//
// A Gaussian whose mask is exactly 0 contributes nothing to the image, but
// its dL/dM is still reported through the opacity path with its unmasked
// footprint, which lets a straight-through mask recover.
inline FrameGrad render_grad(const DynamicScene& scene, std::span<const double> mask,
                             const View& view, const Image& upstream) {
  if (upstream.width != view.width || upstream.height != view.height) {
    throw InvalidArgument("render_grad: upstream gradient shape does not match view");
  }
  auto raster = detail::rasterize(scene, mask, view, true);
  const std::size_t n_total = scene.num_gaussians;
  FrameGrad grad(n_total);

  // Per-splat accumulators in the splat's local frame.
  struct Acc {
    double d_opacity = 0, d_a = 0, d_b = 0, d_mx = 0, d_my = 0, d_theta = 0, d_ghost = 0;
  };
  std::vector<Acc> acc(raster.splats.size());
  std::vector<double> behind(view.pixel_count() * 3, 0.0);  // color composited behind
  const auto& up = upstream.pixels;

  for (auto it = raster.frags.rbegin(); it != raster.frags.rend(); ++it) {
    const auto& f = *it;
    const auto& sp = raster.splats[f.splat];
    Acc& a = acc[f.splat];
    double* S = behind.data() + static_cast<std::size_t>(f.pixel) * 3;
    const double* gp = up.data() + static_cast<std::size_t>(f.pixel) * 3;
    double d_alpha = 0.0;
    for (int ch = 0; ch < 3; ++ch) d_alpha += gp[ch] * f.trans * (sp.color[ch] - S[ch]);
    if (sp.ghost) {
      a.d_ghost += d_alpha * f.gauss;
      continue;
    }
    const double w = f.alpha * f.trans;
    double* dc = grad.colors.data() + static_cast<std::size_t>(sp.id) * 3;
    for (int ch = 0; ch < 3; ++ch) {
      dc[ch] += gp[ch] * w;
      S[ch] = sp.color[ch] * f.alpha + (1.0 - f.alpha) * S[ch];
    }
    a.d_opacity += d_alpha * f.gauss;
    const double d_q = d_alpha * f.alpha * -0.5;
    const double d_u0 = d_q * 2.0 * f.u0 / (sp.a * sp.a);
    const double d_u1 = d_q * 2.0 * f.u1 / (sp.b * sp.b);
    a.d_a += d_q * -2.0 * f.u0 * f.u0 / (sp.a * sp.a * sp.a);
    a.d_b += d_q * -2.0 * f.u1 * f.u1 / (sp.b * sp.b * sp.b);
    a.d_mx += d_u0 * -sp.cos_t + d_u1 * sp.sin_t;
    a.d_my += d_u0 * -sp.sin_t + d_u1 * -sp.cos_t;
    a.d_theta += d_u0 * f.u1 + d_u1 * -f.u0;
  }

  const std::size_t t = view.frame;
  for (std::size_t k = 0; k < raster.splats.size(); ++k) {
    const auto& sp = raster.splats[k];
    const Acc& a = acc[k];
    const std::size_t n = sp.id;
    const double base_opacity = sigmoid(scene.opacity_logits[n]);
    if (sp.ghost) {
      grad.mask[n] += a.d_ghost * base_opacity;
      continue;
    }
    const double m = mask.empty() ? 1.0 : mask[n];
    const double sx = std::exp(scene.log_scales[n * 3 + 0]);
    const double sy = std::exp(scene.log_scales[n * 3 + 1]);
    grad.opacity_logits[n] += a.d_opacity * m * base_opacity * (1.0 - base_opacity);
    grad.log_scales[n * 3 + 0] += a.d_a * sp.a;
    grad.log_scales[n * 3 + 1] += a.d_b * sp.b;
    grad.mask[n] += a.d_opacity * base_opacity + a.d_a * sx + a.d_b * sy;
    grad.positions[n * 3 + 0] += a.d_mx;
    grad.positions[n * 3 + 1] += a.d_my;

    const double* q = scene.rotations.data() + (t * n_total + n) * 4;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    const double Y = 2.0 * (w * z + x * y), X = w * w + x * x - y * y - z * z;
    const double denom = X * X + Y * Y;
    if (denom > 0.0) {
      const double dY = a.d_theta * X / denom, dX = a.d_theta * -Y / denom;
      double* dq = grad.rotations.data() + n * 4;
      dq[0] += dY * 2.0 * z + dX * 2.0 * w;
      dq[1] += dY * 2.0 * y + dX * 2.0 * x;
      dq[2] += dY * 2.0 * x + dX * -2.0 * y;
      dq[3] += dY * 2.0 * w + dX * -2.0 * z;
    }
  }
  return grad;
}

// 10 log10(1 / MSE) over values clamped to [0,1]; +inf for identical images.
inline double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw InvalidArgument("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = std::clamp(a.pixels[i], 0.0, 1.0) - std::clamp(b.pixels[i], 0.0, 1.0);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(a.pixels.size()) / se);
}

inline bool psnr_exact(double db) { return std::isinf(db) && db > 0; }

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : img.pixels) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

// Raw little-endian float32 dump, H x W x 3.
inline std::vector<std::uint8_t> encode_f32(const Image& img) {
  ByteWriter w;
  for (double v : img.pixels) w.f32(static_cast<float>(v));
  return w.take();
}

inline View view_from_json(const nlohmann::json& j) {
  View v;
  v.width = j.at("width").get<int>();
  v.height = j.at("height").get<int>();
  v.frame = j.value("frame", std::size_t{0});
  if (j.contains("scale")) {
    v.scale_x = j["scale"].at(0).get<double>();
    v.scale_y = j["scale"].at(1).get<double>();
  }
  if (j.contains("offset")) {
    v.offset_x = j["offset"].at(0).get<double>();
    v.offset_y = j["offset"].at(1).get<double>();
  }
  return v;
}

// Accepts either a list of view objects or one object with "frames": "all"
// (or a list of frame indices), which is expanded per frame.
inline std::vector<View> views_from_json(const nlohmann::json& j, std::size_t num_frames) {
  std::vector<View> out;
  try {
    if (j.is_array()) {
      for (const auto& e : j) out.push_back(view_from_json(e));
    } else {
      View proto = view_from_json(j);
      const auto& frames = j.at("frames");
      if (frames.is_string() && frames.get<std::string>() == "all") {
        for (std::size_t t = 0; t < num_frames; ++t) {
          proto.frame = t;
          out.push_back(proto);
        }
      } else {
        for (const auto& f : frames) {
          proto.frame = f.get<std::size_t>();
          out.push_back(proto);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("views: ") + e.what());
  }
  for (const auto& v : out) {
    if (v.frame >= num_frames) throw InvalidArgument("views: frame index outside scene");
  }
  return out;
}

inline nlohmann::json view_to_json(const View& v) {
  return {{"width", v.width},
          {"height", v.height},
          {"frame", v.frame},
          {"scale", {v.scale_x, v.scale_y}},
          {"offset", {v.offset_x, v.offset_y}}};
}

}  // namespace tc3dgs
