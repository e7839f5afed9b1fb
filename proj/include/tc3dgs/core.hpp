#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tc3dgs/bitio.hpp"
#include "tc3dgs/error.hpp"

namespace tc3dgs {

// Parameter groups of a dynamic scene. The first three vary per frame.
enum class Group : std::uint8_t { positions = 0, rotations, colors, log_scales, opacity_logits };

inline constexpr std::array<Group, 5> kAllGroups = {Group::positions, Group::rotations, Group::colors,
                                                    Group::log_scales, Group::opacity_logits};
inline constexpr std::array<Group, 3> kDynamicGroups = {Group::positions, Group::rotations,
                                                        Group::colors};
// Groups that go through the mixed-precision quantizer; positions are fixed at 16 bits.
inline constexpr std::array<Group, 4> kQuantizedGroups = {Group::rotations, Group::colors,
                                                          Group::log_scales, Group::opacity_logits};

inline constexpr int group_dim(Group g) {
  switch (g) {
    case Group::positions: return 3;
    case Group::rotations: return 4;
    case Group::colors: return 3;
    case Group::log_scales: return 3;
    case Group::opacity_logits: return 1;
  }
  return 0;
}

inline constexpr bool is_dynamic(Group g) {
  return g == Group::positions || g == Group::rotations || g == Group::colors;
}

inline constexpr std::string_view group_name(Group g) {
  switch (g) {
    case Group::positions: return "positions";
    case Group::rotations: return "rotations";
    case Group::colors: return "colors";
    case Group::log_scales: return "log_scales";
    case Group::opacity_logits: return "opacity_logits";
  }
  return "?";
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Rounds through float32 so the value survives a float32 round trip exactly.
// The volatile store keeps GCC 11 at -O3 from folding the round trip away.
inline double snap_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

// Dense per-frame Gaussian parameters.
//
// Time-varying tensors are laid out [t][n][d] row-major; static tensors [n][d].
// Values are held in double for optimization; file formats store float32.
struct DynamicScene {
  std::size_t num_gaussians = 0;
  std::size_t num_frames = 0;
  std::vector<double> positions;       // T x N x 3
  std::vector<double> rotations;       // T x N x 4, (w, x, y, z)
  std::vector<double> colors;          // T x N x 3
  std::vector<double> log_scales;      // N x 3
  std::vector<double> opacity_logits;  // N
  std::vector<std::uint32_t> depth_order;  // front-to-back

  static DynamicScene zeros(std::size_t n, std::size_t t) {
    DynamicScene s;
    s.num_gaussians = n;
    s.num_frames = t;
    s.positions.assign(t * n * 3, 0.0);
    s.rotations.assign(t * n * 4, 0.0);
    for (std::size_t i = 0; i < t * n; ++i) s.rotations[i * 4] = 1.0;
    s.colors.assign(t * n * 3, 0.0);
    s.log_scales.assign(n * 3, 0.0);
    s.opacity_logits.assign(n, 0.0);
    s.depth_order.resize(n);
    std::iota(s.depth_order.begin(), s.depth_order.end(), 0u);
    return s;
  }

  std::vector<double>& tensor(Group g) {
    switch (g) {
      case Group::positions: return positions;
      case Group::rotations: return rotations;
      case Group::colors: return colors;
      case Group::log_scales: return log_scales;
      case Group::opacity_logits: return opacity_logits;
    }
    return positions;
  }
  const std::vector<double>& tensor(Group g) const {
    return const_cast<DynamicScene*>(this)->tensor(g);
  }

  std::size_t expected_size(Group g) const {
    const std::size_t per = num_gaussians * static_cast<std::size_t>(group_dim(g));
    return is_dynamic(g) ? per * num_frames : per;
  }

  std::span<const double> position(std::size_t t, std::size_t n) const {
    return {positions.data() + (t * num_gaussians + n) * 3, 3};
  }
  std::span<const double> rotation(std::size_t t, std::size_t n) const {
    return {rotations.data() + (t * num_gaussians + n) * 4, 4};
  }
  std::span<const double> color(std::size_t t, std::size_t n) const {
    return {colors.data() + (t * num_gaussians + n) * 3, 3};
  }

  // Checks shapes, depth permutation, quaternion norms and the color range.
  void validate() const {
    for (Group g : kAllGroups) {
      if (tensor(g).size() != expected_size(g)) {
        throw InvalidArgument(std::string("scene tensor '") + std::string(group_name(g)) +
                              "' has " + std::to_string(tensor(g).size()) + " values, expected " +
                              std::to_string(expected_size(g)));
      }
    }
    if (depth_order.size() != num_gaussians) throw InvalidArgument("depth_order length != N");
    std::vector<char> seen(num_gaussians, 0);
    for (auto i : depth_order) {
      if (i >= num_gaussians || seen[i]) throw InvalidArgument("depth_order is not a permutation");
      seen[i] = 1;
    }
    for (std::size_t i = 0; i < num_frames * num_gaussians; ++i) {
      const double* q = rotations.data() + i * 4;
      const double norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
      if (std::abs(norm - 1.0) > 1e-6) throw InvalidArgument("rotation is not a unit quaternion");
    }
    for (double c : colors) {
      if (!(c >= 0.0 && c <= 1.0)) throw InvalidArgument("color outside [0,1]");
    }
  }

  bool operator==(const DynamicScene&) const = default;
};

inline void normalize_quaternions(std::vector<double>& rotations) {
  for (std::size_t i = 0; i + 3 < rotations.size(); i += 4) {
    double* q = rotations.data() + i;
    const double norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (norm < 1e-12) {
      q[0] = 1.0;
      q[1] = q[2] = q[3] = 0.0;
    } else {
      for (int k = 0; k < 4; ++k) q[k] /= norm;
    }
  }
}

// Keeps only the listed Gaussians (sorted ascending) and remaps depth_order.
inline DynamicScene select_gaussians(const DynamicScene& s, std::span<const std::uint32_t> keep) {
  DynamicScene out = DynamicScene::zeros(keep.size(), s.num_frames);
  const std::size_t n_in = s.num_gaussians, n_out = keep.size();
  for (Group g : kAllGroups) {
    const std::size_t d = static_cast<std::size_t>(group_dim(g));
    const std::size_t frames = is_dynamic(g) ? s.num_frames : 1;
    const auto& src = s.tensor(g);
    auto& dst = out.tensor(g);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t j = 0; j < n_out; ++j) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((t * n_in + keep[j]) * d), d,
                    dst.begin() + static_cast<std::ptrdiff_t>((t * n_out + j) * d));
      }
    }
  }
  std::vector<std::int64_t> remap(n_in, -1);
  for (std::size_t j = 0; j < n_out; ++j) remap[keep[j]] = static_cast<std::int64_t>(j);
  out.depth_order.clear();
  for (auto i : s.depth_order) {
    if (remap[i] >= 0) out.depth_order.push_back(static_cast<std::uint32_t>(remap[i]));
  }
  return out;
}

// Float32 accounting of every tensor except depth_order.
inline std::uint64_t dense_storage_bytes(std::uint64_t n, std::uint64_t t) {
  return 4 * (t * n * (3 + 4 + 3) + n * (3 + 1));
}
inline std::uint64_t dense_storage_bytes(const DynamicScene& s) {
  return dense_storage_bytes(s.num_gaussians, s.num_frames);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

// Piecewise-linear motion for the moving Gaussians. Knots sit at frame 0, at
// each breakpoint and at the last frame; knot positions are drawn uniformly
// within +-amplitude of the Gaussian's base position. Optional per-frame
// Gaussian noise of stddev noise_sigma is added on top.
struct MotionSpec {
  std::vector<double> breakpoints;
  double amplitude = 0.3;
  double noise_sigma = 0.0;

  static MotionSpec standard(std::size_t frames) {
    MotionSpec m;
    if (frames >= 4) {
      m.breakpoints = {std::round((frames - 1) / 3.0), std::round(2.0 * (frames - 1) / 3.0)};
    }
    return m;
  }
};

struct Appearance {
  double extent = 0.9;               // positions drawn in [-extent, extent]
  double scale_min = 0.02, scale_max = 0.05;
  double opacity_min = 0.6, opacity_max = 0.95;
  double color_min = 0.1, color_max = 0.9;
  double faint_fraction = 0.0;       // this fraction gets effective opacity faint_opacity
  double faint_opacity = 0.01;
  double color_noise = 0.0;          // per-frame color jitter stddev (clamped to [0,1])
};

inline DynamicScene make_synthetic_scene(std::size_t n_static, std::size_t n_moving,
                                         std::size_t frames, const MotionSpec& motion,
                                         std::uint64_t seed, const Appearance& look = {}) {
  if (frames < 1) throw InvalidArgument("make_synthetic_scene: frames must be >= 1");
  for (double b : motion.breakpoints) {
    if (!(b >= 0.0 && b <= static_cast<double>(frames - 1))) {
      throw InvalidArgument("make_synthetic_scene: breakpoint " + std::to_string(b) +
                            " outside [0, " + std::to_string(frames - 1) + "]");
    }
  }
  if (motion.noise_sigma < 0.0) throw InvalidArgument("make_synthetic_scene: negative noise_sigma");

  const std::size_t n = n_static + n_moving, T = frames;
  DynamicScene s = DynamicScene::zeros(n, T);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> knots_t{0.0};
  for (double b : motion.breakpoints) knots_t.push_back(b);
  if (T > 1) knots_t.push_back(static_cast<double>(T - 1));
  std::sort(knots_t.begin(), knots_t.end());
  knots_t.erase(std::unique(knots_t.begin(), knots_t.end()), knots_t.end());

  const auto n_faint = static_cast<std::size_t>(std::llround(look.faint_fraction * n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> faint(n, 0);
  for (std::size_t i = 0; i < n_faint; ++i) faint[order[i]] = 1;

  for (std::size_t g = 0; g < n; ++g) {
    std::array<double, 3> base{uni(-look.extent, look.extent), uni(-look.extent, look.extent),
                               uni(-look.extent, look.extent)};
    const double angle = uni(-M_PI, M_PI);
    std::array<double, 4> quat{std::cos(angle / 2), 0.0, 0.0, std::sin(angle / 2)};
    std::array<double, 3> rgb{uni(look.color_min, look.color_max), uni(look.color_min, look.color_max),
                              uni(look.color_min, look.color_max)};
    for (int k = 0; k < 3; ++k) s.log_scales[g * 3 + k] = std::log(uni(look.scale_min, look.scale_max));
    const double opacity = faint[g] ? look.faint_opacity : uni(look.opacity_min, look.opacity_max);
    s.opacity_logits[g] = std::log(opacity / (1.0 - opacity));

    const bool moving = g >= n_static;
    std::vector<std::array<double, 3>> knot_vals;
    if (moving) {
      for (std::size_t i = 0; i < knots_t.size(); ++i) {
        std::array<double, 3> v{};
        for (int k = 0; k < 3; ++k) v[k] = base[k] + uni(-motion.amplitude, motion.amplitude);
        knot_vals.push_back(v);
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::array<double, 3> p = base;
      if (moving) {
        const double tt = static_cast<double>(t);
        std::size_t seg = 0;
        while (seg + 1 < knots_t.size() - 1 && tt > knots_t[seg + 1]) ++seg;
        if (knots_t.size() == 1) {
          p = knot_vals[0];
        } else {
          const double t0 = knots_t[seg], t1 = knots_t[seg + 1];
          const double a = (tt - t0) / (t1 - t0);
          for (int k = 0; k < 3; ++k) p[k] = knot_vals[seg][k] + a * (knot_vals[seg + 1][k] - knot_vals[seg][k]);
        }
        if (motion.noise_sigma > 0.0) {
          for (int k = 0; k < 3; ++k) p[k] += motion.noise_sigma * gauss(rng);
        }
      }
      for (int k = 0; k < 3; ++k) s.positions[(t * n + g) * 3 + k] = p[k];
      for (int k = 0; k < 4; ++k) s.rotations[(t * n + g) * 4 + k] = quat[k];
      for (int k = 0; k < 3; ++k) {
        double c = rgb[k];
        if (look.color_noise > 0.0) c = std::clamp(c + look.color_noise * gauss(rng), 0.0, 1.0);
        s.colors[(t * n + g) * 3 + k] = c;
      }
    }
  }
  std::vector<std::uint32_t> depth(n);
  std::iota(depth.begin(), depth.end(), 0u);
  std::shuffle(depth.begin(), depth.end(), rng);
  s.depth_order = std::move(depth);
  // Float32-representable, so a saved scene reloads bit-exactly.
  for (Group g : kAllGroups) {
    for (double& x : s.tensor(g)) x = snap_f32(x);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dense scene file: "TC3D", u16 version 0x0001, u32 N, u32 T, then float32
// positions, rotations, colors, log_scales, opacity_logits and u32 depth_order.

inline constexpr std::uint16_t kSceneFormatVersion = 0x0001;

inline std::vector<std::uint8_t> encode_scene(const DynamicScene& s) {
  ByteWriter w;
  w.tag("TC3D");
  w.u16(kSceneFormatVersion);
  w.u32(static_cast<std::uint32_t>(s.num_gaussians));
  w.u32(static_cast<std::uint32_t>(s.num_frames));
  for (Group g : kAllGroups) {
    for (double v : s.tensor(g)) w.f32(static_cast<float>(v));
  }
  for (auto i : s.depth_order) w.u32(i);
  return w.take();
}

inline DynamicScene decode_scene(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("TC3D");
  const auto version = r.u16();
  if (version != kSceneFormatVersion) {
    throw DecodeError("unsupported scene version " + std::to_string(version), 4);
  }
  const std::size_t n = r.u32(), t = r.u32();
  const std::uint64_t need = dense_storage_bytes(n, t) + 4ull * n;
  if (need != r.remaining()) {
    throw DecodeError("scene payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(need),
                      r.offset());
  }
  DynamicScene s = DynamicScene::zeros(n, t);
  for (Group g : kAllGroups) {
    for (double& v : s.tensor(g)) v = r.f32();
  }
  for (auto& i : s.depth_order) i = r.u32();
  return s;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// JSON manifest for tiny fixtures: flat arrays keyed by group name.
inline nlohmann::json scene_to_json(const DynamicScene& s) {
  nlohmann::json j;
  j["num_gaussians"] = s.num_gaussians;
  j["num_frames"] = s.num_frames;
  for (Group g : kAllGroups) j[std::string(group_name(g))] = s.tensor(g);
  j["depth_order"] = s.depth_order;
  return j;
}

inline DynamicScene scene_from_json(const nlohmann::json& j) {
  try {
    DynamicScene s = DynamicScene::zeros(j.at("num_gaussians").get<std::size_t>(),
                                         j.at("num_frames").get<std::size_t>());
    for (Group g : kAllGroups) {
      s.tensor(g) = j.at(std::string(group_name(g))).get<std::vector<double>>();
    }
    if (j.contains("depth_order")) s.depth_order = j["depth_order"].get<std::vector<std::uint32_t>>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("scene manifest: ") + e.what());
  }
}

// Loads either the binary layout or, for *.json paths, the manifest.
inline DynamicScene load_scene(const std::string& path) {
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
    std::ifstream f(path);
    if (!f) throw InvalidArgument("cannot open '" + path + "'");
    return scene_from_json(nlohmann::json::parse(f));
  }
  auto bytes = read_file(path);
  return decode_scene(bytes);
}

}  // namespace tc3dgs
