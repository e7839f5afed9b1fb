#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tc3dgs/container.hpp"
#include "tc3dgs/core.hpp"
#include "tc3dgs/keypoints.hpp"
#include "tc3dgs/masking.hpp"
#include "tc3dgs/quant.hpp"
#include "tc3dgs/renderer.hpp"

namespace tc3dgs {

struct PipelineConfig {
  bool masking = true;
  bool quantization = true;
  bool keypoints = true;
  MaskTrainConfig mask;
  BitRange bits;
  QatConfig qat;
  KeypointConfig keypoint = KeypointConfig::short_sequence();
  std::size_t threads = 0;        // 0: TC3DGS_THREADS or hardware concurrency
  double psnr_threshold = 35.0;   // used by verify
  std::uint64_t seed = 0;

  static PipelineConfig identity() {
    PipelineConfig c;
    c.masking = c.quantization = c.keypoints = false;
    return c;
  }
};

struct CompressReport {
  std::size_t gaussians_before = 0;
  std::size_t gaussians_after = 0;
  std::size_t num_frames = 0;
  std::uint64_t dense_bytes = 0;
  std::uint64_t container_bytes = 0;
  std::map<std::string, std::uint64_t> section_bytes;
  std::map<std::string, int> bits;
  std::map<std::string, double> step_sizes;
  std::map<std::string, std::map<std::size_t, std::size_t>> keypoint_histogram;  // row size -> rows
  std::vector<double> psnr;  // per view, decompressed vs input render
  double average_quantized_bits = 0.0;

  double ratio() const { return container_bytes ? static_cast<double>(dense_bytes) / container_bytes : 0.0; }
  double min_psnr() const {
    double m = std::numeric_limits<double>::infinity();
    for (double p : psnr) m = std::min(m, p);
    return m;
  }
};

struct CompressResult {
  Container container;
  std::vector<std::uint8_t> bytes;
  CompressReport report;
  std::optional<MaskState> mask;
  std::optional<SensitivityReport> sensitivity;
};

namespace detail {

inline std::vector<std::uint32_t> float_words(std::span<const double> v) {
  std::vector<std::uint32_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::bit_cast<std::uint32_t>(static_cast<float>(v[i]));
  return out;
}

inline std::vector<std::uint32_t> code_words(std::span<const double> v, const QuantizerState& q) {
  const auto codes = quantize_finalize(v, q);
  std::vector<std::uint32_t> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = code_to_word(codes[i], q.bit_width);
  return out;
}

inline double word_value(std::uint32_t w, const GroupPayload& p) {
  if (!p.quantized()) return static_cast<double>(std::bit_cast<float>(w));
  return word_to_code(w, p.width) * p.step + p.offset;
}

// Values on the representable grid of the payload: quantized groups land on
// code * step + offset, float groups on float32.
inline std::vector<double> to_grid(std::span<const double> v, const GroupPayload& p) {
  std::vector<double> out(v.size());
  if (!p.quantized()) {
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = snap_f32(v[i]);
    return out;
  }
  const QuantizerState q{p.step, p.width, true, p.offset};
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = quantize_one(v[i], q);
  return out;
}

template <typename Fn>
auto run_stage(const char* name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace detail

// Expands a container into dense tensors.
inline DynamicScene decompress(const Container& c) {
  DynamicScene s = DynamicScene::zeros(c.num_gaussians, c.num_frames);
  s.depth_order = c.depth_order;
  for (Group g : kAllGroups) {
    const auto& p = c.groups[static_cast<int>(g)];
    auto& dst = s.tensor(g);
    if (p.sparse) {
      KeypointSet set;
      set.num_frames = c.num_frames;
      set.row_offsets = p.row_offsets;
      set.time_indices = p.time_indices;
      set.values.resize(p.words.size());
      for (std::size_t i = 0; i < p.words.size(); ++i) set.values[i] = detail::word_value(p.words[i], p);
      dst = reconstruct(set, c.num_frames, c.num_gaussians, static_cast<std::size_t>(group_dim(g)));
    } else {
      if (p.words.size() != dst.size()) throw InvalidArgument("decompress: payload size mismatch");
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = detail::word_value(p.words[i], p);
    }
    if (g == Group::rotations && (p.quantized() || p.sparse)) normalize_quaternions(dst);
    if (g == Group::colors && p.quantized()) {
      for (double& x : dst) x = std::clamp(x, 0.0, 1.0);
    }
  }
  return s;
}

inline DynamicScene decompress(std::span<const std::uint8_t> bytes) { return decompress(decode_container(bytes)); }

inline std::vector<Image> render_all(const DynamicScene& scene, std::span<const View> views) {
  std::vector<Image> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(render(scene, v));
  return out;
}

// Mask training -> pruning -> sensitivity, bit allocation and quantization-aware
// fine-tuning -> keypoint selection -> serialization. Each stage can be
// switched off in `cfg`; a precomputed mask skips mask training.
inline CompressResult compress(const DynamicScene& scene, std::span<const View> views, const PipelineConfig& cfg,
                               const MaskState* precomputed_mask = nullptr) {
  detail::run_stage("input", [&] {
    scene.validate();
    for (const auto& v : views) {
      if (v.frame >= scene.num_frames) throw InvalidArgument("view frame outside scene");
    }
    if (cfg.keypoints) cfg.keypoint.validate();
    if (cfg.quantization) cfg.bits.validate();
    if (scene.num_frames > 65536) throw InvalidArgument("at most 65536 frames are supported");
    return 0;
  });
  CompressResult res;
  const std::vector<Image> targets = render_all(scene, views);

  DynamicScene work = scene;
  if (cfg.masking) {
    res.mask = detail::run_stage("masking", [&] {
      if (precomputed_mask) return *precomputed_mask;
      return train_masks(scene, views, targets, cfg.mask);
    });
    detail::run_stage("pruning", [&] {
      if (res.mask->num_gaussians != scene.num_gaussians || res.mask->num_frames != scene.num_frames) {
        throw InvalidArgument("mask shape does not match scene");
      }
      work = apply_prune(scene, prune(*res.mask));
      return 0;
    });
  }

  Container c;
  c.stages = static_cast<std::uint16_t>((cfg.masking ? kStageMasking : 0) | (cfg.quantization ? kStageQuantization : 0) |
                                        (cfg.keypoints ? kStageKeypoints : 0));
  c.original_gaussians = static_cast<std::uint32_t>(scene.num_gaussians);
  c.num_gaussians = static_cast<std::uint32_t>(work.num_gaussians);
  c.num_frames = static_cast<std::uint32_t>(work.num_frames);
  c.threshold = static_cast<float>(cfg.mask.threshold);
  c.tolerance = cfg.keypoints ? static_cast<float>(cfg.keypoint.tolerance) : 0.0f;
  c.max_keypoints = cfg.keypoints ? static_cast<std::uint16_t>(std::min<std::size_t>(cfg.keypoint.max_keypoints, 65535)) : 0;
  c.depth_order = work.depth_order;

  if (cfg.quantization) {
    detail::run_stage("quantization", [&] {
      res.sensitivity = analyze_sensitivity(work, views, cfg.bits);
      auto qat = quantization_aware_finetune(work, views, targets, res.sensitivity->bits, cfg.qat);
      work = std::move(qat.scene);
      for (Group g : kQuantizedGroups) {
        auto& p = c.groups[static_cast<int>(g)];
        p.width = qat.quantizers[static_cast<int>(g)].bit_width;
        p.step = snap_f32(qat.quantizers[static_cast<int>(g)].step_size);
        p.offset = snap_f32(qat.quantizers[static_cast<int>(g)].offset);
      }
      auto& pos = c.groups[static_cast<int>(Group::positions)];
      pos.width = kPositionBits;
      pos.step = snap_f32(absmax_step_size(work.positions, kPositionBits));
      if (!(pos.step > 0.0)) pos.step = 1e-8;
      return 0;
    });
  }

  detail::run_stage(cfg.keypoints ? "keypoints" : "serialization", [&] {
    for (Group g : kAllGroups) {
      auto& p = c.groups[static_cast<int>(g)];
      const auto grid = detail::to_grid(work.tensor(g), p);
      const QuantizerState q{p.step, p.width, true, p.offset};
      if (cfg.keypoints && is_dynamic(g)) {
        auto set = batch_select(grid, work.num_frames, work.num_gaussians, static_cast<std::size_t>(group_dim(g)),
                                cfg.keypoint, cfg.threads);
        p.sparse = true;
        p.row_offsets = std::move(set.row_offsets);
        p.time_indices = std::move(set.time_indices);
        p.words = p.quantized() ? detail::code_words(set.values, q) : detail::float_words(set.values);
      } else {
        p.sparse = false;
        p.words = p.quantized() ? detail::code_words(grid, q) : detail::float_words(grid);
      }
    }
    return 0;
  });

  res.bytes = encode_container(c);
  res.container = std::move(c);

  auto& rep = res.report;
  rep.gaussians_before = scene.num_gaussians;
  rep.gaussians_after = res.container.num_gaussians;
  rep.num_frames = scene.num_frames;
  rep.dense_bytes = dense_storage_bytes(scene);
  rep.container_bytes = res.bytes.size();
  const auto decoded = decode_container_detailed(res.bytes);
  rep.section_bytes["header"] = decoded.header_bytes;
  for (const auto& s : decoded.sections) rep.section_bytes[section_name(s.id)] = s.length;
  for (Group g : kAllGroups) {
    const auto& p = res.container.groups[static_cast<int>(g)];
    rep.bits[std::string(group_name(g))] = p.width;
    if (p.quantized()) rep.step_sizes[std::string(group_name(g))] = p.step;
    if (p.sparse) {
      auto& h = rep.keypoint_histogram[std::string(group_name(g))];
      for (std::size_t r = 0; r + 1 < p.row_offsets.size(); ++r) ++h[p.row_offsets[r + 1] - p.row_offsets[r]];
    }
  }
  {
    double total = 0.0, count = 0.0;
    for (Group g : kQuantizedGroups) {
      const double n = static_cast<double>(work.expected_size(g));
      total += n * res.container.groups[static_cast<int>(g)].width;
      count += n;
    }
    rep.average_quantized_bits = count > 0 ? total / count : 0.0;
  }
  const DynamicScene restored = decompress(res.container);
  for (std::size_t i = 0; i < views.size(); ++i) rep.psnr.push_back(psnr(render(restored, views[i]), targets[i]));
  return res;
}

inline nlohmann::json psnr_json(double db) {
  if (psnr_exact(db)) return "exact";
  return db;
}

inline nlohmann::json report_to_json(const CompressReport& r) {
  nlohmann::json j;
  j["gaussians_before"] = r.gaussians_before;
  j["gaussians_after"] = r.gaussians_after;
  j["num_frames"] = r.num_frames;
  j["dense_bytes"] = r.dense_bytes;
  j["container_bytes"] = r.container_bytes;
  j["ratio"] = r.ratio();
  j["section_bytes"] = r.section_bytes;
  j["bits"] = r.bits;
  j["step_sizes"] = r.step_sizes;
  j["average_quantized_bits"] = r.average_quantized_bits;
  nlohmann::json hist;
  for (const auto& [g, h] : r.keypoint_histogram) {
    nlohmann::json row;
    for (const auto& [k, n] : h) row[std::to_string(k)] = n;
    hist[g] = row;
  }
  j["keypoint_histogram"] = hist;
  nlohmann::json ps = nlohmann::json::array();
  for (double p : r.psnr) ps.push_back(psnr_json(p));
  j["psnr"] = ps;
  j["min_psnr"] = psnr_json(r.min_psnr());
  return j;
}

// Section sizes, bit table and keypoint distribution of an encoded container.
inline nlohmann::json stats(std::span<const std::uint8_t> bytes) {
  const auto d = decode_container_detailed(bytes);
  const Container& c = d.container;
  nlohmann::json j;
  j["original_gaussians"] = c.original_gaussians;
  j["num_gaussians"] = c.num_gaussians;
  j["num_frames"] = c.num_frames;
  j["stages"] = {{"masking", (c.stages & kStageMasking) != 0},
                 {"quantization", (c.stages & kStageQuantization) != 0},
                 {"keypoints", (c.stages & kStageKeypoints) != 0}};
  j["mask_threshold"] = c.threshold;
  j["kp_tolerance"] = c.tolerance;
  j["kp_max"] = c.max_keypoints;
  j["total_bytes"] = bytes.size();
  j["sections"]["header"] = d.header_bytes;
  for (const auto& s : d.sections) j["sections"][section_name(s.id)] = s.length;
  for (Group g : kAllGroups) {
    const auto& p = c.groups[static_cast<int>(g)];
    const std::string name(group_name(g));
    j["bits"][name] = p.width;
    if (p.quantized()) j["step_sizes"][name] = p.step;
    if (p.sparse) {
      std::map<std::size_t, std::size_t> h;
      std::size_t total = 0;
      for (std::size_t r = 0; r + 1 < p.row_offsets.size(); ++r) {
        ++h[p.row_offsets[r + 1] - p.row_offsets[r]];
        total += p.row_offsets[r + 1] - p.row_offsets[r];
      }
      nlohmann::json row;
      for (const auto& [k, n] : h) row[std::to_string(k)] = n;
      j["keypoint_histogram"][name] = row;
      const std::size_t rows = p.row_offsets.size() - 1;
      j["mean_keypoints_per_row"][name] = rows ? static_cast<double>(total) / rows : 0.0;
    }
  }
  const auto dense = dense_storage_bytes(c.original_gaussians, c.num_frames);
  j["dense_bytes"] = dense;
  j["ratio"] = static_cast<double>(dense) / static_cast<double>(bytes.size());
  return j;
}

struct VerifyResult {
  bool pass = false;
  std::string error;             // decode or invariant failure, empty when fine
  std::vector<double> psnr;      // per view
  bool quaternions_ok = false;
  bool weights_ok = false;
  bool keypoints_ok = false;
};

// Decodes, re-renders against the reference and checks invariants.
inline VerifyResult verify(std::span<const std::uint8_t> bytes, const DynamicScene& reference,
                           std::span<const View> views, double psnr_threshold) {
  VerifyResult v;
  Container c;
  DynamicScene restored;
  try {
    c = decode_container(bytes);
    restored = decompress(c);
  } catch (const std::exception& e) {
    v.error = e.what();
    return v;
  }
  if (restored.num_frames != reference.num_frames) {
    v.error = "frame count differs from reference";
    return v;
  }
  v.quaternions_ok = true;
  for (std::size_t i = 0; i + 3 < restored.rotations.size(); i += 4) {
    const double* q = restored.rotations.data() + i;
    if (std::abs(std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]) - 1.0) > 1e-6) {
      v.quaternions_ok = false;
    }
  }
  v.weights_ok = true;
  bool psnr_ok = true;
  for (const auto& view : views) {
    const auto rr = render_detailed(restored, {}, view);
    for (double w : rr.weight_sum) {
      if (w > 1.0 + 1e-9) v.weights_ok = false;
    }
    const double p = psnr(rr.image, render(reference, view));
    v.psnr.push_back(p);
    if (!(p >= psnr_threshold)) psnr_ok = false;
  }
  v.keypoints_ok = true;
  for (Group g : kDynamicGroups) {
    const auto& p = c.groups[static_cast<int>(g)];
    if (!p.sparse) continue;
    for (std::size_t r = 0; r + 1 < p.row_offsets.size(); ++r) {
      if (c.max_keypoints && p.row_offsets[r + 1] - p.row_offsets[r] > std::max<std::size_t>(c.max_keypoints, 2)) {
        v.keypoints_ok = false;
      }
    }
  }
  v.pass = v.quaternions_ok && v.weights_ok && v.keypoints_ok && psnr_ok;
  if (!v.pass && v.error.empty()) v.error = psnr_ok ? "invariant check failed" : "PSNR below threshold";
  return v;
}

}  // namespace tc3dgs
