#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "tc3dgs/error.hpp"

namespace tc3dgs {

struct KeypointConfig {
  double tolerance = 1e-5;        // max sequence MSE
  std::size_t max_keypoints = 30;

  void validate() const {
    if (max_keypoints < 2) throw InvalidArgument("max_keypoints must be >= 2");
    if (!(tolerance >= 0.0)) throw InvalidArgument("keypoint tolerance must be >= 0");
  }

  static KeypointConfig short_sequence() { return {1e-5, 30}; }
  static KeypointConfig long_sequence() { return {1e-7, 60}; }
};

// Piecewise-linear reconstruction through (indices[i], values[i]).
inline std::vector<double> interpolate(std::span<const std::uint32_t> indices, std::span<const double> values,
                                       std::size_t num_frames) {
  if (indices.size() != values.size()) throw InvalidArgument("interpolate: indices/values length mismatch");
  if (num_frames == 0 || indices.empty()) throw InvalidArgument("interpolate: empty input");
  if (indices.front() != 0 || indices.back() != num_frames - 1) {
    throw InvalidArgument("interpolate: keypoints must include 0 and T-1");
  }
  for (std::size_t i = 1; i < indices.size(); ++i) {
    if (indices[i] <= indices[i - 1]) throw InvalidArgument("interpolate: indices not strictly increasing");
  }
  std::vector<double> out(num_frames);
  out[indices[0]] = values[0];
  for (std::size_t k = 1; k < indices.size(); ++k) {
    const std::size_t l = indices[k - 1], r = indices[k];
    const double vl = values[k - 1], vr = values[k];
    for (std::size_t i = l + 1; i < r; ++i) {
      out[i] = vl + (vr - vl) * static_cast<double>(i - l) / static_cast<double>(r - l);
    }
    out[r] = vr;
  }
  return out;
}

inline double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

// Greedy keypoint selection under a joint MSE tolerance and keypoint cap.
//
// Starts from both endpoints. Each round interpolates between the current
// keypoints, stops once MSE <= tolerance or the cap is reached, and
// otherwise adds the index with the largest squared error (lowest index on
// ties). Only the segment that was split has its errors recomputed.
inline std::vector<std::uint32_t> select_keypoints(std::span<const double> values, const KeypointConfig& cfg) {
  cfg.validate();
  const std::size_t T = values.size();
  if (T == 0) throw InvalidArgument("select_keypoints: empty sequence");
  if (T == 1) return {0};

  std::vector<std::uint32_t> kp{0, static_cast<std::uint32_t>(T - 1)};
  std::vector<double> err(T, 0.0);
  auto fill_segment = [&](std::size_t l, std::size_t r) {
    const double vl = values[l], vr = values[r];
    for (std::size_t i = l + 1; i < r; ++i) {
      const double interp = vl + (vr - vl) * static_cast<double>(i - l) / static_cast<double>(r - l);
      const double d = values[i] - interp;
      err[i] = d * d;
    }
  };
  fill_segment(0, T - 1);

  for (std::size_t round = 1; round + 2 <= cfg.max_keypoints; ++round) {
    double sum = 0.0;
    for (double e : err) sum += e;
    const double mse = sum / static_cast<double>(T);
    if (mse <= cfg.tolerance || kp.size() >= cfg.max_keypoints) break;

    std::size_t best = 0;
    for (std::size_t i = 1; i < T; ++i) {
      if (err[i] > err[best]) best = i;
    }
    auto pos = std::upper_bound(kp.begin(), kp.end(), static_cast<std::uint32_t>(best));
    const std::size_t l = *(pos - 1), r = *pos;
    kp.insert(pos, static_cast<std::uint32_t>(best));
    err[best] = 0.0;
    fill_segment(l, best);
    fill_segment(best, r);
  }
  return kp;
}

// Evenly spaced baseline with `count` keypoints (endpoints included).
inline std::vector<std::uint32_t> uniform_keypoints(std::size_t num_frames, std::size_t count) {
  if (num_frames == 0) throw InvalidArgument("uniform_keypoints: empty sequence");
  count = std::clamp<std::size_t>(count, 1, num_frames);
  if (num_frames == 1 || count == 1) return {0};
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto idx = static_cast<std::uint32_t>(
        (i * (num_frames - 1) * 2 + (count - 1)) / (2 * (count - 1)));
    if (out.empty() || idx > out.back()) out.push_back(idx);
  }
  return out;
}

inline std::vector<double> gather(std::span<const double> values, std::span<const std::uint32_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(values[i]);
  return out;
}

// Sparse rows of (time index, value) pairs in CSR layout. Row r corresponds
// to Gaussian r / D, dimension r % D.
struct KeypointSet {
  std::vector<std::uint32_t> row_offsets{0};
  std::vector<std::uint16_t> time_indices;
  std::vector<double> values;
  std::size_t num_frames = 0;

  std::size_t rows() const { return row_offsets.size() - 1; }
  std::size_t row_size(std::size_t r) const { return row_offsets[r + 1] - row_offsets[r]; }
  std::span<const std::uint16_t> row_indices(std::size_t r) const {
    return {time_indices.data() + row_offsets[r], row_size(r)};
  }
  std::span<const double> row_values(std::size_t r) const { return {values.data() + row_offsets[r], row_size(r)}; }

  // Structural invariants; throws InvalidArgument describing the first violation.
  void validate() const {
    if (row_offsets.empty() || row_offsets.front() != 0) throw InvalidArgument("row_offsets must start at 0");
    for (std::size_t r = 0; r + 1 < row_offsets.size(); ++r) {
      if (row_offsets[r + 1] < row_offsets[r]) throw InvalidArgument("row_offsets not non-decreasing");
    }
    if (row_offsets.back() != time_indices.size() || time_indices.size() != values.size()) {
      throw InvalidArgument("row_offsets end does not match keypoint count");
    }
    for (std::size_t r = 0; r < rows(); ++r) {
      auto idx = row_indices(r);
      if (idx.empty()) throw InvalidArgument("empty keypoint row");
      if (idx.front() != 0 || idx.back() != num_frames - 1) {
        throw InvalidArgument("keypoint row " + std::to_string(r) + " misses an endpoint");
      }
      for (std::size_t i = 1; i < idx.size(); ++i) {
        if (idx[i] <= idx[i - 1]) throw InvalidArgument("keypoint row indices not strictly increasing");
      }
    }
  }
};

inline std::size_t worker_threads() {
  if (const char* env = std::getenv("TC3DGS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, count) over up to `threads` workers in contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (count + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w) {
    const std::size_t lo = w * chunk, hi = std::min(count, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
}

// Flattens a T x N x D tensor into N*D rows of length T and selects
// keypoints per row.
inline KeypointSet batch_select(std::span<const double> tensor, std::size_t num_frames, std::size_t num_gaussians,
                                std::size_t dim, const KeypointConfig& cfg, std::size_t threads = 0) {
  cfg.validate();
  if (tensor.size() != num_frames * num_gaussians * dim) throw InvalidArgument("batch_select: tensor shape mismatch");
  if (num_frames == 0 || num_frames > 65536) throw InvalidArgument("batch_select: T must be in [1, 65536]");
  const std::size_t rows = num_gaussians * dim;
  std::vector<std::vector<std::uint32_t>> picked(rows);
  std::vector<std::vector<double>> vals(rows);
  parallel_for(rows, threads == 0 ? worker_threads() : threads, [&](std::size_t r) {
    const std::size_t n = r / dim, d = r % dim;
    std::vector<double> seq(num_frames);
    for (std::size_t t = 0; t < num_frames; ++t) seq[t] = tensor[(t * num_gaussians + n) * dim + d];
    picked[r] = select_keypoints(seq, cfg);
    vals[r] = gather(seq, picked[r]);
  });
  KeypointSet set;
  set.num_frames = num_frames;
  set.row_offsets.reserve(rows + 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < picked[r].size(); ++k) {
      set.time_indices.push_back(static_cast<std::uint16_t>(picked[r][k]));
      set.values.push_back(vals[r][k]);
    }
    set.row_offsets.push_back(static_cast<std::uint32_t>(set.time_indices.size()));
  }
  return set;
}

// Inverse of batch_select: dense T x N x D tensor from keypoints.
inline std::vector<double> reconstruct(const KeypointSet& set, std::size_t num_frames, std::size_t num_gaussians,
                                       std::size_t dim) {
  if (set.rows() != num_gaussians * dim) {
    throw InvalidArgument("reconstruct: keypoint set has " + std::to_string(set.rows()) + " rows, expected " +
                          std::to_string(num_gaussians * dim));
  }
  if (set.num_frames != num_frames) throw InvalidArgument("reconstruct: frame count mismatch");
  std::vector<double> out(num_frames * num_gaussians * dim);
  std::vector<std::uint32_t> idx;
  for (std::size_t r = 0; r < set.rows(); ++r) {
    auto ti = set.row_indices(r);
    idx.assign(ti.begin(), ti.end());
    const auto seq = interpolate(idx, set.row_values(r), num_frames);
    const std::size_t n = r / dim, d = r % dim;
    for (std::size_t t = 0; t < num_frames; ++t) out[(t * num_gaussians + n) * dim + d] = seq[t];
  }
  return out;
}

}  // namespace tc3dgs
