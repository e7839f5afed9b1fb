#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tc3dgs/bitio.hpp"
#include "tc3dgs/core.hpp"
#include "tc3dgs/error.hpp"

namespace tc3dgs {

// .tc3d layout (all little-endian):
//
//   "TC3D" | u16 version 0x0101 | u16 stage flags
//   u32 original N | u32 N | u32 T | f32 eps | f32 tau | u16 max_kp
//   5 x { u8 width, u8 sparse, f32 step, f32 offset }   one per Group
//   u16 section count | count x { u8 id, u32 offset, u32 length, u32 crc32 }
//   u32 crc32 of every header byte above
//   sections, contiguous, in table order
//
// Section 0 holds depth_order bit-packed at ceil(log2 N) bits. Section 1+g
// holds group g as one bit stream: dense words, or (sparse) per row the
// keypoint count minus one followed by the interior time indices, both at
// ceil(log2 T) bits, then all words. Row endpoints 0 and T-1 are implied.
// A word is a quantization code shifted by -Q_n and packed at `width` bits
// (value = code * step + offset), or the raw float32 bit pattern when width
// is 32.

inline constexpr std::uint16_t kContainerVersion = 0x0101;
inline constexpr int kFloatWidth = 32;

enum StageFlags : std::uint16_t {
  kStageMasking = 1u << 0,
  kStageQuantization = 1u << 1,
  kStageKeypoints = 1u << 2,
};

struct GroupPayload {
  int width = kFloatWidth;  // 2..16 quantized, 32 float32
  bool sparse = false;
  double step = 0.0;        // quantizer step (unused for float32)
  double offset = 0.0;      // quantizer zero point
  std::vector<std::uint32_t> row_offsets;
  std::vector<std::uint16_t> time_indices;
  std::vector<std::uint32_t> words;

  bool quantized() const { return width != kFloatWidth; }
  bool operator==(const GroupPayload&) const = default;
};

struct Container {
  std::uint16_t stages = 0;
  std::uint32_t original_gaussians = 0;
  std::uint32_t num_gaussians = 0;
  std::uint32_t num_frames = 0;
  float threshold = 0.01f;
  float tolerance = 0.0f;
  std::uint16_t max_keypoints = 0;
  std::vector<std::uint32_t> depth_order;
  std::array<GroupPayload, 5> groups;

  bool operator==(const Container&) const = default;
};

struct SectionInfo {
  std::uint8_t id = 0;
  std::uint32_t offset = 0;
  std::uint32_t length = 0;
  std::uint32_t crc = 0;
};

inline int index_width(std::uint32_t n) {
  int w = 1;
  while (w < 32 && (std::uint64_t{1} << w) < n) ++w;
  return w;
}

inline std::string section_name(std::uint8_t id) {
  return id == 0 ? std::string("depth_order") : std::string(group_name(static_cast<Group>(id - 1)));
}

// Quantization code <-> stored word for a signed quantizer of `width` bits.
inline std::uint32_t code_to_word(std::int32_t code, int width) {
  return static_cast<std::uint32_t>(code + (1 << (width - 1)));
}
inline std::int32_t word_to_code(std::uint32_t word, int width) {
  return static_cast<std::int32_t>(word) - (1 << (width - 1));
}

namespace detail {

inline std::size_t group_rows(const Container& c, Group g) {
  return static_cast<std::size_t>(c.num_gaussians) * group_dim(g);
}

inline std::vector<std::uint8_t> encode_group(const Container& c, Group g) {
  const auto& p = c.groups[static_cast<int>(g)];
  BitWriter bits;
  if (p.sparse) {
    const int wt = index_width(c.num_frames);
    for (std::size_t r = 0; r + 1 < p.row_offsets.size(); ++r) {
      const auto lo = p.row_offsets[r], hi = p.row_offsets[r + 1];
      bits.put(hi - lo - 1, wt);
      for (auto k = lo + 1; k + 1 < hi; ++k) bits.put(p.time_indices[k], wt);
    }
  }
  for (auto word : p.words) bits.put(word, p.width);
  return bits.take();
}

inline void decode_group(const Container& c, Group g, std::span<const std::uint8_t> bytes, std::size_t base,
                         GroupPayload& p) {
  const std::string name(group_name(g));
  const std::size_t T = c.num_frames;
  BitReader bits(bytes, base);
  std::size_t count = 0;
  if (p.sparse) {
    if (!is_dynamic(g)) throw DecodeError("static group '" + name + "' marked sparse", base);
    const std::size_t rows = group_rows(c, g);
    const int wt = index_width(c.num_frames);
    p.row_offsets.assign(1, 0);
    p.time_indices.clear();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t at = bits.offset();
      const std::size_t len = std::size_t{bits.get(wt)} + 1;
      if (len > T || (T > 1 && len < 2)) {
        throw DecodeError(name + ": invalid keypoint count " + std::to_string(len) + " in row " + std::to_string(r), at);
      }
      p.time_indices.push_back(0);
      std::size_t prev = 0;
      for (std::size_t k = 1; k + 1 < len; ++k) {
        const std::size_t idx = bits.get(wt);
        if (idx <= prev || idx >= T - 1) {
          throw DecodeError(name + ": time indices not increasing in row " + std::to_string(r), bits.offset());
        }
        p.time_indices.push_back(static_cast<std::uint16_t>(idx));
        prev = idx;
      }
      if (len > 1) p.time_indices.push_back(static_cast<std::uint16_t>(T - 1));
      p.row_offsets.push_back(static_cast<std::uint32_t>(p.time_indices.size()));
    }
    count = p.time_indices.size();
  } else {
    count = static_cast<std::size_t>(c.num_gaussians) * group_dim(g) * (is_dynamic(g) ? T : 1);
  }
  const std::size_t total_bits = bits.bits_read() + count * static_cast<std::size_t>(p.width);
  if ((total_bits + 7) / 8 != bytes.size()) {
    throw DecodeError(name + ": section has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string((total_bits + 7) / 8),
                      bits.offset());
  }
  p.words.resize(count);
  for (auto& word : p.words) word = bits.get(p.width);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::vector<std::uint8_t>> sections;
  {
    BitWriter bits;
    const int w = index_width(c.num_gaussians);
    for (auto i : c.depth_order) bits.put(i, w);
    sections.push_back(bits.take());
  }
  for (Group g : kAllGroups) sections.push_back(detail::encode_group(c, g));

  ByteWriter w;
  w.tag("TC3D");
  w.u16(kContainerVersion);
  w.u16(c.stages);
  w.u32(c.original_gaussians);
  w.u32(c.num_gaussians);
  w.u32(c.num_frames);
  w.f32(c.threshold);
  w.f32(c.tolerance);
  w.u16(c.max_keypoints);
  for (const auto& p : c.groups) {
    w.u8(static_cast<std::uint8_t>(p.width));
    w.u8(p.sparse ? 1 : 0);
    w.f32(static_cast<float>(p.step));
    w.f32(static_cast<float>(p.offset));
  }
  w.u16(static_cast<std::uint16_t>(sections.size()));
  const std::size_t header_size = w.size() + sections.size() * 13 + 4;
  std::size_t offset = header_size;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    w.u8(static_cast<std::uint8_t>(i));
    w.u32(static_cast<std::uint32_t>(offset));
    w.u32(static_cast<std::uint32_t>(sections[i].size()));
    w.u32(crc32(sections[i]));
    offset += sections[i].size();
  }
  w.u32(crc32(w.data()));
  for (const auto& s : sections) w.bytes(s);
  return w.take();
}

struct DecodedContainer {
  Container container;
  std::vector<SectionInfo> sections;
  std::size_t header_bytes = 0;
};

inline DecodedContainer decode_container_detailed(std::span<const std::uint8_t> bytes) {
  DecodedContainer out;
  Container& c = out.container;
  ByteReader r(bytes);
  r.expect_tag("TC3D");
  const auto version = r.u16();
  if (version != kContainerVersion) {
    throw DecodeError("unsupported container version 0x" + std::to_string(version), 4);
  }
  c.stages = r.u16();
  c.original_gaussians = r.u32();
  c.num_gaussians = r.u32();
  c.num_frames = r.u32();
  c.threshold = r.f32();
  c.tolerance = r.f32();
  c.max_keypoints = r.u16();
  for (auto& p : c.groups) {
    p.width = r.u8();
    p.sparse = r.u8() != 0;
    p.step = r.f32();
    p.offset = r.f32();
  }
  const std::size_t count = r.u16();
  for (std::size_t i = 0; i < count; ++i) {
    SectionInfo s;
    s.id = r.u8();
    s.offset = r.u32();
    s.length = r.u32();
    s.crc = r.u32();
    out.sections.push_back(s);
  }
  const std::size_t crc_at = r.offset();
  const auto stored_crc = r.u32();
  if (stored_crc != crc32(bytes.first(crc_at))) throw DecodeError("header checksum mismatch", crc_at);
  out.header_bytes = r.offset();

  // Header semantics are validated only after the checksum passes.
  if (c.stages & ~std::uint16_t{7}) throw DecodeError("unknown stage flags", 6);
  if (c.num_gaussians > c.original_gaussians) throw DecodeError("kept Gaussians exceed original count", 12);
  if (c.num_frames < 1 || c.num_frames > 65536) throw DecodeError("frame count outside [1, 65536]", 16);
  for (std::size_t gi = 0; gi < c.groups.size(); ++gi) {
    const auto& p = c.groups[gi];
    const std::size_t at = 30 + gi * 10;
    if (!((p.width >= 2 && p.width <= 16) || p.width == kFloatWidth)) throw DecodeError("invalid bit width", at);
    if (p.quantized() && !(p.step > 0.0 && std::isfinite(p.step))) throw DecodeError("invalid step size", at + 2);
    if (!std::isfinite(p.offset)) throw DecodeError("invalid quantizer offset", at + 6);
    if (p.sparse && !is_dynamic(static_cast<Group>(gi))) throw DecodeError("static group marked sparse", at + 1);
  }
  if (out.sections.size() != 6) throw DecodeError("expected 6 sections", crc_at - count * 13 - 2);
  std::size_t expected_offset = out.header_bytes;
  for (std::size_t i = 0; i < out.sections.size(); ++i) {
    const auto& s = out.sections[i];
    if (s.id != i) throw DecodeError("section table out of order", out.header_bytes);
    if (s.offset != expected_offset) throw DecodeError("section '" + section_name(s.id) + "' misplaced", s.offset);
    if (static_cast<std::uint64_t>(s.offset) + s.length > bytes.size()) {
      throw DecodeError("section '" + section_name(s.id) + "' truncated", bytes.size());
    }
    expected_offset += s.length;
  }
  if (expected_offset != bytes.size()) throw DecodeError("trailing bytes after last section", expected_offset);

  auto section_bytes = [&](std::size_t i) {
    const auto& s = out.sections[i];
    auto span = bytes.subspan(s.offset, s.length);
    if (crc32(span) != s.crc) throw DecodeError("checksum mismatch in section '" + section_name(s.id) + "'", s.offset);
    return span;
  };

  {
    auto span = section_bytes(0);
    const int w = index_width(c.num_gaussians);
    if (packed_bytes(c.num_gaussians, w) != span.size()) {
      throw DecodeError("depth_order section has wrong length", out.sections[0].offset);
    }
    BitReader bits(span, out.sections[0].offset);
    c.depth_order.resize(c.num_gaussians);
    std::vector<char> seen(c.num_gaussians, 0);
    for (auto& i : c.depth_order) {
      i = bits.get(w);
      if (i >= c.num_gaussians || seen[i]) throw DecodeError("depth_order is not a permutation", out.sections[0].offset);
      seen[i] = 1;
    }
  }
  for (Group g : kAllGroups) {
    const std::size_t i = 1 + static_cast<std::size_t>(g);
    detail::decode_group(c, g, section_bytes(i), out.sections[i].offset, c.groups[static_cast<int>(g)]);
  }
  return out;
}

inline Container decode_container(std::span<const std::uint8_t> bytes) {
  return std::move(decode_container_detailed(bytes).container);
}

}  // namespace tc3dgs
