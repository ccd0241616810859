#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "voxcut/errors.hpp"
#include "voxcut/voxel_grid.hpp"

// VXDC grid container, little-endian throughout:
//   "VXDC"  u16 version=1  u16 K  u16 channels=3  u32 grid_count
//   per grid: K^3 bytes part ids, then K^3*3 float32 features
// Occupancy is implied by part id != 0; feature bytes at empty cells are zero.

namespace voxcut {
namespace detail {

inline void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t u = get_u32(in);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

inline constexpr std::uint16_t kVxdcVersion = 1;

inline void write_vxdc(std::ostream& out, const std::vector<AttributedVoxelGrid>& grids) {
  if (grids.empty()) throw io_error("refusing to write a VXDC file with no grids");
  const int k = grids.front().k;
  for (const auto& g : grids)
    if (g.k != k) throw io_error("all grids in a VXDC file must share one resolution");
  out.write("VXDC", 4);
  detail::put_u16(out, kVxdcVersion);
  detail::put_u16(out, static_cast<std::uint16_t>(k));
  detail::put_u16(out, 3);
  detail::put_u32(out, static_cast<std::uint32_t>(grids.size()));
  for (const auto& g : grids) {
    out.write(reinterpret_cast<const char*>(g.part_ids.data()),
              static_cast<std::streamsize>(g.part_ids.size()));
    for (float f : g.features) detail::put_f32(out, f);
  }
  if (!out) throw io_error("short write while emitting VXDC data");
}

inline std::vector<AttributedVoxelGrid> read_vxdc(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VXDC", 4) != 0) throw io_error("not a VXDC file (bad magic)");
  const std::uint16_t version = detail::get_u16(in);
  if (version != kVxdcVersion)
    throw io_error("unsupported VXDC version " + std::to_string(version));
  const int k = detail::get_u16(in);
  const std::uint16_t channels = detail::get_u16(in);
  if (k < 1) throw io_error("VXDC resolution must be positive");
  if (channels != 3)
    throw io_error("VXDC channel count " + std::to_string(channels) + " unsupported");
  const std::uint32_t count = detail::get_u32(in);
  if (!in) throw io_error("truncated VXDC header");

  std::vector<AttributedVoxelGrid> grids;
  grids.reserve(count);
  for (std::uint32_t gi = 0; gi < count; ++gi) {
    AttributedVoxelGrid g(k);
    in.read(reinterpret_cast<char*>(g.part_ids.data()),
            static_cast<std::streamsize>(g.part_ids.size()));
    for (std::size_t i = 0; i < g.features.size(); ++i) g.features[i] = detail::get_f32(in);
    if (!in) throw io_error("truncated VXDC grid " + std::to_string(gi));
    for (std::size_t i = 0; i < g.cells(); ++i) {
      if (g.part_ids[i] != 0) {
        g.occupancy[i] = 1;
        for (int c = 0; c < 3; ++c) {
          const float f = g.features[i * 3 + c];
          if (!(f >= 0.0f && f <= 1.0f))
            throw io_error("VXDC grid " + std::to_string(gi) + " voxel " + std::to_string(i) +
                           " has a feature outside [0,1]");
        }
      } else {
        // normalize: empty cells carry no attribute
        g.features[i * 3 + 0] = g.features[i * 3 + 1] = g.features[i * 3 + 2] = 0.0f;
      }
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

inline void write_vxdc_file(const std::string& path, const std::vector<AttributedVoxelGrid>& grids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path + " for writing");
  write_vxdc(out, grids);
  out.flush();
  if (!out) throw io_error("failed writing " + path);
}

inline std::vector<AttributedVoxelGrid> read_vxdc_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  return read_vxdc(in);
}

}  // namespace voxcut
