#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "voxcut/errors.hpp"

namespace voxcut {

enum class Axis : int { X = 0, Y = 1, Z = 2 };
enum class Side : int { Low = 0, High = 1 };

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::X: return "X";
    case Axis::Y: return "Y";
    default: return "Z";
  }
}

inline const char* side_name(Side s) { return s == Side::Low ? "low" : "high"; }

// Voxels are addressed row-major with z outermost, y middle, x innermost:
// linear index k = (z*K + y)*K + x. File formats and masks all share this
// order.
inline std::size_t voxel_index(int k, int x, int y, int z) {
  return (static_cast<std::size_t>(z) * k + y) * k + x;
}

inline int axis_coord(Axis a, int x, int y, int z) {
  switch (a) {
    case Axis::X: return x;
    case Axis::Y: return y;
    default: return z;
  }
}

// An axis-aligned slab cut. `index` is the 1-based plane coordinate along
// `axis`; `side` selects which half-space gets removed, from the grid
// boundary up to and including the plane.
struct CutAction {
  Axis axis = Axis::X;
  int index = 1;
  Side side = Side::Low;

  bool operator==(const CutAction&) const = default;

  // true when the 1-based plane coordinate c lies in the removed slab
  bool slab_contains(int c) const { return side == Side::Low ? c <= index : c >= index; }

  bool contains_voxel(int x, int y, int z) const {
    return slab_contains(axis_coord(axis, x, y, z) + 1);
  }
};

// K^3 cells, each carrying occupancy, an RGB-coded part feature in [0,1]^3
// (meaningful only where occupied) and a ground-truth part id (0 = empty,
// 1 = shell, 2.. = internal parts).
struct AttributedVoxelGrid {
  int k = 0;
  std::vector<std::uint8_t> occupancy;  // K^3
  std::vector<float> features;          // K^3 * 3, channel innermost
  std::vector<std::uint8_t> part_ids;   // K^3

  AttributedVoxelGrid() = default;
  explicit AttributedVoxelGrid(int resolution)
      : k(resolution),
        occupancy(static_cast<std::size_t>(resolution) * resolution * resolution, 0),
        features(static_cast<std::size_t>(resolution) * resolution * resolution * 3, 0.0f),
        part_ids(static_cast<std::size_t>(resolution) * resolution * resolution, 0) {}

  std::size_t cells() const { return occupancy.size(); }

  void set_voxel(int x, int y, int z, std::uint8_t part_id, const std::array<float, 3>& color) {
    const std::size_t i = voxel_index(k, x, y, z);
    occupancy[i] = part_id != 0;
    part_ids[i] = part_id;
    for (int c = 0; c < 3; ++c) features[i * 3 + c] = part_id != 0 ? color[c] : 0.0f;
  }

  void clear_voxel(int x, int y, int z) {
    const std::size_t i = voxel_index(k, x, y, z);
    occupancy[i] = 0;
    part_ids[i] = 0;
    features[i * 3 + 0] = features[i * 3 + 1] = features[i * 3 + 2] = 0.0f;
  }

  std::int64_t occupied_count() const {
    std::int64_t n = 0;
    for (std::uint8_t o : occupancy) n += o != 0;
    return n;
  }

  std::int64_t part_count(std::uint8_t part_id) const {
    std::int64_t n = 0;
    for (std::uint8_t p : part_ids) n += p == part_id;
    return n;
  }

  bool operator==(const AttributedVoxelGrid&) const = default;
};

// One K^2 plane of a grid. The in-plane layout keeps the surviving axes in
// their grid nesting order: X -> (z,y), Y -> (z,x), Z -> (y,x), with the
// second axis innermost.
struct Slice {
  Axis axis = Axis::X;
  int index = 1;  // 1-based
  int k = 0;
  std::vector<float> features;          // K^2 * 3
  std::vector<std::uint8_t> occupancy;  // K^2

  bool operator==(const Slice&) const = default;
};

// Binary observation mask over the voxel grid, same linear order as the grid.
struct VoxelMask {
  int k = 0;
  std::vector<std::uint8_t> bits;  // K^3, 1 = observed

  VoxelMask() = default;
  explicit VoxelMask(int resolution)
      : k(resolution), bits(static_cast<std::size_t>(resolution) * resolution * resolution, 0) {}

  std::int64_t count() const {
    std::int64_t n = 0;
    for (std::uint8_t b : bits) n += b != 0;
    return n;
  }

  bool operator==(const VoxelMask&) const = default;
};

// Canonical color per part id. Slot 0 is the empty cell; its color is fixed
// by convention to feature (0,0,0), i.e. (-1,-1,-1) in tensor space.
struct PartTable {
  std::vector<std::array<float, 3>> colors;  // indexed by part id, slot 0 ignored
  int target_part_id = 0;

  int max_part_id() const { return static_cast<int>(colors.size()) - 1; }

  const std::array<float, 3>& color_of(int part_id) const {
    if (part_id <= 0 || part_id >= static_cast<int>(colors.size()))
      throw std::out_of_range("part id " + std::to_string(part_id) + " not in part table");
    return colors[part_id];
  }
};

inline void validate_part_table(const PartTable& table) {
  if (table.colors.size() < 2) throw config_error("part table is empty");
  for (std::size_t i = 1; i < table.colors.size(); ++i) {
    const auto& ci = table.colors[i];
    if (ci[0] == 0.0f && ci[1] == 0.0f && ci[2] == 0.0f)
      throw config_error("part " + std::to_string(i) +
                         " uses color (0,0,0), which collides with the empty cell");
    for (int c = 0; c < 3; ++c)
      if (!(ci[c] >= 0.0f && ci[c] <= 1.0f))
        throw config_error("part " + std::to_string(i) + " color out of [0,1]");
    for (std::size_t j = 1; j < i; ++j)
      if (table.colors[j] == ci)
        throw config_error("parts " + std::to_string(j) + " and " + std::to_string(i) +
                           " share a canonical color");
  }
  if (table.target_part_id <= 0 || table.target_part_id > table.max_part_id())
    throw config_error("target part id missing from part table");
}

// Dense real-valued voxel field, K^3 cells x 3 channels (channel innermost),
// in the [-1,1] tensor space the diffusion model operates on.
template <typename T = float>
struct FeatureTensor {
  int k = 0;
  std::vector<T> data;  // K^3 * 3

  FeatureTensor() = default;
  explicit FeatureTensor(int resolution)
      : k(resolution),
        data(static_cast<std::size_t>(resolution) * resolution * resolution * 3, T(0)) {}

  std::size_t size() const { return data.size(); }
  bool operator==(const FeatureTensor&) const = default;
};

namespace detail {

inline void check_plane_index(int k, int index) {
  if (index < 1 || index > k)
    throw std::out_of_range("plane index " + std::to_string(index) + " outside [1, " +
                            std::to_string(k) + "]");
}

// Map a slice cell (outer u, inner v) back to grid coordinates.
inline void slice_to_grid(Axis axis, int plane0, int u, int v, int& x, int& y, int& z) {
  switch (axis) {
    case Axis::X: x = plane0, y = v, z = u; break;
    case Axis::Y: x = v, y = plane0, z = u; break;
    default: x = v, y = u, z = plane0; break;
  }
}

}  // namespace detail

inline Slice extract_slice(const AttributedVoxelGrid& grid, Axis axis, int index) {
  detail::check_plane_index(grid.k, index);
  const int k = grid.k;
  Slice s;
  s.axis = axis;
  s.index = index;
  s.k = k;
  s.features.resize(static_cast<std::size_t>(k) * k * 3);
  s.occupancy.resize(static_cast<std::size_t>(k) * k);
  for (int u = 0; u < k; ++u) {
    for (int v = 0; v < k; ++v) {
      int x, y, z;
      detail::slice_to_grid(axis, index - 1, u, v, x, y, z);
      const std::size_t gi = voxel_index(k, x, y, z);
      const std::size_t si = static_cast<std::size_t>(u) * k + v;
      s.occupancy[si] = grid.occupancy[gi];
      for (int c = 0; c < 3; ++c) s.features[si * 3 + c] = grid.features[gi * 3 + c];
    }
  }
  return s;
}

// Writes a slice back onto its plane; inverse of extract_slice on the touched
// plane. Part ids are not carried by slices and are left untouched.
inline void insert_slice(AttributedVoxelGrid& grid, const Slice& s) {
  detail::check_plane_index(grid.k, s.index);
  const int k = grid.k;
  for (int u = 0; u < k; ++u) {
    for (int v = 0; v < k; ++v) {
      int x, y, z;
      detail::slice_to_grid(s.axis, s.index - 1, u, v, x, y, z);
      const std::size_t gi = voxel_index(k, x, y, z);
      const std::size_t si = static_cast<std::size_t>(u) * k + v;
      grid.occupancy[gi] = s.occupancy[si];
      for (int c = 0; c < 3; ++c) grid.features[gi * 3 + c] = s.features[si * 3 + c];
    }
  }
}

// Splits the grid at the action's plane. `removed` holds every occupied voxel
// in the slab (boundary side up to and including the plane), `kept` the rest;
// the two partition the input exactly.
inline std::pair<AttributedVoxelGrid, AttributedVoxelGrid> apply_cut(
    const AttributedVoxelGrid& grid, const CutAction& action) {
  detail::check_plane_index(grid.k, action.index);
  const int k = grid.k;
  AttributedVoxelGrid removed(k), kept(k);
  for (int z = 0; z < k; ++z) {
    for (int y = 0; y < k; ++y) {
      for (int x = 0; x < k; ++x) {
        const std::size_t i = voxel_index(k, x, y, z);
        if (!grid.occupancy[i]) continue;
        AttributedVoxelGrid& dst = action.contains_voxel(x, y, z) ? removed : kept;
        dst.occupancy[i] = grid.occupancy[i];
        dst.part_ids[i] = grid.part_ids[i];
        for (int c = 0; c < 3; ++c) dst.features[i * 3 + c] = grid.features[i * 3 + c];
      }
    }
  }
  return {std::move(removed), std::move(kept)};
}

// Feature space [0,1] maps affinely onto tensor space [-1,1]; empty cells
// become (-1,-1,-1) so the model predicts them like any other attribute.
template <typename T = float>
FeatureTensor<T> voxelize_to_tensor(const AttributedVoxelGrid& grid) {
  FeatureTensor<T> t(grid.k);
  const std::size_t n = grid.cells();
  for (std::size_t i = 0; i < n; ++i) {
    if (grid.occupancy[i]) {
      for (int c = 0; c < 3; ++c)
        t.data[i * 3 + c] = T(2) * static_cast<T>(grid.features[i * 3 + c]) - T(1);
    } else {
      t.data[i * 3 + 0] = t.data[i * 3 + 1] = t.data[i * 3 + 2] = T(-1);
    }
  }
  return t;
}

// Snaps every cell to the nearest canonical entry (empty included) in
// Euclidean distance; ties resolve to the lower part id, so the empty entry
// wins against everything.
template <typename T = float>
AttributedVoxelGrid quantize_to_grid(const FeatureTensor<T>& tensor, const PartTable& table) {
  if (table.colors.size() < 2) throw config_error("part table is empty");
  const int k = tensor.k;
  const int ids = static_cast<int>(table.colors.size());

  // canonical entries in tensor space; entry 0 is the empty cell
  std::vector<std::array<T, 3>> entries(ids);
  entries[0] = {T(-1), T(-1), T(-1)};
  for (int id = 1; id < ids; ++id)
    for (int c = 0; c < 3; ++c) entries[id][c] = T(2) * static_cast<T>(table.colors[id][c]) - T(1);

  AttributedVoxelGrid grid(k);
  const std::size_t n = grid.cells();
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      if (!std::isfinite(static_cast<double>(tensor.data[i * 3 + c])))
        throw numeric_error("non-finite tensor value at voxel " + std::to_string(i));
    }
    int best = 0;
    T best_d2 = T(0);
    for (int id = 0; id < ids; ++id) {
      T d2 = T(0);
      for (int c = 0; c < 3; ++c) {
        const T d = tensor.data[i * 3 + c] - entries[id][c];
        d2 += d * d;
      }
      if (id == 0 || d2 < best_d2) {
        best = id;
        best_d2 = d2;
      }
    }
    if (best != 0) {
      grid.occupancy[i] = 1;
      grid.part_ids[i] = static_cast<std::uint8_t>(best);
      for (int c = 0; c < 3; ++c) grid.features[i * 3 + c] = table.colors[best][c];
    }
  }
  return grid;
}

}  // namespace voxcut
