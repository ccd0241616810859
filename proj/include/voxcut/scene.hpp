#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxcut/errors.hpp"
#include "voxcut/parallel.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/vxdc.hpp"
#include "voxcut/voxel_grid.hpp"

namespace voxcut {

// A cuboid internal part. The occupied box is [center - size/2, ...] per axis
// (integer floor), shifted by a per-axis uniform jitter in [-jitter, jitter];
// all coordinates 1-based.
struct PartSpec {
  int part_id = 0;
  std::array<float, 3> color{0, 0, 0};
  std::array<int, 3> size{1, 1, 1};
  std::array<int, 3> center{0, 0, 0};
  std::array<int, 3> jitter{0, 0, 0};
  bool target = false;
};

struct ShellSpec {
  std::array<int, 3> box_min{1, 1, 1};
  std::array<int, 3> box_max{0, 0, 0};  // 0 = grid extent
  int thickness = 1;
  std::array<float, 3> color{0.5f, 0.5f, 0.5f};
};

struct ArrangementDistribution {
  int mode_id = 0;
  ShellSpec shell;
  std::vector<PartSpec> parts;
};

struct SceneConfig {
  int k = 16;
  int rejection_budget = 1000;
  CutAction initial_cut{Axis::Y, 1, Side::Low};
  std::vector<ArrangementDistribution> modes;

  PartTable part_table() const {
    PartTable table;
    auto put = [&](int id, const std::array<float, 3>& color) {
      if (id >= static_cast<int>(table.colors.size()))
        table.colors.resize(id + 1, {-1.0f, -1.0f, -1.0f});
      if (table.colors[id][0] >= 0.0f && table.colors[id] != color)
        throw config_error("part " + std::to_string(id) +
                           " has inconsistent colors across modes");
      table.colors[id] = color;
    };
    for (const auto& mode : modes) {
      put(1, mode.shell.color);
      for (const auto& part : mode.parts) {
        if (part.part_id < 2) throw config_error("internal part ids start at 2");
        put(part.part_id, part.color);
        if (part.target) table.target_part_id = part.part_id;
      }
    }
    for (std::size_t id = 1; id < table.colors.size(); ++id)
      if (table.colors[id][0] < 0.0f)
        throw config_error("part id " + std::to_string(id) + " is skipped; ids must be dense");
    validate_part_table(table);
    return table;
  }
};

namespace detail {

struct Box {
  std::array<int, 3> lo, hi;  // 1-based inclusive

  bool contains(const Box& inner) const {
    for (int a = 0; a < 3; ++a)
      if (inner.lo[a] < lo[a] || inner.hi[a] > hi[a]) return false;
    return true;
  }

  bool overlaps(const Box& other) const {
    for (int a = 0; a < 3; ++a)
      if (hi[a] < other.lo[a] || other.hi[a] < lo[a]) return false;
    return true;
  }
};

inline Box part_box(const PartSpec& part, const std::array<int, 3>& offset) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = part.center[a] + offset[a] - part.size[a] / 2;
    b.hi[a] = b.lo[a] + part.size[a] - 1;
  }
  return b;
}

inline Box shell_interior(const ShellSpec& shell, int k) {
  Box b;
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = shell.box_min[a] + shell.thickness;
    b.hi[a] = (shell.box_max[a] > 0 ? shell.box_max[a] : k) - shell.thickness;
  }
  return b;
}

}  // namespace detail

inline void validate_scene_config(const SceneConfig& cfg) {
  if (cfg.k < 4) throw config_error("scene resolution must be at least 4");
  if (cfg.modes.empty()) throw config_error("scene config declares no modes");
  if (cfg.rejection_budget < 1) throw config_error("rejection budget must be positive");
  int target_id = -1;
  for (const auto& mode : cfg.modes) {
    if (mode.parts.empty())
      throw config_error("mode " + std::to_string(mode.mode_id) + " has no parts");
    const detail::Box interior = detail::shell_interior(mode.shell, cfg.k);
    int targets = 0;
    for (const auto& part : mode.parts) {
      if (part.target) {
        ++targets;
        if (target_id < 0) target_id = part.part_id;
        if (target_id != part.part_id)
          throw config_error("the target part id must be the same in every mode");
      }
      for (int a = 0; a < 3; ++a) {
        if (part.size[a] < 1) throw config_error("part sizes must be positive");
        if (part.jitter[a] < 0) throw config_error("part jitter must be non-negative");
      }
      // the zero-jitter reference placement must fit; jittered draws that do
      // not are handled by rejection
      if (!interior.contains(detail::part_box(part, {0, 0, 0})))
        throw config_error("mode " + std::to_string(mode.mode_id) + " part " +
                           std::to_string(part.part_id) +
                           " reference placement does not fit in the shell interior");
    }
    if (targets != 1)
      throw config_error("mode " + std::to_string(mode.mode_id) +
                         " must flag exactly one target part");
  }
  cfg.part_table();  // color consistency
}

// Draws one scene from the given arrangement: fixed shell walls plus jittered
// parts, rejection-sampled until the parts are inside the interior and
// pairwise disjoint.
inline AttributedVoxelGrid sample_scene(const ArrangementDistribution& dist, int k,
                                        int rejection_budget, Rng& rng) {
  const detail::Box interior = detail::shell_interior(dist.shell, k);
  std::vector<detail::Box> boxes(dist.parts.size());

  bool ok = false;
  for (int attempt = 0; attempt < rejection_budget && !ok; ++attempt) {
    ok = true;
    for (std::size_t p = 0; p < dist.parts.size(); ++p) {
      const auto& part = dist.parts[p];
      std::array<int, 3> offset;
      for (int a = 0; a < 3; ++a)
        offset[a] = part.jitter[a] > 0 ? rng.uniform_int(-part.jitter[a], part.jitter[a]) : 0;
      boxes[p] = detail::part_box(part, offset);
    }
    for (std::size_t p = 0; p < boxes.size() && ok; ++p) {
      if (!interior.contains(boxes[p])) ok = false;
      for (std::size_t q = 0; q < p && ok; ++q)
        if (boxes[p].overlaps(boxes[q])) ok = false;
    }
  }
  if (!ok)
    throw config_error("mode " + std::to_string(dist.mode_id) +
                       ": could not place non-overlapping parts inside the shell interior "
                       "within the rejection budget");

  AttributedVoxelGrid grid(k);
  const auto& sh = dist.shell;
  const std::array<int, 3> lo = sh.box_min;
  const std::array<int, 3> hi = {sh.box_max[0] > 0 ? sh.box_max[0] : k,
                                 sh.box_max[1] > 0 ? sh.box_max[1] : k,
                                 sh.box_max[2] > 0 ? sh.box_max[2] : k};
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const bool wall = x - lo[0] < sh.thickness || hi[0] - x < sh.thickness ||
                          y - lo[1] < sh.thickness || hi[1] - y < sh.thickness ||
                          z - lo[2] < sh.thickness || hi[2] - z < sh.thickness;
        if (wall) grid.set_voxel(x - 1, y - 1, z - 1, 1, sh.color);
      }
  for (std::size_t p = 0; p < dist.parts.size(); ++p) {
    const auto& part = dist.parts[p];
    const auto& b = boxes[p];
    for (int z = b.lo[2]; z <= b.hi[2]; ++z)
      for (int y = b.lo[1]; y <= b.hi[1]; ++y)
        for (int x = b.lo[0]; x <= b.hi[0]; ++x)
          grid.set_voxel(x - 1, y - 1, z - 1, static_cast<std::uint8_t>(part.part_id),
                         part.color);
  }
  return grid;
}

inline AttributedVoxelGrid sample_scene(const SceneConfig& cfg, int mode_index,
                                        std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0x5CE7Eull, static_cast<std::uint64_t>(mode_index)});
  return sample_scene(cfg.modes.at(mode_index), cfg.k, cfg.rejection_budget, rng);
}

struct SceneDataset {
  int k = 0;
  PartTable part_table;
  std::vector<AttributedVoxelGrid> grids;
  std::vector<int> mode_of;  // mode id per grid
  std::uint64_t seed = 0;
  std::vector<std::pair<int, int>> mode_mixture;  // (mode id, sample count)
};

// Generates samples_per_mode scenes from every mode. Scene i gets its own rng
// stream derived from (seed, i), so results are independent of worker count.
inline SceneDataset build_dataset(const SceneConfig& cfg, int samples_per_mode,
                                  std::uint64_t seed) {
  validate_scene_config(cfg);
  if (samples_per_mode < 1) throw config_error("samples per mode must be positive");

  SceneDataset ds;
  ds.k = cfg.k;
  ds.part_table = cfg.part_table();
  ds.seed = seed;
  const std::size_t total = cfg.modes.size() * static_cast<std::size_t>(samples_per_mode);
  ds.grids.resize(total);
  ds.mode_of.resize(total);
  for (const auto& mode : cfg.modes) ds.mode_mixture.emplace_back(mode.mode_id, samples_per_mode);

  std::vector<std::string> failures(total);
  parallel_for(total, [&](std::size_t i) {
    const std::size_t mode_index = i / samples_per_mode;
    Rng rng = Rng::derive(seed, {0xDA7A5E7ull, i});
    try {
      ds.grids[i] = sample_scene(cfg.modes[mode_index], cfg.k, cfg.rejection_budget, rng);
      ds.mode_of[i] = cfg.modes[mode_index].mode_id;
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (const auto& f : failures)
    if (!f.empty()) throw config_error(f);
  return ds;
}

inline void save_dataset(const SceneDataset& ds, const std::string& vxdc_path) {
  write_vxdc_file(vxdc_path, ds.grids);
  nlohmann::json side;
  side["k"] = ds.k;
  side["seed"] = ds.seed;
  side["target_part_id"] = ds.part_table.target_part_id;
  side["parts"] = nlohmann::json::array();
  for (int id = 1; id <= ds.part_table.max_part_id(); ++id)
    side["parts"].push_back({{"id", id}, {"color", ds.part_table.colors[id]}});
  side["mode_mixture"] = nlohmann::json::array();
  for (const auto& [mode, count] : ds.mode_mixture)
    side["mode_mixture"].push_back({{"mode", mode}, {"count", count}});
  side["mode_of"] = ds.mode_of;
  std::ofstream out(vxdc_path + ".json");
  if (!out) throw io_error("cannot open " + vxdc_path + ".json for writing");
  out << side.dump(2) << "\n";
}

inline SceneDataset load_dataset(const std::string& vxdc_path) {
  SceneDataset ds;
  ds.grids = read_vxdc_file(vxdc_path);
  ds.k = ds.grids.front().k;
  std::ifstream in(vxdc_path + ".json");
  if (!in) throw io_error("missing dataset sidecar " + vxdc_path + ".json");
  nlohmann::json side;
  try {
    in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed dataset sidecar: " + std::string(e.what()));
  }
  ds.seed = side.value("seed", std::uint64_t{0});
  ds.part_table.target_part_id = side.at("target_part_id").get<int>();
  for (const auto& part : side.at("parts")) {
    const int id = part.at("id").get<int>();
    if (id >= static_cast<int>(ds.part_table.colors.size()))
      ds.part_table.colors.resize(id + 1, {0, 0, 0});
    ds.part_table.colors[id] = part.at("color").get<std::array<float, 3>>();
  }
  validate_part_table(ds.part_table);
  if (side.contains("mode_of")) ds.mode_of = side.at("mode_of").get<std::vector<int>>();
  if (ds.mode_of.size() != ds.grids.size()) ds.mode_of.assign(ds.grids.size(), 0);
  if (side.contains("mode_mixture"))
    for (const auto& m : side.at("mode_mixture"))
      ds.mode_mixture.emplace_back(m.at("mode").get<int>(), m.at("count").get<int>());
  return ds;
}

// Training observation pattern: the union of `planes` random axis-aligned
// planes, where the plane count is itself drawn uniformly from {0..max_planes}
// (so the empty mask occurs with probability 1/(max_planes+1)).
inline VoxelMask sample_training_mask(int k, Rng& rng, int max_planes,
                                      int* drawn_planes_out) {
  VoxelMask mask(k);
  const int planes = rng.uniform_int(0, max_planes);
  if (drawn_planes_out) *drawn_planes_out = planes;
  for (int p = 0; p < planes; ++p) {
    const Axis axis = static_cast<Axis>(rng.uniform_int(0, 2));
    const int index = rng.uniform_int(1, k);
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        int x, y, z;
        detail::slice_to_grid(axis, index - 1, u, v, x, y, z);
        mask.bits[voxel_index(k, x, y, z)] = 1;
      }
  }
  return mask;
}

inline VoxelMask sample_training_mask(int k, Rng& rng, int max_planes = 6) {
  return sample_training_mask(k, rng, max_planes, nullptr);
}

// ---------------------------------------------------------------------------
// Config file format: flat key = value lines plus [mode N] / [part N]
// headers. Parts belong to the most recent mode. '#' starts a comment.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T, std::size_t N>
std::array<T, N> parse_tuple(const std::string& value, const std::string& key) {
  std::istringstream iss(value);
  std::array<T, N> out{};
  for (std::size_t i = 0; i < N; ++i)
    if (!(iss >> out[i]))
      throw config_error("key '" + key + "' needs " + std::to_string(N) + " values, got '" +
                         value + "'");
  std::string rest;
  if (iss >> rest)
    throw config_error("key '" + key + "' has trailing data: '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw config_error("key '" + key + "' expects a boolean, got '" + value + "'");
}

inline CutAction parse_cut_action(const std::string& value) {
  std::istringstream iss(value);
  std::string axis, side;
  int index = 0;
  if (!(iss >> axis >> index >> side))
    throw config_error("cut action must be '<axis> <index> <low|high>', got '" + value + "'");
  CutAction a;
  if (axis == "X" || axis == "x") a.axis = Axis::X;
  else if (axis == "Y" || axis == "y") a.axis = Axis::Y;
  else if (axis == "Z" || axis == "z") a.axis = Axis::Z;
  else throw config_error("unknown cut axis '" + axis + "'");
  a.index = index;
  if (side == "low") a.side = Side::Low;
  else if (side == "high") a.side = Side::High;
  else throw config_error("cut side must be 'low' or 'high', got '" + side + "'");
  return a;
}

}  // namespace detail

inline SceneConfig parse_scene_config(std::istream& in) {
  SceneConfig cfg;
  ShellSpec shell;
  ArrangementDistribution* mode = nullptr;
  PartSpec* part = nullptr;
  std::string line;
  int lineno = 0;

  auto fail = [&](const std::string& msg) {
    throw config_error("scene config line " + std::to_string(lineno) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      std::istringstream iss(line.substr(1, line.size() - 2));
      std::string kind;
      int id = 0;
      if (!(iss >> kind >> id)) fail("section header must be [mode N] or [part N]");
      if (kind == "mode") {
        cfg.modes.emplace_back();
        mode = &cfg.modes.back();
        mode->mode_id = id;
        part = nullptr;
      } else if (kind == "part") {
        if (!mode) fail("[part] outside of a [mode] section");
        mode->parts.emplace_back();
        part = &mode->parts.back();
        part->part_id = id;
      } else {
        fail("unknown section kind '" + kind + "'");
      }
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));

    if (part) {
      if (key == "color") part->color = detail::parse_tuple<float, 3>(value, key);
      else if (key == "size") part->size = detail::parse_tuple<int, 3>(value, key);
      else if (key == "center") part->center = detail::parse_tuple<int, 3>(value, key);
      else if (key == "jitter") part->jitter = detail::parse_tuple<int, 3>(value, key);
      else if (key == "target") part->target = detail::parse_bool(value, key);
      else fail("unknown part key '" + key + "'");
    } else if (mode) {
      fail("key '" + key + "' inside [mode] but outside [part]");
    } else {
      if (key == "k") cfg.k = std::stoi(value);
      else if (key == "budget") cfg.rejection_budget = std::stoi(value);
      else if (key == "initial_cut") cfg.initial_cut = detail::parse_cut_action(value);
      else if (key == "shell_color") shell.color = detail::parse_tuple<float, 3>(value, key);
      else if (key == "shell_thickness") shell.thickness = std::stoi(value);
      else if (key == "shell_min") shell.box_min = detail::parse_tuple<int, 3>(value, key);
      else if (key == "shell_max") shell.box_max = detail::parse_tuple<int, 3>(value, key);
      else fail("unknown key '" + key + "'");
    }
  }

  for (auto& m : cfg.modes) m.shell = shell;
  validate_scene_config(cfg);
  if (cfg.initial_cut.index < 1 || cfg.initial_cut.index > cfg.k)
    throw config_error("initial cut plane outside the grid");
  return cfg;
}

inline SceneConfig parse_scene_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open scene config " + path);
  return parse_scene_config(in);
}

// Built-in desk-scale scene: gray shell enclosing a blue target cuboid plus
// green and red distractor cuboids, three arrangement modes distinguished by
// where the target sits.
inline SceneConfig simple_scene_config(int k = 16) {
  auto scaled = [&](int v) { return std::max(2, v * k / 16); };
  SceneConfig cfg;
  cfg.k = k;
  ShellSpec shell;
  shell.color = {0.5f, 0.5f, 0.5f};

  auto part = [&](int id, std::array<float, 3> color, std::array<int, 3> size,
                  std::array<int, 3> center, bool target) {
    PartSpec p;
    p.part_id = id;
    p.color = color;
    p.size = size;
    p.center = center;
    p.jitter = {1, 1, 1};
    p.target = target;
    return p;
  };
  const std::array<float, 3> blue{0.1f, 0.2f, 0.9f};
  const std::array<float, 3> green{0.1f, 0.8f, 0.2f};
  const std::array<float, 3> red{0.9f, 0.15f, 0.1f};

  ArrangementDistribution m1;
  m1.mode_id = 1;
  m1.parts = {part(2, blue, {4, 3, 3}, {scaled(5), scaled(8), scaled(8)}, true),
              part(3, green, {3, 4, 3}, {scaled(11), scaled(5), scaled(8)}, false),
              part(4, red, {3, 3, 4}, {scaled(11), scaled(12), scaled(8)}, false)};
  ArrangementDistribution m2;
  m2.mode_id = 2;
  m2.parts = {part(2, blue, {4, 3, 3}, {scaled(12), scaled(8), scaled(8)}, true),
              part(3, green, {3, 4, 3}, {scaled(5), scaled(11), scaled(8)}, false),
              part(4, red, {3, 3, 4}, {scaled(5), scaled(5), scaled(8)}, false)};
  ArrangementDistribution m3;
  m3.mode_id = 3;
  m3.parts = {part(2, blue, {3, 3, 3}, {scaled(8), scaled(12), scaled(8)}, true),
              part(3, green, {5, 3, 4}, {scaled(8), scaled(4), scaled(8)}, false),
              part(4, red, {3, 3, 3}, {scaled(12), scaled(8), scaled(11)}, false)};
  m1.shell = m2.shell = m3.shell = shell;
  cfg.modes = {m1, m2, m3};
  cfg.initial_cut = {Axis::Y, 1, Side::Low};
  validate_scene_config(cfg);
  return cfg;
}

// Two-mode toy: a shell with a single 2x2x2 target sitting at one of two
// disjoint positions, no jitter.
inline SceneConfig two_mode_toy_config(int k = 8) {
  SceneConfig cfg;
  cfg.k = k;
  ShellSpec shell;
  shell.color = {0.5f, 0.5f, 0.5f};

  PartSpec target;
  target.part_id = 2;
  target.color = {0.1f, 0.2f, 0.9f};
  target.size = {2, 2, 2};
  target.jitter = {0, 0, 0};
  target.target = true;

  ArrangementDistribution m1;
  m1.mode_id = 1;
  m1.shell = shell;
  target.center = {3, k / 2, k / 2};
  m1.parts = {target};
  ArrangementDistribution m2;
  m2.mode_id = 2;
  m2.shell = shell;
  target.center = {k - 2, k / 2, k / 2};
  m2.parts = {target};

  cfg.modes = {m1, m2};
  cfg.initial_cut = {Axis::Y, 1, Side::Low};
  validate_scene_config(cfg);
  return cfg;
}

}  // namespace voxcut
