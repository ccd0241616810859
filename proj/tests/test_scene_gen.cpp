#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "voxcut/scene.hpp"

using namespace voxcut;

namespace {

// 1-based bounding box of a part in a grid, or nullopt if absent
std::optional<std::array<int, 6>> part_box_of(const AttributedVoxelGrid& g, int part_id) {
  std::array<int, 6> box{g.k + 1, g.k + 1, g.k + 1, 0, 0, 0};
  bool found = false;
  for (int z = 0; z < g.k; ++z)
    for (int y = 0; y < g.k; ++y)
      for (int x = 0; x < g.k; ++x)
        if (g.part_ids[voxel_index(g.k, x, y, z)] == part_id) {
          found = true;
          box[0] = std::min(box[0], x + 1);
          box[1] = std::min(box[1], y + 1);
          box[2] = std::min(box[2], z + 1);
          box[3] = std::max(box[3], x + 1);
          box[4] = std::max(box[4], y + 1);
          box[5] = std::max(box[5], z + 1);
        }
  if (!found) return std::nullopt;
  return box;
}

}  // namespace

TEST_CASE("zero jitter places parts exactly at their reference centers") {
  SceneConfig cfg = two_mode_toy_config(8);
  for (int trial = 0; trial < 20; ++trial) {
    const AttributedVoxelGrid g = sample_scene(cfg, 0, 1000 + trial);
    const auto box = part_box_of(g, 2);
    REQUIRE(box.has_value());
    // center (3,4,4), size 2: box lo = center - size/2 = (2,3,3)
    REQUIRE(*box == std::array<int, 6>{2, 3, 3, 3, 4, 4});
  }
}

TEST_CASE("jitter radius 2 along X covers exactly the five offsets") {
  SceneConfig cfg = two_mode_toy_config(12);
  cfg.modes.resize(1);
  cfg.modes[0].parts[0].center = {6, 6, 6};
  cfg.modes[0].parts[0].jitter = {2, 0, 0};
  validate_scene_config(cfg);

  std::map<int, int> lo_histogram;
  for (int trial = 0; trial < 1000; ++trial) {
    Rng rng(5000 + trial);
    const AttributedVoxelGrid g =
        sample_scene(cfg.modes[0], cfg.k, cfg.rejection_budget, rng);
    const auto box = part_box_of(g, 2);
    REQUIRE(box.has_value());
    ++lo_histogram[(*box)[0]];
    REQUIRE((*box)[1] == 5);  // y untouched
    REQUIRE((*box)[2] == 5);
  }
  // reference lo = 5: support must be exactly {3,4,5,6,7}
  REQUIRE(lo_histogram.size() == 5);
  for (int lo = 3; lo <= 7; ++lo) REQUIRE(lo_histogram.count(lo) == 1);
}

TEST_CASE("disjoint modes never produce each other's target position") {
  const SceneConfig cfg = two_mode_toy_config(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto g1 = sample_scene(cfg, 0, trial);
    const auto g2 = sample_scene(cfg, 1, trial);
    REQUIRE((*part_box_of(g1, 2))[0] == 2);
    REQUIRE((*part_box_of(g2, 2))[0] == 5);
  }
}

TEST_CASE("generated scenes honor non-overlap and containment") {
  const SceneConfig cfg = simple_scene_config(16);
  for (int trial = 0; trial < 25; ++trial) {
    const int mode = trial % 3;
    const AttributedVoxelGrid g = sample_scene(cfg, mode, 7000 + trial);
    // exact per-part counts: overlaps would shrink someone's count
    for (const auto& part : cfg.modes[mode].parts) {
      const std::int64_t expected = static_cast<std::int64_t>(part.size[0]) * part.size[1] *
                                    part.size[2];
      REQUIRE(g.part_count(static_cast<std::uint8_t>(part.part_id)) == expected);
    }
    // internal parts stay strictly inside the shell interior
    for (int z = 0; z < 16; ++z)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const std::uint8_t id = g.part_ids[voxel_index(16, x, y, z)];
          if (id >= 2) {
            REQUIRE(x >= 1);
            REQUIRE(x <= 14);
            REQUIRE(y >= 1);
            REQUIRE(y <= 14);
            REQUIRE(z >= 1);
            REQUIRE(z <= 14);
          }
        }
    // every generated grid quantizes losslessly against the part table
    const PartTable table = cfg.part_table();
    REQUIRE(quantize_to_grid(voxelize_to_tensor(g), table) == g);
  }
}

TEST_CASE("unsatisfiable placements exhaust the rejection budget") {
  SceneConfig cfg = two_mode_toy_config(8);
  cfg.modes.resize(1);
  PartSpec clash = cfg.modes[0].parts[0];
  clash.part_id = 3;
  clash.color = {0.9f, 0.1f, 0.1f};
  clash.target = false;
  cfg.modes[0].parts.push_back(clash);  // same center and size, jitter 0: always overlaps
  REQUIRE_THROWS_AS(build_dataset(cfg, 1, 1), config_error);
}

TEST_CASE("build_dataset counts, provenance and determinism") {
  SceneConfig cfg = two_mode_toy_config(8);
  const SceneDataset ds = build_dataset(cfg, 5, 77);
  REQUIRE(ds.grids.size() == 10);
  REQUIRE(ds.mode_of.size() == 10);

  std::map<int, int> recount;
  for (int mode : ds.mode_of) ++recount[mode];
  for (const auto& [mode, count] : ds.mode_mixture) REQUIRE(recount[mode] == count);

  const std::string dir = VOXCUT_TEST_TMP;
  std::filesystem::create_directories(dir);
  save_dataset(ds, dir + "/ds_a.vxdc");
  save_dataset(build_dataset(cfg, 5, 77), dir + "/ds_b.vxdc");
  std::ifstream a(dir + "/ds_a.vxdc", std::ios::binary), b(dir + "/ds_b.vxdc", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  REQUIRE(sa.str() == sb.str());

  const SceneDataset loaded = load_dataset(dir + "/ds_a.vxdc");
  REQUIRE(loaded.grids.size() == ds.grids.size());
  REQUIRE(loaded.part_table.target_part_id == ds.part_table.target_part_id);
  REQUIRE(loaded.mode_of == ds.mode_of);
}

TEST_CASE("training masks are unions of full planes") {
  Rng rng(3);
  int planes = -1;
  // draw until a single-plane mask appears; its cardinality must be K^2
  for (int i = 0; i < 200; ++i) {
    const VoxelMask m = sample_training_mask(9, rng, 6, &planes);
    if (planes == 0) REQUIRE(m.count() == 0);
    if (planes == 1) {
      REQUIRE(m.count() == 81);
      return;
    }
  }
  FAIL("no single-plane mask in 200 draws");
}

TEST_CASE("training mask plane counts follow the uniform law") {
  Rng rng(1234);
  const int draws = 10000, max_planes = 6;
  std::array<int, 7> histogram{};
  for (int i = 0; i < draws; ++i) {
    int planes = -1;
    sample_training_mask(5, rng, max_planes, &planes);
    ++histogram[planes];
  }
  const double p = 1.0 / (max_planes + 1);
  const double expect = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int c = 0; c <= max_planes; ++c)
    REQUIRE(std::abs(histogram[c] - expect) <= 3.0 * sigma);
}

TEST_CASE("scene config parser round trip and errors") {
  const std::string text = R"(
# toy config
k = 10
budget = 500
initial_cut = Z 1 low
shell_color = 0.4 0.4 0.45
shell_thickness = 1

[mode 1]
[part 2]
color = 0.1 0.2 0.9
size = 2 2 2
center = 4 5 5
jitter = 1 0 0
target = true

[mode 2]
[part 2]
color = 0.1 0.2 0.9
size = 2 2 2
center = 7 5 5
target = true
)";
  std::istringstream in(text);
  const SceneConfig cfg = parse_scene_config(in);
  REQUIRE(cfg.k == 10);
  REQUIRE(cfg.rejection_budget == 500);
  REQUIRE(cfg.initial_cut == CutAction{Axis::Z, 1, Side::Low});
  REQUIRE(cfg.modes.size() == 2);
  REQUIRE(cfg.modes[0].parts[0].jitter == std::array<int, 3>{1, 0, 0});
  REQUIRE(cfg.part_table().target_part_id == 2);

  std::istringstream bad_key("k = 8\nfoo = 1\n");
  REQUIRE_THROWS_AS(parse_scene_config(bad_key), config_error);

  std::istringstream no_target(R"(
k = 8
[mode 1]
[part 2]
color = 0.1 0.2 0.9
size = 2 2 2
center = 4 4 4
)");
  REQUIRE_THROWS_AS(parse_scene_config(no_target), config_error);

  std::istringstream clash_color(R"(
k = 8
[mode 1]
[part 2]
color = 0.1 0.2 0.9
size = 2 2 2
center = 4 4 4
target = true
[mode 2]
[part 2]
color = 0.3 0.2 0.9
size = 2 2 2
center = 4 4 4
target = true
)");
  REQUIRE_THROWS_AS(parse_scene_config(clash_color), config_error);
}
