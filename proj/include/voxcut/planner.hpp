#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxcut/diffusion.hpp"
#include "voxcut/errors.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/voxel_grid.hpp"

namespace voxcut {

// Per-channel inclusive bounds identifying target-colored voxels.
struct TargetColorRange {
  std::array<float, 3> f_min{0, 0, 0};
  std::array<float, 3> f_max{0, 0, 0};

  static TargetColorRange around(const std::array<float, 3>& color, float tolerance) {
    TargetColorRange r;
    for (int c = 0; c < 3; ++c) {
      r.f_min[c] = color[c] - tolerance;
      r.f_max[c] = color[c] + tolerance;
    }
    return r;
  }

  bool contains(const float* rgb) const {
    for (int c = 0; c < 3; ++c)
      if (rgb[c] < f_min[c] || rgb[c] > f_max[c]) return false;
    return true;
  }
};

enum class FeasibilityScope { SurfaceOnly, WholeSlab };
enum class RiskFunctional { Ucb, WorstCase };

inline FeasibilityScope parse_scope(const std::string& s) {
  if (s == "surface") return FeasibilityScope::SurfaceOnly;
  if (s == "slab") return FeasibilityScope::WholeSlab;
  throw config_error("scope must be 'surface' or 'slab', got '" + s + "'");
}

inline RiskFunctional parse_risk(const std::string& s) {
  if (s == "ucb") return RiskFunctional::Ucb;
  if (s == "max") return RiskFunctional::WorstCase;
  throw config_error("risk must be 'ucb' or 'max', got '" + s + "'");
}

struct PlannerConfig {
  double eta = 0.5;
  double gamma = 1.0;
  FeasibilityScope scope = FeasibilityScope::WholeSlab;
  RiskFunctional risk = RiskFunctional::Ucb;

  void validate() const {
    if (eta < 0) throw config_error("cutting-risk threshold eta must be non-negative");
  }
};

// Presence estimate of the target part per cutting surface: mean and
// population standard deviation of the binary detections over the sample set,
// combined into the planning score.
struct ScoreMap {
  int k = 0;
  double gamma = 1.0;
  std::array<std::vector<double>, 3> mean;    // [axis][index-1]
  std::array<std::vector<double>, 3> stddev;
  std::array<std::vector<double>, 3> score;

  double score_at(Axis axis, int index) const {
    return score[static_cast<int>(axis)].at(index - 1);
  }
};

// Binary part detector for one cutting surface: 1 iff any voxel on the plane
// that is still present in the kept shape carries a target-range color in the
// sample.
inline int part_detect(const AttributedVoxelGrid& sample, const AttributedVoxelGrid& kept,
                       Axis axis, int index, const TargetColorRange& range) {
  detail::check_plane_index(kept.k, index);
  const int k = kept.k;
  for (int u = 0; u < k; ++u)
    for (int v = 0; v < k; ++v) {
      int x, y, z;
      detail::slice_to_grid(axis, index - 1, u, v, x, y, z);
      const std::size_t i = voxel_index(k, x, y, z);
      if (!kept.occupancy[i] || !sample.occupancy[i]) continue;
      if (range.contains(&sample.features[i * 3])) return 1;
    }
  return 0;
}

// Score map over all 3K surfaces from M quantized structure samples. With
// binary detections the population statistics follow from the positive count
// alone: mean p, stddev sqrt(p(1-p)).
inline ScoreMap score_map(const std::vector<AttributedVoxelGrid>& quantized_samples,
                          const AttributedVoxelGrid& kept, const TargetColorRange& range,
                          double gamma, RiskFunctional risk = RiskFunctional::Ucb) {
  if (quantized_samples.empty()) throw config_error("score_map needs at least one sample");
  const int k = kept.k;
  const double m = static_cast<double>(quantized_samples.size());

  ScoreMap map;
  map.k = k;
  map.gamma = gamma;
  for (int a = 0; a < 3; ++a) {
    map.mean[a].assign(k, 0.0);
    map.stddev[a].assign(k, 0.0);
    map.score[a].assign(k, 0.0);
    for (int index = 1; index <= k; ++index) {
      int positives = 0;
      for (const auto& sample : quantized_samples)
        positives += part_detect(sample, kept, static_cast<Axis>(a), index, range);
      const double p = positives / m;
      const double sd = std::sqrt(std::max(0.0, p * (1.0 - p)));
      map.mean[a][index - 1] = p;
      map.stddev[a][index - 1] = sd;
      map.score[a][index - 1] =
          risk == RiskFunctional::Ucb ? p + gamma * sd : (positives > 0 ? 1.0 : 0.0);
    }
  }
  return map;
}

// Score map of the ground-truth planner: the single true structure as its own
// sample set (stddev 0 everywhere).
inline ScoreMap gt_score_map(const AttributedVoxelGrid& kept, const TargetColorRange& range,
                             double gamma) {
  return score_map({kept}, kept, range, gamma);
}

// Whole-slab scope requires every surface inside the removed slab to clear
// the threshold; surface-only checks just the cut plane.
inline bool action_feasible(const ScoreMap& map, const CutAction& action, double eta,
                            FeasibilityScope scope) {
  if (scope == FeasibilityScope::SurfaceOnly)
    return map.score_at(action.axis, action.index) <= eta;
  const int lo = action.side == Side::Low ? 1 : action.index;
  const int hi = action.side == Side::Low ? action.index : map.k;
  for (int i = lo; i <= hi; ++i)
    if (map.score_at(action.axis, i) > eta) return false;
  return true;
}

inline std::vector<CutAction> feasible_actions(const ScoreMap& map, double eta,
                                               FeasibilityScope scope) {
  std::vector<CutAction> out;
  for (int a = 0; a < 3; ++a)
    for (Side side : {Side::Low, Side::High})
      for (int index = 1; index <= map.k; ++index) {
        const CutAction action{static_cast<Axis>(a), index, side};
        if (action_feasible(map, action, eta, scope)) out.push_back(action);
      }
  return out;
}

// Occupied voxels the action's slab would remove.
inline std::int64_t f_vol(const AttributedVoxelGrid& kept, const CutAction& action) {
  const int k = kept.k;
  std::int64_t volume = 0;
  for (int z = 0; z < k; ++z)
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x)
        if (kept.occupancy[voxel_index(k, x, y, z)] && action.contains_voxel(x, y, z)) ++volume;
  return volume;
}

// Removal-volume argmax over the feasible set. Ties break toward the smaller
// axis (X < Y < Z), then Low before High, then the smaller index; the
// enumeration below visits candidates in exactly that order. Returns nullopt
// when nothing is feasible or every feasible action removes nothing.
inline std::optional<CutAction> plan(const ScoreMap& map, const AttributedVoxelGrid& kept,
                                     const PlannerConfig& config) {
  config.validate();
  std::optional<CutAction> best;
  std::int64_t best_volume = 0;
  for (int a = 0; a < 3; ++a)
    for (Side side : {Side::Low, Side::High})
      for (int index = 1; index <= map.k; ++index) {
        const CutAction action{static_cast<Axis>(a), index, side};
        if (!action_feasible(map, action, config.eta, config.scope)) continue;
        const std::int64_t volume = f_vol(kept, action);
        if (volume > best_volume) {
          best = action;
          best_volume = volume;
        }
      }
  return best;
}

// Uniform draw over the full action set (3 axes x 2 sides x K indices).
inline CutAction baseline_random(int k, Rng& rng) {
  CutAction action;
  action.axis = static_cast<Axis>(rng.uniform_int(0, 2));
  action.side = rng.uniform_int(0, 1) == 0 ? Side::Low : Side::High;
  action.index = rng.uniform_int(1, k);
  return action;
}

}  // namespace voxcut
