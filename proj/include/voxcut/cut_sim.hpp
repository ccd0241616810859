#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxcut/diffusion.hpp"
#include "voxcut/errors.hpp"
#include "voxcut/planner.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/schedule.hpp"
#include "voxcut/voxel_grid.hpp"

namespace voxcut {

// Accumulated cutting-surface observations. The mask marks exactly those
// history-slice voxels that were occupied when observed and still exist in
// the kept shape; observed holds their ground-truth features in tensor space
// and zeros elsewhere.
struct ObservationState {
  FeatureTensor<float> observed;
  VoxelMask mask;

  struct HistoryEntry {
    int t = 0;
    CutAction action;
    std::optional<Slice> slice;  // absent when the cut exposed no plane
  };
  std::vector<HistoryEntry> history;

  explicit ObservationState(int k) : observed(k), mask(k) {}

  Condition<float> as_condition() const {
    Condition<float> c;
    c.observed = observed;
    c.mask = mask;
    c.null_flag = false;
    return c;
  }
};

struct EpisodeState {
  int t = 0;
  int t_max = 8;
  AttributedVoxelGrid kept;
  std::map<int, std::int64_t> discarded_by_part;
  int target_part_id = 0;
  std::int64_t initial_target_volume = 0;
  std::int64_t initial_total_volume = 0;
};

struct MetricsSnapshot {
  std::int64_t cut_error_volume = 0;
  double remaining_rate = 0.0;
  double occupancy_rate = 0.0;
};

inline MetricsSnapshot snapshot_metrics(const EpisodeState& state) {
  MetricsSnapshot m;
  auto it = state.discarded_by_part.find(state.target_part_id);
  m.cut_error_volume = it == state.discarded_by_part.end() ? 0 : it->second;
  const std::int64_t kept_target = state.kept.part_count(
      static_cast<std::uint8_t>(state.target_part_id));
  const std::int64_t kept_total = state.kept.occupied_count();
  m.remaining_rate = state.initial_target_volume > 0
                         ? 100.0 * kept_target / state.initial_target_volume
                         : 0.0;
  m.occupancy_rate = kept_total > 0 ? 100.0 * kept_target / kept_total : 0.0;
  return m;
}

namespace detail {

// The plane a cut exposes: the first kept layer adjacent to the removed slab.
inline std::optional<int> exposed_plane(const CutAction& action, int k) {
  const int plane = action.side == Side::Low ? action.index + 1 : action.index - 1;
  if (plane < 1 || plane > k) return std::nullopt;
  return plane;
}

// Rebuilds mask and observed tensor from every surviving history slice:
// voxels that were occupied at observation time and still exist keep their
// bits, everything discarded since drops out.
inline void rebuild_observation(ObservationState& obs, const AttributedVoxelGrid& kept) {
  const int k = kept.k;
  obs.mask = VoxelMask(k);
  obs.observed = FeatureTensor<float>(k);
  for (const auto& entry : obs.history) {
    if (!entry.slice) continue;
    const Slice& s = *entry.slice;
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        const std::size_t si = static_cast<std::size_t>(u) * k + v;
        if (!s.occupancy[si]) continue;
        int x, y, z;
        detail::slice_to_grid(s.axis, s.index - 1, u, v, x, y, z);
        const std::size_t gi = voxel_index(k, x, y, z);
        if (!kept.occupancy[gi]) continue;
        obs.mask.bits[gi] = 1;
        for (int c = 0; c < 3; ++c)
          obs.observed.data[gi * 3 + c] = 2.0f * s.features[si * 3 + c] - 1.0f;
      }
  }
}

inline void ledger_add(EpisodeState& state, const AttributedVoxelGrid& removed) {
  for (std::size_t i = 0; i < removed.cells(); ++i)
    if (removed.part_ids[i] != 0) ++state.discarded_by_part[removed.part_ids[i]];
}

}  // namespace detail

// Executes the configured initial cut (which must not touch the target part),
// records its exposed surface as the first observation and sets t = 1.
inline std::pair<EpisodeState, ObservationState> init_episode(const AttributedVoxelGrid& scene,
                                                              int target_part_id,
                                                              const CutAction& initial_action,
                                                              int t_max) {
  EpisodeState state;
  state.t_max = t_max;
  state.target_part_id = target_part_id;
  state.initial_target_volume = scene.part_count(static_cast<std::uint8_t>(target_part_id));
  state.initial_total_volume = scene.occupied_count();
  if (state.initial_target_volume == 0)
    throw config_error("scene contains no voxels of target part " +
                       std::to_string(target_part_id));

  auto [removed, kept] = apply_cut(scene, initial_action);
  if (removed.part_count(static_cast<std::uint8_t>(target_part_id)) > 0)
    throw config_error("initial cut would remove target-part voxels");
  state.kept = std::move(kept);
  detail::ledger_add(state, removed);
  state.t = 1;

  ObservationState obs(scene.k);
  ObservationState::HistoryEntry entry;
  entry.t = 1;
  entry.action = initial_action;
  if (const auto plane = detail::exposed_plane(initial_action, scene.k))
    entry.slice = extract_slice(state.kept, initial_action.axis, *plane);
  obs.history.push_back(std::move(entry));
  detail::rebuild_observation(obs, state.kept);
  return {std::move(state), std::move(obs)};
}

// Executes one cut: updates the discard ledger, drops mask bits of removed
// voxels, and merges the newly exposed surface into the observations. Cutting
// an empty slab is a legal no-op that still advances t.
inline void step_episode(EpisodeState& state, ObservationState& obs, const CutAction& action) {
  if (state.t >= state.t_max)
    throw std::logic_error("episode already used its " + std::to_string(state.t_max) + " steps");
  auto [removed, kept] = apply_cut(state.kept, action);
  detail::ledger_add(state, removed);
  state.kept = std::move(kept);
  ++state.t;

  ObservationState::HistoryEntry entry;
  entry.t = state.t;
  entry.action = action;
  if (const auto plane = detail::exposed_plane(action, state.kept.k))
    entry.slice = extract_slice(state.kept, action.axis, *plane);
  obs.history.push_back(std::move(entry));
  detail::rebuild_observation(obs, state.kept);
}

// ---------------------------------------------------------------------------
// full deployment loop
// ---------------------------------------------------------------------------

enum class PlannerKind { Proposed, Random, Nocond, Gt };

inline PlannerKind parse_planner(const std::string& s) {
  if (s == "proposed") return PlannerKind::Proposed;
  if (s == "random") return PlannerKind::Random;
  if (s == "nocond") return PlannerKind::Nocond;
  if (s == "gt") return PlannerKind::Gt;
  throw config_error("planner must be proposed|random|nocond|gt, got '" + s + "'");
}

inline const char* planner_name(PlannerKind p) {
  switch (p) {
    case PlannerKind::Proposed: return "proposed";
    case PlannerKind::Random: return "random";
    case PlannerKind::Nocond: return "nocond";
    default: return "gt";
  }
}

struct EpisodeConfig {
  PlannerKind planner = PlannerKind::Proposed;
  int t_steps = 8;  // total cuts including the initial one
  int m_samples = 32;
  double w = 0.2;
  double eta = 0.5;
  double gamma = 1.0;
  SamplerKind sampler{};
  FeasibilityScope scope = FeasibilityScope::WholeSlab;
  RiskFunctional risk = RiskFunctional::Ucb;
  bool replacement = true;
  float detect_tolerance = 0.05f;
  std::uint64_t seed = 0;
  CutAction initial_action{Axis::Y, 1, Side::Low};

  void validate() const {
    if (t_steps < 0) throw config_error("task step count must be non-negative");
    if (m_samples < 1) throw config_error("sample count M must be positive");
    if (eta < 0) throw config_error("eta must be non-negative");
    if (detect_tolerance < 0) throw config_error("detector tolerance must be non-negative");
  }

  PlannerConfig planner_config() const {
    PlannerConfig pc;
    pc.eta = eta;
    pc.gamma = gamma;
    pc.scope = scope;
    pc.risk = risk;
    return pc;
  }
};

struct StepRecord {
  int t = 0;
  bool planned = false;  // false for the configured initial cut
  bool acted = false;    // false when no feasible action existed
  CutAction action;
  std::optional<ScoreMap> score_map;
  std::map<int, std::int64_t> removed_counts;
  MetricsSnapshot metrics;
  int samples = 0;
  double sample_target_mean = 0.0;
  double sample_target_std = 0.0;
};

struct EpisodeResult {
  std::vector<StepRecord> steps;
  MetricsSnapshot final_metrics;
  EpisodeState final_state;
  ObservationState final_obs{0};
  std::string planner;
  std::uint64_t seed = 0;
  double eta = 0.0;
};

namespace detail {

inline std::map<int, std::int64_t> diff_ledger(const std::map<int, std::int64_t>& after,
                                               const std::map<int, std::int64_t>& before) {
  std::map<int, std::int64_t> d;
  for (const auto& [part, count] : after) {
    const auto it = before.find(part);
    const std::int64_t delta = count - (it == before.end() ? 0 : it->second);
    if (delta != 0) d[part] = delta;
  }
  return d;
}

}  // namespace detail

// Full observe -> sample -> score -> plan -> cut loop. `model` may be null
// for the gt and random planners; schedule is required whenever the diffusion
// sampler runs. Deterministic in (scene, config.seed).
template <typename DenoiserT>
EpisodeResult run_episode(const AttributedVoxelGrid& scene, const PartTable& part_table,
                          const DenoiserT* model, const NoiseSchedule* schedule,
                          const EpisodeConfig& cfg) {
  cfg.validate();
  const bool needs_model =
      cfg.planner == PlannerKind::Proposed || cfg.planner == PlannerKind::Nocond;
  if (needs_model && (model == nullptr || schedule == nullptr))
    throw config_error("planner '" + std::string(planner_name(cfg.planner)) +
                       "' needs a trained model and a noise schedule");

  const TargetColorRange range =
      TargetColorRange::around(part_table.color_of(part_table.target_part_id),
                               cfg.detect_tolerance);

  EpisodeResult result;
  result.planner = planner_name(cfg.planner);
  result.seed = cfg.seed;
  result.eta = cfg.eta;

  auto [state, obs] = init_episode(scene, part_table.target_part_id, cfg.initial_action,
                                   std::max(1, cfg.t_steps));
  {
    StepRecord rec;
    rec.t = 1;
    rec.planned = false;
    rec.acted = true;
    rec.action = cfg.initial_action;
    rec.removed_counts = state.discarded_by_part;
    rec.metrics = snapshot_metrics(state);
    result.steps.push_back(std::move(rec));
  }

  while (state.t < cfg.t_steps) {
    StepRecord rec;
    rec.t = state.t + 1;
    rec.planned = true;
    std::optional<CutAction> action;

    if (cfg.planner == PlannerKind::Random) {
      Rng rng = Rng::derive(cfg.seed, {0x7A4Dull, static_cast<std::uint64_t>(state.t)});
      action = baseline_random(scene.k, rng);
    } else {
      ScoreMap map;
      if (cfg.planner == PlannerKind::Gt) {
        map = gt_score_map(state.kept, range, cfg.gamma);
      } else {
        Condition<float> condition = cfg.planner == PlannerKind::Nocond
                                         ? Condition<float>::null_condition(scene.k)
                                         : obs.as_condition();
        const std::uint64_t step_seed =
            Rng::derive(cfg.seed, {0x5A3Dull, static_cast<std::uint64_t>(state.t)}).next_u64();
        SampleBatch<float> batch =
            sample_conditional(*model, *schedule, condition, cfg.m_samples, cfg.w, cfg.sampler,
                               step_seed, cfg.replacement);
        std::vector<AttributedVoxelGrid> quantized(batch.samples.size());
        for (std::size_t m = 0; m < batch.samples.size(); ++m)
          quantized[m] = quantize_to_grid(batch.samples[m], part_table);

        double sum = 0.0, sum2 = 0.0;
        for (const auto& q : quantized) {
          double count = 0;
          for (std::size_t i = 0; i < q.cells(); ++i)
            if (state.kept.occupancy[i] && q.occupancy[i] &&
                q.part_ids[i] == part_table.target_part_id)
              ++count;
          sum += count;
          sum2 += count * count;
        }
        const double mean = sum / quantized.size();
        rec.samples = static_cast<int>(quantized.size());
        rec.sample_target_mean = mean;
        rec.sample_target_std = std::sqrt(std::max(0.0, sum2 / quantized.size() - mean * mean));

        map = score_map(quantized, state.kept, range, cfg.gamma, cfg.risk);
      }
      rec.score_map = map;
      action = plan(map, state.kept, cfg.planner_config());
    }

    const auto ledger_before = state.discarded_by_part;
    if (action) {
      step_episode(state, obs, *action);
      rec.acted = true;
      rec.action = *action;
      rec.removed_counts = detail::diff_ledger(state.discarded_by_part, ledger_before);
    } else {
      // empty feasible set: the step is consumed without a cut
      state.t += 1;
      rec.acted = false;
    }
    rec.metrics = snapshot_metrics(state);
    result.steps.push_back(std::move(rec));
  }

  result.final_metrics = snapshot_metrics(state);
  result.final_state = std::move(state);
  result.final_obs = std::move(obs);
  return result;
}

// ---------------------------------------------------------------------------
// record serialization: one JSON object per step plus a final metrics line
// ---------------------------------------------------------------------------

inline nlohmann::json action_to_json(const CutAction& a) {
  return {{"axis", axis_name(a.axis)}, {"index", a.index}, {"side", side_name(a.side)}};
}

inline nlohmann::json metrics_to_json(const MetricsSnapshot& m) {
  return {{"cut_error_volume", m.cut_error_volume},
          {"remaining_rate", m.remaining_rate},
          {"occupancy_rate", m.occupancy_rate}};
}

inline void write_episode_jsonl(const EpisodeResult& result, std::ostream& out) {
  for (const auto& step : result.steps) {
    nlohmann::json line;
    line["t"] = step.t;
    line["planned"] = step.planned;
    line["acted"] = step.acted;
    if (step.acted) line["action"] = action_to_json(step.action);
    if (step.score_map) {
      nlohmann::json sm;
      sm["mean"] = {step.score_map->mean[0], step.score_map->mean[1], step.score_map->mean[2]};
      sm["std"] = {step.score_map->stddev[0], step.score_map->stddev[1],
                   step.score_map->stddev[2]};
      line["score_map"] = std::move(sm);
    }
    nlohmann::json removed = nlohmann::json::object();
    for (const auto& [part, count] : step.removed_counts)
      removed[std::to_string(part)] = count;
    line["removed_counts"] = std::move(removed);
    line["metrics"] = metrics_to_json(step.metrics);
    if (step.samples > 0)
      line["samples"] = {{"m", step.samples},
                         {"target_voxels_mean", step.sample_target_mean},
                         {"target_voxels_std", step.sample_target_std}};
    out << line.dump() << "\n";
  }
  nlohmann::json final_line;
  final_line["final"] = true;
  final_line["planner"] = result.planner;
  final_line["eta"] = result.eta;
  final_line["seed"] = result.seed;
  final_line["metrics"] = metrics_to_json(result.final_metrics);
  out << final_line.dump() << "\n";
}

}  // namespace voxcut
