#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "voxcut/cut_sim.hpp"
#include "voxcut/errors.hpp"
#include "voxcut/parallel.hpp"
#include "voxcut/voxel_grid.hpp"

namespace voxcut {

struct TaskMetrics {
  std::int64_t cut_error_volume = 0;
  double remaining_rate = 0.0;   // percent
  double occupancy_rate = 0.0;   // percent
};

// Exact voxel-count metrics from the discard ledger and the final kept grid,
// cross-checked against ground truth: every part must conserve volume across
// the episode.
inline TaskMetrics compute_metrics(const EpisodeResult& episode,
                                   const AttributedVoxelGrid& scene) {
  const EpisodeState& state = episode.final_state;
  std::map<int, std::int64_t> initial, kept;
  for (std::size_t i = 0; i < scene.cells(); ++i)
    if (scene.part_ids[i] != 0) ++initial[scene.part_ids[i]];
  for (std::size_t i = 0; i < state.kept.cells(); ++i)
    if (state.kept.part_ids[i] != 0) ++kept[state.kept.part_ids[i]];
  for (const auto& [part, count] : initial) {
    const auto k_it = kept.find(part);
    const auto d_it = state.discarded_by_part.find(part);
    const std::int64_t k = k_it == kept.end() ? 0 : k_it->second;
    const std::int64_t d = d_it == state.discarded_by_part.end() ? 0 : d_it->second;
    if (k + d != count)
      throw numeric_error("episode ledger inconsistent for part " + std::to_string(part) +
                          ": kept " + std::to_string(k) + " + discarded " + std::to_string(d) +
                          " != initial " + std::to_string(count));
  }

  const int target = state.target_part_id;
  const std::int64_t initial_target = initial.count(target) ? initial.at(target) : 0;
  const std::int64_t final_target = kept.count(target) ? kept.at(target) : 0;
  std::int64_t final_total = 0;
  for (const auto& [part, count] : kept) final_total += count;

  TaskMetrics m;
  m.cut_error_volume = initial_target - final_target;
  m.remaining_rate = initial_target > 0 ? 100.0 * final_target / initial_target : 0.0;
  m.occupancy_rate = final_total > 0 ? 100.0 * final_target / final_total : 0.0;
  return m;
}

struct CampaignRow {
  std::string method;
  double eta = 0.0;
  int scene = 0;
  std::uint64_t seed = 0;
  TaskMetrics metrics;
};

struct Aggregate {
  int count = 0;
  double cut_error_mean = 0, cut_error_std = 0;
  double remaining_mean = 0, remaining_std = 0;
  double occupancy_mean = 0, occupancy_std = 0;
};

struct CampaignReport {
  std::vector<CampaignRow> rows;
  std::string fingerprint;

  // population statistics over every row matching (method, eta, scene);
  // scene < 0 aggregates across scenes
  Aggregate aggregate(const std::string& method, double eta, int scene = -1) const {
    std::vector<const TaskMetrics*> hits;
    for (const auto& row : rows)
      if (row.method == method && row.eta == eta && (scene < 0 || row.scene == scene))
        hits.push_back(&row.metrics);
    Aggregate agg;
    agg.count = static_cast<int>(hits.size());
    if (hits.empty()) return agg;
    auto stats = [&](auto get, double& mean, double& sd) {
      double sum = 0, sum2 = 0;
      for (const auto* m : hits) {
        const double v = get(*m);
        sum += v;
        sum2 += v * v;
      }
      mean = sum / hits.size();
      sd = std::sqrt(std::max(0.0, sum2 / hits.size() - mean * mean));
    };
    stats([](const TaskMetrics& m) { return double(m.cut_error_volume); }, agg.cut_error_mean,
          agg.cut_error_std);
    stats([](const TaskMetrics& m) { return m.remaining_rate; }, agg.remaining_mean,
          agg.remaining_std);
    stats([](const TaskMetrics& m) { return m.occupancy_rate; }, agg.occupancy_mean,
          agg.occupancy_std);
    return agg;
  }
};

struct CampaignSpec {
  std::vector<PlannerKind> methods;
  std::vector<double> etas;
  std::vector<AttributedVoxelGrid> scenes;
  int repetitions = 6;
  std::uint64_t campaign_seed = 0;
  EpisodeConfig base;  // planner/eta/seed fields are overwritten per cell
};

// Full method x eta x scene x repetition cross product. Cell seeds derive
// from (campaign_seed, repetition), so adding methods or scenes never
// perturbs the draws of existing cells.
template <typename DenoiserT>
CampaignReport run_campaign(const CampaignSpec& spec, const PartTable& part_table,
                            const DenoiserT* model, const NoiseSchedule* schedule) {
  if (spec.methods.empty() || spec.etas.empty() || spec.scenes.empty())
    throw config_error("campaign needs at least one method, eta and scene");
  if (spec.repetitions < 1) throw config_error("campaign repetitions must be positive");

  CampaignReport report;
  struct Cell {
    PlannerKind method;
    double eta;
    int scene;
    int rep;
  };
  std::vector<Cell> cells;
  for (PlannerKind method : spec.methods)
    for (double eta : spec.etas)
      for (int scene = 0; scene < static_cast<int>(spec.scenes.size()); ++scene)
        for (int rep = 0; rep < spec.repetitions; ++rep)
          cells.push_back({method, eta, scene, rep});

  report.rows.resize(cells.size());
  std::vector<std::string> failures(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    const Cell& cell = cells[i];
    EpisodeConfig cfg = spec.base;
    cfg.planner = cell.method;
    cfg.eta = cell.eta;
    cfg.seed = Rng::derive(spec.campaign_seed, {0xCA4Bull, static_cast<std::uint64_t>(cell.rep)})
                   .next_u64();
    try {
      const EpisodeResult episode =
          run_episode(spec.scenes[cell.scene], part_table, model, schedule, cfg);
      CampaignRow row;
      row.method = planner_name(cell.method);
      row.eta = cell.eta;
      row.scene = cell.scene;
      row.seed = cfg.seed;
      row.metrics = compute_metrics(episode, spec.scenes[cell.scene]);
      report.rows[i] = std::move(row);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (const auto& f : failures)
    if (!f.empty()) throw config_error("campaign cell failed: " + f);

  report.fingerprint = "k=" + std::to_string(spec.scenes.front().k) +
                       ";T=" + std::to_string(spec.base.t_steps) +
                       ";M=" + std::to_string(spec.base.m_samples) +
                       ";w=" + std::to_string(spec.base.w) +
                       ";gamma=" + std::to_string(spec.base.gamma) +
                       ";sampler=" + spec.base.sampler.to_string() +
                       ";scope=" + (spec.base.scope == FeasibilityScope::WholeSlab ? "slab" : "surface") +
                       ";risk=" + (spec.base.risk == RiskFunctional::Ucb ? "ucb" : "max") +
                       ";reps=" + std::to_string(spec.repetitions) +
                       ";seed=" + std::to_string(spec.campaign_seed);
  return report;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt_cell(double mean, double sd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f +-%.2f", mean, sd);
  return buf;
}

}  // namespace detail

inline void write_report_csv(const CampaignReport& report, std::ostream& out) {
  out << "method,eta,scene,seed,cut_error_volume,remaining_rate,occupancy_rate\n";
  for (const auto& row : report.rows)
    out << row.method << ',' << detail::fmt_double(row.eta) << ',' << row.scene << ','
        << row.seed << ',' << row.metrics.cut_error_volume << ','
        << detail::fmt_double(row.metrics.remaining_rate) << ','
        << detail::fmt_double(row.metrics.occupancy_rate) << "\n";
}

// Plain-text aggregate table, one block per scene, columns matching the task
// metrics (lower is better for cut error, higher for the rates).
inline void write_report_txt(const CampaignReport& report, std::ostream& out) {
  out << "# campaign " << report.fingerprint << "\n";
  std::vector<std::tuple<std::string, double, int>> keys;
  for (const auto& row : report.rows) {
    const auto key = std::make_tuple(row.method, row.eta, row.scene);
    bool seen = false;
    for (const auto& k : keys) seen = seen || k == key;
    if (!seen) keys.push_back(key);
  }
  int last_scene = -1;
  for (const auto& [method, eta, scene] : keys) {
    if (scene != last_scene) {
      out << "\nscene " << scene << "\n";
      char head[128];
      std::snprintf(head, sizeof head, "%-10s %-5s %-18s %-22s %-18s\n", "method", "eta",
                    "Cut Err. Vol. (v)", "Part Remain. Rate (^)", "Part Occ. Rate (^)");
      out << head;
      last_scene = scene;
    }
    const Aggregate agg = report.aggregate(method, eta, scene);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-10s %-5.2g %-18s %-22s %-18s\n", method.c_str(), eta,
                  detail::fmt_cell(agg.cut_error_mean, agg.cut_error_std).c_str(),
                  detail::fmt_cell(agg.remaining_mean, agg.remaining_std).c_str(),
                  detail::fmt_cell(agg.occupancy_mean, agg.occupancy_std).c_str());
    out << buf;
  }
}

// Appends rows from an external metrics CSV (same schema as write_report_csv)
// so results produced elsewhere can be merged into one report.
inline void merge_external_csv(CampaignReport& report, std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw io_error("external metrics CSV is empty");
  if (line != "method,eta,scene,seed,cut_error_volume,remaining_rate,occupancy_rate")
    throw io_error("external metrics CSV has an unexpected header: " + line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    CampaignRow row;
    char method[64];
    double eta, remaining, occupancy;
    long long scene, seed, cut_error;
    if (std::sscanf(line.c_str(), "%63[^,],%lf,%lld,%lld,%lld,%lf,%lf", method, &eta, &scene,
                    &seed, &cut_error, &remaining, &occupancy) != 7)
      throw io_error("external metrics CSV line " + std::to_string(lineno) + " is malformed");
    row.method = method;
    row.eta = eta;
    row.scene = static_cast<int>(scene);
    row.seed = static_cast<std::uint64_t>(seed);
    row.metrics.cut_error_volume = cut_error;
    row.metrics.remaining_rate = remaining;
    row.metrics.occupancy_rate = occupancy;
    report.rows.push_back(std::move(row));
  }
}

}  // namespace voxcut
