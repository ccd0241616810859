// voxcut: reproducible pipeline driver for voxel scene generation, diffusion
// model training, cutting episodes and evaluation campaigns.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "voxcut/voxcut.hpp"

namespace {

using namespace voxcut;

SceneConfig scene_from_flags(const std::string& config_path, const std::string& builtin, int k) {
  if (!config_path.empty() && !builtin.empty())
    throw config_error("pass either --config or --builtin, not both");
  if (!config_path.empty()) return parse_scene_config_file(config_path);
  if (builtin == "simple" || builtin.empty()) return simple_scene_config(k);
  if (builtin == "toy") return two_mode_toy_config(k);
  throw config_error("builtin scene must be 'simple' or 'toy', got '" + builtin + "'");
}

struct SamplingFlags {
  int m_samples = 32;
  double w = 0.2;
  double gamma = 1.0;
  double eta = 0.5;
  int t_steps = 8;
  std::string sampler = "ddim:20";
  std::string scope = "slab";
  std::string risk = "ucb";
  std::string replacement = "on";
  double detect_tolerance = 0.05;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--samples,-M", m_samples, "structure samples per planning step")
        ->check(CLI::PositiveNumber);
    cmd->add_option("-w,--guidance", w, "classifier-free guidance scale");
    cmd->add_option("--gamma", gamma, "weight of the detection standard deviation");
    cmd->add_option("--eta", eta, "cutting-risk threshold")->check(CLI::NonNegativeNumber);
    cmd->add_option("-T,--task-steps", t_steps, "total task steps including the initial cut")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--sampler", sampler, "ddpm or ddim:<steps>");
    cmd->add_option("--scope", scope, "feasibility scope: surface or slab");
    cmd->add_option("--risk", risk, "risk functional: ucb or max");
    cmd->add_option("--replacement", replacement,
                    "re-impose observed voxels during sampling: on or off");
    cmd->add_option("--detect-tolerance", detect_tolerance,
                    "half-width of the target color range")
        ->check(CLI::NonNegativeNumber);
  }

  EpisodeConfig episode_config(const SceneConfig& scene) const {
    EpisodeConfig cfg;
    cfg.m_samples = m_samples;
    cfg.w = w;
    cfg.gamma = gamma;
    cfg.eta = eta;
    cfg.t_steps = t_steps;
    cfg.sampler = SamplerKind::parse(sampler);
    cfg.scope = parse_scope(scope);
    cfg.risk = parse_risk(risk);
    if (replacement != "on" && replacement != "off")
      throw config_error("--replacement must be 'on' or 'off'");
    cfg.replacement = replacement == "on";
    cfg.detect_tolerance = static_cast<float>(detect_tolerance);
    cfg.initial_action = scene.initial_cut;
    cfg.validate();
    return cfg;
  }
};

int cmd_generate(const std::string& config_path, const std::string& builtin, int k, int modes,
                 int per_mode, std::uint64_t seed, const std::string& out_path) {
  SceneConfig cfg = scene_from_flags(config_path, builtin, k);
  if (modes > 0) {
    if (modes > static_cast<int>(cfg.modes.size()))
      throw config_error("scene config has only " + std::to_string(cfg.modes.size()) + " modes");
    cfg.modes.resize(modes);
  }
  SceneDataset ds = build_dataset(cfg, per_mode, seed);
  save_dataset(ds, out_path);
  std::cout << "wrote " << ds.grids.size() << " grids (K=" << ds.k << ", "
            << cfg.modes.size() << " modes) to " << out_path << "\n";
  return 0;
}

int cmd_train(const std::string& dataset_path, const std::string& out_path,
              const std::string& resume_path, int steps, int batch, double lr, double dropout,
              std::uint64_t seed, int c0, int c1, int n_diffusion, int max_planes,
              int checkpoint_every) {
  SceneDataset ds = load_dataset(dataset_path);
  UNetConfig net;
  net.k = ds.k;
  net.c0 = c0;
  net.c1 = c1;

  UNetDenoiser<float> model = resume_path.empty()
                                  ? UNetDenoiser<float>(net, seed)
                                  : load_checkpoint_expect<float>(resume_path, net);
  if (!resume_path.empty())
    std::cout << "resuming from " << resume_path << " at step " << model.steps_trained << "\n";

  TrainConfig cfg;
  cfg.steps = steps;
  cfg.batch = batch;
  cfg.lr = lr;
  cfg.cond_dropout = dropout;
  cfg.seed = seed;
  cfg.max_mask_planes = max_planes;
  cfg.checkpoint_every = checkpoint_every;
  cfg.checkpoint_path = out_path;

  const NoiseSchedule schedule = default_schedule(n_diffusion);
  train(model, schedule, ds, cfg, &std::cout);
  std::cout << "wrote checkpoint " << out_path << " (" << model.steps_trained << " steps)\n";
  return 0;
}

AttributedVoxelGrid scene_for_run(const SceneConfig& cfg, const std::string& dataset_path,
                                  int index, std::uint64_t scene_seed, int mode,
                                  PartTable& part_table_out) {
  if (!dataset_path.empty()) {
    SceneDataset ds = load_dataset(dataset_path);
    if (index < 0 || index >= static_cast<int>(ds.grids.size()))
      throw config_error("--index outside the dataset");
    part_table_out = ds.part_table;
    return ds.grids[index];
  }
  part_table_out = cfg.part_table();
  if (mode < 0 || mode >= static_cast<int>(cfg.modes.size()))
    throw config_error("--mode outside the scene config");
  return sample_scene(cfg, mode, scene_seed);
}

int cmd_run(const std::string& config_path, const std::string& builtin, int k,
            const std::string& dataset_path, int index, std::uint64_t scene_seed, int mode,
            const std::string& ckpt_path, const std::string& planner, const SamplingFlags& flags,
            std::uint64_t seed, const std::string& initial, int n_diffusion,
            const std::string& out_path) {
  SceneConfig scene_cfg = scene_from_flags(config_path, builtin, k);
  PartTable part_table;
  const AttributedVoxelGrid scene =
      scene_for_run(scene_cfg, dataset_path, index, scene_seed, mode, part_table);

  EpisodeConfig cfg = flags.episode_config(scene_cfg);
  cfg.planner = parse_planner(planner);
  cfg.seed = seed;
  if (!initial.empty()) cfg.initial_action = detail::parse_cut_action(initial);
  if (cfg.initial_action.index > scene.k) throw config_error("initial cut outside the grid");

  const bool needs_model =
      cfg.planner == PlannerKind::Proposed || cfg.planner == PlannerKind::Nocond;
  UNetDenoiser<float> model;
  NoiseSchedule schedule;
  if (needs_model) {
    if (ckpt_path.empty())
      throw config_error("planner '" + planner + "' needs --ckpt with a trained model");
    model = load_checkpoint<float>(ckpt_path);
    if (model.config().k != scene.k)
      throw config_error("checkpoint K=" + std::to_string(model.config().k) +
                         " does not match scene K=" + std::to_string(scene.k));
    if (model.steps_trained == 0)
      throw config_error("checkpoint " + ckpt_path + " holds an untrained model");
    schedule = default_schedule(n_diffusion);
  }

  const EpisodeResult result = run_episode(scene, part_table, needs_model ? &model : nullptr,
                                           needs_model ? &schedule : nullptr, cfg);

  std::ofstream out(out_path);
  if (!out) throw io_error("cannot open " + out_path + " for writing");
  write_episode_jsonl(result, out);
  const TaskMetrics metrics = compute_metrics(result, scene);
  std::cout << "episode finished: cut_error=" << metrics.cut_error_volume
            << " remaining=" << metrics.remaining_rate << " occupancy=" << metrics.occupancy_rate
            << " record=" << out_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& builtin, int k,
                 const std::string& ckpt_path, const std::string& methods_csv,
                 const std::string& etas_csv, int scenes, int reps, std::uint64_t campaign_seed,
                 std::uint64_t scene_seed, const SamplingFlags& flags, int n_diffusion,
                 const std::string& merge_csv, const std::string& out_dir) {
  SceneConfig scene_cfg = scene_from_flags(config_path, builtin, k);
  const PartTable part_table = scene_cfg.part_table();

  CampaignSpec spec;
  spec.base = flags.episode_config(scene_cfg);
  spec.repetitions = reps;
  spec.campaign_seed = campaign_seed;

  std::stringstream ms(methods_csv);
  std::string token;
  while (std::getline(ms, token, ',')) spec.methods.push_back(parse_planner(token));
  std::stringstream es(etas_csv);
  while (std::getline(es, token, ',')) spec.etas.push_back(std::stod(token));

  if (scenes < 1) throw config_error("--scenes must be positive");
  for (int i = 0; i < scenes; ++i) {
    const int mode = i % static_cast<int>(scene_cfg.modes.size());
    Rng rng = Rng::derive(scene_seed, {0xE7A1ull, static_cast<std::uint64_t>(i)});
    spec.scenes.push_back(
        sample_scene(scene_cfg.modes[mode], scene_cfg.k, scene_cfg.rejection_budget, rng));
  }

  bool needs_model = false;
  for (PlannerKind m : spec.methods)
    needs_model = needs_model || m == PlannerKind::Proposed || m == PlannerKind::Nocond;
  UNetDenoiser<float> model;
  NoiseSchedule schedule;
  if (needs_model) {
    if (ckpt_path.empty()) throw config_error("the chosen methods need --ckpt");
    model = load_checkpoint<float>(ckpt_path);
    if (model.config().k != scene_cfg.k)
      throw config_error("checkpoint K does not match the scene config");
    if (model.steps_trained == 0)
      throw config_error("checkpoint " + ckpt_path + " holds an untrained model");
    schedule = default_schedule(n_diffusion);
  }

  CampaignReport report = run_campaign(spec, part_table, needs_model ? &model : nullptr,
                                       needs_model ? &schedule : nullptr);
  if (!merge_csv.empty()) {
    std::ifstream in(merge_csv);
    if (!in) throw io_error("cannot open " + merge_csv);
    merge_external_csv(report, in);
  }

  std::filesystem::create_directories(out_dir);
  {
    std::ofstream csv(out_dir + "/report.csv");
    if (!csv) throw io_error("cannot write " + out_dir + "/report.csv");
    write_report_csv(report, csv);
  }
  {
    std::ofstream txt(out_dir + "/report.txt");
    if (!txt) throw io_error("cannot write " + out_dir + "/report.txt");
    write_report_txt(report, txt);
  }
  std::cout << "wrote " << report.rows.size() << " episode rows to " << out_dir
            << "/report.csv\n";
  return 0;
}

int cmd_inspect(const std::string& in_path, int grid_index, const std::string& axis_name_str) {
  const std::vector<AttributedVoxelGrid> grids = read_vxdc_file(in_path);
  if (grid_index < 0 || grid_index >= static_cast<int>(grids.size()))
    throw config_error("--grid outside the file (holds " + std::to_string(grids.size()) +
                       " grids)");
  const AttributedVoxelGrid& g = grids[grid_index];
  Axis axis = Axis::Z;
  if (axis_name_str == "X" || axis_name_str == "x") axis = Axis::X;
  else if (axis_name_str == "Y" || axis_name_str == "y") axis = Axis::Y;
  else if (axis_name_str == "Z" || axis_name_str == "z") axis = Axis::Z;
  else throw config_error("--axis must be X, Y or Z");

  std::cout << in_path << ": grid " << grid_index << "/" << grids.size() << " K=" << g.k
            << " occupied=" << g.occupied_count() << "\n";
  for (int index = 1; index <= g.k; ++index) {
    const Slice s = extract_slice(g, axis, index);
    std::cout << "-- " << axis_name(axis) << "=" << index << " --\n";
    for (int u = 0; u < g.k; ++u) {
      std::string line;
      for (int v = 0; v < g.k; ++v) {
        int x, y, z;
        detail::slice_to_grid(axis, index - 1, u, v, x, y, z);
        const std::uint8_t part = g.part_ids[voxel_index(g.k, x, y, z)];
        line += part == 0 ? '.' : (part == 1 ? '#' : static_cast<char>('a' + part - 2));
      }
      std::cout << line << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxel cutting planner driven by a mask-conditioned diffusion model"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "cap worker threads (also VOXCUT_THREADS)");

  // generate
  auto* gen = app.add_subcommand("generate", "sample scenes into a VXDC dataset");
  std::string g_config, g_builtin, g_out = "dataset.vxdc";
  int g_k = 16, g_modes = 0, g_per_mode = 100;
  std::uint64_t g_seed = 1;
  gen->add_option("--config", g_config, "scene config file");
  gen->add_option("--builtin", g_builtin, "built-in scene set: simple or toy");
  gen->add_option("--k", g_k, "grid resolution for built-in scenes")->check(CLI::PositiveNumber);
  gen->add_option("--modes", g_modes, "use only the first N modes (0 = all)")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--per-mode", g_per_mode, "samples per mode")->check(CLI::PositiveNumber);
  gen->add_option("--seed", g_seed, "dataset seed");
  gen->add_option("--out,-o", g_out, "output VXDC path");

  // train
  auto* tr = app.add_subcommand("train", "train the denoiser on a dataset");
  std::string t_dataset, t_out = "model.vxdn", t_resume;
  int t_steps = 20000, t_batch = 16, t_c0 = 16, t_c1 = 32, t_n = 1000, t_planes = 6,
      t_ckpt_every = 0;
  double t_lr = 2e-4, t_dropout = 0.15;
  std::uint64_t t_seed = 1;
  tr->add_option("--dataset", t_dataset, "VXDC dataset path")->required();
  tr->add_option("--out,-o", t_out, "checkpoint output path");
  tr->add_option("--resume", t_resume, "resume from checkpoint");
  tr->add_option("--steps", t_steps, "optimizer steps")->check(CLI::PositiveNumber);
  tr->add_option("--batch", t_batch, "batch size")->check(CLI::PositiveNumber);
  tr->add_option("--lr", t_lr, "learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--dropout", t_dropout, "condition dropout probability")
      ->check(CLI::Range(0.0, 1.0));
  tr->add_option("--seed", t_seed, "training seed");
  tr->add_option("--c0", t_c0, "full-resolution channel width")->check(CLI::PositiveNumber);
  tr->add_option("--c1", t_c1, "downsampled channel width")->check(CLI::PositiveNumber);
  tr->add_option("-N,--diffusion-steps", t_n, "diffusion step count")
      ->check(CLI::PositiveNumber);
  tr->add_option("--max-mask-planes", t_planes, "max planes per training mask")
      ->check(CLI::NonNegativeNumber);
  tr->add_option("--checkpoint-every", t_ckpt_every, "checkpoint cadence in steps (0 = final)")
      ->check(CLI::NonNegativeNumber);

  // run
  auto* rn = app.add_subcommand("run", "run one cutting episode and record it");
  std::string r_config, r_builtin, r_dataset, r_ckpt, r_planner = "proposed", r_initial,
              r_out = "episode.jsonl";
  int r_k = 16, r_index = 0, r_mode = 0, r_n = 1000;
  std::uint64_t r_seed = 1, r_scene_seed = 100;
  SamplingFlags r_flags;
  rn->add_option("--config", r_config, "scene config file");
  rn->add_option("--builtin", r_builtin, "built-in scene set: simple or toy");
  rn->add_option("--k", r_k, "grid resolution for built-in scenes")->check(CLI::PositiveNumber);
  rn->add_option("--dataset", r_dataset, "take the scene from this VXDC dataset");
  rn->add_option("--index", r_index, "grid index inside --dataset")
      ->check(CLI::NonNegativeNumber);
  rn->add_option("--scene-seed", r_scene_seed, "seed for a freshly sampled scene");
  rn->add_option("--mode", r_mode, "mode index for a freshly sampled scene")
      ->check(CLI::NonNegativeNumber);
  rn->add_option("--ckpt", r_ckpt, "trained checkpoint (needed by proposed/nocond)");
  rn->add_option("--planner", r_planner, "proposed|random|nocond|gt");
  rn->add_option("--seed", r_seed, "episode seed");
  rn->add_option("--initial", r_initial, "initial cut, e.g. 'Y 1 low'");
  rn->add_option("-N,--diffusion-steps", r_n, "diffusion step count")
      ->check(CLI::PositiveNumber);
  rn->add_option("--out,-o", r_out, "episode record output (JSON lines)");
  r_flags.add_to(rn);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run a multi-method evaluation campaign");
  std::string e_config, e_builtin, e_ckpt, e_methods = "random,nocond,proposed,gt",
              e_etas = "0.5", e_merge, e_out_dir = "report";
  int e_k = 16, e_scenes = 3, e_reps = 6, e_n = 1000;
  std::uint64_t e_campaign_seed = 1, e_scene_seed = 100;
  SamplingFlags e_flags;
  ev->add_option("--config", e_config, "scene config file");
  ev->add_option("--builtin", e_builtin, "built-in scene set: simple or toy");
  ev->add_option("--k", e_k, "grid resolution for built-in scenes")->check(CLI::PositiveNumber);
  ev->add_option("--ckpt", e_ckpt, "trained checkpoint");
  ev->add_option("--methods", e_methods, "comma-separated planner list");
  ev->add_option("--etas", e_etas, "comma-separated eta list");
  ev->add_option("--scenes", e_scenes, "evaluation scenes (cycled over modes)")
      ->check(CLI::PositiveNumber);
  ev->add_option("--reps", e_reps, "repetitions per cell")->check(CLI::PositiveNumber);
  ev->add_option("--campaign-seed", e_campaign_seed, "campaign seed");
  ev->add_option("--scene-seed", e_scene_seed, "evaluation scene seed");
  ev->add_option("-N,--diffusion-steps", e_n, "diffusion step count")
      ->check(CLI::PositiveNumber);
  ev->add_option("--merge-csv", e_merge, "merge externally produced metric rows");
  ev->add_option("--out-dir", e_out_dir, "report output directory");
  e_flags.add_to(ev);

  // inspect
  auto* in = app.add_subcommand("inspect", "pretty-print a VXDC grid as ASCII slices");
  std::string i_in, i_axis = "Z";
  int i_grid = 0;
  in->add_option("--in,-i", i_in, "VXDC file")->required();
  in->add_option("--grid", i_grid, "grid index")->check(CLI::NonNegativeNumber);
  in->add_option("--axis", i_axis, "slice axis: X, Y or Z");

  try {
    app.parse(argc, argv);
    if (threads > 0) setenv("VOXCUT_THREADS", std::to_string(threads).c_str(), 1);

    if (gen->parsed())
      return cmd_generate(g_config, g_builtin, g_k, g_modes, g_per_mode, g_seed, g_out);
    if (tr->parsed())
      return cmd_train(t_dataset, t_out, t_resume, t_steps, t_batch, t_lr, t_dropout, t_seed,
                       t_c0, t_c1, t_n, t_planes, t_ckpt_every);
    if (rn->parsed())
      return cmd_run(r_config, r_builtin, r_k, r_dataset, r_index, r_scene_seed, r_mode, r_ckpt,
                     r_planner, r_flags, r_seed, r_initial, r_n, r_out);
    if (ev->parsed())
      return cmd_evaluate(e_config, e_builtin, e_k, e_ckpt, e_methods, e_etas, e_scenes, e_reps,
                          e_campaign_seed, e_scene_seed, e_flags, e_n, e_merge, e_out_dir);
    if (in->parsed()) return cmd_inspect(i_in, i_grid, i_axis);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const voxcut::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const voxcut::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const voxcut::io_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
