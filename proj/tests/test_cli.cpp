#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "voxcut/scene.hpp"
#include "voxcut/vxdc.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = VOXCUT_CLI_PATH;

std::string tmp_dir() {
  const std::string dir = std::string(VOXCUT_TEST_TMP) + "/cli";
  fs::create_directories(dir);
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generate is deterministic and self-consistent") {
  const std::string dir = tmp_dir();
  const std::string a = dir + "/gen_a.vxdc", b = dir + "/gen_b.vxdc";
  REQUIRE(run_cli("generate --builtin toy --k 8 --modes 2 --per-mode 6 --seed 7 --out " + a) == 0);
  REQUIRE(run_cli("generate --builtin toy --k 8 --modes 2 --per-mode 6 --seed 7 --out " + b) == 0);
  REQUIRE(file_bytes(a) == file_bytes(b));
  REQUIRE(file_bytes(a + ".json") == file_bytes(b + ".json"));

  // sidecar counts match the file's grid count; grids survive quantization
  const voxcut::SceneDataset ds = voxcut::load_dataset(a);
  REQUIRE(ds.grids.size() == 12);
  int mixture_total = 0;
  for (const auto& [mode, count] : ds.mode_mixture) mixture_total += count;
  REQUIRE(mixture_total == 12);
  for (const auto& g : ds.grids)
    REQUIRE(voxcut::quantize_to_grid(voxcut::voxelize_to_tensor(g), ds.part_table) == g);
}

TEST_CASE("run with the gt planner reports zero cut error") {
  const std::string dir = tmp_dir();
  const std::string rec = dir + "/gt.jsonl";
  REQUIRE(run_cli("run --builtin toy --k 8 --planner gt --eta 0.5 --scene-seed 5 --seed 1 "
                  "--out " + rec) == 0);
  std::ifstream in(rec);
  REQUIRE(in);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  const nlohmann::json final_line = nlohmann::json::parse(last);
  REQUIRE(final_line.at("final") == true);
  REQUIRE(final_line.at("metrics").at("cut_error_volume") == 0);
  REQUIRE(final_line.at("metrics").at("remaining_rate") == 100.0);
}

TEST_CASE("run with a fixed seed reproduces the record byte for byte") {
  const std::string dir = tmp_dir();
  const std::string a = dir + "/rand_a.jsonl", b = dir + "/rand_b.jsonl";
  REQUIRE(run_cli("run --builtin toy --k 8 --planner random --seed 3 --scene-seed 5 --out " + a) ==
          0);
  REQUIRE(run_cli("run --builtin toy --k 8 --planner random --seed 3 --scene-seed 5 --out " + b) ==
          0);
  REQUIRE(file_bytes(a) == file_bytes(b));
}

TEST_CASE("invalid flags fail with exit code 2 before writing anything") {
  const std::string dir = tmp_dir();
  const std::string out = dir + "/never.jsonl";
  REQUIRE(run_cli("run --builtin toy --k 8 --planner gt --eta -1 --out " + out) == 2);
  REQUIRE(!fs::exists(out));
  REQUIRE(run_cli("run --builtin toy --k 8 --planner proposed --out " + out) == 2);  // no --ckpt
  REQUIRE(!fs::exists(out));
  REQUIRE(run_cli("generate --builtin nosuch --out " + dir + "/x.vxdc") == 2);
  REQUIRE(run_cli("frobnicate") == 2);
}

TEST_CASE("missing files give exit code 4") {
  REQUIRE(run_cli("inspect --in /nonexistent.vxdc") == 4);
  REQUIRE(run_cli("train --dataset /nonexistent.vxdc --steps 1") == 4);
}

TEST_CASE("inspect prints slices") {
  const std::string dir = tmp_dir();
  const std::string data = dir + "/inspect.vxdc";
  REQUIRE(run_cli("generate --builtin toy --k 8 --per-mode 1 --seed 1 --out " + data) == 0);
  REQUIRE(run_cli("inspect --in " + data + " --grid 0 --axis Y") == 0);
  REQUIRE(run_cli("inspect --in " + data + " --grid 99") == 2);
}

TEST_CASE("evaluate emits reproducible reports") {
  const std::string dir = tmp_dir();
  const std::string out_a = dir + "/rep_a", out_b = dir + "/rep_b";
  const std::string flags =
      "evaluate --builtin toy --k 8 --methods random,gt --etas 0.5 --scenes 2 --reps 2 "
      "--campaign-seed 9 --scene-seed 4 -T 4 ";
  REQUIRE(run_cli(flags + "--out-dir " + out_a) == 0);
  REQUIRE(run_cli(flags + "--out-dir " + out_b) == 0);
  REQUIRE(file_bytes(out_a + "/report.csv") == file_bytes(out_b + "/report.csv"));
  REQUIRE(file_bytes(out_a + "/report.txt") == file_bytes(out_b + "/report.txt"));

  std::ifstream csv(out_a + "/report.csv");
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "method,eta,scene,seed,cut_error_volume,remaining_rate,occupancy_rate");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  REQUIRE(rows == 2 * 1 * 2 * 2);
}

TEST_CASE("train smoke run exits cleanly and logs losses") {
  const std::string dir = tmp_dir();
  const std::string data = dir + "/train.vxdc", ckpt = dir + "/model.vxdn";
  REQUIRE(run_cli("generate --builtin toy --k 8 --per-mode 4 --seed 3 --out " + data) == 0);
  const std::string cmd = kCli + " train --dataset " + data + " --out " + ckpt +
                          " --steps 30 --batch 2 --c0 3 --c1 4 --seed 1 -N 50 > " + dir +
                          "/train.log 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  REQUIRE(fs::exists(ckpt));

  // progress lines carry step and loss columns
  std::ifstream log(dir + "/train.log");
  bool saw_loss = false;
  std::string line;
  while (std::getline(log, line)) saw_loss = saw_loss || line.find("loss") != std::string::npos;
  REQUIRE(saw_loss);

  // resume continues the step counter
  const std::string resume_cmd = kCli + " train --dataset " + data + " --resume " + ckpt +
                                 " --out " + ckpt + " --steps 40 --batch 2 --c0 3 --c1 4 "
                                 "--seed 1 -N 50 > " + dir + "/resume.log 2>&1";
  REQUIRE(WEXITSTATUS(std::system(resume_cmd.c_str())) == 0);
  std::ifstream rlog(dir + "/resume.log");
  bool resumed_at_30 = false;
  while (std::getline(rlog, line))
    resumed_at_30 = resumed_at_30 || line.find("at step 30") != std::string::npos;
  REQUIRE(resumed_at_30);
}
