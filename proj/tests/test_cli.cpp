#define DOCTEST_CONFIG_IMPLEMENT
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "fnsf/core.hpp"
#include "fnsf/pointcloud.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_tool;  // path to the fnsf binary, from argv[1]

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           ("fnsf_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const char* name) const { return path / name; }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the tool through the shell so per-call environment overrides stay easy.
RunResult run_tool(const std::string& args, const std::string& env = "") {
  static int serial = 0;
  const fs::path base = fs::temp_directory_path() /
                        ("fnsf_cli_io_" + std::to_string(::getpid()) + "_" +
                         std::to_string(serial++));
  const fs::path out = base.string() + ".out", err = base.string() + ".err";
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += "\"" + g_tool + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = rc < 0 ? -1 : WEXITSTATUS(rc);
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small scene in files, shared by the solve-driving cases.
struct SceneFiles {
  TmpDir dir;
  fs::path source, target, gt;
  SceneFiles(int points, int movers, std::uint64_t seed) {
    RunResult r = run_tool("synth --points " + std::to_string(points) + " --movers " +
                           std::to_string(movers) + " --seed " + std::to_string(seed) +
                           " --max-translation 0.8 -o " + q(dir.path));
    REQUIRE(r.code == 0);
    source = dir / "source.xyz";
    target = dir / "target.xyz";
    gt = dir / "gt_flow.xyz";
  }
};

const char* kFastSolve =
    " --model linear --edge 1.0 --iters 40 --cell 0.25 --seed 5 --patience 40";

}  // namespace

TEST_CASE("synth writes three data files and a manifest") {
  TmpDir dir;
  RunResult r = run_tool("synth --points 1200 --movers 2 --seed 7 -o " + q(dir.path));
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "source.xyz"));
  CHECK(fs::exists(dir / "target.xyz"));
  CHECK(fs::exists(dir / "gt_flow.xyz"));
  CHECK(fs::exists(dir / "manifest.json"));
  int entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++entries;
  CHECK(entries == 4);

  const fnsf::PointCloud src = fnsf::load_cloud(dir / "source.xyz");
  const fnsf::FlowField gt = fnsf::load_flow(dir / "gt_flow.xyz");
  CHECK(src.size() == gt.size());
  CHECK(src.size() > 1200);  // background plus movers

  const json m = json::parse(slurp(dir / "manifest.json"));
  CHECK(m.contains("command"));
  CHECK(m.contains("config"));
  CHECK(m.contains("tool_version"));
  CHECK(m.contains("platform"));
  CHECK(m.contains("timestamp"));
  CHECK(m["config"]["seed"] == 7);
  CHECK(std::string(m["command"]).find("synth") != std::string::npos);
}

TEST_CASE("synth rerun with the same flags reproduces the data files byte for byte") {
  TmpDir a, b;
  const std::string flags = "synth --points 900 --movers 1 --seed 31 --noise 0.01 -o ";
  REQUIRE(run_tool(flags + q(a.path)).code == 0);
  REQUIRE(run_tool(flags + q(b.path)).code == 0);
  for (const char* name : {"source.xyz", "target.xyz", "gt_flow.xyz"}) {
    CHECK(slurp(a / name) == slurp(b / name));
    CHECK(!slurp(a / name).empty());
  }
}

TEST_CASE("synth binary format round trips through the loaders") {
  TmpDir dir;
  REQUIRE(run_tool("synth --points 300 --movers 0 --seed 2 --format fnsf -o " + q(dir.path))
              .code == 0);
  CHECK(fs::exists(dir / "source.fnsf"));
  const fnsf::PointCloud src = fnsf::load_cloud(dir / "source.fnsf");
  CHECK(src.size() == 300);
}

TEST_CASE("usage errors exit with code 2") {
  TmpDir dir;
  CHECK(run_tool("synth --movers -1 -o " + q(dir.path)).code == 2);
  CHECK(run_tool("synth --points 100 --no-such-flag -o " + q(dir.path)).code == 2);
  CHECK(run_tool("no_such_command").code == 2);
  CHECK(run_tool("").code == 2);  // a subcommand is required
  CHECK(run_tool("flow only_one_positional.xyz -o x.xyz").code == 2);
  CHECK(run_tool("synth --points 100 --format parquet -o " + q(dir.path)).code == 2);
}

TEST_CASE("--help exits zero") {
  CHECK(run_tool("--help").code == 0);
  CHECK(run_tool("flow --help").code == 0);
}

TEST_CASE("flow writes a flow with one row per source point plus a solve record") {
  SceneFiles scene(500, 1, 11);
  TmpDir out;
  const fs::path flow = out / "flow.xyz";
  RunResult r = run_tool("flow " + q(scene.source) + " " + q(scene.target) + " -o " + q(flow) +
                         kFastSolve + " --gt " + q(scene.gt));
  REQUIRE(r.code == 0);

  const fnsf::PointCloud src = fnsf::load_cloud(scene.source);
  const fnsf::FlowField est = fnsf::load_flow(flow);
  CHECK(est.size() == src.size());

  const json rec = json::parse(slurp(out / "flow.xyz.solve.json"));
  CHECK(rec["config"]["model"] == "linear");
  CHECK(rec["config"]["loss"] == "dt");
  CHECK(int(rec["iterations_run"]) >= 1);
  CHECK(int(rec["iterations_run"]) <= 40);
  CHECK(std::isfinite(double(rec["final_loss"])));
  for (const char* key : {"pre_compute_ms", "loss_query_ms_mean", "loss_query_ms_total",
                          "network_ms_mean", "network_ms_total", "total_ms"}) {
    REQUIRE(rec.contains(key));
    CHECK(double(rec[key]) >= 0);
  }
  CHECK(double(rec["total_ms"]) >=
        double(rec["loss_query_ms_total"]) + double(rec["network_ms_total"]));
  CHECK(rec.contains("metrics"));
  CHECK(double(rec["metrics"]["epe_m"]) >= 0);
  CHECK(std::int64_t(rec["metrics"]["count"]) == src.size());
  CHECK(fs::exists(out / "flow.xyz.manifest.json"));
}

TEST_CASE("flow is deterministic across reruns and worker counts") {
  SceneFiles scene(400, 0, 3);
  TmpDir out;
  const std::string base = "flow " + q(scene.source) + " " + q(scene.target) + kFastSolve;
  REQUIRE(run_tool(base + " -o " + q(out / "a.xyz"), "FNSF_THREADS=2").code == 0);
  REQUIRE(run_tool(base + " -o " + q(out / "b.xyz"), "FNSF_THREADS=2").code == 0);
  REQUIRE(run_tool(base + " -o " + q(out / "c.xyz"), "FNSF_THREADS=4").code == 0);
  const std::string a = slurp(out / "a.xyz");
  CHECK(!a.empty());
  CHECK(a == slurp(out / "b.xyz"));
  CHECK(a == slurp(out / "c.xyz"));
}

TEST_CASE("flow under FNSF_SIMD=scalar still converges to a full flow") {
  SceneFiles scene(300, 0, 9);
  TmpDir out;
  RunResult r = run_tool("flow " + q(scene.source) + " " + q(scene.target) + " -o " +
                             q(out / "flow.xyz") + kFastSolve,
                         "FNSF_SIMD=scalar");
  REQUIRE(r.code == 0);
  CHECK(fnsf::load_flow(out / "flow.xyz").size() == 300);
}

TEST_CASE("flow maps missing inputs to the I/O exit code") {
  SceneFiles scene(200, 0, 1);
  TmpDir out;
  CHECK(run_tool("flow " + q(scene.dir / "absent.xyz") + " " + q(scene.target) + " -o " +
                 q(out / "f.xyz") + kFastSolve)
            .code == 3);
  CHECK(run_tool("flow " + q(scene.source) + " " + q(scene.dir / "absent.xyz") + " -o " +
                 q(out / "f.xyz") + kFastSolve)
            .code == 3);
}

TEST_CASE("flow rejects unknown enum values as usage errors") {
  SceneFiles scene(200, 0, 1);
  TmpDir out;
  const std::string io = q(scene.source) + " " + q(scene.target) + " -o " + q(out / "f.xyz");
  CHECK(run_tool("flow " + io + " --loss emd").code == 2);
  CHECK(run_tool("flow " + io + " --model transformer").code == 2);
  CHECK(run_tool("flow " + io + " --engine gpu").code == 2);
}

TEST_CASE("flow accepts a flat key=value config file") {
  SceneFiles scene(300, 0, 4);
  TmpDir out;
  fnsf::write_file(out / "run.cfg",
                   "model=linear\nedge=1.0\niters=40\ncell=0.25\nseed=5\npatience=40\n");
  REQUIRE(run_tool("flow " + q(scene.source) + " " + q(scene.target) + " -o " +
                   q(out / "cfg.xyz") + " --config " + q(out / "run.cfg"))
              .code == 0);
  REQUIRE(run_tool("flow " + q(scene.source) + " " + q(scene.target) + " -o " +
                   q(out / "flags.xyz") + kFastSolve)
              .code == 0);
  CHECK(slurp(out / "cfg.xyz") == slurp(out / "flags.xyz"));
}

TEST_CASE("eval of a flow against itself scores perfectly") {
  SceneFiles scene(400, 1, 21);
  RunResult r = run_tool("eval " + q(scene.gt) + " " + q(scene.gt) +
                         " --scene-id s21 --method self");
  REQUIRE(r.code == 0);
  const auto lines = lines_of(r.out);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0] ==
        "scene_id,method,epe_m,acc5,acc10,angle_rad,pre_ms,query_ms_total,network_ms_total,"
        "total_ms");
  const auto cells = split_csv(lines[1]);
  REQUIRE(cells.size() == 10);
  CHECK(cells[0] == "s21");
  CHECK(cells[1] == "self");
  CHECK(std::stod(cells[2]) == 0);
  CHECK(std::stod(cells[3]) == 100);
  CHECK(std::stod(cells[4]) == 100);
  CHECK(std::stod(cells[5]) == 0);
}

TEST_CASE("eval writes the CSV to a file when asked and errors on length mismatch") {
  SceneFiles scene(300, 0, 8);
  TmpDir out;
  RunResult r = run_tool("eval " + q(scene.gt) + " " + q(scene.gt) + " -o " + q(out / "row.csv"));
  REQUIRE(r.code == 0);
  CHECK(slurp(out / "row.csv") == r.out);
  CHECK(fs::exists(out / "row.csv.manifest.json"));

  fnsf::FlowField shorter = fnsf::load_flow(scene.gt);
  shorter.v.pop_back();
  fnsf::save_flow(out / "short.xyz", shorter, fnsf::CloudFormat::xyz_text);
  CHECK(run_tool("eval " + q(out / "short.xyz") + " " + q(scene.gt)).code == 2);
}

TEST_CASE("bench emits the scene-by-method row matrix with coherent timing") {
  TmpDir out;
  RunResult r = run_tool("bench --scenes 2 --points 350 --movers 0 --seed 13 "
                         "--methods dt-linear,cd-linear -o " +
                         q(out.path) + kFastSolve);
  REQUIRE(r.code == 0);
  const auto lines = lines_of(slurp(out / "bench.csv"));
  REQUIRE(lines.size() == 1 + 2 * 2);
  CHECK(split_csv(lines[0]).size() == 10);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv(lines[i]);
    REQUIRE(cells.size() == 10);
    const double pre = std::stod(cells[6]), query = std::stod(cells[7]),
                 network = std::stod(cells[8]), total = std::stod(cells[9]);
    CHECK(pre + query + network <= total * 1.0000001);
    CHECK(std::stod(cells[2]) >= 0);
  }
  // deterministic (scene, method) row order regardless of worker interleaving
  CHECK(split_csv(lines[1])[0] == "scene0");
  CHECK(split_csv(lines[1])[1] == "dt-linear");
  CHECK(split_csv(lines[2])[1] == "cd-linear");
  CHECK(split_csv(lines[3])[0] == "scene1");
  CHECK(fs::exists(out / "bench.svg"));
  CHECK(fs::exists(out / "manifest.json"));
  CHECK(slurp(out / "bench.svg").find("<svg") == 0);
}

TEST_CASE("bench with concurrent scenes matches the metric columns of a serial run") {
  TmpDir serial, parallel;
  const std::string flags = "bench --scenes 3 --points 250 --movers 0 --seed 5 "
                            "--methods dt-linear --jobs ";
  REQUIRE(run_tool(flags + "1 -o " + q(serial.path) + kFastSolve).code == 0);
  REQUIRE(run_tool(flags + "3 -o " + q(parallel.path) + kFastSolve).code == 0);
  const auto a = lines_of(slurp(serial / "bench.csv"));
  const auto b = lines_of(slurp(parallel / "bench.csv"));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto ca = split_csv(a[i]), cb = split_csv(b[i]);
    REQUIRE(ca.size() == cb.size());
    for (std::size_t j = 0; j < 6; ++j) CHECK(ca[j] == cb[j]);  // all but timing
  }
}

TEST_CASE("bench rejects a malformed method name") {
  TmpDir out;
  CHECK(run_tool("bench --scenes 1 --points 200 --methods emd-linear -o " + q(out.path)).code ==
        2);
  CHECK(run_tool("bench --scenes 0 --points 200 -o " + q(out.path)).code == 2);
}

TEST_CASE("ablate_grid dedups cells and keeps sweeping past a budget failure") {
  TmpDir out;
  RunResult r = run_tool("ablate_grid --points 500 --movers 0 --seed 17 "
                         "--cells 0.8,0.4,0.8,0.02 --budget 8000000 -o " +
                         q(out.path) + kFastSolve);
  REQUIRE(r.code == 0);
  const auto lines = lines_of(slurp(out / "ablate.csv"));
  REQUIRE(lines.size() == 4);  // header + {0.8, 0.4, 0.02}, duplicate dropped
  CHECK(lines[0] ==
        "cell_m,epe_m,acc5,acc10,angle_rad,pre_ms,query_ms_total,dt_bytes,status");
  const auto r08 = split_csv(lines[1]), r04 = split_csv(lines[2]), r002 = split_csv(lines[3]);
  CHECK(r08[0] == "0.8");
  CHECK(r04[0] == "0.4");
  CHECK(r002[0] == "0.02");
  CHECK(r08.back() == "ok");
  CHECK(r04.back() == "ok");
  CHECK(r002.back() != "ok");  // 0.02 m cells over a ~34 m box blow the 8 MB budget
  CHECK(std::stoll(r04[7]) > std::stoll(r08[7]));  // finer grid, more distance map bytes
  CHECK(fs::exists(out / "ablate.svg"));
}

TEST_CASE("accumulate unions the advanced frames with the reference") {
  TmpDir dir;
  REQUIRE(run_tool("synth --points 400 --movers 0 --seed 19 -o " + q(dir.path)).code == 0);
  TmpDir out;
  RunResult r = run_tool("accumulate " + q(dir / "source.xyz") + " " + q(dir / "source.xyz") +
                         " -o " + q(out / "dense.xyz") + kFastSolve);
  REQUIRE(r.code == 0);
  CHECK(fnsf::load_cloud(out / "dense.xyz").size() == 800);
  CHECK(fs::exists(out / "dense.xyz.manifest.json"));
}

TEST_CASE("accumulate rejects a reference index outside the sequence") {
  TmpDir dir;
  REQUIRE(run_tool("synth --points 200 --movers 0 --seed 23 -o " + q(dir.path)).code == 0);
  TmpDir out;
  const std::string frames = q(dir / "source.xyz") + " " + q(dir / "source.xyz");
  CHECK(run_tool("accumulate " + frames + " --ref 5 -o " + q(out / "d.xyz") + kFastSolve).code ==
        2);
  CHECK(run_tool("accumulate " + frames + " --ref 0 -o " + q(out / "d.xyz") + kFastSolve).code ==
        2);
  CHECK(run_tool("accumulate " + q(dir / "source.xyz") + " -o " + q(out / "d.xyz")).code == 2);
}

int main(int argc, char** argv) {
  if (argc > 1 && argv[1][0] != '-') {
    g_tool = argv[1];
    for (int i = 1; i + 1 < argc; ++i) argv[i] = argv[i + 1];
    --argc;
  }
  if (g_tool.empty() || !fs::exists(g_tool)) {
    std::fprintf(stderr, "usage: test_cli <path-to-fnsf-binary> [doctest args]\n");
    return 1;
  }
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
