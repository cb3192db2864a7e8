#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fnsf/core.hpp"
#include "fnsf/dt.hpp"
#include "fnsf/metrics.hpp"
#include "fnsf/pointcloud.hpp"
#include "fnsf/solver.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string g_command;  // argv echo for manifests

std::string platform_note() {
  std::string s = "g++ ";
#ifdef __VERSION__
  s += __VERSION__;
#endif
#if defined(__x86_64__)
  s += ", x86_64";
#elif defined(__aarch64__)
  s += ", aarch64";
#endif
#if defined(__linux__)
  s += ", linux";
#endif
  return s;
}

std::string timestamp_utc() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const fs::path& path, const json& config) {
  json m;
  m["command"] = g_command;
  m["config"] = config;
  m["tool_version"] = kToolVersion;
  m["platform"] = platform_note();
  m["timestamp"] = timestamp_utc();
  fnsf::write_file(path, m.dump(2) + "\n");
}

std::string fmtg(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double ms(std::int64_t ns) { return double(ns) / 1e6; }

fnsf::CloudFormat format_of(const fs::path& path) {
  return path.extension() == ".fnsf" ? fnsf::CloudFormat::fnsf_binary : fnsf::CloudFormat::xyz_text;
}

// ------------------------------------------------------------ solver flags

struct SolverFlags {
  std::string model = "mlp";
  std::string loss = "dt";
  std::string engine = "kd";
  double cell = 0.1;
  double margin = 2.0;
  double trunc = 2.0;
  bool bidirectional = false;
  bool squared = false;
  int width = 128;
  int depth = 8;
  double edge = 2.0;
  double sigma = 0.0;
  double lambda_tv = 1.0;
  double lr = 8e-3;
  int iters = 1000;
  int patience = 30;
  double min_delta = 1e-4;
  std::uint64_t seed = 0;
  std::int64_t budget = fnsf::kDefaultMemoryBudget;
};

void add_solver_flags(CLI::App* cmd, SolverFlags& f) {
  cmd->add_option("--model", f.model, "coordinate model: mlp|linear")
      ->check(CLI::IsMember({"mlp", "linear"}))
      ->capture_default_str();
  cmd->add_option("--loss", f.loss, "objective: dt|cd")
      ->check(CLI::IsMember({"dt", "cd"}))
      ->capture_default_str();
  cmd->add_option("--engine", f.engine, "chamfer nearest-neighbor engine: kd|brute")
      ->check(CLI::IsMember({"kd", "brute"}))
      ->capture_default_str();
  cmd->add_option("--cell", f.cell, "distance map cell size, m")->capture_default_str();
  cmd->add_option("--margin", f.margin, "distance map margin beyond the clouds, m")
      ->capture_default_str();
  cmd->add_option("--trunc", f.trunc, "chamfer truncation radius, m")->capture_default_str();
  cmd->add_flag("--bidirectional", f.bidirectional, "sum the chamfer term in both directions");
  cmd->add_flag("--squared", f.squared, "square the queried distances in the dt loss");
  cmd->add_option("--width", f.width, "mlp hidden width")->capture_default_str();
  cmd->add_option("--depth", f.depth, "mlp weight layers")->capture_default_str();
  cmd->add_option("--edge", f.edge, "linear encoder lattice edge, m")->capture_default_str();
  cmd->add_option("--sigma", f.sigma, "encoder gaussian width, m (0 = 2*edge)")
      ->capture_default_str();
  cmd->add_option("--lambda-tv", f.lambda_tv, "total-variation weight for the linear model")
      ->capture_default_str();
  cmd->add_option("--lr", f.lr, "adam learning rate")->capture_default_str();
  cmd->add_option("--iters", f.iters, "iteration cap")->capture_default_str();
  cmd->add_option("--patience", f.patience, "iterations without improvement before stopping")
      ->capture_default_str();
  cmd->add_option("--min-delta", f.min_delta, "relative improvement threshold")
      ->capture_default_str();
  cmd->add_option("--seed", f.seed, "model init seed")->capture_default_str();
  cmd->add_option("--budget", f.budget, "distance map memory budget, bytes")
      ->capture_default_str();
}

fnsf::SolveConfig to_config(const SolverFlags& f) {
  fnsf::SolveConfig cfg;
  cfg.model = f.model == "mlp" ? fnsf::ModelKind::mlp : fnsf::ModelKind::linear;
  cfg.loss = f.loss == "dt" ? fnsf::LossKind::dt : fnsf::LossKind::chamfer;
  cfg.mlp = {f.width, f.depth};
  cfg.linear = {f.edge, f.sigma, f.lambda_tv};
  cfg.chamfer.trunc = f.trunc;
  cfg.chamfer.direction = f.bidirectional ? fnsf::ChamferDirection::bidirectional
                                          : fnsf::ChamferDirection::forward;
  cfg.chamfer.engine = f.engine == "kd" ? fnsf::NnEngine::kdtree : fnsf::NnEngine::brute;
  cfg.dt.cell = f.cell;
  cfg.dt.margin = f.margin;
  cfg.dt.squared = f.squared;
  cfg.dt.budget_bytes = f.budget;
  cfg.lr = f.lr;
  cfg.max_iters = f.iters;
  cfg.patience = f.patience;
  cfg.min_delta = f.min_delta;
  cfg.seed = f.seed;
  return cfg;
}

json to_json(const SolverFlags& f) {
  return json{{"model", f.model},
              {"loss", f.loss},
              {"engine", f.engine},
              {"cell", f.cell},
              {"margin", f.margin},
              {"trunc", f.trunc},
              {"bidirectional", f.bidirectional},
              {"squared", f.squared},
              {"width", f.width},
              {"depth", f.depth},
              {"edge", f.edge},
              {"sigma", f.sigma},
              {"lambda_tv", f.lambda_tv},
              {"lr", f.lr},
              {"iters", f.iters},
              {"patience", f.patience},
              {"min_delta", f.min_delta},
              {"seed", f.seed},
              {"budget", f.budget}};
}

json timing_json(const fnsf::FlowEstimate& est) {
  return json{{"pre_compute_ms", ms(est.timing.pre_compute_ns)},
              {"loss_query_ms_mean", est.timing.loss_query_ns_mean() / 1e6},
              {"loss_query_ms_total", ms(est.timing.loss_query_ns_total)},
              {"network_ms_mean", est.timing.network_ns_mean() / 1e6},
              {"network_ms_total", ms(est.timing.network_ns_total)},
              {"total_ms", ms(est.timing.total_ns)}};
}

json metrics_json(const fnsf::MetricReport& r) {
  return json{{"epe_m", r.epe_m},
              {"acc5_pct", r.acc5_pct},
              {"acc10_pct", r.acc10_pct},
              {"angle_err_rad", r.angle_err_rad},
              {"count", r.count}};
}

std::string csv_row(const std::string& scene_id, const std::string& method,
                    const fnsf::MetricReport& m, const fnsf::TimingBreakdown& t) {
  std::string row = scene_id + "," + method;
  row += "," + fmtg(m.epe_m) + "," + fmtg(m.acc5_pct) + "," + fmtg(m.acc10_pct) + "," +
         fmtg(m.angle_err_rad);
  row += "," + fmtg(ms(t.pre_compute_ns)) + "," + fmtg(ms(t.loss_query_ns_total)) + "," +
         fmtg(ms(t.network_ns_total)) + "," + fmtg(ms(t.total_ns));
  return row;
}

// ---------------------------------------------------------------- svg plots

std::string svg_header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
         std::to_string(h) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string svg_text(double x, double y, const std::string& s, int size = 12,
                     const std::string& anchor = "start") {
  return "<text x=\"" + fmtg(x) + "\" y=\"" + fmtg(y) + "\" font-size=\"" + std::to_string(size) +
         "\" font-family=\"sans-serif\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
}

// Polyline chart of y over x with linear axes; one series per (points, color).
std::string svg_line_chart(const std::string& title, const std::string& xlabel,
                           const std::string& ylabel,
                           const std::vector<std::pair<double, double>>& pts) {
  const int W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
  std::string out = svg_header(W, H);
  out += svg_text(W / 2.0, 24, title, 14, "middle");
  if (pts.size() < 2) {
    out += svg_text(W / 2.0, H / 2.0, "not enough data", 12, "middle");
    return out + "</svg>\n";
  }
  double x0 = pts[0].first, x1 = pts[0].first, y0 = pts[0].second, y1 = pts[0].second;
  for (const auto& [x, y] : pts) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  out += "<line x1=\"" + fmtg(L) + "\" y1=\"" + fmtg(H - B) + "\" x2=\"" + fmtg(W - R) +
         "\" y2=\"" + fmtg(H - B) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fmtg(L) + "\" y1=\"" + fmtg(H - B) + "\" x2=\"" + fmtg(L) + "\" y2=\"" +
         fmtg(T) + "\" stroke=\"black\"/>\n";
  out += svg_text((L + W - R) / 2.0, H - 12, xlabel, 12, "middle");
  out += svg_text(16, T - 10, ylabel);
  out += svg_text(L, H - B + 16, fmtg(x0), 10, "middle");
  out += svg_text(W - R, H - B + 16, fmtg(x1), 10, "middle");
  out += svg_text(L - 4, H - B + 4, fmtg(y0), 10, "end");
  out += svg_text(L - 4, T + 4, fmtg(y1), 10, "end");
  std::string line = "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (const auto& [x, y] : pts) line += fmtg(px(x)) + "," + fmtg(py(y)) + " ";
  out += line + "\"/>\n";
  for (const auto& [x, y] : pts)
    out += "<circle cx=\"" + fmtg(px(x)) + "\" cy=\"" + fmtg(py(y)) +
           "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  return out + "</svg>\n";
}

// Per-method stacked bars of the phase times, drawn as wide polylines so the
// chart machinery stays one primitive.
std::string svg_phase_bars(const std::string& title, const std::vector<std::string>& labels,
                           const std::vector<std::array<double, 3>>& phases) {
  const int W = 640, H = 420, L = 70, R = 20, T = 40, B = 60;
  const char* colors[3] = {"#2ca02c", "#1f77b4", "#d62728"};
  const char* names[3] = {"pre", "loss query", "network"};
  std::string out = svg_header(W, H);
  out += svg_text(W / 2.0, 24, title, 14, "middle");
  double top = 1e-9;
  for (const auto& p : phases) top = std::max(top, p[0] + p[1] + p[2]);
  const double span = double(W - L - R);
  const double step = span / double(std::max<std::size_t>(1, phases.size()));
  auto py = [&](double v) { return H - B - v / top * (H - T - B); };
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const double cx = L + (double(i) + 0.5) * step;
    const double bw = step * 0.5;
    double acc = 0;
    for (int ph = 0; ph < 3; ++ph) {
      const double lo = acc, hi = acc + phases[i][std::size_t(ph)];
      out += "<polyline stroke=\"" + std::string(colors[ph]) + "\" stroke-width=\"" + fmtg(bw) +
             "\" points=\"" + fmtg(cx) + "," + fmtg(py(lo)) + " " + fmtg(cx) + "," + fmtg(py(hi)) +
             "\"/>\n";
      acc = hi;
    }
    out += svg_text(cx, H - B + 16, i < labels.size() ? labels[i] : "", 11, "middle");
    out += svg_text(cx, py(acc) - 6, fmtg(acc) + " ms", 10, "middle");
  }
  out += "<line x1=\"" + fmtg(L) + "\" y1=\"" + fmtg(H - B) + "\" x2=\"" + fmtg(W - R) +
         "\" y2=\"" + fmtg(H - B) + "\" stroke=\"black\"/>\n";
  for (int ph = 0; ph < 3; ++ph)
    out += svg_text(L + 140.0 * ph, H - 16, std::string("■ ") + names[ph] + "  ", 11);
  return out + "</svg>\n";
}

// ------------------------------------------------------------- subcommands

struct SynthOpts {
  int points = 20000;
  int movers = 0;
  std::uint64_t seed = 0;
  double max_translation = 1.5;
  double noise = 0.0;
  double target_scale = 1.0;
  std::string format = "xyz";
  std::string out;
};

void run_synth(const SynthOpts& o) {
  fnsf::SynthConfig cfg = fnsf::random_scene_config(o.points, o.movers, o.seed, o.max_translation);
  cfg.noise_sigma = o.noise;
  cfg.target_scale = o.target_scale;
  fnsf::ScenePair pair = fnsf::synth_scene(cfg, o.seed);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  const std::string ext = o.format == "fnsf" ? ".fnsf" : ".xyz";
  const fnsf::CloudFormat fmt =
      o.format == "fnsf" ? fnsf::CloudFormat::fnsf_binary : fnsf::CloudFormat::xyz_text;
  fnsf::save_cloud(dir / ("source" + ext), pair.source, fmt);
  fnsf::save_cloud(dir / ("target" + ext), pair.target, fmt);
  fnsf::save_flow(dir / ("gt_flow" + ext), *pair.gt_flow, fmt);

  write_manifest(dir / "manifest.json",
                 json{{"points", o.points},
                      {"movers", o.movers},
                      {"seed", o.seed},
                      {"max_translation", o.max_translation},
                      {"noise", o.noise},
                      {"target_scale", o.target_scale},
                      {"format", o.format},
                      {"out", o.out}});
  std::cout << "wrote " << (dir / ("source" + ext)).string() << " (" << pair.source.size()
            << " points), target (" << pair.target.size() << "), gt_flow\n";
}

struct FlowOpts {
  std::string source, target, out, record, gt;
  SolverFlags solver;
};

void run_flow(const FlowOpts& o) {
  const fnsf::PointCloud source = fnsf::load_cloud(o.source);
  const fnsf::PointCloud target = fnsf::load_cloud(o.target);
  const fnsf::SolveConfig cfg = to_config(o.solver);
  const fnsf::FlowEstimate est = fnsf::solve(source, target, cfg);

  const fs::path out = o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fnsf::save_flow(out, est.flow, format_of(out));

  json record;
  record["config"] = to_json(o.solver);
  record["source"] = o.source;
  record["target"] = o.target;
  record["iterations_run"] = est.iterations_run;
  record["final_loss"] = est.final_loss;
  for (auto& [k, v] : timing_json(est).items()) record[k] = v;
  if (!o.gt.empty()) {
    const fnsf::FlowField gt = fnsf::load_flow(o.gt);
    record["metrics"] = metrics_json(fnsf::evaluate_flow(est.flow, gt));
  }
  const fs::path rec = o.record.empty() ? fs::path(o.out + ".solve.json") : fs::path(o.record);
  fnsf::write_file(rec, record.dump(2) + "\n");
  write_manifest(fs::path(o.out + ".manifest.json"), record["config"]);
  std::cout << "wrote " << out.string() << " (" << est.flow.size() << " rows), "
            << rec.string() << "\n";
}

struct EvalOpts {
  std::string est, gt, out;
  std::string scene_id = "scene";
  std::string method = "-";
};

void run_eval(const EvalOpts& o) {
  const fnsf::FlowField est = fnsf::load_flow(o.est);
  const fnsf::FlowField gt = fnsf::load_flow(o.gt);
  const fnsf::MetricReport m = fnsf::evaluate_flow(est, gt);
  const std::string text = std::string(fnsf::kCsvHeader) + "\n" +
                           csv_row(o.scene_id, o.method, m, fnsf::TimingBreakdown{}) + "\n";
  std::cout << text;
  if (!o.out.empty()) {
    fnsf::write_file(o.out, text);
    write_manifest(fs::path(o.out + ".manifest.json"),
                   json{{"est", o.est}, {"gt", o.gt}, {"scene_id", o.scene_id},
                        {"method", o.method}});
  }
}

struct BenchOpts {
  int scenes = 3;
  int points = 5000;
  int movers = 1;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::vector<std::string> methods = {"cd-mlp", "cd-linear", "dt-mlp", "dt-linear"};
  std::string out;
  SolverFlags solver;
};

fnsf::SolveConfig method_config(const SolverFlags& base, const std::string& method) {
  SolverFlags f = base;
  const auto dash = method.find('-');
  if (dash == std::string::npos) throw std::invalid_argument("bench: bad method " + method);
  const std::string loss = method.substr(0, dash), model = method.substr(dash + 1);
  if ((loss != "cd" && loss != "dt") || (model != "mlp" && model != "linear"))
    throw std::invalid_argument("bench: bad method " + method);
  f.loss = loss;
  f.model = model;
  return to_config(f);
}

void run_bench(const BenchOpts& o) {
  if (o.scenes < 1) throw std::invalid_argument("bench: need at least one scene");
  if (o.jobs < 1) throw std::invalid_argument("bench: jobs must be positive");
  for (const std::string& m : o.methods) (void)method_config(o.solver, m);

  const fs::path dir = o.out;
  fs::create_directories(dir);

  struct Row {
    std::string text;
    fnsf::TimingBreakdown timing;
    std::string method;
  };
  std::vector<std::vector<Row>> rows(std::size_t(o.scenes));

  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex fail_mu;
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= o.scenes) return;
      try {
        fnsf::SynthConfig scfg =
            fnsf::random_scene_config(o.points, o.movers, o.seed + std::uint64_t(i));
        fnsf::ScenePair pair = fnsf::synth_scene(scfg, o.seed + std::uint64_t(i));
        const std::string scene_id = "scene" + std::to_string(i);
        for (const std::string& method : o.methods) {
          fnsf::SolveConfig cfg = method_config(o.solver, method);
          fnsf::FlowEstimate est = fnsf::solve(pair, cfg);
          fnsf::MetricReport m = fnsf::evaluate_flow(est.flow, *pair.gt_flow);
          rows[std::size_t(i)].push_back({csv_row(scene_id, method, m, est.timing), est.timing,
                                          method});
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(fail_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int nworkers = std::min(o.jobs, o.scenes);
  std::vector<std::thread> pool;
  for (int w = 0; w < nworkers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::string csv = std::string(fnsf::kCsvHeader) + "\n";
  for (const auto& scene_rows : rows)
    for (const Row& r : scene_rows) csv += r.text + "\n";
  fnsf::write_file(dir / "bench.csv", csv);

  // mean phase times per method, in the order given
  std::vector<std::array<double, 3>> phases(o.methods.size(), {0, 0, 0});
  for (const auto& scene_rows : rows)
    for (const Row& r : scene_rows) {
      const auto it = std::find(o.methods.begin(), o.methods.end(), r.method);
      auto& p = phases[std::size_t(it - o.methods.begin())];
      p[0] += ms(r.timing.pre_compute_ns) / o.scenes;
      p[1] += ms(r.timing.loss_query_ns_total) / o.scenes;
      p[2] += ms(r.timing.network_ns_total) / o.scenes;
    }
  fnsf::write_file(dir / "bench.svg",
                   svg_phase_bars("mean solve time by method, " + std::to_string(o.points) +
                                      " points",
                                  o.methods, phases));
  write_manifest(dir / "manifest.json",
                 json{{"scenes", o.scenes},
                      {"points", o.points},
                      {"movers", o.movers},
                      {"seed", o.seed},
                      {"jobs", o.jobs},
                      {"methods", o.methods},
                      {"solver", to_json(o.solver)}});
  std::cout << "wrote " << (dir / "bench.csv").string() << " ("
            << o.scenes * int(o.methods.size()) << " rows)\n";
}

struct AblateOpts {
  int points = 8000;
  int movers = 1;
  std::uint64_t seed = 0;
  std::vector<double> cells = {1.0, 0.5, 0.2, 0.1};
  std::string out;
  SolverFlags solver;
};

void run_ablate(const AblateOpts& o) {
  std::vector<double> cells;
  for (double c : o.cells)
    if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  if (cells.empty()) throw std::invalid_argument("ablate_grid: no cell sizes");

  fnsf::SynthConfig scfg = fnsf::random_scene_config(o.points, o.movers, o.seed);
  fnsf::ScenePair pair = fnsf::synth_scene(scfg, o.seed);

  const fs::path dir = o.out;
  fs::create_directories(dir);
  std::string csv = "cell_m,epe_m,acc5,acc10,angle_rad,pre_ms,query_ms_total,dt_bytes,status\n";
  std::vector<std::pair<double, double>> curve;
  for (double cell : cells) {
    SolverFlags f = o.solver;
    f.loss = "dt";
    f.cell = cell;
    try {
      const fnsf::GridSpec grid =
          fnsf::make_grid(pair.source, pair.target, cell, f.margin, f.budget);
      const std::int64_t bytes = grid.ncells() * std::int64_t(sizeof(float));
      const fnsf::FlowEstimate est = fnsf::solve(pair, to_config(f));
      const fnsf::MetricReport m = fnsf::evaluate_flow(est.flow, *pair.gt_flow);
      csv += fmtg(cell) + "," + fmtg(m.epe_m) + "," + fmtg(m.acc5_pct) + "," +
             fmtg(m.acc10_pct) + "," + fmtg(m.angle_err_rad) + "," +
             fmtg(ms(est.timing.pre_compute_ns)) + "," +
             fmtg(ms(est.timing.loss_query_ns_total)) + "," + std::to_string(bytes) + ",ok\n";
      curve.emplace_back(cell, m.epe_m);
    } catch (const fnsf::BudgetError& e) {
      // tiny cells can blow the memory budget; report and keep sweeping
      std::string why = e.what();
      std::replace(why.begin(), why.end(), ',', ';');
      csv += fmtg(cell) + ",,,,,,,," + why + "\n";
    }
  }
  fnsf::write_file(dir / "ablate.csv", csv);
  fnsf::write_file(dir / "ablate.svg",
                   svg_line_chart("end-point error vs distance map cell size", "cell (m)",
                                  "EPE (m)", curve));
  write_manifest(dir / "manifest.json",
                 json{{"points", o.points},
                      {"movers", o.movers},
                      {"seed", o.seed},
                      {"cells", cells},
                      {"solver", to_json(o.solver)}});
  std::cout << "wrote " << (dir / "ablate.csv").string() << " (" << cells.size() << " rows)\n";
}

struct AccumulateOpts {
  std::vector<std::string> frames;
  int ref = -1;  // default: last frame
  std::string out;
  SolverFlags solver;
};

void run_accumulate(const AccumulateOpts& o) {
  std::vector<fnsf::PointCloud> frames;
  frames.reserve(o.frames.size());
  for (const std::string& path : o.frames) frames.push_back(fnsf::load_cloud(path));
  const int ref = o.ref < 0 ? int(frames.size()) - 1 : o.ref;

  const fnsf::PointCloud dense = fnsf::accumulate(frames, to_config(o.solver), ref);
  const fs::path out = o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fnsf::save_cloud(out, dense, format_of(out));
  write_manifest(fs::path(o.out + ".manifest.json"),
                 json{{"frames", o.frames}, {"ref", ref}, {"solver", to_json(o.solver)}});
  std::cout << "wrote " << out.string() << " (" << dense.size() << " points from "
            << frames.size() << " frames)\n";
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) {
    if (i) g_command += " ";
    g_command += argv[i];
  }

  CLI::App app{"scene flow estimation by runtime optimization"};
  app.require_subcommand(1);

  SynthOpts synth;
  CLI::App* s = app.add_subcommand("synth", "generate a synthetic scene pair with ground truth");
  s->add_option("--points", synth.points, "background point count")->capture_default_str();
  s->add_option("--movers", synth.movers, "rigid mover count")->capture_default_str();
  s->add_option("--seed", synth.seed, "scene seed")->capture_default_str();
  s->add_option("--max-translation", synth.max_translation, "mover translation cap, m")
      ->capture_default_str();
  s->add_option("--noise", synth.noise, "per-component gaussian noise, m")->capture_default_str();
  s->add_option("--target-scale", synth.target_scale, "target size as a fraction of source")
      ->capture_default_str();
  s->add_option("--format", synth.format, "output format: xyz|fnsf")
      ->check(CLI::IsMember({"xyz", "fnsf"}))
      ->capture_default_str();
  s->add_option("-o,--out", synth.out, "output directory")->required();
  s->set_config("--config");
  s->callback([&] { run_synth(synth); });

  FlowOpts flow;
  CLI::App* f = app.add_subcommand("flow", "estimate scene flow between two clouds");
  f->add_option("source", flow.source, "source cloud file")->required();
  f->add_option("target", flow.target, "target cloud file")->required();
  f->add_option("-o,--out", flow.out, "estimated flow file (.xyz or .fnsf)")->required();
  f->add_option("--record", flow.record, "solve record path (default <out>.solve.json)");
  f->add_option("--gt", flow.gt, "ground-truth flow for metrics in the record");
  add_solver_flags(f, flow.solver);
  f->set_config("--config");
  f->callback([&] { run_flow(flow); });

  EvalOpts eval;
  CLI::App* e = app.add_subcommand("eval", "score an estimated flow against ground truth");
  e->add_option("est", eval.est, "estimated flow file")->required();
  e->add_option("gt", eval.gt, "ground-truth flow file")->required();
  e->add_option("--scene-id", eval.scene_id, "scene label for the CSV row")->capture_default_str();
  e->add_option("--method", eval.method, "method label for the CSV row")->capture_default_str();
  e->add_option("-o,--out", eval.out, "also write the CSV to this file");
  e->set_config("--config");
  e->callback([&] { run_eval(eval); });

  BenchOpts bench;
  CLI::App* b = app.add_subcommand("bench", "time the method matrix over generated scenes");
  b->add_option("--scenes", bench.scenes, "scene count")->capture_default_str();
  b->add_option("--points", bench.points, "points per scene")->capture_default_str();
  b->add_option("--movers", bench.movers, "movers per scene")->capture_default_str();
  b->add_option("--seed", bench.seed, "base seed")->capture_default_str();
  b->add_option("--jobs", bench.jobs, "concurrent scenes")->capture_default_str();
  b->add_option("--methods", bench.methods, "loss-model pairs to run")
      ->delimiter(',')
      ->capture_default_str();
  b->add_option("-o,--out", bench.out, "output directory")->required();
  add_solver_flags(b, bench.solver);
  b->set_config("--config");
  b->callback([&] { run_bench(bench); });

  AblateOpts ablate;
  CLI::App* a = app.add_subcommand("ablate_grid", "sweep the distance map cell size");
  a->add_option("--points", ablate.points, "background point count")->capture_default_str();
  a->add_option("--movers", ablate.movers, "mover count")->capture_default_str();
  a->add_option("--seed", ablate.seed, "scene seed")->capture_default_str();
  a->add_option("--cells", ablate.cells, "cell sizes to sweep, m")
      ->delimiter(',')
      ->capture_default_str();
  a->add_option("-o,--out", ablate.out, "output directory")->required();
  add_solver_flags(a, ablate.solver);
  a->set_config("--config");
  a->callback([&] { run_ablate(ablate); });

  AccumulateOpts acc;
  CLI::App* c = app.add_subcommand("accumulate", "densify a frame sequence onto one frame");
  c->add_option("frames", acc.frames, "frame cloud files, time order")->expected(2, -1);
  c->add_option("--ref", acc.ref, "reference frame index (default: last)");
  c->add_option("-o,--out", acc.out, "densified cloud file")->required();
  add_solver_flags(c, acc.solver);
  c->set_config("--config");
  c->callback([&] { run_accumulate(acc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  } catch (const fnsf::IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const fnsf::BudgetError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 5;
  } catch (const fnsf::NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
