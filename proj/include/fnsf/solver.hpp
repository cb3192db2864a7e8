#pragma once

#include <cstdint>
#include <vector>

#include "fnsf/dt.hpp"
#include "fnsf/loss.hpp"
#include "fnsf/model.hpp"
#include "fnsf/pointcloud.hpp"

namespace fnsf {

enum class ModelKind { mlp, linear };
enum class LossKind { chamfer, dt };

struct MlpModelCfg {
  int width = 128;
  int depth = 8;
};

struct LinearModelCfg {
  double edge = 2.0;      // encoder voxel edge, m
  double sigma = 0;       // <= 0 picks 2 * edge
  double lambda_tv = 1.0;
};

struct ChamferLossCfg {
  double trunc = 2.0;
  ChamferDirection direction = ChamferDirection::forward;
  NnEngine engine = NnEngine::kdtree;
};

struct DtLossCfg {
  double cell = 0.1;
  double margin = 2.0;
  bool squared = false;
  std::int64_t budget_bytes = kDefaultMemoryBudget;
};

struct SolveConfig {
  ModelKind model = ModelKind::mlp;
  MlpModelCfg mlp;
  LinearModelCfg linear;
  LossKind loss = LossKind::dt;
  ChamferLossCfg chamfer;
  DtLossCfg dt;
  double lr = 8e-3;
  int max_iters = 1000;
  int patience = 30;       // iterations without relative improvement before stopping
  double min_delta = 1e-4; // relative improvement threshold
  std::uint64_t seed = 0;
};

struct TimingBreakdown {
  std::int64_t pre_compute_ns = 0;     // loss structures + encoder, one-time
  std::int64_t loss_query_ns_total = 0;
  std::int64_t network_ns_total = 0;   // forward + backward + optimizer
  std::int64_t total_ns = 0;
  int steps = 0;

  double loss_query_ns_mean() const { return steps ? double(loss_query_ns_total) / steps : 0.0; }
  double network_ns_mean() const { return steps ? double(network_ns_total) / steps : 0.0; }
};

struct FlowEstimate {
  FlowField flow;
  int iterations_run = 0;
  double final_loss = 0;  // best observed objective; the returned flow comes from these params
  TimingBreakdown timing;
  std::vector<double> loss_history;  // objective per iteration, before that iteration's update
};

// Fits the configured model so that source + flow lands on the target, by
// Adam over the configured loss; returns the flow of the best-loss iterate.
// Deterministic for a fixed (pair, cfg) and thread count.
FlowEstimate solve(const ScenePair& pair, const SolveConfig& cfg);

FlowEstimate solve(const PointCloud& source, const PointCloud& target, const SolveConfig& cfg);

// Euler accumulation: solves flow for each consecutive pair up to
// target_frame, advances every earlier frame through the chain of fitted
// models (each evaluated at the points' current positions), and returns the
// union of the advanced clouds with the target frame.
PointCloud accumulate(const std::vector<PointCloud>& frames, const SolveConfig& cfg,
                      int target_frame);

}  // namespace fnsf
