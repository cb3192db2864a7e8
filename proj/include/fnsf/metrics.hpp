#pragma once

#include <cstdint>

#include "fnsf/pointcloud.hpp"

namespace fnsf {

struct MetricReport {
  double epe_m = 0;
  double acc5_pct = 0;
  double acc10_pct = 0;
  double angle_err_rad = 0;
  std::int64_t count = 0;
};

// Mean Euclidean norm of the per-point flow error, meters.
double epe(const FlowField& est, const FlowField& gt);

// Percent of points whose error beats 0.05 m absolute or 5% relative.
double acc_strict(const FlowField& est, const FlowField& gt);

// As acc_strict with 0.1 m / 10% thresholds.
double acc_relaxed(const FlowField& est, const FlowField& gt);

// Mean angle between the estimated and true flow vectors, radians; a point
// where either vector is near zero contributes 0.
double angle_error(const FlowField& est, const FlowField& gt);

MetricReport evaluate_flow(const FlowField& est, const FlowField& gt);

// Column order shared by every CSV the tools emit.
inline constexpr const char* kCsvHeader =
    "scene_id,method,epe_m,acc5,acc10,angle_rad,pre_ms,query_ms_total,network_ms_total,total_ms";

}  // namespace fnsf
