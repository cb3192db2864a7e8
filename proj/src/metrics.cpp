#include "fnsf/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace fnsf {

namespace {

void check_pair(const FlowField& est, const FlowField& gt) {
  if (est.size() != gt.size()) throw std::invalid_argument("metrics: flow length mismatch");
  if (est.empty()) throw std::invalid_argument("metrics: empty flow");
}

double acc_at(const FlowField& est, const FlowField& gt, double abs_thr, double rel_thr) {
  check_pair(est, gt);
  const std::size_t n = est.v.size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3d e = widen(est.v[i]) - widen(gt.v[i]);
    const double err = norm(e);
    const double rel = err / std::max(norm(widen(gt.v[i])), 1e-12);
    if (err < abs_thr || rel < rel_thr) ++hits;
  }
  return 100.0 * double(hits) / double(n);
}

}  // namespace

double epe(const FlowField& est, const FlowField& gt) {
  check_pair(est, gt);
  double total = 0;
  for (std::size_t i = 0; i < est.v.size(); ++i)
    total += norm(widen(est.v[i]) - widen(gt.v[i]));
  return total / double(est.v.size());
}

double acc_strict(const FlowField& est, const FlowField& gt) { return acc_at(est, gt, 0.05, 0.05); }

double acc_relaxed(const FlowField& est, const FlowField& gt) { return acc_at(est, gt, 0.1, 0.1); }

double angle_error(const FlowField& est, const FlowField& gt) {
  check_pair(est, gt);
  double total = 0;
  for (std::size_t i = 0; i < est.v.size(); ++i) {
    const Vec3d a = widen(est.v[i]);
    const Vec3d b = widen(gt.v[i]);
    const double na = norm(a), nb = norm(b);
    if (na < 1e-9 || nb < 1e-9) continue;  // contributes 0
    // atan2 of the half-angle legs stays exact at 0 and pi, where the
    // acos-of-cosine form loses the last bits
    const Vec3d diff = nb * a - na * b;
    const Vec3d sum = nb * a + na * b;
    total += 2.0 * std::atan2(norm(diff), norm(sum));
  }
  return total / double(est.v.size());
}

MetricReport evaluate_flow(const FlowField& est, const FlowField& gt) {
  MetricReport r;
  r.epe_m = epe(est, gt);
  r.acc5_pct = acc_strict(est, gt);
  r.acc10_pct = acc_relaxed(est, gt);
  r.angle_err_rad = angle_error(est, gt);
  r.count = std::int64_t(est.size());
  return r;
}

}  // namespace fnsf
