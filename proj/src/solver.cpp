#include "fnsf/solver.hpp"

#include <cmath>
#include <limits>
#include <optional>

namespace fnsf {

namespace {

void validate_config(const SolveConfig& cfg) {
  if (!(cfg.lr > 0) || !std::isfinite(cfg.lr))
    throw std::invalid_argument("solve: lr must be positive");
  if (cfg.max_iters < 1) throw std::invalid_argument("solve: max_iters must be >= 1");
  if (cfg.patience < 1) throw std::invalid_argument("solve: patience must be >= 1");
  if (!(cfg.min_delta >= 0) || !std::isfinite(cfg.min_delta))
    throw std::invalid_argument("solve: min_delta must be >= 0");
}

std::vector<float> flatten(const PointCloud& cloud) {
  std::vector<float> out(cloud.points.size() * 3);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    out[3 * i + 0] = cloud.points[i][0];
    out[3 * i + 1] = cloud.points[i][1];
    out[3 * i + 2] = cloud.points[i][2];
  }
  return out;
}

// One fitted model. Parameters live in a single flat span so the optimizer
// does not care which family it is driving.
struct ModelState {
  ModelKind kind = ModelKind::mlp;
  double lambda_tv = 0;

  MlpParams<float> mlp;
  MlpTape<float> mtape;

  LinearParams<float> lin;
  PreparedEncoder<float> enc;
  LinearTape<float> ltape;

  std::span<float> params() {
    return kind == ModelKind::mlp ? std::span<float>(mlp.data) : std::span<float>(lin.w);
  }

  void forward(const float* pts, std::int64_t n, float* flow, bool keep_tape) {
    if (kind == ModelKind::mlp) {
      mlp_forward<float>(mlp, pts, n, flow, keep_tape ? &mtape : nullptr);
    } else {
      linear_flow<float>(lin, enc, pts, n, flow, keep_tape ? &ltape : nullptr);
    }
  }

  // Gradient of (loss + (lambda/2) TV) wrt the flat parameters; tv_half_value
  // receives (lambda/2) * TV for the objective.
  std::vector<float> backward(const float* dflow, double* tv_half_value) {
    if (kind == ModelKind::mlp) {
      *tv_half_value = 0;
      return std::move(mlp_backward<float>(mlp, mtape, dflow).data);
    }
    LinearParams<float> g = linear_backward<float>(lin, enc, ltape, dflow);
    if (lambda_tv > 0) {
      TvResult<float> tv = tv_reg<float>(lin);
      const float s = float(lambda_tv / 2);
      for (std::size_t i = 0; i < g.w.size(); ++i) g.w[i] += s * tv.grad.w[i];
      *tv_half_value = lambda_tv / 2 * tv.value;
    } else {
      *tv_half_value = 0;
    }
    return std::move(g.w);
  }
};

struct LossState {
  LossKind kind = LossKind::dt;
  std::optional<ChamferLoss<float>> chamfer;
  std::optional<DtMap> map;
  DtLossOpts dt_opts;

  LossReport<float> eval(const float* q, std::int64_t n) const {
    if (kind == LossKind::chamfer) return chamfer->eval(q, n);
    return dt_loss<float>(*map, q, n, true, dt_opts);
  }
};

struct SolveRun {
  ModelState model;
  FlowEstimate est;
};

SolveRun run_solve(const PointCloud& source, const PointCloud& target, const SolveConfig& cfg) {
  validate_config(cfg);
  if (source.empty()) throw std::invalid_argument("solve: empty source cloud");
  if (target.empty()) throw std::invalid_argument("solve: empty target cloud");
  const std::int64_t t_start = now_ns();
  const std::int64_t n = std::int64_t(source.size());
  std::vector<float> src = flatten(source);

  SolveRun run;
  FlowEstimate& est = run.est;
  ModelState& model = run.model;

  // pre-compute: loss structures over the fixed target, plus the encoder
  const std::int64_t t_pre = now_ns();
  LossState loss;
  loss.kind = cfg.loss;
  if (cfg.loss == LossKind::chamfer) {
    ChamferOpts opts;
    opts.trunc = cfg.chamfer.trunc;
    opts.direction = cfg.chamfer.direction;
    opts.engine = cfg.chamfer.engine;
    loss.chamfer.emplace(target, opts);
  } else {
    GridSpec grid = make_grid(source, target, cfg.dt.cell, cfg.dt.margin, cfg.dt.budget_bytes);
    OccupancyGrid occ = rasterize(target, grid);
    loss.map = build_dt(occ);
    loss.dt_opts.squared = cfg.dt.squared;
  }
  model.kind = cfg.model;
  if (cfg.model == ModelKind::mlp) {
    model.mlp = mlp_init<float>(cfg.mlp.width, cfg.mlp.depth, cfg.seed);
  } else {
    Aabb box = bounds(source);
    Aabb tb = bounds(target);
    for (int a = 0; a < 3; ++a) {
      box.lo[std::size_t(a)] = std::min(box.lo[std::size_t(a)], tb.lo[std::size_t(a)]);
      box.hi[std::size_t(a)] = std::max(box.hi[std::size_t(a)], tb.hi[std::size_t(a)]);
    }
    EncoderSpec spec = make_encoder(box.inflated(cfg.linear.edge), cfg.linear.edge, cfg.linear.sigma);
    model.enc = prepare_encoder<float>(spec);
    model.lin = linear_init<float>(spec);
    model.lambda_tv = cfg.linear.lambda_tv;
  }
  est.timing.pre_compute_ns = now_ns() - t_pre;

  AdamState<float> adam = adam_init<float>(std::int64_t(model.params().size()),
                                           AdamConfig<float>{float(cfg.lr), 0.9f, 0.999f, 1e-8f});

  std::vector<float> flow(std::size_t(n) * 3), q(std::size_t(n) * 3);
  std::vector<float> best_params(model.params().begin(), model.params().end());
  double best = std::numeric_limits<double>::infinity();
  int stall = 0;

  for (int it = 1; it <= cfg.max_iters; ++it) {
    est.iterations_run = it;
    double tv_half = 0;
    std::int64_t t0 = now_ns();
    try {
      model.forward(src.data(), n, flow.data(), true);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (iteration " + std::to_string(it) + ")");
    }
    for (std::int64_t i = 0; i < 3 * n; ++i) q[std::size_t(i)] = src[std::size_t(i)] + flow[std::size_t(i)];
    est.timing.network_ns_total += now_ns() - t0;

    LossReport<float> rep = loss.eval(q.data(), n);
    est.timing.loss_query_ns_total += rep.eval_ns;

    t0 = now_ns();
    std::vector<float> grads = model.backward(rep.dpoint.data(), &tv_half);
    const double objective = rep.value + tv_half;
    if (!std::isfinite(objective))
      throw NumericError("solve: non-finite loss at iteration " + std::to_string(it));
    est.loss_history.push_back(objective);

    const bool improved =
        !std::isfinite(best) || objective < best - cfg.min_delta * std::abs(best);
    if (objective < best) {
      best = objective;
      std::copy(model.params().begin(), model.params().end(), best_params.begin());
    }
    stall = improved ? 0 : stall + 1;
    ++est.timing.steps;
    if (stall >= cfg.patience) {
      est.timing.network_ns_total += now_ns() - t0;
      break;
    }

    adam_step<float>(adam, model.params(), grads);
    est.timing.network_ns_total += now_ns() - t0;
  }

  std::copy(best_params.begin(), best_params.end(), model.params().begin());
  model.forward(src.data(), n, flow.data(), false);
  est.flow.v.resize(std::size_t(n));
  for (std::int64_t i = 0; i < n; ++i)
    est.flow.v[std::size_t(i)] =
        Vec3{flow[std::size_t(3 * i)], flow[std::size_t(3 * i + 1)], flow[std::size_t(3 * i + 2)]};
  est.final_loss = best;
  est.timing.total_ns = now_ns() - t_start;
  return run;
}

}  // namespace

FlowEstimate solve(const PointCloud& source, const PointCloud& target, const SolveConfig& cfg) {
  return run_solve(source, target, cfg).est;
}

FlowEstimate solve(const ScenePair& pair, const SolveConfig& cfg) {
  return solve(pair.source, pair.target, cfg);
}

PointCloud accumulate(const std::vector<PointCloud>& frames, const SolveConfig& cfg,
                      int target_frame) {
  if (frames.size() < 2) throw std::invalid_argument("accumulate: need at least 2 frames");
  if (target_frame < 1 || target_frame >= int(frames.size()))
    throw std::invalid_argument("accumulate: target_frame out of range");
  for (const PointCloud& f : frames) {
    if (f.empty()) throw std::invalid_argument("accumulate: empty frame");
  }
  // fit one model per consecutive pair up to the target
  std::vector<ModelState> models;
  models.reserve(std::size_t(target_frame));
  for (int i = 0; i < target_frame; ++i)
    models.push_back(std::move(run_solve(frames[std::size_t(i)], frames[std::size_t(i) + 1], cfg).model));

  PointCloud out;
  for (int j = 0; j < target_frame; ++j) {
    std::vector<float> pts = flatten(frames[std::size_t(j)]);
    const std::int64_t n = std::int64_t(frames[std::size_t(j)].size());
    std::vector<float> flow(pts.size());
    // the fitted field is continuous, so each hop evaluates the next model at
    // the points' current positions
    for (int k = j; k < target_frame; ++k) {
      models[std::size_t(k)].forward(pts.data(), n, flow.data(), false);
      for (std::size_t i = 0; i < pts.size(); ++i) pts[i] += flow[i];
    }
    for (std::int64_t i = 0; i < n; ++i)
      out.points.push_back(Vec3{pts[std::size_t(3 * i)], pts[std::size_t(3 * i + 1)],
                                pts[std::size_t(3 * i + 2)]});
  }
  out.points.insert(out.points.end(), frames[std::size_t(target_frame)].points.begin(),
                    frames[std::size_t(target_frame)].points.end());
  return out;
}

}  // namespace fnsf
