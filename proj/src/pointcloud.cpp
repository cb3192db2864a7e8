#include "fnsf/pointcloud.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

namespace fnsf {

namespace {

constexpr char kMagic[4] = {'F', 'N', 'S', 'F'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "file I/O assumes a little-endian host");

float parse_float(const char*& p, const char* end, const char* path, std::int64_t line) {
  float v = 0;
  auto [next, ec] = std::from_chars(p, end, v);
  if (ec != std::errc()) {
    throw IoError(std::string(path) + ": line " + std::to_string(line) + ": malformed number");
  }
  p = next;
  return v;
}

PointCloud parse_text(const std::string& data, const char* path) {
  PointCloud cloud;
  const char* p = data.data();
  const char* end = p + data.size();
  std::int64_t line = 1;
  while (p < end) {
    const char* eol = static_cast<const char*>(std::memchr(p, '\n', std::size_t(end - p)));
    const char* stop = eol ? eol : end;
    Vec3 pt;
    const char* q = p;
    for (int c = 0; c < 3; ++c) {
      if (c > 0) {
        if (q >= stop || *q != ' ')
          throw IoError(std::string(path) + ": line " + std::to_string(line) + ": expected 3 fields");
        ++q;
      }
      pt[c] = parse_float(q, stop, path, line);
    }
    if (q != stop)
      throw IoError(std::string(path) + ": line " + std::to_string(line) + ": trailing characters");
    if (!finite3(pt))
      throw IoError(std::string(path) + ": line " + std::to_string(line) + ": non-finite value");
    cloud.points.push_back(pt);
    if (!eol) break;
    p = eol + 1;
    ++line;
  }
  return cloud;
}

PointCloud parse_binary(const std::string& data, const char* path) {
  constexpr std::size_t header = 4 + 4 + 8;
  if (data.size() < header) throw IoError(std::string(path) + ": truncated header");
  if (std::memcmp(data.data(), kMagic, 4) != 0)
    throw IoError(std::string(path) + ": bad magic");
  std::uint32_t version;
  std::memcpy(&version, data.data() + 4, 4);
  if (version != kVersion)
    throw IoError(std::string(path) + ": unsupported version " + std::to_string(version));
  std::uint64_t count;
  std::memcpy(&count, data.data() + 8, 8);
  if (count > (std::numeric_limits<std::uint64_t>::max() - header) / 12u)
    throw IoError(std::string(path) + ": implausible record count");
  std::uint64_t need = header + count * 12u;
  if (data.size() != need)
    throw IoError(std::string(path) + ": size mismatch: expected " + std::to_string(need) +
                  " bytes, got " + std::to_string(data.size()));
  PointCloud cloud;
  cloud.points.resize(count);
  if (count) std::memcpy(cloud.points.data(), data.data() + header, count * 12u);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (!finite3(cloud.points[i]))
      throw IoError(std::string(path) + ": record " + std::to_string(i + 1) + ": non-finite value");
  }
  return cloud;
}

void format_float(std::string& out, float v) {
  char buf[48];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  out.append(buf, p);
}

}  // namespace

PointCloud load_cloud(const std::filesystem::path& path) {
  std::string data = read_file(path);
  if (data.size() >= 4 && std::memcmp(data.data(), kMagic, 4) == 0)
    return parse_binary(data, path.string().c_str());
  return parse_text(data, path.string().c_str());
}

void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat fmt) {
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (!finite3(cloud.points[i]))
      throw std::invalid_argument("save_cloud: non-finite point at row " + std::to_string(i + 1));
  }
  std::string data;
  if (fmt == CloudFormat::xyz_text) {
    data.reserve(cloud.points.size() * 24);
    for (const Vec3& p : cloud.points) {
      format_float(data, p[0]);
      data.push_back(' ');
      format_float(data, p[1]);
      data.push_back(' ');
      format_float(data, p[2]);
      data.push_back('\n');
    }
  } else {
    std::uint64_t count = cloud.points.size();
    data.resize(16 + count * 12u);
    std::memcpy(data.data(), kMagic, 4);
    std::memcpy(data.data() + 4, &kVersion, 4);
    std::memcpy(data.data() + 8, &count, 8);
    if (count) std::memcpy(data.data() + 16, cloud.points.data(), count * 12u);
  }
  write_file(path, data);
}

FlowField load_flow(const std::filesystem::path& path) {
  PointCloud c = load_cloud(path);
  return FlowField{std::move(c.points)};
}

void save_flow(const std::filesystem::path& path, const FlowField& flow, CloudFormat fmt) {
  save_cloud(path, PointCloud{flow.v}, fmt);
}

Aabb bounds(const PointCloud& cloud, double pad) {
  if (cloud.empty()) throw std::invalid_argument("bounds: empty cloud");
  Vec3d lo{double(cloud.points[0][0]), double(cloud.points[0][1]), double(cloud.points[0][2])};
  Vec3d hi = lo;
  for (const Vec3& p : cloud.points) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], double(p[a]));
      hi[a] = std::max(hi[a], double(p[a]));
    }
  }
  return Aabb{lo, hi}.inflated(pad);
}

Subsample subsample(const PointCloud& cloud, std::int64_t n, std::uint64_t seed) {
  std::int64_t sz = cloud.size();
  if (n <= 0) throw std::invalid_argument("subsample: count must be positive");
  Subsample out;
  if (n >= sz) {
    out.cloud = cloud;
    out.indices.resize(std::size_t(sz));
    std::iota(out.indices.begin(), out.indices.end(), std::int64_t(0));
    return out;
  }
  // partial Fisher-Yates over an index array, then ascending order
  std::vector<std::int64_t> idx(static_cast<std::size_t>(sz));
  std::iota(idx.begin(), idx.end(), std::int64_t(0));
  Rng rng(seed);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = i + std::int64_t(rng.bounded(std::uint64_t(sz - i)));
    std::swap(idx[std::size_t(i)], idx[std::size_t(j)]);
  }
  idx.resize(std::size_t(n));
  std::sort(idx.begin(), idx.end());
  out.indices = std::move(idx);
  out.cloud.points.reserve(std::size_t(n));
  for (std::int64_t i : out.indices) out.cloud.points.push_back(cloud.points[std::size_t(i)]);
  return out;
}

Mat3 axis_angle_matrix(const Vec3d& axis, double angle_rad) {
  double n = norm(axis);
  if (n < 1e-12) throw std::invalid_argument("axis_angle_matrix: zero axis");
  double ux = axis[0] / n, uy = axis[1] / n, uz = axis[2] / n;
  double c = std::cos(angle_rad), s = std::sin(angle_rad), k = 1.0 - c;
  return Mat3{c + ux * ux * k,      ux * uy * k - uz * s, ux * uz * k + uy * s,
              uy * ux * k + uz * s, c + uy * uy * k,      uy * uz * k - ux * s,
              uz * ux * k - uy * s, uz * uy * k + ux * s, c + uz * uz * k};
}

Vec3d apply_mat3(const Mat3& m, const Vec3d& p) {
  return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2],
          m[3] * p[0] + m[4] * p[1] + m[5] * p[2],
          m[6] * p[0] + m[7] * p[1] + m[8] * p[2]};
}

namespace {

Vec3d sample_box(Rng& rng, const Aabb& box) {
  return {rng.uniform(box.lo[0], box.hi[0]),
          rng.uniform(box.lo[1], box.hi[1]),
          rng.uniform(box.lo[2], box.hi[2])};
}

// rectangle o + s*u + t*v with s,t in [0,1); cum is the running area sum
// so a uniform draw over the total picks panels area-proportionally
struct Panel {
  Vec3d origin, u, v;
  double cum;
};

void push_panel(std::vector<Panel>& out, const Vec3d& o, const Vec3d& u, const Vec3d& v) {
  double area = norm(u) * norm(v);
  if (area <= 0) return;
  out.push_back({o, u, v, (out.empty() ? 0.0 : out.back().cum) + area});
}

// four side walls plus the top; the underside is left open so scenes read
// as scans with the ground returns already removed
void push_shell(std::vector<Panel>& out, const Aabb& b) {
  const Vec3d e = b.hi - b.lo;
  push_panel(out, b.lo, {0, e[1], 0}, {0, 0, e[2]});
  push_panel(out, {b.hi[0], b.lo[1], b.lo[2]}, {0, e[1], 0}, {0, 0, e[2]});
  push_panel(out, b.lo, {e[0], 0, 0}, {0, 0, e[2]});
  push_panel(out, {b.lo[0], b.hi[1], b.lo[2]}, {e[0], 0, 0}, {0, 0, e[2]});
  push_panel(out, {b.lo[0], b.lo[1], b.hi[2]}, {e[0], 0, 0}, {0, e[1], 0});
}

// a box with no usable face degenerates to its own (near-)pointlike volume
Vec3d sample_panels(Rng& rng, const std::vector<Panel>& panels, const Aabb& fallback) {
  if (panels.empty()) return sample_box(rng, fallback);
  const double pick = rng.uniform(0.0, panels.back().cum);
  auto it = std::upper_bound(panels.begin(), panels.end(), pick,
                             [](double x, const Panel& p) { return x < p.cum; });
  const Panel& p = panels[std::min(std::size_t(it - panels.begin()), panels.size() - 1)];
  const double s = rng.uniform(0.0, 1.0), t = rng.uniform(0.0, 1.0);
  return p.origin + s * p.u + t * p.v;
}

void check_box(const Aabb& box, const char* what) {
  for (int a = 0; a < 3; ++a) {
    if (!(box.lo[a] <= box.hi[a]) || !std::isfinite(box.lo[a]) || !std::isfinite(box.hi[a]))
      throw std::invalid_argument(std::string("synth_scene: invalid ") + what + " box");
  }
}

}  // namespace

ScenePair synth_scene(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.background_points < 0) throw std::invalid_argument("synth_scene: negative background count");
  if (cfg.noise_sigma < 0) throw std::invalid_argument("synth_scene: negative noise sigma");
  if (cfg.target_scale <= 0) throw std::invalid_argument("synth_scene: target_scale must be positive");
  check_box(cfg.background_box, "background");
  if (!finite3(cfg.ego)) throw std::invalid_argument("synth_scene: non-finite ego motion");
  std::int64_t total = cfg.background_points;
  for (const MoverSpec& m : cfg.movers) {
    if (m.points < 0) throw std::invalid_argument("synth_scene: negative mover count");
    check_box(m.box, "mover");
    if (!finite3(m.translation) || !finite3(m.axis) || !std::isfinite(m.angle_rad))
      throw std::invalid_argument("synth_scene: non-finite mover motion");
    total += m.points;
  }
  if (total == 0) throw std::invalid_argument("synth_scene: configuration generates no points");

  ScenePair out;
  out.descriptor.config = cfg;
  out.descriptor.seed = seed;
  Rng rng(seed);
  const bool noisy = cfg.noise_sigma > 0;
  auto jitter = [&](Vec3d p) -> Vec3d {
    if (!noisy) return p;
    return {p[0] + rng.normal(0, cfg.noise_sigma),
            p[1] + rng.normal(0, cfg.noise_sigma),
            p[2] + rng.normal(0, cfg.noise_sigma)};
  };

  // static structure: the scene's walls and roof plus seeded interior
  // facade panels; both scans resample these same rectangles, and movers
  // resample their own shells, so surfaces coincide under the true motion
  std::vector<Aabb> keep_out;
  for (const MoverSpec& m : cfg.movers) {
    // swept volume plus a guard band: nothing static may sit closer to a
    // mover than its own displaced shell, or the loss matches the wrong
    // surface
    const double arm = 0.5 * norm(m.box.hi - m.box.lo);
    const double r = 0.35 * norm(m.translation) + 0.25 + 0.5 * std::abs(m.angle_rad) * arm;
    Aabb sw = m.box;
    for (int a = 0; a < 3; ++a) {
      sw.lo[a] = std::min(sw.lo[a], m.box.lo[a] + m.translation[a]) - r;
      sw.hi[a] = std::max(sw.hi[a], m.box.hi[a] + m.translation[a]) + r;
    }
    keep_out.push_back(sw);
  }
  auto clear_of_movers = [&](const Aabb& box) {
    for (const Aabb& ko : keep_out) {
      bool separated = false;
      for (int a = 0; a < 3; ++a)
        if (box.lo[a] > ko.hi[a] || box.hi[a] < ko.lo[a]) separated = true;
      if (!separated) return false;
    }
    return true;
  };
  std::vector<Panel> bg_panels;
  push_shell(bg_panels, cfg.background_box);
  {
    const Aabb& bg = cfg.background_box;
    const Vec3d e = bg.hi - bg.lo;
    if (e[2] > 0 && e[0] > 0 && e[1] > 0) {
      const int k = int(std::clamp(e[0] * e[1] / 40.0, 2.0, 24.0));
      for (int i = 0; i < k; ++i) {
        const double w = rng.uniform(0.2, 0.5) * std::min(e[0], e[1]);
        const double h = rng.uniform(0.6, 1.0) * e[2];
        const double th = rng.uniform(0.0, std::numbers::pi);
        const Vec3d dir{std::cos(th), std::sin(th), 0};
        const double hx = 0.5 * w * std::abs(dir[0]), hy = 0.5 * w * std::abs(dir[1]);
        if (2 * hx >= e[0] || 2 * hy >= e[1]) continue;
        for (int attempt = 0; attempt < 8; ++attempt) {
          const Vec3d c{rng.uniform(bg.lo[0] + hx, bg.hi[0] - hx),
                        rng.uniform(bg.lo[1] + hy, bg.hi[1] - hy), bg.lo[2]};
          const Aabb pa{{c[0] - hx, c[1] - hy, bg.lo[2]}, {c[0] + hx, c[1] + hy, bg.lo[2] + h}};
          if (!clear_of_movers(pa)) continue;
          push_panel(bg_panels, c - (0.5 * w) * dir, w * dir, {0, 0, h});
          break;
        }
      }
    }
  }
  std::vector<std::vector<Panel>> mover_panels(cfg.movers.size());
  for (std::size_t mi = 0; mi < cfg.movers.size(); ++mi)
    push_shell(mover_panels[mi], cfg.movers[mi].box);

  // effective per-body motion p -> R*p + t in the later sensor frame
  std::vector<BodyMotion> bodies;
  bodies.push_back(BodyMotion{Mat3{1, 0, 0, 0, 1, 0, 0, 0, 1},
                              {-cfg.ego[0], -cfg.ego[1], -cfg.ego[2]},
                              0,
                              cfg.background_points});
  for (const MoverSpec& m : cfg.movers) {
    Mat3 r = m.angle_rad == 0 ? Mat3{1, 0, 0, 0, 1, 0, 0, 0, 1} : axis_angle_matrix(m.axis, m.angle_rad);
    Vec3d c = 0.5 * (m.box.lo + m.box.hi);
    Vec3d t = c - apply_mat3(r, c) + m.translation - cfg.ego;
    std::int64_t begin = bodies.back().end;
    bodies.push_back(BodyMotion{r, t, begin, begin + m.points});
  }

  // source scan
  out.source.points.reserve(std::size_t(total));
  for (int i = 0; i < cfg.background_points; ++i)
    out.source.points.push_back(narrow(jitter(sample_panels(rng, bg_panels, cfg.background_box))));
  for (std::size_t mi = 0; mi < cfg.movers.size(); ++mi)
    for (int i = 0; i < cfg.movers[mi].points; ++i)
      out.source.points.push_back(
          narrow(jitter(sample_panels(rng, mover_panels[mi], cfg.movers[mi].box))));

  // target: fresh draws pushed through each body motion
  auto tcount = [&](int n) { return int(std::llround(cfg.target_scale * n)); };
  for (int i = 0, n = tcount(cfg.background_points); i < n; ++i)
    out.target.points.push_back(
        narrow(jitter(sample_panels(rng, bg_panels, cfg.background_box) - cfg.ego)));
  for (std::size_t mi = 0; mi < cfg.movers.size(); ++mi) {
    const MoverSpec& m = cfg.movers[mi];
    const BodyMotion& body = bodies[mi + 1];
    for (int i = 0, n = tcount(m.points); i < n; ++i) {
      Vec3d p = sample_panels(rng, mover_panels[mi], m.box);
      out.target.points.push_back(narrow(jitter(apply_mat3(body.rot, p) + body.trans)));
    }
  }
  if (out.target.points.empty())
    throw std::invalid_argument("synth_scene: target_scale rounds every body to zero points");

  // ground truth from the stored (quantized) source positions
  FlowField gt;
  gt.v.reserve(out.source.points.size());
  for (const BodyMotion& body : bodies) {
    for (std::int64_t i = body.begin; i < body.end; ++i) {
      Vec3d p = widen(out.source.points[std::size_t(i)]);
      gt.v.push_back(narrow(apply_mat3(body.rot, p) + body.trans - p));
    }
  }
  out.gt_flow = std::move(gt);
  out.descriptor.bodies = std::move(bodies);
  return out;
}

SynthConfig random_scene_config(int background_points, int k_movers, std::uint64_t seed,
                                double max_translation) {
  if (k_movers < 0) throw std::invalid_argument("random_scene_config: negative mover count");
  max_translation = std::min(max_translation, 3.0);
  SynthConfig cfg;
  cfg.background_points = background_points;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);

  // size the room so background surface density stays near 120 points/m^2;
  // resampling scatter scales as 1/sqrt(density) and must sit well under
  // the 0.05 m accuracy band
  const double target_area = std::max(double(background_points), 400.0) / 120.0;
  auto scene_area = [](double L) {
    const double H = std::clamp(0.6 * L, 1.6, 3.2);
    const double k = std::clamp(L * L / 40.0, 2.0, 24.0);
    return 4 * L * H + L * L + k * (0.35 * L) * (0.8 * H);
  };
  double lo = 1.0, hi = 80.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (scene_area(mid) < target_area ? lo : hi) = mid;
  }
  const double L = 0.5 * (lo + hi);
  const double H = std::clamp(0.6 * L, 1.6, 3.2);
  cfg.background_box = Aabb{{0, 0, 0}, {L, L, H}};

  std::vector<Aabb> swept;
  for (int k = 0; k < k_movers; ++k) {
    MoverSpec m;
    Vec3d half{rng.uniform(0.10, 0.18) * L, rng.uniform(0.10, 0.18) * L,
               rng.uniform(0.18, 0.30) * H};
    m.axis = rng.unit_vector();
    m.angle_rad = rng.uniform(0.0, 15.0 * std::numbers::pi / 180.0);
    const double cap = std::max(0.26, std::min(max_translation, 0.18 * L));
    const double mag = rng.uniform(0.25, cap);
    Vec3d dir = rng.unit_vector();
    dir[2] *= 0.2;  // mostly planar motion
    m.translation = (mag / norm(dir)) * dir;

    // each mover's displaced shell must stay its own nearest surface, so
    // walls and other movers are kept outside half the motion radius; a
    // draw that cannot fit falls back to the room center and the last
    // collision-free try wins, so generation never fails
    const double clear_r = 0.5 * mag + 0.15;
    auto place = [&](int axis) {
      const double lo_a = half[axis] + 0.05 * L + clear_r + std::max(0.0, -m.translation[axis]);
      const double hi_a =
          L - half[axis] - 0.05 * L - clear_r - std::max(0.0, m.translation[axis]);
      return lo_a < hi_a ? rng.uniform(lo_a, hi_a) : 0.5 * L;
    };
    Aabb sw{};
    for (int attempt = 0; attempt < 16; ++attempt) {
      Vec3d c{place(0), place(1), 0};
      c[2] = rng.uniform(half[2], std::max(half[2] + 1e-9, 0.45 * H));
      m.box = Aabb{c - half, c + half};
      sw = m.box;
      for (int a = 0; a < 3; ++a) {
        sw.lo[a] = std::min(sw.lo[a], m.box.lo[a] + m.translation[a]) - 0.15;
        sw.hi[a] = std::max(sw.hi[a], m.box.hi[a] + m.translation[a]) + 0.15;
      }
      bool clear = true;
      for (const Aabb& prev : swept) {
        bool separated = false;
        for (int a = 0; a < 3; ++a)
          if (sw.lo[a] > prev.hi[a] || sw.hi[a] < prev.lo[a]) separated = true;
        if (!separated) {
          clear = false;
          break;
        }
      }
      if (clear) break;
    }
    swept.push_back(sw);
    m.points = std::max(150, int(rng.uniform(0.08, 0.20) * double(background_points)));
    cfg.movers.push_back(m);
  }
  return cfg;
}

}  // namespace fnsf
