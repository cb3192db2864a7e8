#include "fnsf/dt.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace fnsf {

namespace {

constexpr int kMaxAxisCells = 8192;

void union_bounds(const PointCloud& a, const PointCloud& b, Vec3d& lo, Vec3d& hi) {
  Aabb ba = bounds(a);
  Aabb bb = bounds(b);
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::min(ba.lo[i], bb.lo[i]);
    hi[i] = std::max(ba.hi[i], bb.hi[i]);
  }
}

}  // namespace

GridSpec make_grid(const PointCloud& source, const PointCloud& target, double cell, double margin,
                   std::int64_t budget_bytes) {
  if (!(cell > 0) || !std::isfinite(cell)) throw std::invalid_argument("make_grid: cell must be positive");
  if (margin < 0 || !std::isfinite(margin)) throw std::invalid_argument("make_grid: margin must be >= 0");
  Vec3d lo, hi;
  union_bounds(source, target, lo, hi);
  GridSpec spec;
  spec.cell = cell;
  for (int a = 0; a < 3; ++a) {
    lo[a] -= margin;
    hi[a] += margin;
    double extent = hi[a] - lo[a];
    // shave an epsilon so exact multiples of cell do not round up a cell
    int d = std::max(1, int(std::ceil(extent / cell - 1e-9)));
    while (lo[a] + d * cell < hi[a]) ++d;
    if (d > kMaxAxisCells)
      throw BudgetError("make_grid: axis " + std::to_string(a) + " needs " + std::to_string(d) +
                        " cells, cap is " + std::to_string(kMaxAxisCells));
    spec.origin[a] = lo[a];
    spec.dims[a] = d;
  }
  std::int64_t n = spec.ncells();
  if (n >= std::int64_t(std::numeric_limits<std::int32_t>::max()))
    throw BudgetError("make_grid: " + std::to_string(n) + " cells exceeds the 2^31-1 cell cap");
  std::int64_t required = n * std::int64_t(1 + 4 + 4);  // occupancy + build scratch + map
  if (required > budget_bytes)
    throw BudgetError("make_grid: distance map needs " + std::to_string(required) +
                      " bytes, budget is " + std::to_string(budget_bytes));
  return spec;
}

OccupancyGrid rasterize(const PointCloud& target, const GridSpec& spec) {
  if (target.empty()) throw std::invalid_argument("rasterize: empty cloud");
  if (spec.ncells() <= 0 || !(spec.cell > 0)) throw std::invalid_argument("rasterize: invalid grid");
  OccupancyGrid g;
  g.spec = spec;
  g.occ.assign(std::size_t(spec.ncells()), 0);
  const double inv = 1.0 / spec.cell;
  for (std::size_t pi = 0; pi < target.points.size(); ++pi) {
    const Vec3& p = target.points[pi];
    int c[3];
    for (int a = 0; a < 3; ++a) {
      double rel = (double(p[a]) - spec.origin[a]) * inv;
      int i = int(std::floor(rel));
      // the top boundary closes into the last cell
      if (i == spec.dims[a] && rel <= spec.dims[a] + 1e-9) i = spec.dims[a] - 1;
      if (i < 0 || i >= spec.dims[a])
        throw std::invalid_argument("rasterize: point " + std::to_string(pi + 1) + " at (" +
                                    std::to_string(p[0]) + ", " + std::to_string(p[1]) + ", " +
                                    std::to_string(p[2]) + ") outside the grid volume");
      c[a] = i;
    }
    g.occ[std::size_t(spec.index(c[0], c[1], c[2]))] = 1;
  }
  return g;
}

void edt1d(std::span<const std::int32_t> f, std::span<std::int32_t> out) {
  const std::int64_t n = std::int64_t(f.size());
  if (n == 0 || out.size() != f.size()) throw std::invalid_argument("edt1d: bad span sizes");
  // lower envelope of the parabolas j -> f[j] + (i-j)^2 over finite f[j]
  std::vector<std::int32_t> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  std::int64_t k = -1;
  for (std::int32_t j = 0; j < n; ++j) {
    if (f[std::size_t(j)] >= kEdtInf) continue;
    double fj = double(f[std::size_t(j)]) + double(j) * j;
    double s = 0;
    while (k >= 0) {
      std::int32_t q = v[std::size_t(k)];
      double fq = double(f[std::size_t(q)]) + double(q) * q;
      s = (fj - fq) / (2.0 * (j - q));
      if (s <= z[std::size_t(k)])
        --k;
      else
        break;
    }
    if (k < 0) {
      k = 0;
      v[0] = j;
      z[0] = -std::numeric_limits<double>::infinity();
    } else {
      ++k;
      v[std::size_t(k)] = j;
      z[std::size_t(k)] = s;
    }
    z[std::size_t(k) + 1] = std::numeric_limits<double>::infinity();
  }
  if (k < 0) {
    for (std::int64_t i = 0; i < n; ++i) out[std::size_t(i)] = kEdtInf;
    return;
  }
  std::int64_t kk = 0;
  for (std::int32_t i = 0; i < n; ++i) {
    while (z[std::size_t(kk) + 1] < double(i)) ++kk;
    std::int32_t d = i - v[std::size_t(kk)];
    out[std::size_t(i)] = f[std::size_t(v[std::size_t(kk)])] + d * d;
  }
}

std::vector<std::int32_t> edt3d_squared(const OccupancyGrid& occ, std::array<int, 3> axis_order) {
  const GridSpec& spec = occ.spec;
  const std::int64_t n = spec.ncells();
  if (n <= 0 || occ.occ.size() != std::size_t(n)) throw std::invalid_argument("edt3d: invalid grid");
  {
    bool any = false;
    for (std::uint8_t o : occ.occ)
      if (o) { any = true; break; }
    if (!any) throw std::invalid_argument("edt3d: empty occupancy");
  }
  std::vector<std::int32_t> sq(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) sq[std::size_t(i)] = occ.occ[std::size_t(i)] ? 0 : kEdtInf;

  const std::int64_t strides[3] = {1, spec.dims[0], std::int64_t(spec.dims[0]) * spec.dims[1]};
  for (int pass = 0; pass < 3; ++pass) {
    int axis = axis_order[std::size_t(pass)];
    if (axis < 0 || axis > 2) throw std::invalid_argument("edt3d: bad axis order");
    const std::int64_t len = spec.dims[std::size_t(axis)];
    const std::int64_t stride = strides[axis];
    const int a1 = axis == 0 ? 1 : 0;
    const int a2 = axis == 2 ? 1 : 2;
    const std::int64_t n1 = spec.dims[std::size_t(a1)];
    const std::int64_t n2 = spec.dims[std::size_t(a2)];
    const std::int64_t s1 = strides[a1];
    const std::int64_t s2 = strides[a2];
    parallel_for(n1 * n2, 64, [&](std::int64_t lb, std::int64_t le) {
      std::vector<std::int32_t> line(static_cast<std::size_t>(len)), res(static_cast<std::size_t>(len));
      for (std::int64_t li = lb; li < le; ++li) {
        std::int64_t base = (li % n1) * s1 + (li / n1) * s2;
        for (std::int64_t i = 0; i < len; ++i) line[std::size_t(i)] = sq[std::size_t(base + i * stride)];
        edt1d(line, res);
        for (std::int64_t i = 0; i < len; ++i) sq[std::size_t(base + i * stride)] = res[std::size_t(i)];
      }
    });
  }
  return sq;
}

DtMap build_dt(const OccupancyGrid& occ) {
  std::vector<std::int32_t> sq = edt3d_squared(occ);
  DtMap map;
  map.spec = occ.spec;
  map.dist.resize(sq.size());
  const double cell = occ.spec.cell;
  parallel_for(std::int64_t(sq.size()), 1 << 16, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i)
      map.dist[std::size_t(i)] = float(cell * std::sqrt(double(sq[std::size_t(i)])));
  });
  return map;
}

DtMap dt_brute_oracle(const OccupancyGrid& occ) {
  const GridSpec& spec = occ.spec;
  const std::int64_t n = spec.ncells();
  std::vector<std::array<std::int32_t, 3>> occupied;
  for (int k = 0; k < spec.dims[2]; ++k)
    for (int j = 0; j < spec.dims[1]; ++j)
      for (int i = 0; i < spec.dims[0]; ++i)
        if (occ.occ[std::size_t(spec.index(i, j, k))]) occupied.push_back({i, j, k});
  if (occupied.empty()) throw std::invalid_argument("dt_brute_oracle: empty occupancy");
  DtMap map;
  map.spec = spec;
  map.dist.resize(std::size_t(n));
  const double cell = spec.cell;
  parallel_for(n, 4096, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t c = b; c < e; ++c) {
      int i = int(c % spec.dims[0]);
      int j = int((c / spec.dims[0]) % spec.dims[1]);
      int k = int(c / (std::int64_t(spec.dims[0]) * spec.dims[1]));
      std::int32_t best = std::numeric_limits<std::int32_t>::max();
      for (const auto& o : occupied) {
        std::int32_t di = i - o[0], dj = j - o[1], dk = k - o[2];
        std::int32_t d = di * di + dj * dj + dk * dk;
        if (d < best) best = d;
      }
      map.dist[std::size_t(c)] = float(cell * std::sqrt(double(best)));
    }
  });
  return map;
}

template <class T>
DtQuery<T> dt_query(const DtMap& map, const V3<T>& p) {
  if (map.dist.empty()) throw std::invalid_argument("dt_query: empty map");
  DtQuery<T> q;
  simd::active<T>().dt_query(map.view(), p.data(), &q.value, q.grad.data(), 1);
  return q;
}

template <class T>
void dt_query_batch(const DtMap& map, const T* pts, T* val, T* grad, std::int64_t n) {
  if (map.dist.empty()) throw std::invalid_argument("dt_query: empty map");
  const auto& k = simd::active<T>();
  simd::DtGridView view = map.view();
  parallel_for(n, 8192, [&](std::int64_t b, std::int64_t e) {
    k.dt_query(view, pts + 3 * b, val + b, grad + 3 * b, int(e - b));
  });
}

template DtQuery<float> dt_query<float>(const DtMap&, const V3<float>&);
template DtQuery<double> dt_query<double>(const DtMap&, const V3<double>&);
template void dt_query_batch<float>(const DtMap&, const float*, float*, float*, std::int64_t);
template void dt_query_batch<double>(const DtMap&, const double*, double*, double*, std::int64_t);

namespace {
constexpr char kDtMagic[4] = {'F', 'D', 'T', 'M'};
constexpr std::uint32_t kDtVersion = 1;
}  // namespace

void dump_dt(const std::filesystem::path& path, const DtMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kDtMagic, 4);
  out.write(reinterpret_cast<const char*>(&kDtVersion), 4);
  out.write(reinterpret_cast<const char*>(map.spec.origin.data()), 24);
  out.write(reinterpret_cast<const char*>(&map.spec.cell), 8);
  for (int a = 0; a < 3; ++a) {
    std::uint64_t d = std::uint64_t(map.spec.dims[std::size_t(a)]);
    out.write(reinterpret_cast<const char*>(&d), 8);
  }
  out.write(reinterpret_cast<const char*>(map.dist.data()), std::streamsize(map.dist.size() * 4));
  out.flush();
  if (!out) throw IoError("write failed on " + path.string());
}

DtMap load_dt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || std::memcmp(magic, kDtMagic, 4) != 0) throw IoError(path.string() + ": bad magic");
  if (version != kDtVersion) throw IoError(path.string() + ": unsupported version");
  DtMap map;
  in.read(reinterpret_cast<char*>(map.spec.origin.data()), 24);
  in.read(reinterpret_cast<char*>(&map.spec.cell), 8);
  for (int a = 0; a < 3; ++a) {
    std::uint64_t d = 0;
    in.read(reinterpret_cast<char*>(&d), 8);
    if (d == 0 || d > std::uint64_t(kMaxAxisCells)) throw IoError(path.string() + ": bad dims");
    map.spec.dims[std::size_t(a)] = int(d);
  }
  if (!in) throw IoError(path.string() + ": truncated header");
  if (!(map.spec.cell > 0) || !std::isfinite(map.spec.cell) || !finite3(map.spec.origin))
    throw IoError(path.string() + ": bad geometry");
  std::int64_t n = std::int64_t(map.spec.dims[0]) * map.spec.dims[1] * map.spec.dims[2];
  if (n >= std::numeric_limits<std::int32_t>::max())
    throw IoError(path.string() + ": implausible cell count");
  map.dist.resize(std::size_t(map.spec.ncells()));
  in.read(reinterpret_cast<char*>(map.dist.data()), std::streamsize(map.dist.size() * 4));
  if (!in || in.gcount() != std::streamsize(map.dist.size() * 4))
    throw IoError(path.string() + ": truncated values");
  return map;
}

}  // namespace fnsf
