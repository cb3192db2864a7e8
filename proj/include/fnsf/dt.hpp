#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fnsf/core.hpp"
#include "fnsf/pointcloud.hpp"
#include "fnsf/simd/kernels.hpp"

namespace fnsf {

constexpr std::int64_t kDefaultMemoryBudget = std::int64_t(8) << 30;  // bytes

// Voxel lattice: cell (i,j,k) spans origin + (i,j,k)*cell, cell centers at
// origin + (i+0.5, j+0.5, k+0.5)*cell. Per-axis extents are capped at 8192
// cells so squared cell distances stay well inside int32.
struct GridSpec {
  Vec3d origin{0, 0, 0};
  double cell = 0;
  std::array<int, 3> dims{0, 0, 0};

  std::int64_t ncells() const { return std::int64_t(dims[0]) * dims[1] * dims[2]; }
  std::int64_t index(int i, int j, int k) const {
    return (std::int64_t(k) * dims[1] + j) * dims[0] + i;
  }
  Vec3d center(int i, int j, int k) const {
    return {origin[0] + (i + 0.5) * cell, origin[1] + (j + 0.5) * cell, origin[2] + (k + 0.5) * cell};
  }
};

struct OccupancyGrid {
  GridSpec spec;
  std::vector<std::uint8_t> occ;  // x-fastest, 1 = holds at least one point
};

// Distance to the nearest occupied cell center, meters, un-squared. Stored
// f32; construction runs in exact integer cell units and narrows once.
struct DtMap {
  GridSpec spec;
  std::vector<float> dist;

  simd::DtGridView view() const {
    return simd::DtGridView{dist.data(), spec.dims[0], spec.dims[1], spec.dims[2],
                            spec.origin[0], spec.origin[1], spec.origin[2], spec.cell};
  }
};

// Covers the union AABB of both clouds inflated by margin. Throws BudgetError
// when the lattice would exceed budget_bytes (occupancy + build scratch +
// map) or the per-axis cap.
GridSpec make_grid(const PointCloud& source, const PointCloud& target, double cell, double margin,
                   std::int64_t budget_bytes = kDefaultMemoryBudget);

// Marks every cell holding >= 1 target point. Every point must fall inside
// the grid volume.
OccupancyGrid rasterize(const PointCloud& target, const GridSpec& spec);

// Sentinel for "no source on this scanline". Finite squared distances stay
// below 3 * 8192^2, far under it.
constexpr std::int32_t kEdtInf = 600'000'000;

// One lower-envelope pass: out[i] = min_j f[j] + (i-j)^2, in squared cell
// units. Entries >= kEdtInf mean "no source"; an all-empty line stays empty.
void edt1d(std::span<const std::int32_t> f, std::span<std::int32_t> out);

// Exact squared distance transform, separable passes in the given axis order.
// The result is axis-order independent; the parameter exists so tests can
// assert that.
std::vector<std::int32_t> edt3d_squared(const OccupancyGrid& occ,
                                        std::array<int, 3> axis_order = {0, 1, 2});

DtMap build_dt(const OccupancyGrid& occ);

// O(cells x occupied) reference used by the verification suite; independent of
// the separable path.
DtMap dt_brute_oracle(const OccupancyGrid& occ);

template <class T>
struct DtQuery {
  T value = 0;
  V3<T> grad{0, 0, 0};
};

// Trilinear interpolation over cell centers with the analytic spatial
// gradient; out-of-lattice points clamp with zero gradient on clamped axes.
template <class T>
DtQuery<T> dt_query(const DtMap& map, const V3<T>& p);

// pts: n*3 AoS, val: n, grad: n*3. Parallelizes over fixed chunks.
template <class T>
void dt_query_batch(const DtMap& map, const T* pts, T* val, T* grad, std::int64_t n);

// Debug dump of a distance map ("FDTM" header + f32 values, x-fastest).
void dump_dt(const std::filesystem::path& path, const DtMap& map);
DtMap load_dt(const std::filesystem::path& path);

}  // namespace fnsf
