#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "fnsf/core.hpp"

namespace fnsf {

// Coordinates are meters, sensor frame. Storage is f32; geometry math runs in
// f64 and narrows on store.
struct PointCloud {
  std::vector<Vec3> points;

  std::int64_t size() const { return std::int64_t(points.size()); }
  bool empty() const { return points.empty(); }
};

// Per-point displacement, meters; row i pairs with source point i.
struct FlowField {
  std::vector<Vec3> v;

  std::int64_t size() const { return std::int64_t(v.size()); }
  bool empty() const { return v.empty(); }
};

enum class CloudFormat { xyz_text, fnsf_binary };

// Text: one "x y z" line per point, shortest round-trip decimals, LF.
// Binary: "FNSF" magic, u32 version, u64 count, count*3 little-endian f32.
PointCloud load_cloud(const std::filesystem::path& path);
void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, CloudFormat fmt);

FlowField load_flow(const std::filesystem::path& path);
void save_flow(const std::filesystem::path& path, const FlowField& flow, CloudFormat fmt);

// Tight box around the points, inflated by pad on every side. Throws on an
// empty cloud.
Aabb bounds(const PointCloud& cloud, double pad = 0.0);

struct Subsample {
  PointCloud cloud;
  std::vector<std::int64_t> indices;  // ascending positions into the input
};

// Uniform subset without replacement; returns the input unchanged when
// n >= cloud size.
Subsample subsample(const PointCloud& cloud, std::int64_t n, std::uint64_t seed);

// -------------------------------------------------------------- synthesis

struct MoverSpec {
  Aabb box;                   // occupied volume at the earlier frame
  Vec3d axis{0, 0, 1};        // rotation axis (unit), about the box center
  double angle_rad = 0;
  Vec3d translation{0, 0, 0};
  int points = 0;
};

struct SynthConfig {
  int background_points = 20000;
  Aabb background_box{{-15, -15, 0}, {15, 15, 4}};
  std::vector<MoverSpec> movers;
  Vec3d ego{0, 0, 0};        // sensor translation between frames
  double noise_sigma = 0;    // per-component gaussian, meters
  double target_scale = 1;   // target counts = round(scale * source counts)
};

// Row-major 3x3 rotation.
using Mat3 = std::array<double, 9>;

Mat3 axis_angle_matrix(const Vec3d& axis, double angle_rad);
Vec3d apply_mat3(const Mat3& m, const Vec3d& p);

// One rigid body of the generated scene; the motion maps p to R*p + t in the
// sensor frame of the later scan (ego already folded into t). Source rows
// [begin, end) belong to this body.
struct BodyMotion {
  Mat3 rot;
  Vec3d trans;
  std::int64_t begin = 0;
  std::int64_t end = 0;
};

struct SceneDescriptor {
  SynthConfig config;
  std::uint64_t seed = 0;
  std::vector<BodyMotion> bodies;
};

struct ScenePair {
  PointCloud source;
  PointCloud target;
  std::optional<FlowField> gt_flow;
  SceneDescriptor descriptor;
};

// Static background plus rigid movers; the target is re-sampled independently
// so there are no point correspondences. gt_flow holds the owning body's rigid
// motion evaluated at each stored source point.
ScenePair synth_scene(const SynthConfig& cfg, std::uint64_t seed);

// Deterministic mover layout inside the background box: k movers with bounded
// rotation (<= 15 deg) and translation (<= max_translation, capped at 3 m).
SynthConfig random_scene_config(int background_points, int k_movers, std::uint64_t seed,
                                double max_translation = 1.5);

}  // namespace fnsf
