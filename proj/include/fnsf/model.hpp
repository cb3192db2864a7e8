#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fnsf/core.hpp"

namespace fnsf {

// ------------------------------------------------------------------ MLP

// Fully connected ReLU stack: 3 -> width -> ... -> width -> 3, identity on the
// last layer. depth counts weight layers; depth 1 degenerates to 3->width->3.
template <class T>
struct MlpParams {
  std::vector<std::array<int, 2>> shapes;  // (in, out) per layer
  std::vector<T> data;                     // per layer: weights row-major, then bias
  std::vector<std::int64_t> w_off, b_off;

  int layers() const { return int(shapes.size()); }
  std::int64_t count() const { return std::int64_t(data.size()); }
  T* w(int l) { return data.data() + w_off[std::size_t(l)]; }
  const T* w(int l) const { return data.data() + w_off[std::size_t(l)]; }
  T* b(int l) { return data.data() + b_off[std::size_t(l)]; }
  const T* b(int l) const { return data.data() + b_off[std::size_t(l)]; }

  static MlpParams zeros_like(const MlpParams& other) {
    MlpParams g;
    g.shapes = other.shapes;
    g.w_off = other.w_off;
    g.b_off = other.b_off;
    g.data.assign(other.data.size(), T(0));
    return g;
  }
};

// Zero-initialized parameter block with the standard layer stack.
template <class T>
MlpParams<T> mlp_params(int width, int depth);

// Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero.
template <class T>
MlpParams<T> mlp_init(int width, int depth, std::uint64_t seed);

template <class T>
struct MlpTape {
  std::int64_t n = 0;
  std::vector<std::vector<T>> act;  // act[l] = input to layer l; act[0] copies the points
};

// flow: n*3. tape may be null when no backward pass follows. Throws
// NumericError naming the layer when an intermediate goes non-finite.
template <class T>
void mlp_forward(const MlpParams<T>& params, const T* pts, std::int64_t n, T* flow, MlpTape<T>* tape);

// Gradient of sum(dflow . flow) with respect to every parameter, packed like
// the parameter block.
template <class T>
MlpParams<T> mlp_backward(const MlpParams<T>& params, const MlpTape<T>& tape, const T* dflow);

void save_mlp(const std::filesystem::path& path, const MlpParams<float>& params);
MlpParams<float> load_mlp(const std::filesystem::path& path);

// ------------------------------------------------- linear model + encoding

// Separable axis grids (uniform spacing = edge) and the Gaussian width used
// to encode them.
struct EncoderSpec {
  std::vector<double> xs, ys, zs;
  double edge = 0;
  double sigma = 0;
};

// Grids cover the box; sigma <= 0 picks the 2*edge default.
EncoderSpec make_encoder(const Aabb& box, double edge, double sigma = 0);

void validate_encoder(const EncoderSpec& spec);

// out(i,j) = exp(-(coords[i]-grid[j])^2 / (2 sigma^2)), row-major.
template <class T>
std::vector<T> gaussian_encode(std::span<const double> coords, std::span<const double> grid,
                               double sigma);

// Flow weights on the encoder lattice. Entry (i,j,k,channel) lives at
// ((k*wy + j)*wx + i)*3 + channel; x fastest, matching vec() order of the
// per-axis Kronecker factors.
template <class T>
struct LinearParams {
  int wx = 0, wy = 0, wz = 0;
  std::vector<T> w;

  std::int64_t verts() const { return std::int64_t(wx) * wy * wz; }
  std::int64_t count() const { return std::int64_t(w.size()); }
};

template <class T>
LinearParams<T> linear_init(const EncoderSpec& spec);  // zeros

// Encoder matrices cached once per solve; phi*t are the transposes used by
// the backward contraction.
template <class T>
struct PreparedEncoder {
  EncoderSpec spec;
  std::vector<T> phix, phiy, phiz;     // W_axis x W_axis, row-major
  std::vector<T> phixt, phiyt, phizt;
};

template <class T>
PreparedEncoder<T> prepare_encoder(const EncoderSpec& spec);

// Trilinear blend over the 8 surrounding lattice vertices; weights sum to 1,
// out-of-grid points clamp as in dt_query. corners receives spatial vertex
// indices (x-fastest).
template <class T>
void blend_weights(const EncoderSpec& spec, const V3<T>& p, std::int32_t corners[8], T weights[8]);

template <class T>
struct LinearTape {
  std::int64_t n = 0;
  std::vector<std::int32_t> corners;  // 8 per point
  std::vector<T> bw;                  // 8 per point
};

// flow(p) = sum_c blend_c(p) * G[c], with G = W contracted with the encoder
// matrix along each axis (never materializing the Kronecker product).
template <class T>
void linear_flow(const LinearParams<T>& params, const PreparedEncoder<T>& enc, const T* pts,
                 std::int64_t n, T* flow, LinearTape<T>* tape);

template <class T>
LinearParams<T> linear_backward(const LinearParams<T>& params, const PreparedEncoder<T>& enc,
                                const LinearTape<T>& tape, const T* dflow);

// Isotropic total variation of the weight lattice, forward differences,
// normalized by the interior count; eps sits inside the square root.
template <class T>
struct TvResult {
  double value = 0;
  LinearParams<T> grad;
};

template <class T>
TvResult<T> tv_reg(const LinearParams<T>& params, double eps = 1e-12);

void save_linear(const std::filesystem::path& path, const LinearParams<float>& params);
LinearParams<float> load_linear(const std::filesystem::path& path);

// ------------------------------------------------------------------ Adam

template <class T>
struct AdamConfig {
  T lr = T(8e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <class T>
struct AdamState {
  AdamConfig<T> cfg;
  std::int64_t step = 0;
  std::vector<T> m, v;
};

template <class T>
AdamState<T> adam_init(std::int64_t nparams, AdamConfig<T> cfg = {});

// Standard bias-corrected update, in place.
template <class T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads);

}  // namespace fnsf
