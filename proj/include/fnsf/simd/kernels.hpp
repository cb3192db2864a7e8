#pragma once

#include <cstdint>
#include <string>

namespace fnsf::simd {

enum class Isa { scalar = 0, avx2 = 1 };

const char* isa_name(Isa);

// Geometry view of a distance map for the query kernels. dist is dense,
// x-fastest, nx*ny*nz floats.
struct DtGridView {
  const float* dist = nullptr;
  int nx = 0, ny = 0, nz = 0;
  double ox = 0, oy = 0, oz = 0;  // volume origin, meters
  double cell = 0;                // edge length, meters
};

// Hot-loop kernel table. Each entry has a scalar reference implementation and
// an AVX2 variant selected at runtime; the two are equivalence-tested.
//
// Bit-parity contract: relu, relu_bwd, colsum_acc, adam_update, nn_brute and
// dt_query evaluate the same expression tree in every variant (no FMA), so
// scalar and AVX2 agree bit for bit. The GEMM-family kernels use FMA and a
// different accumulation order, so they agree only to rounding.
template <class T>
struct Kernels {
  const char* name;

  // y = x*W + b. x: n*in, W: in*out, y: n*out, row-major. b may be null.
  void (*linear_fwd)(const T* x, const T* w, const T* b, T* y, int n, int in, int out);
  // c += a^T * b. a: n*in, b: n*out, c: in*out.
  void (*gemm_tn_acc)(const T* a, const T* b, T* c, int n, int in, int out);
  // c = a * b^T. a: n*out, b: in*out, c: n*in (c[i][j] = sum_o a[i][o]*b[j][o]).
  void (*gemm_nt)(const T* a, const T* b, T* c, int n, int out, int in);

  void (*relu)(T* x, std::int64_t n);
  void (*relu_bwd)(const T* act, T* g, std::int64_t n);     // g *= (act > 0)
  void (*colsum_acc)(const T* a, T* out, int n, int cols);  // out += column sums of a

  // In-place Adam step; c1 = 1/(1-beta1^t), c2 = 1/(1-beta2^t).
  void (*adam_update)(T* p, T* m, T* v, const T* g, std::int64_t n,
                      T lr, T beta1, T beta2, T eps, T c1, T c2);

  // For each query point (AoS xyz), the lexicographic minimum of
  // (squared distance, target index) over the SoA target arrays.
  // tx/ty/tz must be padded to a multiple of the lane width with +huge values.
  void (*nn_brute)(const T* q, int nq, const T* tx, const T* ty, const T* tz,
                   int nt, T* d2, int* idx);

  // Trilinear value + gradient of the distance map at each point. All
  // interpolation arithmetic runs in T; clamped axes get zero gradient.
  void (*dt_query)(const DtGridView& g, const T* pts, T* val, T* grad, int n);
};

template <class T> const Kernels<T>& scalar_kernels();
#if defined(FNSF_WITH_AVX2)
template <class T> const Kernels<T>& avx2_kernels();
#endif

bool isa_supported(Isa);
Isa best_isa();         // strongest supported, after the FNSF_SIMD override
Isa active_isa();
void set_isa(Isa);      // throws std::invalid_argument when unsupported

template <class T> const Kernels<T>& table(Isa);
template <class T> const Kernels<T>& active();

// pad count for nn_brute SoA buffers
constexpr int nn_pad(int n) { return (n + 7) & ~7; }

}  // namespace fnsf::simd
