// Reference kernel implementations. These define the semantics the AVX2
// variants are tested against; keep the expression trees in sync with the
// bit-parity contract in kernels.hpp.

#include <cmath>
#include <limits>

#include "fnsf/simd/kernels.hpp"

namespace fnsf::simd {
namespace {

template <class T>
void linear_fwd_ref(const T* x, const T* w, const T* b, T* y, int n, int in, int out) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + std::int64_t(i) * in;
    T* yi = y + std::int64_t(i) * out;
    for (int o = 0; o < out; ++o) yi[o] = b ? b[o] : T(0);
    for (int k = 0; k < in; ++k) {
      T a = xi[k];
      const T* wk = w + std::int64_t(k) * out;
      for (int o = 0; o < out; ++o) yi[o] += a * wk[o];
    }
  }
}

template <class T>
void gemm_tn_acc_ref(const T* a, const T* b, T* c, int n, int in, int out) {
  for (int i = 0; i < n; ++i) {
    const T* ai = a + std::int64_t(i) * in;
    const T* bi = b + std::int64_t(i) * out;
    for (int k = 0; k < in; ++k) {
      T s = ai[k];
      T* ck = c + std::int64_t(k) * out;
      for (int o = 0; o < out; ++o) ck[o] += s * bi[o];
    }
  }
}

template <class T>
void gemm_nt_ref(const T* a, const T* b, T* c, int n, int out, int in) {
  for (int i = 0; i < n; ++i) {
    const T* ai = a + std::int64_t(i) * out;
    T* ci = c + std::int64_t(i) * in;
    for (int j = 0; j < in; ++j) {
      const T* bj = b + std::int64_t(j) * out;
      T acc = 0;
      for (int o = 0; o < out; ++o) acc += ai[o] * bj[o];
      ci[j] = acc;
    }
  }
}

template <class T>
void relu_ref(T* x, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) x[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_bwd_ref(const T* act, T* g, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) g[i] = act[i] > T(0) ? g[i] : T(0);
}

template <class T>
void colsum_acc_ref(const T* a, T* out, int n, int cols) {
  for (int i = 0; i < n; ++i) {
    const T* ai = a + std::int64_t(i) * cols;
    for (int o = 0; o < cols; ++o) out[o] += ai[o];
  }
}

template <class T>
void adam_update_ref(T* p, T* m, T* v, const T* g, std::int64_t n,
                     T lr, T beta1, T beta2, T eps, T c1, T c2) {
  for (std::int64_t i = 0; i < n; ++i) {
    T gi = g[i];
    m[i] = beta1 * m[i] + (T(1) - beta1) * gi;
    v[i] = beta2 * v[i] + (T(1) - beta2) * (gi * gi);
    T mh = m[i] * c1;
    T vh = v[i] * c2;
    p[i] = p[i] - lr * mh / (std::sqrt(vh) + eps);
  }
}

template <class T>
void nn_brute_ref(const T* q, int nq, const T* tx, const T* ty, const T* tz,
                  int nt, T* d2, int* idx) {
  for (int i = 0; i < nq; ++i) {
    T qx = q[3 * i + 0], qy = q[3 * i + 1], qz = q[3 * i + 2];
    T best = std::numeric_limits<T>::infinity();
    int bestj = -1;
    for (int j = 0; j < nt; ++j) {
      T dx = qx - tx[j];
      T dy = qy - ty[j];
      T dz = qz - tz[j];
      T d = (dx * dx + dy * dy) + dz * dz;
      if (d < best) {
        best = d;
        bestj = j;
      }
    }
    d2[i] = best;
    idx[i] = bestj;
  }
}

template <class T>
inline T lerp1(T a, T b, T t) { return a + t * (b - a); }

// Trilinear interpolation over the cell-center lattice. Continuous coordinate
// u = (p - origin)/cell - 0.5; u outside [0, n-1] clamps with zero gradient on
// that axis.
template <class T>
void dt_query_ref(const DtGridView& g, const T* pts, T* val, T* grad, int n) {
  const T ox = T(g.ox), oy = T(g.oy), oz = T(g.oz);
  const T cell = T(g.cell);
  const int nx = g.nx, ny = g.ny, nz = g.nz;
  const T inv_cell = T(1) / cell;
  for (int i = 0; i < n; ++i) {
    T u[3] = {(pts[3 * i + 0] - ox) * inv_cell - T(0.5),
              (pts[3 * i + 1] - oy) * inv_cell - T(0.5),
              (pts[3 * i + 2] - oz) * inv_cell - T(0.5)};
    const int dims[3] = {nx, ny, nz};
    int base[3];
    T t[3];
    bool clamped[3];
    for (int a = 0; a < 3; ++a) {
      int d = dims[a];
      if (d == 1) {
        base[a] = 0;
        t[a] = T(0);
        clamped[a] = true;
        continue;
      }
      T ua = u[a];
      bool cl = false;
      if (ua < T(0)) { ua = T(0); cl = true; }
      T top = T(d - 1);
      if (ua > top) { ua = top; cl = true; }
      int i0 = int(std::floor(ua));
      if (i0 > d - 2) i0 = d - 2;
      base[a] = i0;
      t[a] = ua - T(i0);
      clamped[a] = cl;
    }
    const std::int64_t sx = 1, sy = nx, sz = std::int64_t(nx) * ny;
    const float* p000 = g.dist + base[2] * sz + base[1] * sy + base[0] * sx;
    const std::int64_t dxs = dims[0] == 1 ? 0 : sx;
    const std::int64_t dys = dims[1] == 1 ? 0 : sy;
    const std::int64_t dzs = dims[2] == 1 ? 0 : sz;
    T c000 = T(p000[0]);
    T c100 = T(p000[dxs]);
    T c010 = T(p000[dys]);
    T c110 = T(p000[dys + dxs]);
    T c001 = T(p000[dzs]);
    T c101 = T(p000[dzs + dxs]);
    T c011 = T(p000[dzs + dys]);
    T c111 = T(p000[dzs + dys + dxs]);
    T tx = t[0], ty = t[1], tz = t[2];
    T c00 = lerp1(c000, c100, tx);
    T c10 = lerp1(c010, c110, tx);
    T c01 = lerp1(c001, c101, tx);
    T c11 = lerp1(c011, c111, tx);
    T c0 = lerp1(c00, c10, ty);
    T c1 = lerp1(c01, c11, ty);
    val[i] = lerp1(c0, c1, tz);
    T gx = lerp1(lerp1(c100 - c000, c110 - c010, ty), lerp1(c101 - c001, c111 - c011, ty), tz);
    T gy = lerp1(c10 - c00, c11 - c01, tz);
    T gz = c1 - c0;
    grad[3 * i + 0] = clamped[0] ? T(0) : gx * inv_cell;
    grad[3 * i + 1] = clamped[1] ? T(0) : gy * inv_cell;
    grad[3 * i + 2] = clamped[2] ? T(0) : gz * inv_cell;
  }
}

template <class T>
Kernels<T> make_scalar() {
  Kernels<T> k{};
  k.name = "scalar";
  k.linear_fwd = &linear_fwd_ref<T>;
  k.gemm_tn_acc = &gemm_tn_acc_ref<T>;
  k.gemm_nt = &gemm_nt_ref<T>;
  k.relu = &relu_ref<T>;
  k.relu_bwd = &relu_bwd_ref<T>;
  k.colsum_acc = &colsum_acc_ref<T>;
  k.adam_update = &adam_update_ref<T>;
  k.nn_brute = &nn_brute_ref<T>;
  k.dt_query = &dt_query_ref<T>;
  return k;
}

}  // namespace

template <>
const Kernels<float>& scalar_kernels<float>() {
  static const Kernels<float> k = make_scalar<float>();
  return k;
}

template <>
const Kernels<double>& scalar_kernels<double>() {
  static const Kernels<double> k = make_scalar<double>();
  return k;
}

}  // namespace fnsf::simd
