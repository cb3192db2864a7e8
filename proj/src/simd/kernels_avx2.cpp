// AVX2 kernel variants. This TU is compiled with -mavx2 -mfma and
// -ffp-contract=off: explicit FMA intrinsics are the only fused operations, so
// the plain-C tail loops keep bit parity with the scalar reference TU.

#if defined(FNSF_WITH_AVX2)

#include <immintrin.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "fnsf/simd/kernels.hpp"

namespace fnsf::simd {
namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

inline double hsum4(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  __m128d s = _mm_add_pd(lo, hi);
  s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
  return _mm_cvtsd_f64(s);
}

// ---------------------------------------------------------------- float

void linear_fwd_f32(const float* x, const float* w, const float* b, float* y, int n, int in, int out) {
  int o8 = out & ~7;
  for (int i = 0; i < n; ++i) {
    const float* xi = x + std::int64_t(i) * in;
    float* yi = y + std::int64_t(i) * out;
    int o = 0;
    for (; o + 16 <= out; o += 16) {
      __m256 acc0 = b ? _mm256_loadu_ps(b + o) : _mm256_setzero_ps();
      __m256 acc1 = b ? _mm256_loadu_ps(b + o + 8) : _mm256_setzero_ps();
      for (int k = 0; k < in; ++k) {
        __m256 a = _mm256_set1_ps(xi[k]);
        const float* wk = w + std::int64_t(k) * out + o;
        acc0 = _mm256_fmadd_ps(a, _mm256_loadu_ps(wk), acc0);
        acc1 = _mm256_fmadd_ps(a, _mm256_loadu_ps(wk + 8), acc1);
      }
      _mm256_storeu_ps(yi + o, acc0);
      _mm256_storeu_ps(yi + o + 8, acc1);
    }
    for (; o < o8; o += 8) {
      __m256 acc = b ? _mm256_loadu_ps(b + o) : _mm256_setzero_ps();
      for (int k = 0; k < in; ++k)
        acc = _mm256_fmadd_ps(_mm256_set1_ps(xi[k]), _mm256_loadu_ps(w + std::int64_t(k) * out + o), acc);
      _mm256_storeu_ps(yi + o, acc);
    }
    for (; o < out; ++o) {
      float acc = b ? b[o] : 0.0f;
      for (int k = 0; k < in; ++k) acc += xi[k] * w[std::int64_t(k) * out + o];
      yi[o] = acc;
    }
  }
}

void gemm_tn_acc_f32(const float* a, const float* b, float* c, int n, int in, int out) {
  int o8 = out & ~7;
  for (int k = 0; k < in; ++k) {
    float* ck = c + std::int64_t(k) * out;
    int o = 0;
    for (; o < o8; o += 8) {
      __m256 acc = _mm256_loadu_ps(ck + o);
      for (int i = 0; i < n; ++i)
        acc = _mm256_fmadd_ps(_mm256_set1_ps(a[std::int64_t(i) * in + k]),
                              _mm256_loadu_ps(b + std::int64_t(i) * out + o), acc);
      _mm256_storeu_ps(ck + o, acc);
    }
    for (; o < out; ++o) {
      float acc = ck[o];
      for (int i = 0; i < n; ++i) acc += a[std::int64_t(i) * in + k] * b[std::int64_t(i) * out + o];
      ck[o] = acc;
    }
  }
}

void gemm_nt_f32(const float* a, const float* b, float* c, int n, int out, int in) {
  int o8 = out & ~7;
  for (int i = 0; i < n; ++i) {
    const float* ai = a + std::int64_t(i) * out;
    float* ci = c + std::int64_t(i) * in;
    for (int j = 0; j < in; ++j) {
      const float* bj = b + std::int64_t(j) * out;
      __m256 acc = _mm256_setzero_ps();
      int o = 0;
      for (; o < o8; o += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(ai + o), _mm256_loadu_ps(bj + o), acc);
      float s = hsum8(acc);
      for (; o < out; ++o) s += ai[o] * bj[o];
      ci[j] = s;
    }
  }
}

void relu_f32(float* x, std::int64_t n) {
  std::int64_t i = 0;
  __m256 z = _mm256_setzero_ps();
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_max_ps(_mm256_loadu_ps(x + i), z));
  for (; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_f32(const float* act, float* g, std::int64_t n) {
  std::int64_t i = 0;
  __m256 z = _mm256_setzero_ps();
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(act + i), z, _CMP_GT_OQ);
    _mm256_storeu_ps(g + i, _mm256_and_ps(_mm256_loadu_ps(g + i), mask));
  }
  for (; i < n; ++i) g[i] = act[i] > 0.0f ? g[i] : 0.0f;
}

void colsum_acc_f32(const float* a, float* out, int n, int cols) {
  int o8 = cols & ~7;
  for (int i = 0; i < n; ++i) {
    const float* ai = a + std::int64_t(i) * cols;
    int o = 0;
    for (; o < o8; o += 8)
      _mm256_storeu_ps(out + o, _mm256_add_ps(_mm256_loadu_ps(out + o), _mm256_loadu_ps(ai + o)));
    for (; o < cols; ++o) out[o] += ai[o];
  }
}

void adam_update_f32(float* p, float* m, float* v, const float* g, std::int64_t n,
                     float lr, float beta1, float beta2, float eps, float c1, float c2) {
  const float r1 = 1.0f - beta1, r2 = 1.0f - beta2;
  __m256 vb1 = _mm256_set1_ps(beta1), vb2 = _mm256_set1_ps(beta2);
  __m256 vr1 = _mm256_set1_ps(r1), vr2 = _mm256_set1_ps(r2);
  __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
  __m256 vc1 = _mm256_set1_ps(c1), vc2 = _mm256_set1_ps(c2);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 gi = _mm256_loadu_ps(g + i);
    __m256 mi = _mm256_add_ps(_mm256_mul_ps(vb1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(vr1, gi));
    __m256 vi = _mm256_add_ps(_mm256_mul_ps(vb2, _mm256_loadu_ps(v + i)),
                              _mm256_mul_ps(vr2, _mm256_mul_ps(gi, gi)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    __m256 mh = _mm256_mul_ps(mi, vc1);
    __m256 vh = _mm256_mul_ps(vi, vc2);
    __m256 upd = _mm256_div_ps(_mm256_mul_ps(vlr, mh), _mm256_add_ps(_mm256_sqrt_ps(vh), veps));
    _mm256_storeu_ps(p + i, _mm256_sub_ps(_mm256_loadu_ps(p + i), upd));
  }
  for (; i < n; ++i) {
    float gi = g[i];
    m[i] = beta1 * m[i] + r1 * gi;
    v[i] = beta2 * v[i] + r2 * (gi * gi);
    float mh = m[i] * c1;
    float vh = v[i] * c2;
    p[i] = p[i] - lr * mh / (std::sqrt(vh) + eps);
  }
}

void nn_brute_f32(const float* q, int nq, const float* tx, const float* ty, const float* tz,
                  int nt, float* d2, int* idx) {
  const int ntp = nn_pad(nt);
  const __m256i step = _mm256_set1_epi32(8);
  const __m256i iota = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
  for (int i = 0; i < nq; ++i) {
    __m256 qx = _mm256_set1_ps(q[3 * i + 0]);
    __m256 qy = _mm256_set1_ps(q[3 * i + 1]);
    __m256 qz = _mm256_set1_ps(q[3 * i + 2]);
    __m256 best = _mm256_set1_ps(std::numeric_limits<float>::infinity());
    __m256i bestj = _mm256_set1_epi32(-1);
    __m256i cur = iota;
    for (int j = 0; j < ntp; j += 8) {
      __m256 dx = _mm256_sub_ps(qx, _mm256_loadu_ps(tx + j));
      __m256 dy = _mm256_sub_ps(qy, _mm256_loadu_ps(ty + j));
      __m256 dz = _mm256_sub_ps(qz, _mm256_loadu_ps(tz + j));
      __m256 d = _mm256_add_ps(_mm256_add_ps(_mm256_mul_ps(dx, dx), _mm256_mul_ps(dy, dy)),
                               _mm256_mul_ps(dz, dz));
      __m256 lt = _mm256_cmp_ps(d, best, _CMP_LT_OQ);
      best = _mm256_blendv_ps(best, d, lt);
      bestj = _mm256_blendv_epi8(bestj, cur, _mm256_castps_si256(lt));
      cur = _mm256_add_epi32(cur, step);
    }
    alignas(32) float bd[8];
    alignas(32) int bj[8];
    _mm256_store_ps(bd, best);
    _mm256_store_si256(reinterpret_cast<__m256i*>(bj), bestj);
    float fb = bd[0];
    int fj = bj[0];
    for (int l = 1; l < 8; ++l)
      if (bd[l] < fb || (bd[l] == fb && bj[l] < fj)) { fb = bd[l]; fj = bj[l]; }
    d2[i] = fb;
    idx[i] = fj;
  }
}

void dt_query_f32(const DtGridView& g, const float* pts, float* val, float* grad, int n) {
  const float cell = float(g.cell);
  const float inv_cell = 1.0f / cell;
  const float o3[3] = {float(g.ox), float(g.oy), float(g.oz)};
  const int dims[3] = {g.nx, g.ny, g.nz};
  const std::int64_t strides64[3] = {1, g.nx, std::int64_t(g.nx) * g.ny};
  const int estr[3] = {dims[0] == 1 ? 0 : int(strides64[0]),
                       dims[1] == 1 ? 0 : int(strides64[1]),
                       dims[2] == 1 ? 0 : int(strides64[2])};
  const __m256i pidx = _mm256_setr_epi32(0, 3, 6, 9, 12, 15, 18, 21);
  const __m256 vinv = _mm256_set1_ps(inv_cell);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 zero = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const float* base = pts + 3 * i;
    __m256i ibase[3];
    __m256 t[3], clampm[3];
    for (int a = 0; a < 3; ++a) {
      __m256 p = _mm256_i32gather_ps(base + a, pidx, 4);
      __m256 u = _mm256_sub_ps(_mm256_mul_ps(_mm256_sub_ps(p, _mm256_set1_ps(o3[a])), vinv), half);
      if (dims[a] == 1) {
        ibase[a] = _mm256_setzero_si256();
        t[a] = zero;
        clampm[a] = _mm256_castsi256_ps(_mm256_set1_epi32(-1));
        continue;
      }
      __m256 top = _mm256_set1_ps(float(dims[a] - 1));
      __m256 cl = _mm256_or_ps(_mm256_cmp_ps(u, zero, _CMP_LT_OQ), _mm256_cmp_ps(u, top, _CMP_GT_OQ));
      u = _mm256_min_ps(_mm256_max_ps(u, zero), top);
      __m256i i0 = _mm256_cvttps_epi32(_mm256_floor_ps(u));
      i0 = _mm256_min_epi32(i0, _mm256_set1_epi32(dims[a] - 2));
      ibase[a] = i0;
      t[a] = _mm256_sub_ps(u, _mm256_cvtepi32_ps(i0));
      clampm[a] = cl;
    }
    __m256i lin = _mm256_add_epi32(
        _mm256_mullo_epi32(_mm256_add_epi32(_mm256_mullo_epi32(ibase[2], _mm256_set1_epi32(dims[1])), ibase[1]),
                           _mm256_set1_epi32(dims[0])),
        ibase[0]);
    auto corner = [&](int off) { return _mm256_i32gather_ps(g.dist, _mm256_add_epi32(lin, _mm256_set1_epi32(off)), 4); };
    __m256 c000 = corner(0);
    __m256 c100 = corner(estr[0]);
    __m256 c010 = corner(estr[1]);
    __m256 c110 = corner(estr[1] + estr[0]);
    __m256 c001 = corner(estr[2]);
    __m256 c101 = corner(estr[2] + estr[0]);
    __m256 c011 = corner(estr[2] + estr[1]);
    __m256 c111 = corner(estr[2] + estr[1] + estr[0]);
    auto lerp = [](__m256 a, __m256 b, __m256 tt) {
      return _mm256_add_ps(a, _mm256_mul_ps(tt, _mm256_sub_ps(b, a)));
    };
    __m256 tx = t[0], ty = t[1], tz = t[2];
    __m256 c00 = lerp(c000, c100, tx);
    __m256 c10 = lerp(c010, c110, tx);
    __m256 c01 = lerp(c001, c101, tx);
    __m256 c11 = lerp(c011, c111, tx);
    __m256 c0 = lerp(c00, c10, ty);
    __m256 c1 = lerp(c01, c11, ty);
    _mm256_storeu_ps(val + i, lerp(c0, c1, tz));
    __m256 gx = lerp(lerp(_mm256_sub_ps(c100, c000), _mm256_sub_ps(c110, c010), ty),
                     lerp(_mm256_sub_ps(c101, c001), _mm256_sub_ps(c111, c011), ty), tz);
    __m256 gy = lerp(_mm256_sub_ps(c10, c00), _mm256_sub_ps(c11, c01), tz);
    __m256 gz = _mm256_sub_ps(c1, c0);
    gx = _mm256_andnot_ps(clampm[0], _mm256_mul_ps(gx, vinv));
    gy = _mm256_andnot_ps(clampm[1], _mm256_mul_ps(gy, vinv));
    gz = _mm256_andnot_ps(clampm[2], _mm256_mul_ps(gz, vinv));
    alignas(32) float bx[8], by[8], bz[8];
    _mm256_store_ps(bx, gx);
    _mm256_store_ps(by, gy);
    _mm256_store_ps(bz, gz);
    for (int l = 0; l < 8; ++l) {
      grad[3 * (i + l) + 0] = bx[l];
      grad[3 * (i + l) + 1] = by[l];
      grad[3 * (i + l) + 2] = bz[l];
    }
  }
  if (i < n) scalar_kernels<float>().dt_query(g, pts + 3 * i, val + i, grad + 3 * i, n - i);
}

// ---------------------------------------------------------------- double

void linear_fwd_f64(const double* x, const double* w, const double* b, double* y, int n, int in, int out) {
  int o4 = out & ~3;
  for (int i = 0; i < n; ++i) {
    const double* xi = x + std::int64_t(i) * in;
    double* yi = y + std::int64_t(i) * out;
    int o = 0;
    for (; o < o4; o += 4) {
      __m256d acc = b ? _mm256_loadu_pd(b + o) : _mm256_setzero_pd();
      for (int k = 0; k < in; ++k)
        acc = _mm256_fmadd_pd(_mm256_set1_pd(xi[k]), _mm256_loadu_pd(w + std::int64_t(k) * out + o), acc);
      _mm256_storeu_pd(yi + o, acc);
    }
    for (; o < out; ++o) {
      double acc = b ? b[o] : 0.0;
      for (int k = 0; k < in; ++k) acc += xi[k] * w[std::int64_t(k) * out + o];
      yi[o] = acc;
    }
  }
}

void gemm_tn_acc_f64(const double* a, const double* b, double* c, int n, int in, int out) {
  int o4 = out & ~3;
  for (int k = 0; k < in; ++k) {
    double* ck = c + std::int64_t(k) * out;
    int o = 0;
    for (; o < o4; o += 4) {
      __m256d acc = _mm256_loadu_pd(ck + o);
      for (int i = 0; i < n; ++i)
        acc = _mm256_fmadd_pd(_mm256_set1_pd(a[std::int64_t(i) * in + k]),
                              _mm256_loadu_pd(b + std::int64_t(i) * out + o), acc);
      _mm256_storeu_pd(ck + o, acc);
    }
    for (; o < out; ++o) {
      double acc = ck[o];
      for (int i = 0; i < n; ++i) acc += a[std::int64_t(i) * in + k] * b[std::int64_t(i) * out + o];
      ck[o] = acc;
    }
  }
}

void gemm_nt_f64(const double* a, const double* b, double* c, int n, int out, int in) {
  int o4 = out & ~3;
  for (int i = 0; i < n; ++i) {
    const double* ai = a + std::int64_t(i) * out;
    double* ci = c + std::int64_t(i) * in;
    for (int j = 0; j < in; ++j) {
      const double* bj = b + std::int64_t(j) * out;
      __m256d acc = _mm256_setzero_pd();
      int o = 0;
      for (; o < o4; o += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(ai + o), _mm256_loadu_pd(bj + o), acc);
      double s = hsum4(acc);
      for (; o < out; ++o) s += ai[o] * bj[o];
      ci[j] = s;
    }
  }
}

void relu_f64(double* x, std::int64_t n) {
  std::int64_t i = 0;
  __m256d z = _mm256_setzero_pd();
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(x + i, _mm256_max_pd(_mm256_loadu_pd(x + i), z));
  for (; i < n; ++i) x[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_f64(const double* act, double* g, std::int64_t n) {
  std::int64_t i = 0;
  __m256d z = _mm256_setzero_pd();
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(act + i), z, _CMP_GT_OQ);
    _mm256_storeu_pd(g + i, _mm256_and_pd(_mm256_loadu_pd(g + i), mask));
  }
  for (; i < n; ++i) g[i] = act[i] > 0.0 ? g[i] : 0.0;
}

void colsum_acc_f64(const double* a, double* out, int n, int cols) {
  int o4 = cols & ~3;
  for (int i = 0; i < n; ++i) {
    const double* ai = a + std::int64_t(i) * cols;
    int o = 0;
    for (; o < o4; o += 4)
      _mm256_storeu_pd(out + o, _mm256_add_pd(_mm256_loadu_pd(out + o), _mm256_loadu_pd(ai + o)));
    for (; o < cols; ++o) out[o] += ai[o];
  }
}

void adam_update_f64(double* p, double* m, double* v, const double* g, std::int64_t n,
                     double lr, double beta1, double beta2, double eps, double c1, double c2) {
  const double r1 = 1.0 - beta1, r2 = 1.0 - beta2;
  __m256d vb1 = _mm256_set1_pd(beta1), vb2 = _mm256_set1_pd(beta2);
  __m256d vr1 = _mm256_set1_pd(r1), vr2 = _mm256_set1_pd(r2);
  __m256d vlr = _mm256_set1_pd(lr), veps = _mm256_set1_pd(eps);
  __m256d vc1 = _mm256_set1_pd(c1), vc2 = _mm256_set1_pd(c2);
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d gi = _mm256_loadu_pd(g + i);
    __m256d mi = _mm256_add_pd(_mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(vr1, gi));
    __m256d vi = _mm256_add_pd(_mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)),
                               _mm256_mul_pd(vr2, _mm256_mul_pd(gi, gi)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    __m256d mh = _mm256_mul_pd(mi, vc1);
    __m256d vh = _mm256_mul_pd(vi, vc2);
    __m256d upd = _mm256_div_pd(_mm256_mul_pd(vlr, mh), _mm256_add_pd(_mm256_sqrt_pd(vh), veps));
    _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), upd));
  }
  for (; i < n; ++i) {
    double gi = g[i];
    m[i] = beta1 * m[i] + r1 * gi;
    v[i] = beta2 * v[i] + r2 * (gi * gi);
    double mh = m[i] * c1;
    double vh = v[i] * c2;
    p[i] = p[i] - lr * mh / (std::sqrt(vh) + eps);
  }
}

void nn_brute_f64(const double* q, int nq, const double* tx, const double* ty, const double* tz,
                  int nt, double* d2, int* idx) {
  const int ntp = (nt + 3) & ~3;
  const __m128i step = _mm_set1_epi32(4);
  const __m128i iota = _mm_setr_epi32(0, 1, 2, 3);
  for (int i = 0; i < nq; ++i) {
    __m256d qx = _mm256_set1_pd(q[3 * i + 0]);
    __m256d qy = _mm256_set1_pd(q[3 * i + 1]);
    __m256d qz = _mm256_set1_pd(q[3 * i + 2]);
    __m256d best = _mm256_set1_pd(std::numeric_limits<double>::infinity());
    __m128i bestj = _mm_set1_epi32(-1);
    __m128i cur = iota;
    for (int j = 0; j < ntp; j += 4) {
      __m256d dx = _mm256_sub_pd(qx, _mm256_loadu_pd(tx + j));
      __m256d dy = _mm256_sub_pd(qy, _mm256_loadu_pd(ty + j));
      __m256d dz = _mm256_sub_pd(qz, _mm256_loadu_pd(tz + j));
      __m256d d = _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(dx, dx), _mm256_mul_pd(dy, dy)),
                                _mm256_mul_pd(dz, dz));
      __m256d lt = _mm256_cmp_pd(d, best, _CMP_LT_OQ);
      best = _mm256_blendv_pd(best, d, lt);
      // narrow the 4x64 mask to 4x32 lanes for the index blend
      __m128i m32 = _mm_castps_si128(_mm_shuffle_ps(_mm_castpd_ps(_mm256_castpd256_pd128(lt)),
                                                    _mm_castpd_ps(_mm256_extractf128_pd(lt, 1)),
                                                    _MM_SHUFFLE(2, 0, 2, 0)));
      bestj = _mm_blendv_epi8(bestj, cur, m32);
      cur = _mm_add_epi32(cur, step);
    }
    alignas(32) double bd[4];
    alignas(16) int bj[4];
    _mm256_store_pd(bd, best);
    _mm_store_si128(reinterpret_cast<__m128i*>(bj), bestj);
    double fb = bd[0];
    int fj = bj[0];
    for (int l = 1; l < 4; ++l)
      if (bd[l] < fb || (bd[l] == fb && bj[l] < fj)) { fb = bd[l]; fj = bj[l]; }
    d2[i] = fb;
    idx[i] = fj;
  }
}

void dt_query_f64(const DtGridView& g, const double* pts, double* val, double* grad, int n) {
  const double cell = g.cell;
  const double inv_cell = 1.0 / cell;
  const double o3[3] = {g.ox, g.oy, g.oz};
  const int dims[3] = {g.nx, g.ny, g.nz};
  const std::int64_t strides64[3] = {1, g.nx, std::int64_t(g.nx) * g.ny};
  const int estr[3] = {dims[0] == 1 ? 0 : int(strides64[0]),
                       dims[1] == 1 ? 0 : int(strides64[1]),
                       dims[2] == 1 ? 0 : int(strides64[2])};
  const __m128i pidx = _mm_setr_epi32(0, 3, 6, 9);
  const __m256d vinv = _mm256_set1_pd(inv_cell);
  const __m256d half = _mm256_set1_pd(0.5);
  const __m256d zero = _mm256_setzero_pd();
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* base = pts + 3 * i;
    __m128i ibase[3];
    __m256d t[3], clampm[3];
    for (int a = 0; a < 3; ++a) {
      __m256d p = _mm256_i32gather_pd(base + a, pidx, 8);
      __m256d u = _mm256_sub_pd(_mm256_mul_pd(_mm256_sub_pd(p, _mm256_set1_pd(o3[a])), vinv), half);
      if (dims[a] == 1) {
        ibase[a] = _mm_setzero_si128();
        t[a] = zero;
        clampm[a] = _mm256_castsi256_pd(_mm256_set1_epi64x(-1));
        continue;
      }
      __m256d top = _mm256_set1_pd(double(dims[a] - 1));
      __m256d cl = _mm256_or_pd(_mm256_cmp_pd(u, zero, _CMP_LT_OQ), _mm256_cmp_pd(u, top, _CMP_GT_OQ));
      u = _mm256_min_pd(_mm256_max_pd(u, zero), top);
      __m128i i0 = _mm256_cvttpd_epi32(_mm256_floor_pd(u));
      i0 = _mm_min_epi32(i0, _mm_set1_epi32(dims[a] - 2));
      ibase[a] = i0;
      t[a] = _mm256_sub_pd(u, _mm256_cvtepi32_pd(i0));
      clampm[a] = cl;
    }
    __m128i lin = _mm_add_epi32(
        _mm_mullo_epi32(_mm_add_epi32(_mm_mullo_epi32(ibase[2], _mm_set1_epi32(dims[1])), ibase[1]),
                        _mm_set1_epi32(dims[0])),
        ibase[0]);
    auto corner = [&](int off) {
      __m128 f = _mm_i32gather_ps(g.dist, _mm_add_epi32(lin, _mm_set1_epi32(off)), 4);
      return _mm256_cvtps_pd(f);
    };
    __m256d c000 = corner(0);
    __m256d c100 = corner(estr[0]);
    __m256d c010 = corner(estr[1]);
    __m256d c110 = corner(estr[1] + estr[0]);
    __m256d c001 = corner(estr[2]);
    __m256d c101 = corner(estr[2] + estr[0]);
    __m256d c011 = corner(estr[2] + estr[1]);
    __m256d c111 = corner(estr[2] + estr[1] + estr[0]);
    auto lerp = [](__m256d a, __m256d b, __m256d tt) {
      return _mm256_add_pd(a, _mm256_mul_pd(tt, _mm256_sub_pd(b, a)));
    };
    __m256d tx = t[0], ty = t[1], tz = t[2];
    __m256d c00 = lerp(c000, c100, tx);
    __m256d c10 = lerp(c010, c110, tx);
    __m256d c01 = lerp(c001, c101, tx);
    __m256d c11 = lerp(c011, c111, tx);
    __m256d c0 = lerp(c00, c10, ty);
    __m256d c1 = lerp(c01, c11, ty);
    _mm256_storeu_pd(val + i, lerp(c0, c1, tz));
    __m256d gx = lerp(lerp(_mm256_sub_pd(c100, c000), _mm256_sub_pd(c110, c010), ty),
                      lerp(_mm256_sub_pd(c101, c001), _mm256_sub_pd(c111, c011), ty), tz);
    __m256d gy = lerp(_mm256_sub_pd(c10, c00), _mm256_sub_pd(c11, c01), tz);
    __m256d gz = _mm256_sub_pd(c1, c0);
    gx = _mm256_andnot_pd(clampm[0], _mm256_mul_pd(gx, vinv));
    gy = _mm256_andnot_pd(clampm[1], _mm256_mul_pd(gy, vinv));
    gz = _mm256_andnot_pd(clampm[2], _mm256_mul_pd(gz, vinv));
    alignas(32) double bx[4], by[4], bz[4];
    _mm256_store_pd(bx, gx);
    _mm256_store_pd(by, gy);
    _mm256_store_pd(bz, gz);
    for (int l = 0; l < 4; ++l) {
      grad[3 * (i + l) + 0] = bx[l];
      grad[3 * (i + l) + 1] = by[l];
      grad[3 * (i + l) + 2] = bz[l];
    }
  }
  if (i < n) scalar_kernels<double>().dt_query(g, pts + 3 * i, val + i, grad + 3 * i, n - i);
}

}  // namespace

template <>
const Kernels<float>& avx2_kernels<float>() {
  static const Kernels<float> k = [] {
    Kernels<float> t{};
    t.name = "avx2";
    t.linear_fwd = &linear_fwd_f32;
    t.gemm_tn_acc = &gemm_tn_acc_f32;
    t.gemm_nt = &gemm_nt_f32;
    t.relu = &relu_f32;
    t.relu_bwd = &relu_bwd_f32;
    t.colsum_acc = &colsum_acc_f32;
    t.adam_update = &adam_update_f32;
    t.nn_brute = &nn_brute_f32;
    t.dt_query = &dt_query_f32;
    return t;
  }();
  return k;
}

template <>
const Kernels<double>& avx2_kernels<double>() {
  static const Kernels<double> k = [] {
    Kernels<double> t{};
    t.name = "avx2";
    t.linear_fwd = &linear_fwd_f64;
    t.gemm_tn_acc = &gemm_tn_acc_f64;
    t.gemm_nt = &gemm_nt_f64;
    t.relu = &relu_f64;
    t.relu_bwd = &relu_bwd_f64;
    t.colsum_acc = &colsum_acc_f64;
    t.adam_update = &adam_update_f64;
    t.nn_brute = &nn_brute_f64;
    t.dt_query = &dt_query_f64;
    return t;
  }();
  return k;
}

}  // namespace fnsf::simd

#endif  // FNSF_WITH_AVX2
