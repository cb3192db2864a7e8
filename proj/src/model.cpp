#include "fnsf/model.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <string>

#include "fnsf/simd/kernels.hpp"

namespace fnsf {

namespace {

constexpr int kMaxAxisVerts = 512;
constexpr std::int64_t kMaxVerts = std::int64_t(1) << 22;

template <class T>
void build_offsets(MlpParams<T>& p) {
  p.w_off.clear();
  p.b_off.clear();
  std::int64_t off = 0;
  for (auto [in, out] : p.shapes) {
    p.w_off.push_back(off);
    off += std::int64_t(in) * out;
    p.b_off.push_back(off);
    off += out;
  }
  if (off >= std::numeric_limits<std::int32_t>::max())
    throw BudgetError("mlp: " + std::to_string(off) + " parameters exceeds the 2^31 cap");
  p.data.assign(std::size_t(off), T(0));
}

template <class V>
void put(std::string& s, const V& v) {
  s.append(reinterpret_cast<const char*>(&v), sizeof v);
}

struct Cursor {
  const char* p;
  const char* end;
  std::string path;

  void need(std::size_t k) const {
    if (std::size_t(end - p) < k) throw IoError(path + ": truncated");
  }
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, p, sizeof v);
    p += sizeof v;
    return v;
  }
};

}  // namespace

// ------------------------------------------------------------------ MLP

template <class T>
MlpParams<T> mlp_params(int width, int depth) {
  if (width < 1 || width > (1 << 16)) throw std::invalid_argument("mlp: width out of range");
  if (depth < 1 || depth > 256) throw std::invalid_argument("mlp: depth out of range");
  MlpParams<T> p;
  int layers = std::max(depth, 2);
  p.shapes.push_back({3, width});
  for (int l = 1; l + 1 < layers; ++l) p.shapes.push_back({width, width});
  p.shapes.push_back({width, 3});
  build_offsets(p);
  return p;
}

template <class T>
MlpParams<T> mlp_init(int width, int depth, std::uint64_t seed) {
  MlpParams<T> p = mlp_params<T>(width, depth);
  Rng rng(seed);
  for (int l = 0; l < p.layers(); ++l) {
    const int in = p.shapes[std::size_t(l)][0], out = p.shapes[std::size_t(l)][1];
    const double bound = 1.0 / std::sqrt(double(in));
    T* w = p.w(l);
    for (std::int64_t i = 0; i < std::int64_t(in) * out; ++i)
      w[i] = T(rng.uniform(-bound, bound));
    // biases stay zero
  }
  return p;
}

template <class T>
void mlp_forward(const MlpParams<T>& params, const T* pts, std::int64_t n, T* flow,
                 MlpTape<T>* tape) {
  const int L = params.layers();
  if (L < 2) throw std::invalid_argument("mlp_forward: malformed parameter block");
  if (params.shapes.front()[0] != 3 || params.shapes.back()[1] != 3)
    throw std::invalid_argument("mlp_forward: model is not 3 -> 3");
  if (n < 0) throw std::invalid_argument("mlp_forward: negative count");
  const auto& k = simd::active<T>();
  std::vector<T> ping, pong;
  if (tape) {
    tape->n = n;
    tape->act.resize(std::size_t(L));
    tape->act[0].assign(pts, pts + 3 * n);
  }
  const T* x = pts;
  for (int l = 0; l < L; ++l) {
    const int in = params.shapes[std::size_t(l)][0], out = params.shapes[std::size_t(l)][1];
    const bool last = l == L - 1;
    T* y;
    if (last) {
      y = flow;
    } else {
      std::vector<T>& a = tape ? tape->act[std::size_t(l) + 1] : ((l & 1) ? pong : ping);
      a.resize(std::size_t(n) * out);
      y = a.data();
    }
    const T* w = params.w(l);
    const T* b = params.b(l);
    parallel_for(n, 2048, [&](std::int64_t rb, std::int64_t re) {
      k.linear_fwd(x + rb * in, w, b, y + rb * out, int(re - rb), in, out);
      // scan pre-activation: relu maps NaN to 0 and would hide it
      for (std::int64_t i = rb * out; i < re * out; ++i) {
        if (!std::isfinite(y[i]))
          throw NumericError("mlp_forward: non-finite value at layer " + std::to_string(l));
      }
      if (!last) k.relu(y + rb * out, (re - rb) * out);
    });
    x = y;
  }
}

template <class T>
MlpParams<T> mlp_backward(const MlpParams<T>& params, const MlpTape<T>& tape, const T* dflow) {
  const int L = params.layers();
  if (int(tape.act.size()) != L) throw std::invalid_argument("mlp_backward: tape does not match model");
  const std::int64_t n = tape.n;
  const auto& k = simd::active<T>();
  MlpParams<T> grads = MlpParams<T>::zeros_like(params);
  constexpr std::int64_t grain = 4096;
  std::vector<T> buf[2];
  int cur = 0;
  const T* dy = dflow;
  for (int l = L - 1; l >= 0; --l) {
    const int in = params.shapes[std::size_t(l)][0], out = params.shapes[std::size_t(l)][1];
    if (std::int64_t(tape.act[std::size_t(l)].size()) != n * in)
      throw std::invalid_argument("mlp_backward: tape does not match model");
    const T* a = tape.act[std::size_t(l)].data();
    T* dxp = nullptr;
    if (l > 0) {
      buf[cur].resize(std::size_t(n) * in);
      dxp = buf[cur].data();
    }
    const std::int64_t chunks = n > 0 ? (n + grain - 1) / grain : 0;
    const std::int64_t pb = std::int64_t(in) * out + out;  // weight block then bias block
    T* g = grads.data.data() + grads.w_off[std::size_t(l)];
    if (chunks <= 1) {
      if (n > 0) {
        k.gemm_tn_acc(a, dy, g, int(n), in, out);
        k.colsum_acc(dy, g + std::int64_t(in) * out, int(n), out);
        if (dxp) {
          k.gemm_nt(dy, params.w(l), dxp, int(n), out, in);
          k.relu_bwd(a, dxp, n * in);
        }
      }
    } else {
      // per-chunk accumulators, reduced in chunk order: the result depends on
      // the fixed chunk layout, not on the worker count
      std::vector<T> part(std::size_t(chunks) * pb, T(0));
      parallel_for(n, grain, [&](std::int64_t rb, std::int64_t re) {
        T* pw = part.data() + (rb / grain) * pb;
        k.gemm_tn_acc(a + rb * in, dy + rb * out, pw, int(re - rb), in, out);
        k.colsum_acc(dy + rb * out, pw + std::int64_t(in) * out, int(re - rb), out);
        if (dxp) {
          k.gemm_nt(dy + rb * out, params.w(l), dxp + rb * in, int(re - rb), out, in);
          k.relu_bwd(a + rb * in, dxp + rb * in, (re - rb) * in);
        }
      });
      for (std::int64_t c = 0; c < chunks; ++c) {
        const T* pc = part.data() + c * pb;
        for (std::int64_t i = 0; i < pb; ++i) g[i] += pc[i];
      }
    }
    if (l > 0) {
      dy = dxp;
      cur ^= 1;
    }
  }
  return grads;
}

namespace {
constexpr char kMlpMagic[4] = {'F', 'M', 'L', 'P'};
constexpr char kLinMagic[4] = {'F', 'L', 'I', 'N'};
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

void save_mlp(const std::filesystem::path& path, const MlpParams<float>& params) {
  std::string s;
  s.append(kMlpMagic, 4);
  put(s, kModelVersion);
  put(s, std::uint32_t(params.layers()));
  for (auto [in, out] : params.shapes) {
    put(s, std::uint32_t(in));
    put(s, std::uint32_t(out));
  }
  s.append(reinterpret_cast<const char*>(params.data.data()), params.data.size() * 4);
  write_file(path, s);
}

MlpParams<float> load_mlp(const std::filesystem::path& path) {
  std::string data = read_file(path);
  Cursor c{data.data(), data.data() + data.size(), path.string()};
  c.need(4);
  if (std::memcmp(c.p, kMlpMagic, 4) != 0) throw IoError(c.path + ": bad magic");
  c.p += 4;
  if (c.get<std::uint32_t>() != kModelVersion) throw IoError(c.path + ": unsupported version");
  std::uint32_t layers = c.get<std::uint32_t>();
  if (layers < 2 || layers > 256) throw IoError(c.path + ": implausible layer count");
  MlpParams<float> p;
  for (std::uint32_t l = 0; l < layers; ++l) {
    std::uint32_t in = c.get<std::uint32_t>();
    std::uint32_t out = c.get<std::uint32_t>();
    if (in < 1 || in > (1u << 16) || out < 1 || out > (1u << 16))
      throw IoError(c.path + ": implausible layer shape");
    if (l > 0 && int(in) != p.shapes.back()[1]) throw IoError(c.path + ": layer shapes do not chain");
    p.shapes.push_back({int(in), int(out)});
  }
  build_offsets(p);
  if (std::size_t(c.end - c.p) != p.data.size() * 4) throw IoError(c.path + ": size mismatch");
  std::memcpy(p.data.data(), c.p, p.data.size() * 4);
  for (float v : p.data) {
    if (!std::isfinite(v)) throw IoError(c.path + ": non-finite parameter");
  }
  return p;
}

// ------------------------------------------------- linear model + encoding

EncoderSpec make_encoder(const Aabb& box, double edge, double sigma) {
  if (!(edge > 0) || !std::isfinite(edge))
    throw std::invalid_argument("make_encoder: edge must be positive");
  if (!std::isfinite(sigma)) throw std::invalid_argument("make_encoder: sigma must be finite");
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(box.lo[std::size_t(a)]) || !std::isfinite(box.hi[std::size_t(a)]) ||
        box.hi[std::size_t(a)] < box.lo[std::size_t(a)])
      throw std::invalid_argument("make_encoder: malformed box");
  }
  EncoderSpec spec;
  spec.edge = edge;
  spec.sigma = sigma > 0 ? sigma : 2.0 * edge;
  std::vector<double>* axes[3] = {&spec.xs, &spec.ys, &spec.zs};
  for (int a = 0; a < 3; ++a) {
    const double lo = box.lo[std::size_t(a)], hi = box.hi[std::size_t(a)];
    double want = std::ceil((hi - lo) / edge - 1e-9) + 1;
    if (!(want <= kMaxAxisVerts))
      throw BudgetError("make_encoder: axis " + std::to_string(a) + " needs " +
                        std::to_string(std::int64_t(std::min(want, 1e18))) +
                        " vertices, cap is " + std::to_string(kMaxAxisVerts));
    int count = std::max(2, int(want));
    while (count <= kMaxAxisVerts && lo + (count - 1) * edge < hi) ++count;
    if (count > kMaxAxisVerts)
      throw BudgetError("make_encoder: axis " + std::to_string(a) + " exceeds the vertex cap");
    axes[a]->resize(std::size_t(count));
    for (int i = 0; i < count; ++i) (*axes[a])[std::size_t(i)] = lo + i * edge;
  }
  validate_encoder(spec);
  return spec;
}

void validate_encoder(const EncoderSpec& spec) {
  if (!(spec.edge > 0) || !std::isfinite(spec.edge))
    throw std::invalid_argument("encoder: edge must be positive");
  if (!(spec.sigma > 0) || !std::isfinite(spec.sigma))
    throw std::invalid_argument("encoder: sigma must be positive");
  const std::vector<double>* axes[3] = {&spec.xs, &spec.ys, &spec.zs};
  std::int64_t verts = 1;
  for (int a = 0; a < 3; ++a) {
    const auto& g = *axes[a];
    if (g.empty()) throw std::invalid_argument("encoder: each axis needs at least 1 vertex");
    if (std::int64_t(g.size()) > kMaxAxisVerts)
      throw BudgetError("encoder: axis " + std::to_string(a) + " exceeds the vertex cap");
    const double tol = 1e-9 * std::max(1.0, spec.edge);
    if (!std::isfinite(g.back()))
      throw std::invalid_argument("encoder: axis " + std::to_string(a) + " is not uniform");
    for (std::size_t i = 0; i + 1 < g.size(); ++i) {
      if (!std::isfinite(g[i]) || std::abs((g[i + 1] - g[i]) - spec.edge) > tol)
        throw std::invalid_argument("encoder: axis " + std::to_string(a) + " is not uniform");
    }
    verts *= std::int64_t(g.size());
  }
  if (verts > kMaxVerts)
    throw BudgetError("encoder: " + std::to_string(verts) + " vertices exceeds the cap of " +
                      std::to_string(kMaxVerts));
}

template <class T>
std::vector<T> gaussian_encode(std::span<const double> coords, std::span<const double> grid,
                               double sigma) {
  if (!(sigma > 0) || !std::isfinite(sigma))
    throw std::invalid_argument("gaussian_encode: sigma must be positive");
  std::vector<T> out(coords.size() * grid.size());
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    T* row = out.data() + i * grid.size();
    for (std::size_t j = 0; j < grid.size(); ++j) {
      const double d = coords[i] - grid[j];
      row[j] = T(std::exp(-(d * d) / denom));
    }
  }
  return out;
}

template <class T>
LinearParams<T> linear_init(const EncoderSpec& spec) {
  validate_encoder(spec);
  LinearParams<T> p;
  p.wx = int(spec.xs.size());
  p.wy = int(spec.ys.size());
  p.wz = int(spec.zs.size());
  p.w.assign(std::size_t(p.verts()) * 3, T(0));
  return p;
}

namespace {

template <class T>
std::vector<T> transposed(const std::vector<T>& m, std::size_t n) {
  std::vector<T> t(m.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * n + i] = m[i * n + j];
  return t;
}

}  // namespace

template <class T>
PreparedEncoder<T> prepare_encoder(const EncoderSpec& spec) {
  validate_encoder(spec);
  PreparedEncoder<T> enc;
  enc.spec = spec;
  enc.phix = gaussian_encode<T>(spec.xs, spec.xs, spec.sigma);
  enc.phiy = gaussian_encode<T>(spec.ys, spec.ys, spec.sigma);
  enc.phiz = gaussian_encode<T>(spec.zs, spec.zs, spec.sigma);
  enc.phixt = transposed(enc.phix, spec.xs.size());
  enc.phiyt = transposed(enc.phiy, spec.ys.size());
  enc.phizt = transposed(enc.phiz, spec.zs.size());
  return enc;
}

template <class T>
void blend_weights(const EncoderSpec& spec, const V3<T>& p, std::int32_t corners[8], T weights[8]) {
  const std::vector<double>* axes[3] = {&spec.xs, &spec.ys, &spec.zs};
  int idx[3][2];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const auto& g = *axes[a];
    const int d = int(g.size());
    double u = (double(p[std::size_t(a)]) - g[0]) / spec.edge;
    if (u < 0) u = 0;
    if (u > double(d - 1)) u = double(d - 1);
    int i0 = std::min(int(std::floor(u)), d - 2);
    if (i0 < 0) i0 = 0;  // single-vertex axis: both corners collapse onto it
    idx[a][0] = i0;
    idx[a][1] = std::min(i0 + 1, d - 1);
    t[a] = u - double(i0);
  }
  const int wx = int(spec.xs.size()), wy = int(spec.ys.size());
  const double fx[2] = {1.0 - t[0], t[0]};
  const double fy[2] = {1.0 - t[1], t[1]};
  const double fz[2] = {1.0 - t[2], t[2]};
  for (int cz = 0; cz < 2; ++cz) {
    for (int cy = 0; cy < 2; ++cy) {
      for (int cx = 0; cx < 2; ++cx) {
        const int c = cx + 2 * cy + 4 * cz;
        corners[c] = std::int32_t(
            (std::int64_t(idx[2][cz]) * wy + idx[1][cy]) * wx + idx[0][cx]);
        weights[c] = T(fx[cx] * fy[cy] * fz[cz]);
      }
    }
  }
}

namespace {

// G = W contracted with phi along each axis, via three dense multiplies; the
// (k*wy + j)*wx + i layout makes every mode a contiguous row-major product.
template <class T>
void contract_modes(const LinearParams<T>& params, const std::vector<T>& px,
                    const std::vector<T>& py, const std::vector<T>& pz, const T* w, T* out) {
  const auto& k = simd::active<T>();
  const int wx = params.wx, wy = params.wy, wz = params.wz;
  std::vector<T> a(std::size_t(params.verts()) * 3), b(std::size_t(params.verts()) * 3);
  for (std::int64_t blk = 0; blk < std::int64_t(wz) * wy; ++blk)
    k.linear_fwd(px.data(), w + blk * wx * 3, nullptr, a.data() + blk * wx * 3, wx, wx, 3);
  const std::int64_t slab = std::int64_t(wy) * wx * 3;
  for (int kz = 0; kz < wz; ++kz)
    k.linear_fwd(py.data(), a.data() + kz * slab, nullptr, b.data() + kz * slab, wy, wy,
                 int(std::int64_t(wx) * 3));
  k.linear_fwd(pz.data(), b.data(), nullptr, out, wz, wz, int(slab));
}

template <class T>
void check_linear_dims(const LinearParams<T>& params, const PreparedEncoder<T>& enc) {
  if (params.wx != int(enc.spec.xs.size()) || params.wy != int(enc.spec.ys.size()) ||
      params.wz != int(enc.spec.zs.size()) ||
      std::int64_t(params.w.size()) != params.verts() * 3)
    throw std::invalid_argument("linear model: parameter dims do not match the encoder");
}

}  // namespace

template <class T>
void linear_flow(const LinearParams<T>& params, const PreparedEncoder<T>& enc, const T* pts,
                 std::int64_t n, T* flow, LinearTape<T>* tape) {
  check_linear_dims(params, enc);
  if (n < 0) throw std::invalid_argument("linear_flow: negative count");
  std::vector<T> g(std::size_t(params.verts()) * 3);
  contract_modes(params, enc.phix, enc.phiy, enc.phiz, params.w.data(), g.data());
  for (T v : g) {
    if (!std::isfinite(v)) throw NumericError("linear_flow: non-finite lattice value");
  }
  if (tape) {
    tape->n = n;
    tape->corners.resize(std::size_t(n) * 8);
    tape->bw.resize(std::size_t(n) * 8);
  }
  parallel_for(n, 4096, [&](std::int64_t rb, std::int64_t re) {
    for (std::int64_t i = rb; i < re; ++i) {
      std::int32_t corners[8];
      T bw[8];
      blend_weights(enc.spec, V3<T>{pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]}, corners, bw);
      T fx = 0, fy = 0, fz = 0;
      for (int c = 0; c < 8; ++c) {
        const T* gc = g.data() + std::int64_t(corners[c]) * 3;
        fx += bw[c] * gc[0];
        fy += bw[c] * gc[1];
        fz += bw[c] * gc[2];
      }
      flow[3 * i + 0] = fx;
      flow[3 * i + 1] = fy;
      flow[3 * i + 2] = fz;
      if (tape) {
        std::copy(corners, corners + 8, tape->corners.data() + 8 * i);
        std::copy(bw, bw + 8, tape->bw.data() + 8 * i);
      }
    }
  });
}

template <class T>
LinearParams<T> linear_backward(const LinearParams<T>& params, const PreparedEncoder<T>& enc,
                                const LinearTape<T>& tape, const T* dflow) {
  check_linear_dims(params, enc);
  if (std::int64_t(tape.corners.size()) != tape.n * 8 ||
      std::int64_t(tape.bw.size()) != tape.n * 8)
    throw std::invalid_argument("linear_backward: tape does not match");
  std::vector<T> dg(std::size_t(params.verts()) * 3, T(0));
  for (std::int64_t i = 0; i < tape.n; ++i) {
    for (int c = 0; c < 8; ++c) {
      T* slot = dg.data() + std::int64_t(tape.corners[std::size_t(8 * i + c)]) * 3;
      const T w = tape.bw[std::size_t(8 * i + c)];
      slot[0] += w * dflow[3 * i + 0];
      slot[1] += w * dflow[3 * i + 1];
      slot[2] += w * dflow[3 * i + 2];
    }
  }
  LinearParams<T> grads;
  grads.wx = params.wx;
  grads.wy = params.wy;
  grads.wz = params.wz;
  grads.w.resize(std::size_t(params.verts()) * 3);
  // adjoint of the forward contraction: same shape, transposed factors
  contract_modes(params, enc.phixt, enc.phiyt, enc.phizt, dg.data(), grads.w.data());
  return grads;
}

template <class T>
TvResult<T> tv_reg(const LinearParams<T>& params, double eps) {
  const int wx = params.wx, wy = params.wy, wz = params.wz;
  if (wx < 2 || wy < 2 || wz < 2)
    throw std::invalid_argument("tv_reg: needs at least 2 vertices per axis");
  if (!(eps >= 0) || !std::isfinite(eps)) throw std::invalid_argument("tv_reg: bad eps");
  if (std::int64_t(params.w.size()) != params.verts() * 3)
    throw std::invalid_argument("tv_reg: malformed parameter block");
  const T* w = params.w.data();
  std::vector<double> acc(params.w.size(), 0.0);
  const double inv_count = 1.0 / (double(wx - 1) * double(wy - 1) * double(wz - 1));
  double total = 0;
  auto at = [&](int i, int j, int k) {
    return ((std::int64_t(k) * wy + j) * wx + i) * 3;
  };
  for (int k = 0; k + 1 < wz; ++k) {
    for (int j = 0; j + 1 < wy; ++j) {
      for (int i = 0; i + 1 < wx; ++i) {
        const std::int64_t s = at(i, j, k);
        const std::int64_t sx = at(i + 1, j, k), sy = at(i, j + 1, k), sz = at(i, j, k + 1);
        double dx[3], dy[3], dz[3];
        double ss = eps;
        for (int m = 0; m < 3; ++m) {
          dx[m] = double(w[sx + m]) - double(w[s + m]);
          dy[m] = double(w[sy + m]) - double(w[s + m]);
          dz[m] = double(w[sz + m]) - double(w[s + m]);
          ss += dx[m] * dx[m] + dy[m] * dy[m] + dz[m] * dz[m];
        }
        const double r = std::sqrt(ss);
        total += r;
        if (r > 0) {
          const double ir = inv_count / r;
          for (int m = 0; m < 3; ++m) {
            acc[std::size_t(sx + m)] += dx[m] * ir;
            acc[std::size_t(sy + m)] += dy[m] * ir;
            acc[std::size_t(sz + m)] += dz[m] * ir;
            acc[std::size_t(s + m)] -= (dx[m] + dy[m] + dz[m]) * ir;
          }
        }
      }
    }
  }
  TvResult<T> res;
  res.value = total * inv_count;
  res.grad.wx = wx;
  res.grad.wy = wy;
  res.grad.wz = wz;
  res.grad.w.resize(params.w.size());
  for (std::size_t i = 0; i < acc.size(); ++i) res.grad.w[i] = T(acc[i]);
  return res;
}

void save_linear(const std::filesystem::path& path, const LinearParams<float>& params) {
  if (std::int64_t(params.w.size()) != params.verts() * 3)
    throw std::invalid_argument("save_linear: malformed parameter block");
  std::string s;
  s.append(kLinMagic, 4);
  put(s, kModelVersion);
  put(s, std::uint32_t(params.wx));
  put(s, std::uint32_t(params.wy));
  put(s, std::uint32_t(params.wz));
  s.append(reinterpret_cast<const char*>(params.w.data()), params.w.size() * 4);
  write_file(path, s);
}

LinearParams<float> load_linear(const std::filesystem::path& path) {
  std::string data = read_file(path);
  Cursor c{data.data(), data.data() + data.size(), path.string()};
  c.need(4);
  if (std::memcmp(c.p, kLinMagic, 4) != 0) throw IoError(c.path + ": bad magic");
  c.p += 4;
  if (c.get<std::uint32_t>() != kModelVersion) throw IoError(c.path + ": unsupported version");
  LinearParams<float> p;
  std::uint32_t d[3];
  for (auto& v : d) {
    v = c.get<std::uint32_t>();
    if (v < 1 || v > std::uint32_t(kMaxAxisVerts)) throw IoError(c.path + ": implausible dims");
  }
  p.wx = int(d[0]);
  p.wy = int(d[1]);
  p.wz = int(d[2]);
  if (p.verts() > kMaxVerts) throw IoError(c.path + ": implausible dims");
  p.w.resize(std::size_t(p.verts()) * 3);
  if (std::size_t(c.end - c.p) != p.w.size() * 4) throw IoError(c.path + ": size mismatch");
  std::memcpy(p.w.data(), c.p, p.w.size() * 4);
  for (float v : p.w) {
    if (!std::isfinite(v)) throw IoError(c.path + ": non-finite parameter");
  }
  return p;
}

// ------------------------------------------------------------------ Adam

template <class T>
AdamState<T> adam_init(std::int64_t nparams, AdamConfig<T> cfg) {
  if (nparams < 0) throw std::invalid_argument("adam_init: negative size");
  if (!(cfg.lr > 0) || !std::isfinite(double(cfg.lr)))
    throw std::invalid_argument("adam_init: lr must be positive");
  if (!(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1))
    throw std::invalid_argument("adam_init: betas must lie in [0,1)");
  if (!(cfg.eps > 0)) throw std::invalid_argument("adam_init: eps must be positive");
  AdamState<T> s;
  s.cfg = cfg;
  s.m.assign(std::size_t(nparams), T(0));
  s.v.assign(std::size_t(nparams), T(0));
  return s;
}

template <class T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads) {
  if (params.size() != state.m.size() || grads.size() != state.m.size())
    throw std::invalid_argument("adam_step: size mismatch");
  for (T g : grads) {
    if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
  }
  ++state.step;
  const T c1 = T(1.0 / (1.0 - std::pow(double(state.cfg.beta1), double(state.step))));
  const T c2 = T(1.0 / (1.0 - std::pow(double(state.cfg.beta2), double(state.step))));
  const auto& k = simd::active<T>();
  const AdamConfig<T>& c = state.cfg;
  parallel_for(std::int64_t(params.size()), 65536, [&](std::int64_t b, std::int64_t e) {
    k.adam_update(params.data() + b, state.m.data() + b, state.v.data() + b, grads.data() + b,
                  e - b, c.lr, c.beta1, c.beta2, c.eps, c1, c2);
  });
}

template MlpParams<float> mlp_params<float>(int, int);
template MlpParams<double> mlp_params<double>(int, int);
template MlpParams<float> mlp_init<float>(int, int, std::uint64_t);
template MlpParams<double> mlp_init<double>(int, int, std::uint64_t);
template void mlp_forward<float>(const MlpParams<float>&, const float*, std::int64_t, float*, MlpTape<float>*);
template void mlp_forward<double>(const MlpParams<double>&, const double*, std::int64_t, double*, MlpTape<double>*);
template MlpParams<float> mlp_backward<float>(const MlpParams<float>&, const MlpTape<float>&, const float*);
template MlpParams<double> mlp_backward<double>(const MlpParams<double>&, const MlpTape<double>&, const double*);
template std::vector<float> gaussian_encode<float>(std::span<const double>, std::span<const double>, double);
template std::vector<double> gaussian_encode<double>(std::span<const double>, std::span<const double>, double);
template LinearParams<float> linear_init<float>(const EncoderSpec&);
template LinearParams<double> linear_init<double>(const EncoderSpec&);
template PreparedEncoder<float> prepare_encoder<float>(const EncoderSpec&);
template PreparedEncoder<double> prepare_encoder<double>(const EncoderSpec&);
template void blend_weights<float>(const EncoderSpec&, const V3<float>&, std::int32_t[8], float[8]);
template void blend_weights<double>(const EncoderSpec&, const V3<double>&, std::int32_t[8], double[8]);
template void linear_flow<float>(const LinearParams<float>&, const PreparedEncoder<float>&, const float*, std::int64_t, float*, LinearTape<float>*);
template void linear_flow<double>(const LinearParams<double>&, const PreparedEncoder<double>&, const double*, std::int64_t, double*, LinearTape<double>*);
template LinearParams<float> linear_backward<float>(const LinearParams<float>&, const PreparedEncoder<float>&, const LinearTape<float>&, const float*);
template LinearParams<double> linear_backward<double>(const LinearParams<double>&, const PreparedEncoder<double>&, const LinearTape<double>&, const double*);
template TvResult<float> tv_reg<float>(const LinearParams<float>&, double);
template TvResult<double> tv_reg<double>(const LinearParams<double>&, double);
template AdamState<float> adam_init<float>(std::int64_t, AdamConfig<float>);
template AdamState<double> adam_init<double>(std::int64_t, AdamConfig<double>);
template void adam_step<float>(AdamState<float>&, std::span<float>, std::span<const float>);
template void adam_step<double>(AdamState<double>&, std::span<double>, std::span<const double>);

}  // namespace fnsf
