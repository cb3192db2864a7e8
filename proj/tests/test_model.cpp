#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "fnsf/model.hpp"

namespace {

namespace fs = std::filesystem;

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() /
           ("fnsf_model_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const char* name) const { return path / name; }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

struct EnvGuard {
  std::string name;
  std::optional<std::string> old;
  EnvGuard(const char* n, const char* value) : name(n) {
    if (const char* p = std::getenv(n)) old = p;
    ::setenv(n, value, 1);
  }
  ~EnvGuard() {
    if (old)
      ::setenv(name.c_str(), old->c_str(), 1);
    else
      ::unsetenv(name.c_str());
  }
};

template <class E, class F>
std::string thrown(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  } catch (...) {
    return "<wrong exception type>";
  }
  return "<no exception>";
}

template <class T>
void fill_uniform(fnsf::Rng& rng, std::vector<T>& v, double lo, double hi) {
  for (auto& x : v) x = T(rng.uniform(lo, hi));
}

// w is (in x out) row-major; identity embeds the first min(in,out) channels.
template <class T>
void set_identity(T* w, int in, int out) {
  std::fill(w, w + std::int64_t(in) * out, T(0));
  for (int i = 0; i < std::min(in, out); ++i) w[i * out + i] = T(1);
}

template <class T>
double mlp_loss(const fnsf::MlpParams<T>& p, const std::vector<T>& pts,
                const std::vector<T>& dflow) {
  const std::int64_t n = std::int64_t(pts.size()) / 3;
  std::vector<T> fl(pts.size());
  fnsf::mlp_forward(p, pts.data(), n, fl.data(), static_cast<fnsf::MlpTape<T>*>(nullptr));
  double s = 0;
  for (std::size_t i = 0; i < fl.size(); ++i) s += double(dflow[i]) * double(fl[i]);
  return s;
}

// Rank of a tall matrix (rows x cols, row-major) via Jacobi eigenvalues of
// A^T A. Cutoff is relative to the largest eigenvalue.
int matrix_rank(const std::vector<double>& a, int rows, int cols) {
  std::vector<double> g(std::size_t(cols) * cols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < cols; ++i)
      for (int j = 0; j < cols; ++j)
        g[std::size_t(i) * cols + j] += a[std::size_t(r) * cols + i] * a[std::size_t(r) * cols + j];
  auto& m = g;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int p = 0; p < cols; ++p)
      for (int q = p + 1; q < cols; ++q) off += m[std::size_t(p) * cols + q] * m[std::size_t(p) * cols + q];
    if (off < 1e-26) break;
    for (int p = 0; p < cols; ++p) {
      for (int q = p + 1; q < cols; ++q) {
        const double apq = m[std::size_t(p) * cols + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = m[std::size_t(p) * cols + p], aqq = m[std::size_t(q) * cols + q];
        const double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
        const double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < cols; ++k) {
          const double akp = m[std::size_t(k) * cols + p], akq = m[std::size_t(k) * cols + q];
          m[std::size_t(k) * cols + p] = c * akp - s * akq;
          m[std::size_t(k) * cols + q] = s * akp + c * akq;
        }
        for (int k = 0; k < cols; ++k) {
          const double apk = m[std::size_t(p) * cols + k], aqk = m[std::size_t(q) * cols + k];
          m[std::size_t(p) * cols + k] = c * apk - s * aqk;
          m[std::size_t(q) * cols + k] = s * apk + c * aqk;
        }
      }
    }
  }
  double lmax = 0;
  for (int i = 0; i < cols; ++i) lmax = std::max(lmax, m[std::size_t(i) * cols + i]);
  if (lmax <= 0) return 0;
  int rank = 0;
  for (int i = 0; i < cols; ++i)
    if (m[std::size_t(i) * cols + i] > 1e-8 * lmax) ++rank;
  return rank;
}

fnsf::EncoderSpec grid_spec(std::vector<double> xs, std::vector<double> ys, std::vector<double> zs,
                            double edge, double sigma) {
  fnsf::EncoderSpec s;
  s.xs = std::move(xs);
  s.ys = std::move(ys);
  s.zs = std::move(zs);
  s.edge = edge;
  s.sigma = sigma;
  return s;
}

}  // namespace

TEST_CASE("mlp layer stack and parameter count") {
  auto p = fnsf::mlp_params<float>(128, 8);
  CHECK(p.layers() == 8);
  CHECK(p.shapes.front() == std::array<int, 2>{3, 128});
  CHECK(p.shapes.back() == std::array<int, 2>{128, 3});
  for (int l = 1; l + 1 < p.layers(); ++l) CHECK(p.shapes[std::size_t(l)] == std::array<int, 2>{128, 128});
  const std::int64_t expect = (3 * 128 + 128) + 6 * (128 * 128 + 128) + (128 * 3 + 3);
  CHECK(p.count() == expect);
  for (float v : p.data) CHECK(v == 0.0f);

  // layer shapes chain even when depth degenerates
  auto tiny = fnsf::mlp_params<double>(16, 1);
  CHECK(tiny.layers() == 2);
  CHECK(tiny.shapes[0] == std::array<int, 2>{3, 16});
  CHECK(tiny.shapes[1] == std::array<int, 2>{16, 3});

  CHECK_THROWS_AS(fnsf::mlp_params<float>(0, 4), std::invalid_argument);
  CHECK_THROWS_AS(fnsf::mlp_params<float>(8, 0), std::invalid_argument);
  CHECK_THROWS_AS(fnsf::mlp_params<float>(1 << 17, 4), std::invalid_argument);
  CHECK_THROWS_AS(fnsf::mlp_params<float>(8, 300), std::invalid_argument);
}

TEST_CASE("mlp init is seeded, bounded, and zero-biased") {
  auto a = fnsf::mlp_init<float>(32, 4, 7);
  auto b = fnsf::mlp_init<float>(32, 4, 7);
  auto c = fnsf::mlp_init<float>(32, 4, 8);
  REQUIRE(a.data.size() == b.data.size());
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(a.data.data(), c.data.data(), a.data.size() * sizeof(float)) != 0);

  for (int l = 0; l < a.layers(); ++l) {
    const int in = a.shapes[std::size_t(l)][0], out = a.shapes[std::size_t(l)][1];
    const float bound = float(1.0 / std::sqrt(double(in)));
    const float* w = a.w(l);
    for (std::int64_t i = 0; i < std::int64_t(in) * out; ++i) {
      CHECK(w[i] >= -bound);
      CHECK(w[i] <= bound);
    }
    const float* bias = a.b(l);
    for (int o = 0; o < out; ++o) CHECK(bias[o] == 0.0f);
  }
}

TEST_CASE("hand-built identity stack forwards exactly and clips negatives") {
  auto p = fnsf::mlp_params<float>(4, 2);
  set_identity(p.w(0), 3, 4);
  set_identity(p.w(1), 4, 3);

  const std::vector<float> pts = {0.5f, 1.25f, 0.125f, 2.0f, 0.75f, 1.5f};
  std::vector<float> flow(6, -1.0f);
  fnsf::MlpTape<float> tape;
  fnsf::mlp_forward(p, pts.data(), 2, flow.data(), &tape);
  for (int i = 0; i < 6; ++i) CHECK(flow[std::size_t(i)] == pts[std::size_t(i)]);

  CHECK(tape.n == 2);
  REQUIRE(tape.act.size() == 2);
  REQUIRE(tape.act[0].size() == 6);
  CHECK(std::memcmp(tape.act[0].data(), pts.data(), 6 * sizeof(float)) == 0);
  // hidden activation embeds the point, fourth channel dead
  REQUIRE(tape.act[1].size() == 8);
  CHECK(tape.act[1][0] == 0.5f);
  CHECK(tape.act[1][3] == 0.0f);

  // negative coordinates die at the hidden relu
  const std::vector<float> neg = {-0.5f, 0.25f, -2.0f};
  std::vector<float> out(3);
  fnsf::mlp_forward(p, neg.data(), 1, out.data(), static_cast<fnsf::MlpTape<float>*>(nullptr));
  CHECK(out[0] == 0.0f);
  CHECK(out[1] == 0.25f);
  CHECK(out[2] == 0.0f);

  // output-layer bias shifts the flow verbatim
  p.b(1)[0] = 0.25f;
  p.b(1)[2] = -1.5f;
  fnsf::mlp_forward(p, pts.data(), 2, flow.data(), static_cast<fnsf::MlpTape<float>*>(nullptr));
  CHECK(flow[0] == 0.75f);
  CHECK(flow[2] == 0.125f - 1.5f);
  CHECK(flow[3] == 2.25f);
}

TEST_CASE("mlp forward names the layer that went non-finite") {
  auto p = fnsf::mlp_init<float>(8, 3, 11);
  const std::vector<float> pts = {0.1f, 0.2f, 0.3f};
  std::vector<float> flow(3);

  auto bad = p;
  bad.w(1)[5] = std::numeric_limits<float>::infinity();
  auto msg = thrown<fnsf::NumericError>(
      [&] { fnsf::mlp_forward(bad, pts.data(), 1, flow.data(), static_cast<fnsf::MlpTape<float>*>(nullptr)); });
  CHECK(msg.find("layer 1") != std::string::npos);

  const std::vector<float> nan_pts = {std::numeric_limits<float>::quiet_NaN(), 0.0f, 0.0f};
  msg = thrown<fnsf::NumericError>(
      [&] { fnsf::mlp_forward(p, nan_pts.data(), 1, flow.data(), static_cast<fnsf::MlpTape<float>*>(nullptr)); });
  CHECK(msg.find("layer 0") != std::string::npos);
}

TEST_CASE("mlp gradients match central differences in double") {
  const int width = 8, depth = 3;
  const std::int64_t n = 24;
  auto p = fnsf::mlp_init<double>(width, depth, 2024);
  fnsf::Rng rng(515151);
  std::vector<double> pts(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, pts, -1.0, 1.0);
  fill_uniform(rng, dflow, -1.0, 1.0);

  fnsf::MlpTape<double> tape;
  std::vector<double> fl(std::size_t(3 * n));
  fnsf::mlp_forward(p, pts.data(), n, fl.data(), &tape);
  auto g = fnsf::mlp_backward(p, tape, dflow.data());
  REQUIRE(g.count() == p.count());

  const double h = 1e-5;
  double worst = 0;
  for (std::int64_t i = 0; i < p.count(); ++i) {
    auto q = p;
    q.data[std::size_t(i)] += h;
    const double up = mlp_loss(q, pts, dflow);
    q.data[std::size_t(i)] -= 2 * h;
    const double dn = mlp_loss(q, pts, dflow);
    const double fd = (up - dn) / (2 * h);
    const double an = g.data[std::size_t(i)];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, rel);
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("zero parameters give zero flow and gradient only on the last bias") {
  auto p = fnsf::mlp_params<double>(16, 4);
  const std::int64_t n = 10;
  fnsf::Rng rng(99);
  std::vector<double> pts(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, pts, -2.0, 2.0);
  fill_uniform(rng, dflow, -1.0, 1.0);

  fnsf::MlpTape<double> tape;
  std::vector<double> fl(std::size_t(3 * n), 7.0);
  fnsf::mlp_forward(p, pts.data(), n, fl.data(), &tape);
  for (double v : fl) CHECK(v == 0.0);

  auto g = fnsf::mlp_backward(p, tape, dflow.data());
  const std::int64_t bias_at = g.b_off.back();
  for (std::int64_t i = 0; i < g.count(); ++i) {
    if (i >= bias_at) continue;
    CHECK(g.data[std::size_t(i)] == 0.0);
  }
  for (int ch = 0; ch < 3; ++ch) {
    double want = 0;
    for (std::int64_t i = 0; i < n; ++i) want += dflow[std::size_t(3 * i + ch)];
    CHECK(g.data[std::size_t(bias_at + ch)] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("mlp gradient reduction does not depend on the worker count") {
  auto p = fnsf::mlp_init<float>(16, 3, 5);
  const std::int64_t n = 9000;  // several reduction chunks
  fnsf::Rng rng(4242);
  std::vector<float> pts(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, pts, -1.0, 1.0);
  fill_uniform(rng, dflow, -1.0, 1.0);

  auto run = [&] {
    fnsf::MlpTape<float> tape;
    std::vector<float> fl(std::size_t(3 * n));
    fnsf::mlp_forward(p, pts.data(), n, fl.data(), &tape);
    return fnsf::mlp_backward(p, tape, dflow.data());
  };
  fnsf::MlpParams<float> g1, g4;
  {
    EnvGuard env("FNSF_THREADS", "1");
    g1 = run();
  }
  {
    EnvGuard env("FNSF_THREADS", "4");
    g4 = run();
  }
  REQUIRE(g1.data.size() == g4.data.size());
  CHECK(std::memcmp(g1.data.data(), g4.data.data(), g1.data.size() * sizeof(float)) == 0);
}

TEST_CASE("mlp checkpoint round trips bit-exactly and rejects damage") {
  TmpDir tmp;
  auto p = fnsf::mlp_init<float>(8, 3, 31);
  const fs::path file = tmp / "model.fmlp";
  fnsf::save_mlp(file, p);

  auto q = fnsf::load_mlp(file);
  REQUIRE(q.data.size() == p.data.size());
  CHECK(q.shapes == p.shapes);
  CHECK(std::memcmp(q.data.data(), p.data.data(), p.data.size() * sizeof(float)) == 0);

  std::string raw;
  {
    std::ifstream in(file, std::ios::binary);
    raw.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  {
    std::string bad = raw;
    bad[0] = 'X';
    std::ofstream(tmp / "magic.fmlp", std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
    CHECK_THROWS_AS(fnsf::load_mlp(tmp / "magic.fmlp"), fnsf::IoError);
  }
  {
    std::string bad = raw.substr(0, raw.size() - 5);
    std::ofstream(tmp / "short.fmlp", std::ios::binary).write(bad.data(), std::streamsize(bad.size()));
    CHECK_THROWS_AS(fnsf::load_mlp(tmp / "short.fmlp"), fnsf::IoError);
  }
  {
    auto bad_params = p;
    bad_params.data[10] = std::numeric_limits<float>::quiet_NaN();
    fnsf::save_mlp(tmp / "nan.fmlp", bad_params);
    auto msg = thrown<fnsf::IoError>([&] { fnsf::load_mlp(tmp / "nan.fmlp"); });
    CHECK(msg.find("non-finite") != std::string::npos);
  }
}

TEST_CASE("encoder construction covers the box on a uniform lattice") {
  fnsf::Aabb box{{0, 0, 0}, {10, 10, 10}};
  auto spec = fnsf::make_encoder(box, 2.0);
  const std::vector<double> want = {0, 2, 4, 6, 8, 10};
  CHECK(spec.xs == want);
  CHECK(spec.ys == want);
  CHECK(spec.zs == want);
  CHECK(spec.edge == 2.0);
  CHECK(spec.sigma == 4.0);  // 2 * edge default

  auto s2 = fnsf::make_encoder(box, 2.0, 1.5);
  CHECK(s2.sigma == 1.5);

  // a box thinner than one cell still gets two vertices
  auto thin = fnsf::make_encoder({{0, 0, 0}, {1, 1, 1}}, 2.0);
  CHECK(thin.xs.size() == 2);
  CHECK(thin.xs[0] == 0.0);
  CHECK(thin.xs[1] == 2.0);

  // a non-multiple extent rounds the lattice up past the box
  auto odd = fnsf::make_encoder({{0, 0, 0}, {3, 3, 3}}, 2.0);
  CHECK(odd.xs == std::vector<double>{0, 2, 4});
  CHECK(odd.xs.back() >= 3.0);
}

TEST_CASE("encoder validation enforces uniformity and budgets") {
  CHECK_NOTHROW(fnsf::validate_encoder(grid_spec({0.5}, {0.5}, {0.5}, 1.0, 0.7)));

  CHECK_THROWS_AS(fnsf::validate_encoder(grid_spec({0, 1, 2.5}, {0, 1}, {0, 1}, 1.0, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(fnsf::validate_encoder(grid_spec({}, {0, 1}, {0, 1}, 1.0, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(fnsf::validate_encoder(grid_spec({0, 1}, {0, 1}, {0, 1}, 0.0, 1.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(fnsf::validate_encoder(grid_spec({0, 1}, {0, 1}, {0, 1}, 1.0, -2.0)),
                  std::invalid_argument);

  std::vector<double> big(513);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = double(i);
  CHECK_THROWS_AS(fnsf::validate_encoder(grid_spec(big, {0, 1}, {0, 1}, 1.0, 1.0)),
                  fnsf::BudgetError);

  std::vector<double> wide(200);
  for (std::size_t i = 0; i < wide.size(); ++i) wide[i] = double(i);
  auto msg = thrown<fnsf::BudgetError>(
      [&] { fnsf::validate_encoder(grid_spec(wide, wide, wide, 1.0, 1.0)); });
  CHECK(msg.find("cap") != std::string::npos);
}

TEST_CASE("gaussian encoding matches the closed form") {
  const std::vector<double> coords = {0.0, 1.0};
  const std::vector<double> grid = {0.0, 2.0};
  auto e = fnsf::gaussian_encode<double>(coords, grid, 2.0);
  REQUIRE(e.size() == 4);
  CHECK(e[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(std::exp(-0.5)).epsilon(1e-14));   // d=2, sigma=2
  CHECK(e[2] == doctest::Approx(std::exp(-0.125)).epsilon(1e-14)); // d=1
  CHECK(e[3] == doctest::Approx(std::exp(-0.125)).epsilon(1e-14));

  auto ef = fnsf::gaussian_encode<float>(coords, grid, 2.0);
  for (int i = 0; i < 4; ++i) CHECK(double(ef[std::size_t(i)]) == doctest::Approx(e[std::size_t(i)]).epsilon(1e-6));

  CHECK_THROWS_AS(fnsf::gaussian_encode<double>(coords, grid, 0.0), std::invalid_argument);
}

TEST_CASE("prepared encoder matrices are symmetric with unit diagonal") {
  auto spec = fnsf::make_encoder({{0, 0, 0}, {6, 4, 2}}, 2.0);
  auto enc = fnsf::prepare_encoder<double>(spec);
  const int wx = int(spec.xs.size());
  REQUIRE(std::int64_t(enc.phix.size()) == std::int64_t(wx) * wx);
  for (int i = 0; i < wx; ++i) {
    CHECK(enc.phix[std::size_t(i) * wx + i] == doctest::Approx(1.0).epsilon(1e-15));
    for (int j = 0; j < wx; ++j) {
      CHECK(enc.phix[std::size_t(i) * wx + j] ==
            doctest::Approx(enc.phix[std::size_t(j) * wx + i]).epsilon(1e-15));
      CHECK(enc.phixt[std::size_t(j) * wx + i] == enc.phix[std::size_t(i) * wx + j]);
    }
  }
}

TEST_CASE("blend weights form a partition of unity with in-range corners") {
  auto spec = fnsf::make_encoder({{-1, -1, -1}, {5, 3, 7}}, 1.5);
  const std::int64_t verts =
      std::int64_t(spec.xs.size()) * std::int64_t(spec.ys.size()) * std::int64_t(spec.zs.size());
  fnsf::Rng rng(808);
  for (int t = 0; t < 2000; ++t) {
    // includes points far outside the lattice
    fnsf::V3<double> p = {rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-20, 20)};
    std::int32_t corners[8];
    double w[8];
    fnsf::blend_weights(spec, p, corners, w);
    double sum = 0;
    for (int c = 0; c < 8; ++c) {
      CHECK(w[c] >= 0.0);
      CHECK(w[c] <= 1.0);
      CHECK(corners[c] >= 0);
      CHECK(corners[c] < verts);
      sum += w[c];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("blend weights at lattice vertices and clamped points") {
  auto spec = grid_spec({0, 1, 2}, {0, 1, 2}, {0, 1, 2}, 1.0, 2.0);
  std::int32_t corners[8];
  double w[8];

  // exact vertex (1,1,1) = spatial index (1 + 3 + 9) = 13
  fnsf::blend_weights(spec, fnsf::V3<double>{1, 1, 1}, corners, w);
  double mass_on_13 = 0;
  for (int c = 0; c < 8; ++c)
    if (corners[c] == 13) mass_on_13 += w[c];
  CHECK(mass_on_13 == doctest::Approx(1.0).epsilon(1e-15));

  // midpoint along x only
  fnsf::blend_weights(spec, fnsf::V3<double>{0.5, 0, 0}, corners, w);
  CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(corners[0] == 0);
  CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(corners[1] == 1);
  for (int c = 2; c < 8; ++c) CHECK(w[c] == 0.0);

  // far outside clamps onto the last vertex (2,2,2) = 26
  fnsf::blend_weights(spec, fnsf::V3<double>{50, 50, 50}, corners, w);
  double mass_on_26 = 0;
  for (int c = 0; c < 8; ++c)
    if (corners[c] == 26) mass_on_26 += w[c];
  CHECK(mass_on_26 == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("linear flow reduces to a lattice blend when the kernel is a spike") {
  // sigma far below the spacing underflows every off-diagonal entry, so the
  // encoded lattice equals the raw weights
  auto spec = grid_spec({0, 1, 2, 3}, {0, 1, 2}, {0, 1}, 1.0, 1e-3);
  auto enc = fnsf::prepare_encoder<double>(spec);
  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(31337);
  fill_uniform(rng, params.w, -1.0, 1.0);

  fnsf::Rng prng(5150);
  const std::int64_t n = 200;
  std::vector<double> pts(std::size_t(3 * n));
  for (std::int64_t i = 0; i < n; ++i) {
    pts[std::size_t(3 * i + 0)] = prng.uniform(-1, 4);
    pts[std::size_t(3 * i + 1)] = prng.uniform(-1, 3);
    pts[std::size_t(3 * i + 2)] = prng.uniform(-1, 2);
  }
  std::vector<double> flow(std::size_t(3 * n));
  fnsf::LinearTape<double> tape;
  fnsf::linear_flow(params, enc, pts.data(), n, flow.data(), &tape);

  CHECK(tape.n == n);
  REQUIRE(tape.corners.size() == std::size_t(8 * n));
  REQUIRE(tape.bw.size() == std::size_t(8 * n));

  for (std::int64_t i = 0; i < n; ++i) {
    std::int32_t corners[8];
    double w[8];
    fnsf::blend_weights(spec, fnsf::V3<double>{pts[std::size_t(3 * i)], pts[std::size_t(3 * i + 1)],
                                               pts[std::size_t(3 * i + 2)]},
                        corners, w);
    for (int ch = 0; ch < 3; ++ch) {
      double want = 0;
      for (int c = 0; c < 8; ++c) want += w[c] * params.w[std::size_t(corners[c]) * 3 + std::size_t(ch)];
      CHECK(flow[std::size_t(3 * i + ch)] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("linear flow matches the materialized encoder contraction") {
  auto spec = fnsf::make_encoder({{0, 0, 0}, {3, 2, 2}}, 1.0);
  auto enc = fnsf::prepare_encoder<double>(spec);
  const int wx = int(spec.xs.size()), wy = int(spec.ys.size()), wz = int(spec.zs.size());
  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(777);
  fill_uniform(rng, params.w, -1.0, 1.0);

  // G(i,j,k) = sum_{l,m,n} phix(i,l) phiy(j,m) phiz(k,n) W(l,m,n); the phi
  // matrices are symmetric so the contraction side is immaterial
  const std::int64_t verts = std::int64_t(wx) * wy * wz;
  std::vector<double> g(std::size_t(verts) * 3, 0.0);
  for (int k = 0; k < wz; ++k)
    for (int j = 0; j < wy; ++j)
      for (int i = 0; i < wx; ++i)
        for (int n2 = 0; n2 < wz; ++n2)
          for (int m = 0; m < wy; ++m)
            for (int l = 0; l < wx; ++l) {
              const double f = enc.phix[std::size_t(i) * wx + l] *
                               enc.phiy[std::size_t(j) * wy + m] *
                               enc.phiz[std::size_t(k) * wz + n2];
              const std::int64_t dst = (std::int64_t(k) * wy + j) * wx + i;
              const std::int64_t src = (std::int64_t(n2) * wy + m) * wx + l;
              for (int ch = 0; ch < 3; ++ch)
                g[std::size_t(dst * 3 + ch)] += f * params.w[std::size_t(src * 3 + ch)];
            }

  const std::int64_t n = 60;
  std::vector<double> pts(std::size_t(3 * n));
  fill_uniform(rng, pts, -0.5, 3.5);
  std::vector<double> flow(std::size_t(3 * n));
  fnsf::linear_flow(params, enc, pts.data(), n, flow.data(), static_cast<fnsf::LinearTape<double>*>(nullptr));

  for (std::int64_t i = 0; i < n; ++i) {
    std::int32_t corners[8];
    double w[8];
    fnsf::blend_weights(spec, fnsf::V3<double>{pts[std::size_t(3 * i)], pts[std::size_t(3 * i + 1)],
                                               pts[std::size_t(3 * i + 2)]},
                        corners, w);
    for (int ch = 0; ch < 3; ++ch) {
      double want = 0;
      for (int c = 0; c < 8; ++c) want += w[c] * g[std::size_t(corners[c]) * 3 + std::size_t(ch)];
      CHECK(std::abs(flow[std::size_t(3 * i + ch)] - want) <= 1e-10);
    }
  }
}

TEST_CASE("a single-vertex lattice gives constant flow everywhere") {
  auto spec = grid_spec({0.5}, {0.5}, {0.5}, 1.0, 0.7);
  auto enc = fnsf::prepare_encoder<double>(spec);
  REQUIRE(enc.phix.size() == 1);
  CHECK(enc.phix[0] == 1.0);  // encoding a vertex against itself

  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  REQUIRE(params.w.size() == 3);
  params.w = {0.25, -1.5, 3.0};

  const std::vector<double> pts = {0.5, 0.5, 0.5, -100, 0, 0, 40, 40, 40, 0, 1, 2};
  std::vector<double> flow(pts.size());
  fnsf::LinearTape<double> tape;
  fnsf::linear_flow(params, enc, pts.data(), 4, flow.data(), &tape);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(flow[3 * i + 0] == 0.25);
    CHECK(flow[3 * i + 1] == -1.5);
    CHECK(flow[3 * i + 2] == 3.0);
  }

  // gradient collapses to the column sums of dflow
  const std::vector<double> dflow = {1, 2, 3, 10, 20, 30, 100, 200, 300, 0.5, 0.5, 0.5};
  auto grads = fnsf::linear_backward(params, enc, tape, dflow.data());
  REQUIRE(grads.w.size() == 3);
  CHECK(grads.w[0] == doctest::Approx(111.5).epsilon(1e-12));
  CHECK(grads.w[1] == doctest::Approx(222.5).epsilon(1e-12));
  CHECK(grads.w[2] == doctest::Approx(333.5).epsilon(1e-12));
}

TEST_CASE("linear gradients match central differences in double") {
  auto spec = fnsf::make_encoder({{0, 0, 0}, {3, 2, 2}}, 1.0);
  auto enc = fnsf::prepare_encoder<double>(spec);
  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(60601);
  fill_uniform(rng, params.w, -1.0, 1.0);

  const std::int64_t n = 30;
  std::vector<double> pts(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, pts, -0.5, 3.5);
  fill_uniform(rng, dflow, -1.0, 1.0);

  fnsf::LinearTape<double> tape;
  std::vector<double> flow(std::size_t(3 * n));
  fnsf::linear_flow(params, enc, pts.data(), n, flow.data(), &tape);
  auto grads = fnsf::linear_backward(params, enc, tape, dflow.data());
  REQUIRE(grads.w.size() == params.w.size());

  auto loss = [&](const fnsf::LinearParams<double>& q) {
    std::vector<double> fl(std::size_t(3 * n));
    fnsf::linear_flow(q, enc, pts.data(), n, fl.data(), static_cast<fnsf::LinearTape<double>*>(nullptr));
    double s = 0;
    for (std::size_t i = 0; i < fl.size(); ++i) s += dflow[i] * fl[i];
    return s;
  };
  const double h = 1e-5;
  double worst = 0;
  for (std::size_t i = 0; i < params.w.size(); ++i) {
    auto q = params;
    q.w[i] += h;
    const double up = loss(q);
    q.w[i] -= 2 * h;
    const double dn = loss(q);
    const double fd = (up - dn) / (2 * h);
    const double rel = std::abs(fd - grads.w[i]) / std::max({std::abs(fd), std::abs(grads.w[i]), 1e-6});
    worst = std::max(worst, rel);
  }
  CHECK(worst <= 1e-7);  // the loss is linear in the weights
}

TEST_CASE("spike-kernel gradient is supported only on touched corners") {
  auto spec = grid_spec({0, 1, 2, 3, 4}, {0, 1, 2, 3}, {0, 1, 2}, 1.0, 1e-3);
  auto enc = fnsf::prepare_encoder<double>(spec);
  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(11);
  fill_uniform(rng, params.w, -1.0, 1.0);

  // a handful of points touches few corners of the 60-vertex lattice
  const std::vector<double> pts = {0.2, 0.3, 0.4, 3.6, 2.1, 1.9, 0.5, 0.5, 0.5};
  const std::int64_t n = 3;
  std::vector<double> flow(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, dflow, 0.5, 1.5);  // strictly positive pulls
  fnsf::LinearTape<double> tape;
  fnsf::linear_flow(params, enc, pts.data(), n, flow.data(), &tape);
  auto grads = fnsf::linear_backward(params, enc, tape, dflow.data());

  std::vector<bool> touched(std::size_t(params.verts()), false);
  for (std::int32_t c : tape.corners) touched[std::size_t(c)] = true;
  for (std::int64_t vtx = 0; vtx < params.verts(); ++vtx) {
    if (touched[std::size_t(vtx)]) continue;
    for (int ch = 0; ch < 3; ++ch) CHECK(grads.w[std::size_t(vtx * 3 + ch)] == 0.0);
  }
  double support_mass = 0;
  for (std::int64_t vtx = 0; vtx < params.verts(); ++vtx)
    if (touched[std::size_t(vtx)])
      for (int ch = 0; ch < 3; ++ch) support_mass += std::abs(grads.w[std::size_t(vtx * 3 + ch)]);
  CHECK(support_mass > 0.0);
}

TEST_CASE("encoded basis rank multiplies across axes") {
  const std::vector<double> gx = {0, 2, 4}, gy = {0, 2, 4};
  const std::vector<double> gz_full = {0, 2, 4};
  const std::vector<double> gz_def = {0, 2, 2};  // duplicated vertex drops a rank
  const std::vector<double> cx = {0.1, 1.9, 4.05, 2.8};
  const std::vector<double> cy = {-0.2, 2.2, 3.7, 1.1};
  const std::vector<double> cz = {0.4, 1.6, 3.9, 2.6};
  const double sigma = 0.8;

  auto px = fnsf::gaussian_encode<double>(cx, gx, sigma);
  auto py = fnsf::gaussian_encode<double>(cy, gy, sigma);

  auto materialize = [&](const std::vector<double>& pz, int wz) {
    const int wx = int(gx.size()), wy = int(gy.size());
    const int rows = int(cx.size() * cy.size() * cz.size());
    const int cols = wx * wy * wz;
    std::vector<double> full(std::size_t(rows) * cols);
    int r = 0;
    for (std::size_t iz = 0; iz < cz.size(); ++iz)
      for (std::size_t iy = 0; iy < cy.size(); ++iy)
        for (std::size_t ix = 0; ix < cx.size(); ++ix, ++r)
          for (int kz = 0; kz < wz; ++kz)
            for (int ky = 0; ky < wy; ++ky)
              for (int kx = 0; kx < wx; ++kx)
                full[std::size_t(r) * cols + std::size_t((kz * wy + ky) * wx + kx)] =
                    px[ix * std::size_t(wx) + std::size_t(kx)] *
                    py[iy * std::size_t(wy) + std::size_t(ky)] *
                    pz[iz * std::size_t(wz) + std::size_t(kz)];
    return std::pair{full, rows};
  };

  auto pz_full = fnsf::gaussian_encode<double>(cz, gz_full, sigma);
  auto [m_full, rows_full] = materialize(pz_full, int(gz_full.size()));
  CHECK(matrix_rank(m_full, rows_full, int(gx.size() * gy.size() * gz_full.size())) == 27);

  auto pz_def = fnsf::gaussian_encode<double>(cz, gz_def, sigma);
  auto [m_def, rows_def] = materialize(pz_def, int(gz_def.size()));
  // z factor has rank 2, so the product drops from 27 to 3*3*2
  CHECK(matrix_rank(m_def, rows_def, int(gx.size() * gy.size() * gz_def.size())) == 18);
}

TEST_CASE("flow is continuous across blend cell faces") {
  auto spec = fnsf::make_encoder({{0, 0, 0}, {4, 4, 4}}, 1.0);
  auto enc = fnsf::prepare_encoder<double>(spec);
  fnsf::LinearParams<double> params = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(2718);
  fill_uniform(rng, params.w, -2.0, 2.0);

  const double h = 1e-9;
  for (double face = 1.0; face <= 3.0; face += 1.0) {
    for (int t = 0; t < 50; ++t) {
      const double y = rng.uniform(0.1, 3.9), z = rng.uniform(0.1, 3.9);
      std::vector<double> pts = {face - h, y, z, face + h, y, z};
      std::vector<double> flow(6);
      fnsf::linear_flow(params, enc, pts.data(), 2, flow.data(), static_cast<fnsf::LinearTape<double>*>(nullptr));
      for (int ch = 0; ch < 3; ++ch)
        CHECK(std::abs(flow[std::size_t(ch)] - flow[std::size_t(3 + ch)]) <= 1e-5);
    }
  }
}

TEST_CASE("total variation value and gradient") {
  // constant lattice: only the floor term remains
  auto spec = fnsf::make_encoder({{0, 0, 0}, {3, 3, 3}}, 1.0);
  fnsf::LinearParams<double> flat = fnsf::linear_init<double>(spec);
  std::fill(flat.w.begin(), flat.w.end(), 0.75);
  auto tv0 = fnsf::tv_reg(flat);
  CHECK(tv0.value <= 1e-5);
  for (double v : tv0.grad.w) CHECK(v == 0.0);

  // a one-channel ramp along x of slope s costs |s|
  const double s = 0.75;
  fnsf::LinearParams<double> ramp = fnsf::linear_init<double>(spec);
  for (int k = 0; k < ramp.wz; ++k)
    for (int j = 0; j < ramp.wy; ++j)
      for (int i = 0; i < ramp.wx; ++i)
        ramp.w[std::size_t(((std::int64_t(k) * ramp.wy + j) * ramp.wx + i) * 3)] = s * i;
  auto tv1 = fnsf::tv_reg(ramp);
  CHECK(tv1.value == doctest::Approx(s).epsilon(1e-9));

  // gradient against central differences
  fnsf::LinearParams<double> w = fnsf::linear_init<double>(spec);
  fnsf::Rng rng(424242);
  fill_uniform(rng, w.w, -1.0, 1.0);
  auto tv = fnsf::tv_reg(w);
  const double h = 1e-6;
  double worst = 0;
  for (std::size_t i = 0; i < w.w.size(); ++i) {
    auto q = w;
    q.w[i] += h;
    const double up = fnsf::tv_reg(q).value;
    q.w[i] -= 2 * h;
    const double dn = fnsf::tv_reg(q).value;
    const double fd = (up - dn) / (2 * h);
    const double an = tv.grad.w[i];
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
  CHECK(worst <= 1e-5);

  // degenerate axes are meaningless for forward differences
  fnsf::LinearParams<double> thin;
  thin.wx = 1;
  thin.wy = 3;
  thin.wz = 3;
  thin.w.assign(std::size_t(thin.verts()) * 3, 0.0);
  CHECK_THROWS_AS(fnsf::tv_reg(thin), std::invalid_argument);
  CHECK_THROWS_AS(fnsf::tv_reg(w, -1.0), std::invalid_argument);
}

TEST_CASE("linear checkpoint round trips bit-exactly") {
  TmpDir tmp;
  auto spec = fnsf::make_encoder({{0, 0, 0}, {4, 3, 2}}, 1.0);
  fnsf::LinearParams<float> params = fnsf::linear_init<float>(spec);
  fnsf::Rng rng(909);
  fill_uniform(rng, params.w, -3.0, 3.0);

  const fs::path file = tmp / "model.flin";
  fnsf::save_linear(file, params);
  auto back = fnsf::load_linear(file);
  CHECK(back.wx == params.wx);
  CHECK(back.wy == params.wy);
  CHECK(back.wz == params.wz);
  REQUIRE(back.w.size() == params.w.size());
  CHECK(std::memcmp(back.w.data(), params.w.data(), params.w.size() * sizeof(float)) == 0);

  // the degenerate single-vertex lattice survives a round trip too
  fnsf::LinearParams<float> single;
  single.wx = single.wy = single.wz = 1;
  single.w = {1.0f, 2.0f, 3.0f};
  fnsf::save_linear(tmp / "single.flin", single);
  auto s2 = fnsf::load_linear(tmp / "single.flin");
  CHECK(s2.w == single.w);

  std::string raw;
  {
    std::ifstream in(file, std::ios::binary);
    raw.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  raw[1] = 'Q';
  std::ofstream(tmp / "bad.flin", std::ios::binary).write(raw.data(), std::streamsize(raw.size()));
  CHECK_THROWS_AS(fnsf::load_linear(tmp / "bad.flin"), fnsf::IoError);
}

TEST_CASE("adam init validates its configuration") {
  auto st = fnsf::adam_init<double>(10);
  CHECK(st.step == 0);
  REQUIRE(st.m.size() == 10);
  REQUIRE(st.v.size() == 10);
  for (double v : st.m) CHECK(v == 0.0);
  for (double v : st.v) CHECK(v == 0.0);

  fnsf::AdamConfig<double> bad;
  bad.lr = 0;
  CHECK_THROWS_AS(fnsf::adam_init<double>(4, bad), std::invalid_argument);
  bad = {};
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(fnsf::adam_init<double>(4, bad), std::invalid_argument);
  bad = {};
  bad.beta2 = -0.1;
  CHECK_THROWS_AS(fnsf::adam_init<double>(4, bad), std::invalid_argument);
  bad = {};
  bad.eps = 0;
  CHECK_THROWS_AS(fnsf::adam_init<double>(4, bad), std::invalid_argument);
  CHECK_THROWS_AS(fnsf::adam_init<double>(-1), std::invalid_argument);
}

TEST_CASE("adam follows the bias-corrected reference trajectory") {
  const int n = 7;
  fnsf::AdamConfig<double> cfg;
  cfg.lr = 0.01;
  auto st = fnsf::adam_init<double>(n, cfg);
  fnsf::Rng rng(321);
  std::vector<double> params(n), ref(n);
  for (int i = 0; i < n; ++i) ref[i] = params[std::size_t(i)] = rng.uniform(-1, 1);

  std::vector<double> rm(n, 0.0), rv(n, 0.0);
  for (int step = 1; step <= 10; ++step) {
    std::vector<double> g(n);
    for (int i = 0; i < n; ++i) g[std::size_t(i)] = rng.uniform(-2, 2);
    fnsf::adam_step(st, std::span<double>(params), std::span<const double>(g));

    const double c1 = 1.0 / (1.0 - std::pow(cfg.beta1, double(step)));
    const double c2 = 1.0 / (1.0 - std::pow(cfg.beta2, double(step)));
    for (int i = 0; i < n; ++i) {
      rm[std::size_t(i)] = cfg.beta1 * rm[std::size_t(i)] + (1.0 - cfg.beta1) * g[std::size_t(i)];
      rv[std::size_t(i)] = cfg.beta2 * rv[std::size_t(i)] + (1.0 - cfg.beta2) * g[std::size_t(i)] * g[std::size_t(i)];
      ref[std::size_t(i)] -= cfg.lr * (rm[std::size_t(i)] * c1) / (std::sqrt(rv[std::size_t(i)] * c2) + cfg.eps);
    }
  }
  CHECK(st.step == 10);
  for (int i = 0; i < n; ++i)
    CHECK(params[std::size_t(i)] == doctest::Approx(ref[std::size_t(i)]).epsilon(1e-12));
}

TEST_CASE("adam step size approaches the learning rate under constant gradient") {
  fnsf::AdamConfig<double> cfg;
  cfg.lr = 5e-3;
  auto st = fnsf::adam_init<double>(1, cfg);
  std::vector<double> p = {1.0};
  const std::vector<double> g = {0.37};
  double prev = p[0];
  for (int step = 0; step < 5; ++step) {
    fnsf::adam_step(st, std::span<double>(p), std::span<const double>(g));
    const double delta = prev - p[0];
    CHECK(delta == doctest::Approx(cfg.lr).epsilon(0.01));
    prev = p[0];
  }
}

TEST_CASE("adam leaves parameters alone on a zero gradient from rest") {
  auto st = fnsf::adam_init<float>(5);
  std::vector<float> p = {1.0f, -2.0f, 0.5f, 3.25f, -0.125f};
  const std::vector<float> expect = p;
  const std::vector<float> zeros(5, 0.0f);
  fnsf::adam_step(st, std::span<float>(p), std::span<const float>(zeros));
  CHECK(st.step == 1);
  CHECK(std::memcmp(p.data(), expect.data(), p.size() * sizeof(float)) == 0);
}

TEST_CASE("adam rejects bad inputs") {
  auto st = fnsf::adam_init<float>(4);
  std::vector<float> p(4, 1.0f);
  std::vector<float> g(3, 0.0f);
  CHECK_THROWS_AS(fnsf::adam_step(st, std::span<float>(p), std::span<const float>(g)),
                  std::invalid_argument);
  std::vector<float> gnan(4, 0.0f);
  gnan[2] = std::numeric_limits<float>::quiet_NaN();
  auto msg = thrown<fnsf::NumericError>(
      [&] { fnsf::adam_step(st, std::span<float>(p), std::span<const float>(gnan)); });
  CHECK(msg.find("non-finite") != std::string::npos);
}

TEST_CASE("linear pass is far cheaper than the mlp at equal point count") {
  const std::int64_t n = 4000;
  fnsf::Rng rng(10101);
  std::vector<float> pts(std::size_t(3 * n)), dflow(std::size_t(3 * n));
  fill_uniform(rng, pts, 0.0, 18.0);
  fill_uniform(rng, dflow, -1.0, 1.0);

  auto mlp = fnsf::mlp_init<float>(128, 8, 9);
  auto t0 = std::chrono::steady_clock::now();
  {
    fnsf::MlpTape<float> tape;
    std::vector<float> flow(std::size_t(3 * n));
    fnsf::mlp_forward(mlp, pts.data(), n, flow.data(), &tape);
    (void)fnsf::mlp_backward(mlp, tape, dflow.data());
  }
  auto t1 = std::chrono::steady_clock::now();

  auto spec = fnsf::make_encoder({{0, 0, 0}, {18, 18, 18}}, 2.0);
  auto enc = fnsf::prepare_encoder<float>(spec);
  auto lin = fnsf::linear_init<float>(spec);
  fill_uniform(rng, lin.w, -0.1f, 0.1f);
  auto t2 = std::chrono::steady_clock::now();
  {
    fnsf::LinearTape<float> tape;
    std::vector<float> flow(std::size_t(3 * n));
    fnsf::linear_flow(lin, enc, pts.data(), n, flow.data(), &tape);
    (void)fnsf::linear_backward(lin, enc, tape, dflow.data());
  }
  auto t3 = std::chrono::steady_clock::now();

  const double mlp_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  const double lin_ms = std::chrono::duration<double, std::milli>(t3 - t2).count();
  CHECK(lin_ms * 2.0 < mlp_ms);
}
