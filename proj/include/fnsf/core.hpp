#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fnsf {

template <class T>
using V3 = std::array<T, 3>;

using Vec3  = V3<float>;   // storage type for cloud / flow data
using Vec3d = V3<double>;  // geometry math

template <class T>
constexpr V3<T> v3(T x, T y, T z) { return {x, y, z}; }

template <class T> constexpr V3<T> operator+(const V3<T>& a, const V3<T>& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
template <class T> constexpr V3<T> operator-(const V3<T>& a, const V3<T>& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
template <class T> constexpr V3<T> operator*(T s, const V3<T>& a) { return {s * a[0], s * a[1], s * a[2]}; }
template <class T> constexpr T dot(const V3<T>& a, const V3<T>& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
template <class T> constexpr T sq_norm(const V3<T>& a) { return dot(a, a); }
template <class T> inline T norm(const V3<T>& a) { return std::sqrt(sq_norm(a)); }

inline Vec3d widen(const Vec3& p) { return {p[0], p[1], p[2]}; }
inline Vec3 narrow(const Vec3d& p) { return {float(p[0]), float(p[1]), float(p[2])}; }

template <class T>
inline bool finite3(const V3<T>& p) { return std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]); }

// Axis-aligned box, meters.
struct Aabb {
  Vec3d lo{0, 0, 0};
  Vec3d hi{0, 0, 0};

  Vec3d extent() const { return hi - lo; }
  Aabb inflated(double pad) const {
    return {{lo[0] - pad, lo[1] - pad, lo[2] - pad}, {hi[0] + pad, hi[1] + pad, hi[2] + pad}};
  }
  bool contains(const Vec3d& p) const {
    return p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1] && p[2] >= lo[2] && p[2] <= hi[2];
  }
};

// Error taxonomy. The CLI maps these onto process exit codes.
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct BudgetError : std::runtime_error { using std::runtime_error::runtime_error; };

// Deterministic RNG. mt19937_64 gives a standardized stream; the distribution
// shaping below is hand-rolled so sequences do not depend on the C++ library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  double uniform() {  // [0,1)
    return double(eng_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    std::uint64_t rej = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t x = eng_();
      if (x >= rej) return x % n;
    }
  }

  double normal(double mean = 0.0, double sigma = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sigma * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double k = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * k;
    have_spare_ = true;
    return mean + sigma * u * k;
  }

  Vec3d unit_vector() {
    // uniform on the sphere via normalized gaussian triple
    for (;;) {
      Vec3d g{normal(), normal(), normal()};
      double n = norm(g);
      if (n > 1e-12) return (1.0 / n) * g;
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Whole-file I/O; throws IoError with the path on failure.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& data);

// Worker count: FNSF_THREADS caps it, hardware_concurrency is the default.
int thread_budget();

// Runs fn over [0,n) split into fixed grain-sized chunks. Chunk boundaries do
// not depend on the worker count, so chunk-indexed reductions stay stable.
void parallel_for(std::int64_t n, std::int64_t grain, const std::function<void(std::int64_t, std::int64_t)>& fn);

std::int64_t now_ns();

}  // namespace fnsf
