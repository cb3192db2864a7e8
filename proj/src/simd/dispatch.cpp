#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "fnsf/simd/kernels.hpp"

namespace fnsf::simd {

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) {
  if (isa == Isa::scalar) return true;
#if defined(FNSF_WITH_AVX2) && (defined(__x86_64__) || defined(__i386__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Isa initial_isa() {
  Isa best = isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
  if (const char* env = std::getenv("FNSF_SIMD")) {
    std::string s(env);
    if (s == "scalar") return Isa::scalar;
    if (s == "avx2" && isa_supported(Isa::avx2)) return Isa::avx2;
    // unknown or unsupported value: keep the detected best
  }
  return best;
}

std::atomic<Isa>& isa_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace

Isa best_isa() {
  static Isa best = initial_isa();
  return best;
}

Isa active_isa() { return isa_slot().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::invalid_argument(std::string("simd isa not supported on this host: ") + isa_name(isa));
  isa_slot().store(isa, std::memory_order_relaxed);
}

template <class T>
const Kernels<T>& table(Isa isa) {
#if defined(FNSF_WITH_AVX2)
  if (isa == Isa::avx2 && isa_supported(Isa::avx2)) return avx2_kernels<T>();
#endif
  (void)isa;
  return scalar_kernels<T>();
}

template <class T>
const Kernels<T>& active() {
  return table<T>(active_isa());
}

template const Kernels<float>& table<float>(Isa);
template const Kernels<double>& table<double>(Isa);
template const Kernels<float>& active<float>();
template const Kernels<double>& active<double>();

}  // namespace fnsf::simd
