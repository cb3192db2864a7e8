#include "fnsf/loss.hpp"

#include <cmath>
#include <limits>

#include "fnsf/simd/kernels.hpp"

namespace fnsf {

namespace {

// Pad value for the SoA tail: the squared distance overflows to +inf, which a
// strict less-than scan never selects over a real candidate.
template <class T>
constexpr T pad_value() {
  return std::numeric_limits<T>::max();
}

template <class T>
void fill_soa(const T* pts, std::int64_t n, std::vector<T>& x, std::vector<T>& y,
              std::vector<T>& z) {
  const std::size_t padded = std::size_t(simd::nn_pad(int(n)));
  x.assign(padded, pad_value<T>());
  y.assign(padded, pad_value<T>());
  z.assign(padded, pad_value<T>());
  for (std::int64_t i = 0; i < n; ++i) {
    x[std::size_t(i)] = pts[3 * i + 0];
    y[std::size_t(i)] = pts[3 * i + 1];
    z[std::size_t(i)] = pts[3 * i + 2];
  }
}

template <class T>
void check_finite(const T* pts, std::int64_t n, const char* what) {
  for (std::int64_t i = 0; i < 3 * n; ++i) {
    if (!std::isfinite(pts[i])) throw NumericError(std::string(what) + ": non-finite point");
  }
}

// Nearest neighbor of each query among the structures over `pts`; both
// engines produce identical (d2, index) pairs.
template <class T>
void nn_all(NnEngine engine, const T* queries, std::int64_t nq, const std::vector<T>& sx,
            const std::vector<T>& sy, const std::vector<T>& sz, int ns, const KdTree<T>* tree,
            std::vector<T>& d2, std::vector<std::int64_t>& idx) {
  d2.resize(std::size_t(nq));
  idx.resize(std::size_t(nq));
  if (engine == NnEngine::brute) {
    const auto& k = simd::active<T>();
    std::vector<int> idx32(static_cast<std::size_t>(nq));
    parallel_for(nq, 256, [&](std::int64_t b, std::int64_t e) {
      k.nn_brute(queries + 3 * b, int(e - b), sx.data(), sy.data(), sz.data(), ns,
                 d2.data() + b, idx32.data() + b);
    });
    for (std::int64_t i = 0; i < nq; ++i) idx[std::size_t(i)] = idx32[std::size_t(i)];
  } else {
    parallel_for(nq, 512, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t i = b; i < e; ++i) {
        auto hit = tree->nearest(V3<T>{queries[3 * i], queries[3 * i + 1], queries[3 * i + 2]});
        d2[std::size_t(i)] = hit.d2;
        idx[std::size_t(i)] = hit.index;
      }
    });
  }
}

}  // namespace

template <class T>
ChamferLoss<T>::ChamferLoss(const PointCloud& target, ChamferOpts opts) : opts_(opts) {
  if (target.empty()) throw std::invalid_argument("chamfer: empty target cloud");
  if (!(opts.trunc > 0)) throw std::invalid_argument("chamfer: trunc must be positive");
  if (target.size() > std::numeric_limits<int>::max() - 8)
    throw BudgetError("chamfer: target cloud too large");
  const std::int64_t t0 = now_ns();
  nt_ = int(target.size());
  tpts_.resize(target.points.size());
  for (std::size_t i = 0; i < target.points.size(); ++i) {
    const Vec3& p = target.points[i];
    tpts_[i] = V3<T>{T(p[0]), T(p[1]), T(p[2])};
  }
  tflat_.resize(std::size_t(nt_) * 3);
  for (int i = 0; i < nt_; ++i) {
    tflat_[std::size_t(i) * 3 + 0] = tpts_[std::size_t(i)][0];
    tflat_[std::size_t(i) * 3 + 1] = tpts_[std::size_t(i)][1];
    tflat_[std::size_t(i) * 3 + 2] = tpts_[std::size_t(i)][2];
  }
  fill_soa(tflat_.data(), nt_, tx_, ty_, tz_);
  if (opts_.engine == NnEngine::kdtree) tree_.emplace(std::span<const V3<T>>(tpts_));
  build_ns_ = now_ns() - t0;
}

template <class T>
LossReport<T> ChamferLoss<T>::eval(const T* deformed, std::int64_t n, bool want_grad) const {
  if (n <= 0) throw std::invalid_argument("chamfer: empty deformed cloud");
  if (n > std::numeric_limits<int>::max() - 8) throw BudgetError("chamfer: deformed cloud too large");
  const std::int64_t t0 = now_ns();
  check_finite(deformed, n, "chamfer");
  const double trunc2 = opts_.trunc * opts_.trunc;
  LossReport<T> rep;
  if (want_grad) rep.dpoint.assign(std::size_t(n) * 3, T(0));

  std::vector<T> d2;
  std::vector<std::int64_t> idx;
  nn_all<T>(opts_.engine, deformed, n, tx_, ty_, tz_, nt_, tree_ ? &*tree_ : nullptr, d2, idx);
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = double(d2[std::size_t(i)]);
    if (!std::isfinite(d) || idx[std::size_t(i)] < 0 || idx[std::size_t(i)] >= nt_)
      throw NumericError("chamfer: nearest-neighbor distance overflowed");
    if (d > trunc2) {
      total += trunc2;
    } else {
      total += d;
      if (want_grad) {
        const V3<T>& y = tpts_[std::size_t(idx[std::size_t(i)])];
        for (int m = 0; m < 3; ++m)
          rep.dpoint[std::size_t(3 * i + m)] = T(2) * (deformed[3 * i + m] - y[std::size_t(m)]);
      }
    }
  }

  if (opts_.direction == ChamferDirection::bidirectional) {
    // symmetric term: queries are the target points, structures over the
    // deformed cloud are rebuilt on every call
    std::vector<T> sx, sy, sz;
    std::optional<KdTree<T>> dtree;
    if (opts_.engine == NnEngine::brute) {
      fill_soa(deformed, n, sx, sy, sz);
    } else {
      std::vector<V3<T>> dpts(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i)
        dpts[std::size_t(i)] = V3<T>{deformed[3 * i], deformed[3 * i + 1], deformed[3 * i + 2]};
      dtree.emplace(std::span<const V3<T>>(dpts));
    }
    std::vector<T> rd2;
    std::vector<std::int64_t> ridx;
    nn_all<T>(opts_.engine, tflat_.data(), nt_, sx, sy, sz, int(n), dtree ? &*dtree : nullptr,
              rd2, ridx);
    for (int j = 0; j < nt_; ++j) {
      const double d = double(rd2[std::size_t(j)]);
      if (!std::isfinite(d) || ridx[std::size_t(j)] < 0 || ridx[std::size_t(j)] >= n)
        throw NumericError("chamfer: nearest-neighbor distance overflowed");
      if (d > trunc2) {
        total += trunc2;
      } else {
        total += d;
        if (want_grad) {
          const std::int64_t i = ridx[std::size_t(j)];
          const V3<T>& q = tpts_[std::size_t(j)];
          for (int m = 0; m < 3; ++m)
            rep.dpoint[std::size_t(3 * i + m)] += T(2) * (deformed[3 * i + m] - q[std::size_t(m)]);
        }
      }
    }
  }

  rep.value = total;
  rep.eval_ns = now_ns() - t0;
  return rep;
}

template <class T>
LossReport<T> dt_loss(const DtMap& map, const T* deformed, std::int64_t n, bool want_grad,
                      DtLossOpts opts) {
  if (n < 0) throw std::invalid_argument("dt_loss: negative count");
  const std::int64_t t0 = now_ns();
  LossReport<T> rep;
  if (n == 0) {
    rep.eval_ns = now_ns() - t0;
    return rep;
  }
  check_finite(deformed, n, "dt_loss");
  std::vector<T> val(static_cast<std::size_t>(n));
  std::vector<T> grad(static_cast<std::size_t>(n) * 3);
  dt_query_batch<T>(map, deformed, val.data(), grad.data(), n);
  double total = 0;
  if (opts.squared) {
    for (std::int64_t i = 0; i < n; ++i) total += double(val[std::size_t(i)]) * double(val[std::size_t(i)]);
  } else {
    for (std::int64_t i = 0; i < n; ++i) total += double(val[std::size_t(i)]);
  }
  if (want_grad) {
    if (opts.squared) {
      rep.dpoint.resize(std::size_t(n) * 3);
      for (std::int64_t i = 0; i < n; ++i) {
        const T s = T(2) * val[std::size_t(i)];
        for (int m = 0; m < 3; ++m) rep.dpoint[std::size_t(3 * i + m)] = s * grad[std::size_t(3 * i + m)];
      }
    } else {
      rep.dpoint = std::move(grad);
    }
  }
  rep.value = total;
  rep.eval_ns = now_ns() - t0;
  return rep;
}

template class ChamferLoss<float>;
template class ChamferLoss<double>;
template LossReport<float> dt_loss<float>(const DtMap&, const float*, std::int64_t, bool, DtLossOpts);
template LossReport<double> dt_loss<double>(const DtMap&, const double*, std::int64_t, bool, DtLossOpts);

}  // namespace fnsf
