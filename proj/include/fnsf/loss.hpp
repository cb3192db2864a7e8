#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fnsf/core.hpp"
#include "fnsf/dt.hpp"
#include "fnsf/kdtree.hpp"
#include "fnsf/pointcloud.hpp"

namespace fnsf {

enum class ChamferDirection { forward, bidirectional };
enum class NnEngine { brute, kdtree };

template <class T>
struct LossReport {
  double value = 0;
  std::vector<T> dpoint;  // d loss / d deformed point, 3 per point; empty when grads skipped
  std::int64_t eval_ns = 0;
};

struct ChamferOpts {
  double trunc = 2.0;  // meters; +inf disables truncation
  ChamferDirection direction = ChamferDirection::forward;
  NnEngine engine = NnEngine::kdtree;
};

// Truncated Chamfer distance against a fixed target cloud. Per deformed point
// the nearest squared distance enters the sum; terms past the truncation
// radius contribute trunc^2 with zero gradient. Kept terms contribute
// gradient 2(q - y*). Ties in the nearest-neighbor search break toward the
// lowest target index, so the brute and k-d engines agree exactly.
template <class T>
class ChamferLoss {
 public:
  ChamferLoss(const PointCloud& target, ChamferOpts opts);

  LossReport<T> eval(const T* deformed, std::int64_t n, bool want_grad = true) const;

  std::int64_t build_ns() const { return build_ns_; }
  const ChamferOpts& opts() const { return opts_; }

 private:
  ChamferOpts opts_;
  int nt_ = 0;
  std::vector<T> tx_, ty_, tz_;  // SoA target, padded for the brute kernel
  std::vector<T> tflat_;         // AoS target, the reverse-direction query list
  std::vector<V3<T>> tpts_;
  std::optional<KdTree<T>> tree_;
  std::int64_t build_ns_ = 0;
};

struct DtLossOpts {
  bool squared = false;  // default sums raw queried distances
};

// Distance-transform loss: sum over deformed points of the interpolated
// distance map value; gradient comes straight from the query, no
// correspondence search.
template <class T>
LossReport<T> dt_loss(const DtMap& map, const T* deformed, std::int64_t n, bool want_grad = true,
                      DtLossOpts opts = {});

}  // namespace fnsf
