#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "fnsf/core.hpp"

namespace fnsf {

// Squared distance with a fixed expression tree. The brute-force scan kernels
// evaluate the same tree, so k-d and brute nearest neighbors agree bit for bit.
template <class T>
inline T nn_sqdist(const V3<T>& a, const V3<T>& b) {
  T dx = a[0] - b[0];
  T dy = a[1] - b[1];
  T dz = a[2] - b[2];
  return (dx * dx + dy * dy) + dz * dz;
}

// Static 3D k-d tree. Median split on the widest axis, leaf size 16; exact
// nearest neighbor returning the lexicographic minimum of (distance, index).
template <class T>
class KdTree {
 public:
  static constexpr int kLeafSize = 16;

  KdTree() = default;

  explicit KdTree(std::span<const V3<T>> pts) {
    if (pts.empty()) throw std::invalid_argument("KdTree: empty point set");
    entries_.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) entries_[i] = Entry{pts[i], std::int64_t(i)};
    nodes_.reserve(2 * pts.size() / kLeafSize + 2);
    build(0, std::int64_t(pts.size()));
  }

  std::int64_t size() const { return std::int64_t(entries_.size()); }

  struct Hit {
    T d2 = std::numeric_limits<T>::infinity();
    std::int64_t index = -1;
  };

  // visited, when given, accumulates the number of tree nodes touched.
  Hit nearest(const V3<T>& q, std::int64_t* visited = nullptr) const {
    if (entries_.empty()) throw std::invalid_argument("KdTree::nearest: empty tree");
    Hit best;
    descend(0, q, best, visited);
    return best;
  }

 private:
  struct Entry {
    V3<T> p;
    std::int64_t id;
  };

  struct Node {
    T split = 0;
    std::int32_t axis = -1;  // < 0 marks a leaf
    std::int32_t right = -1;
    std::int64_t begin = 0, end = 0;  // leaf range; left child is node + 1
  };

  std::int32_t build(std::int64_t b, std::int64_t e) {
    std::int32_t id = std::int32_t(nodes_.size());
    nodes_.push_back(Node{});
    if (e - b <= kLeafSize) {
      nodes_[id].begin = b;
      nodes_[id].end = e;
      return id;
    }
    V3<T> lo = entries_[std::size_t(b)].p, hi = lo;
    for (std::int64_t i = b + 1; i < e; ++i) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], entries_[std::size_t(i)].p[a]);
        hi[a] = std::max(hi[a], entries_[std::size_t(i)].p[a]);
      }
    }
    int axis = 0;
    T spread = hi[0] - lo[0];
    for (int a = 1; a < 3; ++a) {
      if (hi[a] - lo[a] > spread) {
        spread = hi[a] - lo[a];
        axis = a;
      }
    }
    std::int64_t mid = b + (e - b) / 2;
    // (coordinate, original index) ordering keeps the partition deterministic
    std::nth_element(entries_.begin() + b, entries_.begin() + mid, entries_.begin() + e,
                     [axis](const Entry& x, const Entry& y) {
                       if (x.p[axis] != y.p[axis]) return x.p[axis] < y.p[axis];
                       return x.id < y.id;
                     });
    nodes_[id].axis = std::int32_t(axis);
    nodes_[id].split = entries_[std::size_t(mid)].p[axis];
    build(b, mid);  // left child lands at id + 1
    nodes_[id].right = build(mid, e);
    return id;
  }

  void descend(std::int32_t ni, const V3<T>& q, Hit& best, std::int64_t* visited) const {
    const Node& node = nodes_[std::size_t(ni)];
    if (visited) ++*visited;
    if (node.axis < 0) {
      for (std::int64_t i = node.begin; i < node.end; ++i) {
        T d2 = nn_sqdist(q, entries_[std::size_t(i)].p);
        std::int64_t idx = entries_[std::size_t(i)].id;
        if (d2 < best.d2 || (d2 == best.d2 && idx < best.index)) {
          best.d2 = d2;
          best.index = idx;
        }
      }
      return;
    }
    T diff = q[node.axis] - node.split;
    std::int32_t near_child = diff < 0 ? ni + 1 : node.right;
    std::int32_t far_child = diff < 0 ? node.right : ni + 1;
    descend(near_child, q, best, visited);
    if (diff * diff <= best.d2) descend(far_child, q, best, visited);
  }

  std::vector<Entry> entries_;
  std::vector<Node> nodes_;
};

}  // namespace fnsf
