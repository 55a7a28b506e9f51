#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace rigidreg {

// Exact nearest-neighbor index over a fixed set of 3D points.
// Median-split tree; queries prune on the splitting-plane distance.
class KdTree3 {
 public:
  explicit KdTree3(const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>& pts)
      : pts_(pts) {
    if (pts_.rows() == 0) throw std::invalid_argument("KdTree3: empty point set");
    idx_.resize(static_cast<size_t>(pts_.rows()));
    std::iota(idx_.begin(), idx_.end(), 0);
    nodes_.reserve(idx_.size());
    root_ = build(0, static_cast<int>(idx_.size()), 0);
  }

  // Index of the point closest to q (ties keep the first found in tree order).
  int nearest(const Eigen::Vector3d& q) const {
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    search(root_, q, best, best_d2);
    return best;
  }

 private:
  struct Node {
    int point = -1;
    int left = -1;
    int right = -1;
    int axis = 0;
  };

  int build(int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    int axis = depth % 3;
    int mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                     [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{});
    nodes_[static_cast<size_t>(id)].point = idx_[static_cast<size_t>(mid)];
    nodes_[static_cast<size_t>(id)].axis = axis;
    int l = build(lo, mid, depth + 1);
    int r = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<size_t>(id)].left = l;
    nodes_[static_cast<size_t>(id)].right = r;
    return id;
  }

  void search(int id, const Eigen::Vector3d& q, int& best, double& best_d2) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<size_t>(id)];
    Eigen::Vector3d p = pts_.row(n.point).transpose();
    double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = n.point;
    }
    double delta = q(n.axis) - pts_(n.point, n.axis);
    int near = delta < 0 ? n.left : n.right;
    int far = delta < 0 ? n.right : n.left;
    search(near, q, best, best_d2);
    if (delta * delta < best_d2) search(far, q, best, best_d2);
  }

  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> pts_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace rigidreg
