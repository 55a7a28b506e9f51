#include "rigidreg/estimators.hpp"

#include <Eigen/SVD>
#include <Eigen/LU>
#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>

#include "rigidreg/kdtree.hpp"
#include "rigidreg/random.hpp"

namespace rigidreg {

void CorrespondenceSet::validate() const {
  if (P.rows() != Q.rows()) throw std::invalid_argument("correspondences: P/Q size mismatch");
  if (P.rows() < 3) throw std::invalid_argument("correspondences: need at least 3 points");
  if (!P.allFinite() || !Q.allFinite())
    throw std::invalid_argument("correspondences: non-finite coordinates");
  if (labels && static_cast<int>(labels->size()) != size())
    throw std::invalid_argument("correspondences: label length mismatch");
}

void WeightVector::validate(int n) const {
  if (w.size() != n) throw std::invalid_argument("weights: length mismatch");
  for (int i = 0; i < n; ++i) {
    if (!(w(i) >= 0.0 && w(i) < 1.0))
      throw std::invalid_argument("weights: entries must lie in [0, 1)");
  }
}

namespace {

// Core weighted fit; weights only need to be non-negative here, the [0,1)
// range is a property of the public WeightVector carrier.
RigidTransform weighted_rigid_fit(const Points& P, const Points& Q, const Eigen::VectorXd& w) {
  double sw = w.sum();
  if (!(sw > 1e-9)) throw std::invalid_argument("rigid fit: total weight too small");
  Eigen::RowVector3d cp = (w.transpose() * P) / sw;
  Eigen::RowVector3d cq = (w.transpose() * Q) / sw;
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();  // sum_i w_i pbar_i qbar_i^T
  for (int i = 0; i < P.rows(); ++i) {
    if (w(i) == 0.0) continue;
    m.noalias() += w(i) * (P.row(i) - cp).transpose() * (Q.row(i) - cq);
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d& s = svd.singularValues();
  if (!(s(0) > 0.0) || s(1) <= 1e-12 * s(0))
    throw std::invalid_argument("rigid fit: rank-deficient (collinear or coincident points)");
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, (v * u.transpose()).determinant());
  Eigen::Matrix3d r = v * d.asDiagonal() * u.transpose();
  Eigen::Vector3d t = cq.transpose() - r * cp.transpose();
  return RigidTransform(r, t);
}

}  // namespace

RigidTransform procrustes(const CorrespondenceSet& corrs, const WeightVector& w) {
  corrs.validate();
  w.validate(corrs.size());
  int positive = 0;
  for (int i = 0; i < corrs.size(); ++i)
    if (w.w(i) > 0.0) ++positive;
  if (positive < 3) throw std::invalid_argument("procrustes: fewer than 3 weighted points");
  return weighted_rigid_fit(corrs.P, corrs.Q, w.w);
}

RigidTransform umeyama(const CorrespondenceSet& corrs, const std::vector<uint8_t>& inliers) {
  corrs.validate();
  if (static_cast<int>(inliers.size()) != corrs.size())
    throw std::invalid_argument("umeyama: mask length mismatch");
  int n_in = 0;
  for (uint8_t m : inliers) n_in += m ? 1 : 0;
  if (n_in < 3) throw std::invalid_argument("umeyama: fewer than 3 inliers");
  Points P(n_in, 3), Q(n_in, 3);
  int k = 0;
  for (int i = 0; i < corrs.size(); ++i) {
    if (!inliers[static_cast<size_t>(i)]) continue;
    P.row(k) = corrs.P.row(i);
    Q.row(k) = corrs.Q.row(i);
    ++k;
  }
  return weighted_rigid_fit(P, Q, Eigen::VectorXd::Ones(n_in));
}

namespace {

double triangle_area(const Points& P, int a, int b, int c) {
  Eigen::Vector3d u = (P.row(b) - P.row(a)).transpose();
  Eigen::Vector3d v = (P.row(c) - P.row(a)).transpose();
  return 0.5 * u.cross(v).norm();
}

}  // namespace

RansacResult ransac(const CorrespondenceSet& corrs, double inlier_threshold,
                    int max_iters, uint64_t seed) {
  corrs.validate();
  if (!(inlier_threshold > 0.0)) throw std::invalid_argument("ransac: threshold must be > 0");
  if (max_iters < 1) throw std::invalid_argument("ransac: max_iters must be >= 1");
  const int n = corrs.size();

  int best_count = 0;
  double best_mean = 0.0;
  std::vector<uint8_t> best_mask;

  std::vector<uint8_t> mask(static_cast<size_t>(n));
  for (int iter = 0; iter < max_iters; ++iter) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(iter)));
    int a = -1, b = -1, c = -1;
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      a = rng.uniform_int(n);
      do { b = rng.uniform_int(n); } while (b == a);
      do { c = rng.uniform_int(n); } while (c == a || c == b);
      ok = triangle_area(corrs.P, a, b, c) > 1e-12;  // degenerate triples resampled
    }
    if (!ok) continue;

    Points sp(3, 3), sq(3, 3);
    sp.row(0) = corrs.P.row(a); sq.row(0) = corrs.Q.row(a);
    sp.row(1) = corrs.P.row(b); sq.row(1) = corrs.Q.row(b);
    sp.row(2) = corrs.P.row(c); sq.row(2) = corrs.Q.row(c);
    RigidTransform T;
    try {
      T = weighted_rigid_fit(sp, sq, Eigen::VectorXd::Ones(3));
    } catch (const std::invalid_argument&) {
      continue;
    }

    int count = 0;
    double res_sum = 0.0;
    for (int i = 0; i < n; ++i) {
      double r = (corrs.Q.row(i).transpose() - (T.R * corrs.P.row(i).transpose() + T.t)).norm();
      bool in = r < inlier_threshold;
      mask[static_cast<size_t>(i)] = in ? 1 : 0;
      if (in) {
        ++count;
        res_sum += r;
      }
    }
    if (count < 3) continue;
    double mean = res_sum / count;
    if (count > best_count || (count == best_count && mean < best_mean)) {
      best_count = count;
      best_mean = mean;
      best_mask = mask;
    }
  }

  if (best_count < 3) throw std::runtime_error("ransac: no model with >= 3 inliers found");
  RansacResult out;
  out.inliers = std::move(best_mask);
  out.inlier_count = best_count;
  out.mean_residual = best_mean;
  out.T = umeyama(corrs, out.inliers);
  return out;
}

double icp_residual(const Points& source, const Points& target, const RigidTransform& T) {
  KdTree3 tree(target);
  double sum = 0.0;
  for (int i = 0; i < source.rows(); ++i) {
    Eigen::Vector3d p = T.R * source.row(i).transpose() + T.t;
    int j = tree.nearest(p);
    sum += (target.row(j).transpose() - p).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(source.rows()));
}

RigidTransform icp(const Points& source, const Points& target, const RigidTransform& T_init,
                   int max_iters, double convergence_tol,
                   std::vector<double>* residual_trace) {
  if (source.rows() == 0 || target.rows() == 0)
    throw std::invalid_argument("icp: empty point cloud");
  if (!(convergence_tol > 0.0)) throw std::invalid_argument("icp: tolerance must be > 0");

  KdTree3 tree(target);
  const int n = static_cast<int>(source.rows());

  auto rms = [&](const RigidTransform& T, std::vector<int>* assoc) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d p = T.R * source.row(i).transpose() + T.t;
      int j = tree.nearest(p);
      if (assoc) (*assoc)[static_cast<size_t>(i)] = j;
      sum += (target.row(j).transpose() - p).squaredNorm();
    }
    return std::sqrt(sum / n);
  };

  RigidTransform best = T_init;
  std::vector<int> assoc(static_cast<size_t>(n));
  double best_res = rms(best, &assoc);
  if (residual_trace) residual_trace->push_back(best_res);

  for (int iter = 0; iter < max_iters; ++iter) {
    Points matched(n, 3);
    for (int i = 0; i < n; ++i) matched.row(i) = target.row(assoc[static_cast<size_t>(i)]);
    RigidTransform T;
    try {
      T = weighted_rigid_fit(source, matched, Eigen::VectorXd::Ones(n));
    } catch (const std::invalid_argument&) {
      break;  // degenerate association; keep the best transform so far
    }
    std::vector<int> next_assoc(static_cast<size_t>(n));
    double res = rms(T, &next_assoc);
    if (res >= best_res - convergence_tol) {
      if (res < best_res) {
        best = T;
        if (residual_trace) residual_trace->push_back(res);
      }
      break;
    }
    best = T;
    best_res = res;
    assoc = next_assoc;
    if (residual_trace) residual_trace->push_back(res);
  }
  return best;
}

std::vector<uint8_t> threshold_classify(const WeightVector& w, double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) throw std::invalid_argument("threshold must lie in [0, 1)");
  std::vector<uint8_t> mask(static_cast<size_t>(w.w.size()));
  for (int i = 0; i < w.w.size(); ++i) mask[static_cast<size_t>(i)] = w.w(i) >= tau ? 1 : 0;
  return mask;
}

}  // namespace rigidreg
