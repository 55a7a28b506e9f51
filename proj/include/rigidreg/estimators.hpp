#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "rigidreg/geom3d.hpp"

namespace rigidreg {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

// N paired 3D points between two scans, optionally with per-point inlier
// labels and the ground-truth motion that generated them.
struct CorrespondenceSet {
  Points P;  // first scan, meters
  Points Q;  // second scan, meters
  std::optional<std::vector<uint8_t>> labels;  // 1 = inlier
  std::optional<RigidTransform> gt;
  uint64_t pair_id = 0;

  int size() const { return static_cast<int>(P.rows()); }
  void validate() const;  // P/Q same N >= 3, finite coordinates
};

// Per-correspondence confidence in [0, 1).
struct WeightVector {
  Eigen::VectorXd w;

  void validate(int n) const;
};

// Weighted least-squares rigid fit under q ~ R p + t: rotation from the SVD of
// the weighted covariance of centered points, translation mapping the weighted
// P-centroid onto the weighted Q-centroid. Requires sum(w) > 1e-9 and at least
// 3 positively weighted points in general position; collinear or coincident
// configurations are reported as rank deficiency.
RigidTransform procrustes(const CorrespondenceSet& corrs, const WeightVector& w);

// Rigid fit over the masked points only (unit scale). Identical to procrustes
// with binary weights.
RigidTransform umeyama(const CorrespondenceSet& corrs, const std::vector<uint8_t>& inliers);

struct RansacResult {
  RigidTransform T;
  std::vector<uint8_t> inliers;
  int inlier_count = 0;
  double mean_residual = 0.0;  // over the consensus set, before the refit
};

// Hypothesize-and-verify with minimal 3-point samples. Best model by inlier
// count, ties broken by lower mean inlier residual; the winning consensus set
// is refit with umeyama. Per-hypothesis sampling streams derive from (seed,
// iteration), so the result is deterministic for a given seed regardless of
// scheduling. Throws when no hypothesis reaches 3 inliers.
RansacResult ransac(const CorrespondenceSet& corrs, double inlier_threshold,
                    int max_iters, uint64_t seed);

// Point-to-point ICP: alternate exact nearest-neighbor association against
// `target` with a rigid refit, starting from T_init. An iteration is accepted
// only if it lowers the RMS closest-point residual, so the returned transform
// is never worse than T_init under that residual. Stops when the improvement
// drops below convergence_tol (meters) or at the iteration cap. When given,
// residual_trace receives the accepted residuals (starting at T_init's).
RigidTransform icp(const Points& source, const Points& target, const RigidTransform& T_init,
                   int max_iters, double convergence_tol,
                   std::vector<double>* residual_trace = nullptr);

// RMS distance from transformed source points to their nearest target point.
double icp_residual(const Points& source, const Points& target, const RigidTransform& T);

// mask[i] = (w_i >= tau); tau must lie in [0, 1).
std::vector<uint8_t> threshold_classify(const WeightVector& w, double tau);

}  // namespace rigidreg
