#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rigidreg/estimators.hpp"

namespace rigidreg {

// Synthetic correspondence generation. Points are drawn in a unit box, moved
// by a random rigid transform; inliers get Gaussian noise, a round(fraction*N)
// subset is displaced by a uniform offset in the [outlier_min, outlier_max]
// annulus. Labels come from the distance rule below.
struct GenConfig {
  int pairs = 2000;
  int n = 256;
  double outlier_fraction = 0.5;
  double rot_bound_deg = 30.0;
  double trans_bound_m = 0.5;
  double noise_sigma_m = 0.005;
  double outlier_min_m = 0.06;
  double outlier_max_m = 1.0;
  double label_threshold_m = 0.03;
  uint64_t seed = 0;

  void validate() const;
};

// Per-pair streams derive from (seed, pair index), so generation is
// deterministic and parallelizable.
std::vector<CorrespondenceSet> gen_synthetic(const GenConfig& config);

// y_i = 1 iff ||q_i - (R p_i + t)|| < threshold (strict).
std::vector<uint8_t> label_inliers(const CorrespondenceSet& corrs, const RigidTransform& gt,
                                   double dist_threshold);

// Bisection for the distance threshold whose global outlier fraction is
// within +-1% of target (at most 50 iterations); throws when unattainable.
// Every set must carry its ground-truth transform.
double calibrate_threshold(const std::vector<CorrespondenceSet>& sets, double target_fraction);

// Tent profile: rises linearly from 0 at tau=0 to theta_max at tau=0.5, falls
// back to 0 at tau=1.
double curriculum_theta(double tau, double theta_max_deg);

struct CurriculumSchedule {
  double theta_max_deg = 50.0;
  double theta(double tau) const { return curriculum_theta(tau, theta_max_deg); }
};

// Rotates the second scan by exactly theta about a seeded random axis and
// composes the same rotation into gt; labels are unchanged (the rotation
// preserves residual distances).
CorrespondenceSet augment_pair(const CorrespondenceSet& pair, double theta_deg, uint64_t seed);

// On-disk dataset, little-endian:
//   magic "3DRG", u32 version = 1, u64 pair count;
//   per pair: u64 pair_id, u32 N, u8 flags (bit0 labels, bit1 gt),
//             P then Q as N x 3 float32 row-major,
//             labels as N x u8 when present, gt as 9+3 float32 when present.
void write_dataset(const std::string& path, const std::vector<CorrespondenceSet>& sets);
std::vector<CorrespondenceSet> read_dataset(const std::string& path);

}  // namespace rigidreg
