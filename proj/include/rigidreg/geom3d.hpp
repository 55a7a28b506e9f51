#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace rigidreg {

// Rigid motion q = R * p + t. A transform is valid when R^T R = I and
// det(R) = +1, both within 1e-9 (Frobenius).
struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  RigidTransform() = default;
  RigidTransform(const Eigen::Matrix3d& R_, const Eigen::Vector3d& t_) : R(R_), t(t_) {}

  RigidTransform inverse() const { return RigidTransform(R.transpose(), -(R.transpose() * t)); }
  bool valid(double tol = 1e-9) const;
};

enum class RotationMode { Lie, Quaternion, Linear };

int rotation_param_count(RotationMode mode);  // 3, 4, 9
const char* rotation_mode_name(RotationMode mode);
RotationMode rotation_mode_from_name(const std::string& name);

// Rotation parameter vector in one of the three supported parameterizations.
struct RotationParam {
  RotationMode mode = RotationMode::Lie;
  Eigen::VectorXd values;

  void validate() const;  // length matches mode, entries finite
  Eigen::Matrix3d to_rotation() const;
};

bool is_rotation(const Eigen::Matrix3d& R, double tol);

// Rodrigues map, total on finite inputs; switches to the series expansion
// below 1e-7 rad.
Eigen::Matrix3d so3_exp(const Eigen::Vector3d& omega);

// Inverse of so3_exp. Input must be within 1e-6 of SO(3), else throws. At
// angle pi the axis sign is not unique; one valid choice is returned.
Eigen::Vector3d so3_log(const Eigen::Matrix3d& R);

// (w,x,y,z), Hamilton convention. q is normalized internally so q and -q map
// to the same rotation; throws on a near-zero quaternion.
Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q);

// Nearest rotation (Frobenius) to the row-major 3x3 reshape of m, via SVD with
// the diag(1, 1, det(U V^T)) sign fix. Throws when the reshaped matrix has
// smallest singular value <= 1e-9.
Eigen::Matrix3d linear9_to_rot(const Eigen::Matrix<double, 9, 1>& m);

// acos((trace(R^-1 R_gt) - 1) / 2) in degrees, acos argument clamped to [-1,1].
double rot_error_deg(const Eigen::Matrix3d& R, const Eigen::Matrix3d& R_gt);

double trans_error_m(const Eigen::Vector3d& t, const Eigen::Vector3d& t_gt);

// apply(compose(T2, T1), p) == apply(T2, apply(T1, p)):
// R = R2 R1, t = R2 t1 + t2.
RigidTransform compose(const RigidTransform& T2, const RigidTransform& T1);

inline Eigen::Vector3d apply(const RigidTransform& T, const Eigen::Vector3d& p) {
  return T.R * p + T.t;
}

// Cumulative poses: out[0] = pairwise[0], out[i] = compose(pairwise[i], out[i-1]).
// Throws on an empty list.
std::vector<RigidTransform> chain(const std::vector<RigidTransform>& pairwise);

}  // namespace rigidreg
