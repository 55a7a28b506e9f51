#include "rigidreg/geom3d.hpp"

#include <Eigen/SVD>
#include <Eigen/LU>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rigidreg {

namespace {

Eigen::Matrix3d hat(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// (A32 - A23, A13 - A31, A21 - A12); hat(vee_asym(A)) is twice the
// antisymmetric part of A.
Eigen::Vector3d vee_asym(const Eigen::Matrix3d& a) {
  return Eigen::Vector3d(a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1));
}

}  // namespace

bool RigidTransform::valid(double tol) const {
  return is_rotation(R, tol) && t.allFinite();
}

bool is_rotation(const Eigen::Matrix3d& R, double tol) {
  if (!R.allFinite()) return false;
  double ortho = (R.transpose() * R - Eigen::Matrix3d::Identity()).norm();
  return ortho <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

int rotation_param_count(RotationMode mode) {
  switch (mode) {
    case RotationMode::Lie: return 3;
    case RotationMode::Quaternion: return 4;
    case RotationMode::Linear: return 9;
  }
  throw std::invalid_argument("unknown rotation mode");
}

const char* rotation_mode_name(RotationMode mode) {
  switch (mode) {
    case RotationMode::Lie: return "lie";
    case RotationMode::Quaternion: return "quaternion";
    case RotationMode::Linear: return "linear";
  }
  throw std::invalid_argument("unknown rotation mode");
}

RotationMode rotation_mode_from_name(const std::string& name) {
  if (name == "lie") return RotationMode::Lie;
  if (name == "quaternion" || name == "quat") return RotationMode::Quaternion;
  if (name == "linear") return RotationMode::Linear;
  throw std::invalid_argument("unknown rotation mode: " + name);
}

void RotationParam::validate() const {
  if (values.size() != rotation_param_count(mode))
    throw std::invalid_argument("rotation parameter length does not match mode");
  if (!values.allFinite())
    throw std::invalid_argument("rotation parameters must be finite");
}

Eigen::Matrix3d RotationParam::to_rotation() const {
  validate();
  switch (mode) {
    case RotationMode::Lie: return so3_exp(Eigen::Vector3d(values));
    case RotationMode::Quaternion: return quat_to_rot(Eigen::Vector4d(values));
    case RotationMode::Linear: return linear9_to_rot(Eigen::Matrix<double, 9, 1>(values));
  }
  throw std::invalid_argument("unknown rotation mode");
}

Eigen::Matrix3d so3_exp(const Eigen::Vector3d& omega) {
  if (!omega.allFinite()) throw std::invalid_argument("so3_exp: non-finite input");
  double theta2 = omega.squaredNorm();
  double theta = std::sqrt(theta2);
  Eigen::Matrix3d k = hat(omega);
  double a, b;  // R = I + a*K + b*K^2
  if (theta < 1e-7) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Eigen::Matrix3d::Identity() + a * k + b * (k * k);
}

Eigen::Vector3d so3_log(const Eigen::Matrix3d& R) {
  if (!is_rotation(R, 1e-6)) throw std::invalid_argument("so3_log: input not in SO(3)");
  double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  double theta = std::acos(c);
  Eigen::Vector3d v = vee_asym(R);  // 2 sin(theta) * axis
  if (theta < 1e-7) {
    // theta/(2 sin theta) = 1/2 + theta^2/12 + O(theta^4)
    return (0.5 + theta * theta / 12.0) * v;
  }
  if (theta < M_PI - 1e-6) {
    return (theta / (2.0 * std::sin(theta))) * v;
  }
  // Near pi the antisymmetric part vanishes; recover the axis from
  // n n^T = (R + R^T - 2 cos(theta) I) / (2 (1 - cos(theta))).
  Eigen::Matrix3d nn = (R + R.transpose() - 2.0 * c * Eigen::Matrix3d::Identity()) /
                       (2.0 * (1.0 - c));
  int k = 0;
  nn.diagonal().maxCoeff(&k);
  Eigen::Vector3d n = nn.col(k) / std::sqrt(std::max(nn(k, k), 1e-30));
  if (n.dot(v) < 0) n = -n;  // match the sign of the (tiny) antisymmetric part
  return theta * n;
}

Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q) {
  double n = q.norm();
  if (!(n > 1e-12)) throw std::invalid_argument("quat_to_rot: near-zero quaternion");
  double w = q(0) / n, x = q(1) / n, y = q(2) / n, z = q(3) / n;
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Eigen::Matrix3d linear9_to_rot(const Eigen::Matrix<double, 9, 1>& m) {
  if (!m.allFinite()) throw std::invalid_argument("linear9_to_rot: non-finite input");
  Eigen::Matrix3d a;
  a << m(0), m(1), m(2), m(3), m(4), m(5), m(6), m(7), m(8);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.singularValues()(2) <= 1e-9)
    throw std::invalid_argument("linear9_to_rot: rank-deficient input");
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, (u * v.transpose()).determinant());
  return u * d.asDiagonal() * v.transpose();
}

double rot_error_deg(const Eigen::Matrix3d& R, const Eigen::Matrix3d& R_gt) {
  if (!is_rotation(R, 1e-6) || !is_rotation(R_gt, 1e-6))
    throw std::invalid_argument("rot_error_deg: input not in SO(3)");
  double c = std::clamp(((R.transpose() * R_gt).trace() - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

double trans_error_m(const Eigen::Vector3d& t, const Eigen::Vector3d& t_gt) {
  if (!t.allFinite() || !t_gt.allFinite())
    throw std::invalid_argument("trans_error_m: non-finite input");
  return (t - t_gt).norm();
}

RigidTransform compose(const RigidTransform& T2, const RigidTransform& T1) {
  return RigidTransform(T2.R * T1.R, T2.R * T1.t + T2.t);
}

std::vector<RigidTransform> chain(const std::vector<RigidTransform>& pairwise) {
  if (pairwise.empty()) throw std::invalid_argument("chain: empty transform list");
  std::vector<RigidTransform> out;
  out.reserve(pairwise.size());
  out.push_back(pairwise[0]);
  for (size_t i = 1; i < pairwise.size(); ++i)
    out.push_back(compose(pairwise[i], out.back()));
  return out;
}

}  // namespace rigidreg
