#include "rigidreg/geom3d.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "doctest.h"
#include "rigidreg/random.hpp"

using namespace rigidreg;

namespace {

Eigen::Vector3d random_unit(Rng& rng) {
  auto a = rng.unit3();
  return Eigen::Vector3d(a[0], a[1], a[2]);
}

Eigen::Matrix3d random_rotation(Rng& rng, double max_angle = M_PI - 0.2) {
  return so3_exp(random_unit(rng) * rng.uniform(0.0, max_angle));
}

// Quaternion product (w,x,y,z). Used to build rotations via conjugation,
// independent of both so3_exp and quat_to_rot.
Eigen::Vector4d qmul(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  return Eigen::Vector4d(
      a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3),
      a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2),
      a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1),
      a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0));
}

Eigen::Matrix3d rotation_by_conjugation(const Eigen::Vector4d& q) {
  Eigen::Matrix3d r;
  Eigen::Vector4d qc(q(0), -q(1), -q(2), -q(3));
  for (int col = 0; col < 3; ++col) {
    Eigen::Vector4d p = Eigen::Vector4d::Zero();
    p(col + 1) = 1.0;
    Eigen::Vector4d out = qmul(qmul(q, p), qc);
    r(0, col) = out(1);
    r(1, col) = out(2);
    r(2, col) = out(3);
  }
  return r;
}

}  // namespace

TEST_CASE("so3_exp basics") {
  CHECK((so3_exp(Eigen::Vector3d::Zero()) - Eigen::Matrix3d::Identity()).norm() == 0.0);

  Eigen::Matrix3d expect;
  expect << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((so3_exp(Eigen::Vector3d(0, 0, M_PI / 2)) - expect).norm() < 1e-12);
}

TEST_CASE("so3_exp matches quaternion-built rotations") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    double angle = rng.uniform(0.0, M_PI - 0.1);
    Eigen::Vector3d axis = random_unit(rng);
    Eigen::Vector4d q;
    q << std::cos(angle / 2), std::sin(angle / 2) * axis;
    CHECK((so3_exp(axis * angle) - rotation_by_conjugation(q)).norm() < 1e-9);
  }
}

TEST_CASE("so3_exp output stays in SO(3) up to 2*pi") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    Eigen::Matrix3d r = so3_exp(random_unit(rng) * rng.uniform(0.0, 2.0 * M_PI));
    CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("so3_log basics and round trips") {
  CHECK(so3_log(Eigen::Matrix3d::Identity()).norm() == 0.0);

  Eigen::Vector3d w(0.3, -0.2, 0.1);
  CHECK((so3_log(so3_exp(w)) - w).norm() < 1e-9);

  Rng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    double angle = rng.uniform(1e-9, M_PI - 1e-3);
    Eigen::Vector3d w2 = random_unit(rng) * angle;
    Eigen::Matrix3d r = so3_exp(w2);
    CHECK((so3_exp(so3_log(r)) - r).norm() < 1e-8);
  }
}

TEST_CASE("so3_log near pi against eigenvector axis") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    double angle = M_PI - 1e-2;
    Eigen::Vector3d axis = random_unit(rng);
    Eigen::Matrix3d r = so3_exp(axis * angle);
    Eigen::Vector3d w = so3_log(r);

    // axis oracle: the real eigenvector of R with eigenvalue 1
    Eigen::EigenSolver<Eigen::Matrix3d> es(r);
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (std::abs(es.eigenvalues()(i).real() - 1.0) <
          std::abs(es.eigenvalues()(best).real() - 1.0))
        best = i;
    Eigen::Vector3d ax = es.eigenvectors().col(best).real();
    ax.normalize();

    double d1 = (w - ax * angle).norm();
    double d2 = (w + ax * angle).norm();
    CHECK(std::min(d1, d2) < 1e-6);
  }
}

TEST_CASE("so3_log rejects non-rotations") {
  Eigen::Matrix3d bad = 1.5 * Eigen::Matrix3d::Identity();
  CHECK_THROWS(so3_log(bad));
}

TEST_CASE("quat_to_rot basics") {
  CHECK((quat_to_rot(Eigen::Vector4d(1, 0, 0, 0)) - Eigen::Matrix3d::Identity()).norm() == 0.0);

  Eigen::Matrix3d expect;
  expect << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  double c = std::cos(M_PI / 4), s = std::sin(M_PI / 4);
  CHECK((quat_to_rot(Eigen::Vector4d(c, 0, 0, s)) - expect).norm() < 1e-12);

  CHECK_THROWS(quat_to_rot(Eigen::Vector4d(1e-13, 0, 0, 0)));
}

TEST_CASE("quat_to_rot consistent with so3_exp, and sign-invariant") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (q.norm() < 1e-6) continue;
    q.normalize();
    double angle = 2.0 * std::atan2(q.tail<3>().norm(), q(0));
    Eigen::Vector3d w = Eigen::Vector3d::Zero();
    if (q.tail<3>().norm() > 1e-12) w = q.tail<3>().normalized() * angle;
    CHECK((quat_to_rot(q) - so3_exp(w)).norm() < 1e-9);
    CHECK((quat_to_rot(q) - quat_to_rot(-q)).norm() == 0.0);
  }
}

TEST_CASE("linear9_to_rot projection") {
  Rng rng(23);
  Eigen::Matrix3d r = random_rotation(rng);
  Eigen::Matrix<double, 9, 1> m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i * 3 + j) = r(i, j);
  CHECK((linear9_to_rot(m) - r).norm() < 1e-9);

  Eigen::Matrix<double, 9, 1> two_eye = Eigen::Matrix<double, 9, 1>::Zero();
  two_eye(0) = two_eye(4) = two_eye(8) = 2.0;
  CHECK((linear9_to_rot(two_eye) - Eigen::Matrix3d::Identity()).norm() < 1e-12);

  CHECK_THROWS(linear9_to_rot(Eigen::Matrix<double, 9, 1>::Zero()));
}

TEST_CASE("linear9_to_rot minimizes Frobenius distance locally") {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Matrix3d a;
    for (int i = 0; i < 9; ++i) a(i / 3, i % 3) = rng.normal();
    if (std::abs(a.determinant()) < 0.05) continue;
    Eigen::Matrix<double, 9, 1> m;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m(i * 3 + j) = a(i, j);
    Eigen::Matrix3d best = linear9_to_rot(m);
    double d0 = (a - best).norm();
    for (int k = 0; k < 200; ++k) {
      Eigen::Matrix3d cand = best * so3_exp(random_unit(rng) * rng.uniform(0.0, 0.05));
      CHECK(d0 <= (a - cand).norm() + 1e-12);
    }
  }
}

TEST_CASE("linear9_to_rot scale invariance") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Matrix3d r = random_rotation(rng);
    double s = rng.uniform(0.1, 10.0);
    Eigen::Matrix<double, 9, 1> m, ms;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        m(i * 3 + j) = r(i, j);
        ms(i * 3 + j) = s * r(i, j);
      }
    CHECK((linear9_to_rot(ms) - linear9_to_rot(m)).norm() < 1e-9);
  }
}

TEST_CASE("rot_error") {
  Rng rng(37);
  Eigen::Matrix3d r = random_rotation(rng);
  CHECK(rot_error_deg(r, r) < 1e-5);  // acos roundoff floor near zero angle

  double theta = 0.7;
  Eigen::Matrix3d rz = so3_exp(Eigen::Vector3d(0, 0, theta));
  CHECK(rot_error_deg(Eigen::Matrix3d::Identity(), rz) ==
        doctest::Approx(theta * 180.0 / M_PI).epsilon(1e-12));

  for (int trial = 0; trial < 100; ++trial) {
    Eigen::Matrix3d r1 = random_rotation(rng);
    Eigen::Matrix3d r2 = random_rotation(rng);
    double expect = so3_log(r1.transpose() * r2).norm() * 180.0 / M_PI;
    CHECK(rot_error_deg(r1, r2) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(rot_error_deg(r1, r2) == doctest::Approx(rot_error_deg(r2, r1)).epsilon(1e-9));
    CHECK(rot_error_deg(r1, r2) >= 0.0);
    CHECK(rot_error_deg(r1, r2) <= 180.0);
  }
}

TEST_CASE("trans_error") {
  CHECK(trans_error_m(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 2, 3)) == 0.0);
  CHECK(trans_error_m(Eigen::Vector3d(1, 0, 0), Eigen::Vector3d::Zero()) == 1.0);
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::Vector3d a(rng.normal(), rng.normal(), rng.normal());
    Eigen::Vector3d b(rng.normal(), rng.normal(), rng.normal());
    double expect = std::sqrt((a.x() - b.x()) * (a.x() - b.x()) +
                              (a.y() - b.y()) * (a.y() - b.y()) +
                              (a.z() - b.z()) * (a.z() - b.z()));
    CHECK(trans_error_m(a, b) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("compose and apply") {
  Rng rng(43);
  RigidTransform id;
  RigidTransform t(random_rotation(rng), Eigen::Vector3d(0.3, -0.1, 0.9));

  CHECK((compose(id, t).R - t.R).norm() == 0.0);
  CHECK((compose(t.inverse(), t).R - Eigen::Matrix3d::Identity()).norm() < 1e-9);
  CHECK(compose(t.inverse(), t).t.norm() < 1e-9);

  CHECK((apply(id, Eigen::Vector3d(1, 2, 3)) - Eigen::Vector3d(1, 2, 3)).norm() == 0.0);
  Eigen::Matrix3d rz = so3_exp(Eigen::Vector3d(0, 0, M_PI / 2));
  CHECK((apply(RigidTransform(rz, Eigen::Vector3d::Zero()), Eigen::Vector3d(1, 0, 0)) -
         Eigen::Vector3d(0, 1, 0))
            .norm() < 1e-12);

  for (int trial = 0; trial < 100; ++trial) {
    RigidTransform t1(random_rotation(rng),
                      Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    RigidTransform t2(random_rotation(rng),
                      Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    Eigen::Vector3d p(rng.normal(), rng.normal(), rng.normal());
    CHECK((apply(compose(t2, t1), p) - apply(t2, apply(t1, p))).norm() < 1e-9);
    CHECK((apply(t1, p) - (t1.R * p + t1.t)).norm() < 1e-12);
  }
}

TEST_CASE("compose associativity") {
  Rng rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    RigidTransform a(random_rotation(rng),
                     Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    RigidTransform b(random_rotation(rng),
                     Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    RigidTransform c(random_rotation(rng),
                     Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
    RigidTransform lhs = compose(compose(a, b), c);
    RigidTransform rhs = compose(a, compose(b, c));
    CHECK((lhs.R - rhs.R).norm() < 1e-9);
    CHECK((lhs.t - rhs.t).norm() < 1e-9);
  }
}

TEST_CASE("chain") {
  Rng rng(53);
  RigidTransform t(random_rotation(rng), Eigen::Vector3d(1, 2, 3));

  auto single = chain({t});
  CHECK(single.size() == 1);
  CHECK((single[0].R - t.R).norm() == 0.0);

  auto two = chain({t, t.inverse()});
  CHECK((two[1].R - Eigen::Matrix3d::Identity()).norm() < 1e-9);
  CHECK(two[1].t.norm() < 1e-9);

  std::vector<RigidTransform> ts;
  for (int i = 0; i < 5; ++i)
    ts.emplace_back(random_rotation(rng),
                    Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()));
  auto out = chain(ts);
  RigidTransform fold = ts[0];
  for (size_t i = 1; i < ts.size(); ++i) {
    fold = compose(ts[i], fold);
    CHECK((out[i].R - fold.R).norm() < 1e-9);
    CHECK((out[i].t - fold.t).norm() < 1e-9);
  }

  CHECK_THROWS(chain({}));
}

TEST_CASE("rotation parameter carrier") {
  RotationParam p;
  p.mode = RotationMode::Lie;
  p.values = Eigen::Vector3d(0.1, 0.2, 0.3);
  CHECK(is_rotation(p.to_rotation(), 1e-9));

  p.values = Eigen::Vector4d(1, 0, 0, 0);
  CHECK_THROWS(p.validate());

  CHECK(rotation_param_count(RotationMode::Lie) == 3);
  CHECK(rotation_param_count(RotationMode::Quaternion) == 4);
  CHECK(rotation_param_count(RotationMode::Linear) == 9);
  CHECK(rotation_mode_from_name("quaternion") == RotationMode::Quaternion);
}
