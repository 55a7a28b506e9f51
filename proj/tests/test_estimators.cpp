#include "rigidreg/estimators.hpp"
#include <Eigen/Geometry>

#include <cmath>
#include <set>

#include "doctest.h"
#include "rigidreg/random.hpp"

using namespace rigidreg;

namespace {

Eigen::Vector3d random_unit(Rng& rng) {
  auto a = rng.unit3();
  return Eigen::Vector3d(a[0], a[1], a[2]);
}

RigidTransform random_transform(Rng& rng, double max_angle_deg = 60.0, double max_t = 1.0) {
  Eigen::Matrix3d r = so3_exp(random_unit(rng) * rng.uniform(0.0, max_angle_deg * M_PI / 180.0));
  Eigen::Vector3d t = random_unit(rng) * rng.uniform(0.0, max_t);
  return RigidTransform(r, t);
}

struct TestPair {
  CorrespondenceSet corrs;
  std::vector<uint8_t> truth;  // 1 = generated as inlier
};

// n points in a unit box moved by a random transform; the first n_out points
// are displaced by [disp_min, disp_max] and marked outliers.
TestPair make_pair(Rng& rng, int n, int n_out, double noise, double disp_min, double disp_max) {
  TestPair tp;
  tp.corrs.P.resize(n, 3);
  tp.corrs.Q.resize(n, 3);
  tp.truth.assign(static_cast<size_t>(n), 1);
  RigidTransform gt = random_transform(rng);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    Eigen::Vector3d q = apply(gt, p);
    q += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * noise;
    if (i < n_out) {
      q += random_unit(rng) * rng.uniform(disp_min, disp_max);
      tp.truth[static_cast<size_t>(i)] = 0;
    }
    tp.corrs.P.row(i) = p.transpose();
    tp.corrs.Q.row(i) = q.transpose();
  }
  tp.corrs.gt = gt;
  return tp;
}

WeightVector uniform_weights(int n, double v = 0.5) {
  WeightVector w;
  w.w = Eigen::VectorXd::Constant(n, v);
  return w;
}

}  // namespace

TEST_CASE("procrustes identity on equal point sets") {
  Rng rng(3);
  CorrespondenceSet c;
  c.P.resize(12, 3);
  for (int i = 0; i < 12; ++i)
    c.P.row(i) << rng.normal(), rng.normal(), rng.normal();
  c.Q = c.P;
  RigidTransform t = procrustes(c, uniform_weights(12));
  CHECK((t.R - Eigen::Matrix3d::Identity()).norm() < 1e-12);
  CHECK(t.t.norm() < 1e-12);
}

TEST_CASE("procrustes exact recovery on clean pairs") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    TestPair tp = make_pair(rng, 20, 0, 0.0, 0.0, 0.0);
    RigidTransform t = procrustes(tp.corrs, uniform_weights(20));
    CHECK((t.R - tp.corrs.gt->R).norm() < 1e-9);
    CHECK((t.t - tp.corrs.gt->t).norm() < 1e-9);
  }
}

TEST_CASE("procrustes nullifies zero-weight outliers") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    TestPair tp = make_pair(rng, 20, 8, 0.0, 0.5, 2.0);
    WeightVector w = uniform_weights(20, 0.7);
    for (int i = 0; i < 8; ++i) w.w(i) = 0.0;
    RigidTransform t = procrustes(tp.corrs, w);
    CHECK((t.R - tp.corrs.gt->R).norm() < 1e-9);
    CHECK((t.t - tp.corrs.gt->t).norm() < 1e-9);
  }
}

TEST_CASE("procrustes equivariance under a rotation of the second scan") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    TestPair tp = make_pair(rng, 15, 0, 0.001, 0.0, 0.0);
    RigidTransform base = procrustes(tp.corrs, uniform_weights(15));
    Eigen::Matrix3d s = so3_exp(random_unit(rng) * rng.uniform(0.0, 2.0));
    CorrespondenceSet rotated = tp.corrs;
    for (int i = 0; i < 15; ++i)
      rotated.Q.row(i) = (s * tp.corrs.Q.row(i).transpose()).transpose();
    RigidTransform out = procrustes(rotated, uniform_weights(15));
    CHECK((out.R - s * base.R).norm() < 1e-9);
  }
}

TEST_CASE("procrustes rejects degenerate input") {
  CorrespondenceSet c;
  c.P.resize(5, 3);
  for (int i = 0; i < 5; ++i) c.P.row(i) << i, 0.0, 0.0;  // collinear
  c.Q = c.P;
  CHECK_THROWS(procrustes(c, uniform_weights(5)));

  Rng rng(13);
  TestPair tp = make_pair(rng, 5, 0, 0.0, 0.0, 0.0);
  WeightVector w = uniform_weights(5, 0.0);
  CHECK_THROWS(procrustes(tp.corrs, w));  // total weight zero

  WeightVector bad = uniform_weights(5, 0.5);
  bad.w(0) = 1.0;  // outside [0,1)
  CHECK_THROWS(procrustes(tp.corrs, bad));
}

TEST_CASE("umeyama recovers with and without mask") {
  Rng rng(17);
  TestPair clean = make_pair(rng, 20, 0, 0.0, 0.0, 0.0);
  std::vector<uint8_t> all(20, 1);
  RigidTransform t = umeyama(clean.corrs, all);
  CHECK((t.R - clean.corrs.gt->R).norm() < 1e-9);
  CHECK((t.t - clean.corrs.gt->t).norm() < 1e-9);

  TestPair half = make_pair(rng, 30, 15, 0.0, 0.5, 2.0);
  RigidTransform t2 = umeyama(half.corrs, half.truth);
  CHECK((t2.R - half.corrs.gt->R).norm() < 1e-9);
  CHECK((t2.t - half.corrs.gt->t).norm() < 1e-9);

  // minimal: exactly 3 non-collinear clean points
  TestPair tri = make_pair(rng, 8, 5, 0.0, 0.5, 2.0);
  std::vector<uint8_t> mask(8, 0);
  mask[5] = mask[6] = mask[7] = 1;
  RigidTransform t3 = umeyama(tri.corrs, mask);
  CHECK((t3.R - tri.corrs.gt->R).norm() < 1e-9);
  CHECK((t3.t - tri.corrs.gt->t).norm() < 1e-9);

  std::vector<uint8_t> two(8, 0);
  two[0] = two[1] = 1;
  CHECK_THROWS(umeyama(tri.corrs, two));
}

TEST_CASE("umeyama equals procrustes with binary weights") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    TestPair tp = make_pair(rng, 25, 10, 0.01, 0.3, 1.0);
    WeightVector w;
    w.w = Eigen::VectorXd::Zero(25);
    for (int i = 0; i < 25; ++i) w.w(i) = tp.truth[static_cast<size_t>(i)] ? 0.5 : 0.0;
    RigidTransform a = umeyama(tp.corrs, tp.truth);
    RigidTransform b = procrustes(tp.corrs, w);
    CHECK((a.R - b.R).norm() < 1e-12);
    CHECK((a.t - b.t).norm() < 1e-12);
  }
}

namespace {

// Every 3-subset in lexicographic order, scored like ransac() scores a
// hypothesis; returns the refit transform and consensus mask.
RansacResult exhaustive_triples(const CorrespondenceSet& corrs, double threshold) {
  const int n = corrs.size();
  RansacResult best;
  best.inlier_count = 0;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      for (int c = b + 1; c < n; ++c) {
        Eigen::Vector3d u = (corrs.P.row(b) - corrs.P.row(a)).transpose();
        Eigen::Vector3d v = (corrs.P.row(c) - corrs.P.row(a)).transpose();
        if (0.5 * u.cross(v).norm() <= 1e-12) continue;
        CorrespondenceSet tri;
        tri.P.resize(3, 3);
        tri.Q.resize(3, 3);
        tri.P.row(0) = corrs.P.row(a); tri.Q.row(0) = corrs.Q.row(a);
        tri.P.row(1) = corrs.P.row(b); tri.Q.row(1) = corrs.Q.row(b);
        tri.P.row(2) = corrs.P.row(c); tri.Q.row(2) = corrs.Q.row(c);
        RigidTransform model;
        try {
          model = umeyama(tri, {1, 1, 1});
        } catch (const std::invalid_argument&) {
          continue;
        }
        std::vector<uint8_t> mask(static_cast<size_t>(n));
        int count = 0;
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
          double r =
              (corrs.Q.row(i).transpose() - (model.R * corrs.P.row(i).transpose() + model.t))
                  .norm();
          bool in = r < threshold;
          mask[static_cast<size_t>(i)] = in ? 1 : 0;
          if (in) {
            ++count;
            sum += r;
          }
        }
        if (count < 3) continue;
        double mean = sum / count;
        if (count > best.inlier_count ||
            (count == best.inlier_count && mean < best.mean_residual)) {
          best.inlier_count = count;
          best.mean_residual = mean;
          best.inliers = mask;
        }
      }
  REQUIRE(best.inlier_count >= 3);
  best.T = umeyama(corrs, best.inliers);
  return best;
}

}  // namespace

TEST_CASE("ransac clean set keeps everything") {
  Rng rng(23);
  TestPair tp = make_pair(rng, 10, 0, 0.0, 0.0, 0.0);
  RansacResult res = ransac(tp.corrs, 0.01, 200, 99);
  CHECK(res.inlier_count == 10);
  CHECK((res.T.R - tp.corrs.gt->R).norm() < 1e-9);
  CHECK((res.T.t - tp.corrs.gt->t).norm() < 1e-9);
}

TEST_CASE("ransac matches the exhaustive triple oracle") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(1000 + seed);
    TestPair tp = make_pair(rng, 10, 3, 2e-4, 0.2, 1.0);
    RansacResult got = ransac(tp.corrs, 0.01, 3000, seed);
    RansacResult want = exhaustive_triples(tp.corrs, 0.01);
    CHECK(got.inliers == tp.truth);
    CHECK(got.inliers == want.inliers);
    CHECK((got.T.R - want.T.R).norm() < 1e-12);
    CHECK((got.T.t - want.T.t).norm() < 1e-12);
  }
}

TEST_CASE("ransac at scale with half outliers") {
  Rng rng(29);
  TestPair tp = make_pair(rng, 3000, 1500, 0.002, 0.1, 1.0);
  RansacResult res = ransac(tp.corrs, 0.01, 1000, 7);
  CHECK(rot_error_deg(res.T.R, tp.corrs.gt->R) < 0.5);
}

TEST_CASE("ransac determinism") {
  Rng rng(31);
  TestPair tp = make_pair(rng, 60, 30, 0.002, 0.2, 1.0);
  RansacResult a = ransac(tp.corrs, 0.01, 500, 1234);
  RansacResult b = ransac(tp.corrs, 0.01, 500, 1234);
  CHECK(a.inliers == b.inliers);
  CHECK(a.T.R == b.T.R);
  CHECK(a.T.t == b.T.t);
}

TEST_CASE("ransac reports failure when nothing fits") {
  // Q is random garbage far from any rigid motion of P at a tiny threshold.
  Rng rng(37);
  CorrespondenceSet c;
  c.P.resize(8, 3);
  c.Q.resize(8, 3);
  for (int i = 0; i < 8; ++i) {
    c.P.row(i) << rng.normal(), rng.normal(), rng.normal();
    c.Q.row(i) << 10 * rng.normal(), 10 * rng.normal(), 10 * rng.normal();
  }
  CHECK_THROWS(ransac(c, 1e-9, 100, 5));
}

TEST_CASE("icp fixed point on identical clouds") {
  Rng rng(41);
  Points cloud(40, 3);
  for (int i = 0; i < 40; ++i)
    cloud.row(i) << rng.normal(), rng.normal(), rng.normal();
  std::vector<double> trace;
  RigidTransform t = icp(cloud, cloud, RigidTransform(), 50, 1e-9, &trace);
  CHECK((t.R - Eigen::Matrix3d::Identity()).norm() == 0.0);
  CHECK(t.t.norm() == 0.0);
  CHECK(trace.size() == 1);  // converged immediately
}

TEST_CASE("icp recovers a small motion") {
  Rng rng(43);
  Points src(120, 3);
  for (int i = 0; i < 120; ++i)
    src.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
  RigidTransform gt(so3_exp(random_unit(rng) * (5.0 * M_PI / 180.0)),
                    Eigen::Vector3d(0.02, -0.015, 0.01));
  Points dst(120, 3);
  for (int i = 0; i < 120; ++i) dst.row(i) = apply(gt, src.row(i).transpose()).transpose();

  std::vector<double> trace;
  RigidTransform t = icp(src, dst, RigidTransform(), 100, 1e-9, &trace);
  CHECK(rot_error_deg(t.R, gt.R) < 0.1);
  CHECK((t.t - gt.t).norm() < 1e-3);
  for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
}

TEST_CASE("icp terminates on disjoint clouds and never gets worse") {
  Rng rng(47);
  Points src(30, 3), dst(30, 3);
  for (int i = 0; i < 30; ++i) {
    src.row(i) << rng.normal(), rng.normal(), rng.normal();
    dst.row(i) << rng.normal() + 100.0, rng.normal() - 50.0, rng.normal() + 25.0;
  }
  RigidTransform t = icp(src, dst, RigidTransform(), 10, 1e-9);
  CHECK(icp_residual(src, dst, t) <= icp_residual(src, dst, RigidTransform()) + 1e-12);

  Points empty(0, 3);
  CHECK_THROWS(icp(empty, dst, RigidTransform(), 10, 1e-9));
}

TEST_CASE("threshold_classify") {
  WeightVector w;
  w.w = Eigen::VectorXd(2);
  w.w << 0.9, 0.1;
  auto mask = threshold_classify(w, 0.5);
  CHECK(mask == std::vector<uint8_t>({1, 0}));

  w.w = Eigen::VectorXd::Zero(4);
  CHECK(threshold_classify(w, 0.5) == std::vector<uint8_t>(4, 0));
  CHECK(threshold_classify(w, 0.0) == std::vector<uint8_t>(4, 1));  // w >= tau

  Rng rng(53);
  w.w = Eigen::VectorXd(100);
  for (int i = 0; i < 100; ++i) w.w(i) = rng.uniform01() * 0.999;
  double tau = 0.37;
  auto got = threshold_classify(w, tau);
  for (int i = 0; i < 100; ++i)
    CHECK(got[static_cast<size_t>(i)] == (w.w(i) >= tau ? 1 : 0));

  CHECK_THROWS(threshold_classify(w, 1.0));
}
