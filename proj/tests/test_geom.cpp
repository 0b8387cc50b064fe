#include <cmath>
#include <numbers>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace cmsckf;
using cmsckf::testing::random_rotation;

TEST(So3, ExpMatchesAngleAxis) {
  Rng rng(11);
  for (int i = 0; i < 500; ++i) {
    const Vec3 phi = rng.normal3(1.0);
    const Mat3 ref = Eigen::AngleAxisd(phi.norm(), phi.normalized()).toRotationMatrix();
    EXPECT_LT((so3_exp(phi) - ref).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(So3, LogInvertsExp) {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    Vec3 phi = rng.normal3(1.0);
    phi *= rng.uniform(0.0, std::numbers::pi - 1e-3) / phi.norm();
    EXPECT_LT((so3_log(so3_exp(phi)) - phi).norm(), 1e-12);
    EXPECT_LT((UnitQuaternion::exp(phi).log() - phi).norm(), 1e-12);
  }
}

TEST(So3, SmallAngles) {
  const Vec3 phi(1e-14, -2e-14, 3e-15);
  EXPECT_LT((so3_exp(phi) - (Mat3::Identity() + skew(phi))).norm(), 1e-27);
  EXPECT_LT((UnitQuaternion::exp(phi).log() - phi).norm(), 1e-27);
  EXPECT_TRUE(so3_right_jacobian(Vec3::Zero()).isIdentity(0.0));
}

TEST(So3, RightJacobianFiniteDifference) {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const Vec3 phi = rng.normal3(1.0);
    const Mat3 jr = so3_right_jacobian(phi);
    for (int k = 0; k < 3; ++k) {
      Vec3 d = Vec3::Zero();
      d(k) = 1e-6;
      const Vec3 col = (so3_log(so3_exp(phi).transpose() * so3_exp(phi + d)) -
                        so3_log(so3_exp(phi).transpose() * so3_exp(phi - d))) / 2e-6;
      EXPECT_LT((col - jr.col(k)).norm(), 1e-8);
    }
    EXPECT_LT((so3_left_jacobian(phi) - so3_exp(phi) * jr).norm(), 1e-12);
  }
}

TEST(Quaternion, CompositionMatchesRotationProduct) {
  Rng rng(14);
  for (int i = 0; i < 200; ++i) {
    const UnitQuaternion a = random_rotation(rng);
    const UnitQuaternion b = random_rotation(rng);
    EXPECT_LT((compose(a, b).rotation() - a.rotation() * b.rotation()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((compose(a, a.inverse()).rotation() - Mat3::Identity()).norm(), 1e-14);
  }
}

TEST(Quaternion, CanonicalSign) {
  const UnitQuaternion q(-0.5, 0.5, -0.5, 0.5);
  EXPECT_GE(q.w(), 0.0);
  EXPECT_NEAR(q.wxyz().norm(), 1.0, 1e-15);
  EXPECT_EQ(UnitQuaternion(2.0, 0.0, 0.0, 0.0), UnitQuaternion::identity());
  Rng rng(15);
  for (int i = 0; i < 200; ++i) EXPECT_GE((random_rotation(rng) * random_rotation(rng)).w(), 0.0);
}

TEST(Quaternion, FromRotationRoundTrip) {
  Rng rng(16);
  for (int i = 0; i < 200; ++i) {
    const UnitQuaternion q = random_rotation(rng);
    EXPECT_LT((UnitQuaternion::from_rotation(q.rotation()).wxyz() - q.wxyz()).norm(), 1e-12);
  }
}

TEST(Boxplus, LeftPerturbation) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const UnitQuaternion q = random_rotation(rng);
    const Vec3 d = rng.normal3(0.3);
    EXPECT_LT((boxplus(q, d).rotation() - so3_exp(d) * q.rotation()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((boxminus(boxplus(q, d), q) - d).norm(), 1e-12);
  }
}

TEST(Boxplus, PoseInverse) {
  Rng rng(18);
  for (int i = 0; i < 200; ++i) {
    const Pose p{random_rotation(rng), rng.normal3(5.0)};
    Vec6 d;
    d << rng.normal3(0.2), rng.normal3(1.0);
    EXPECT_LT((boxminus(boxplus(p, d), p) - d).norm(), 1e-12);
    EXPECT_EQ(boxplus(p, Vec6::Zero()), p);
  }
}
