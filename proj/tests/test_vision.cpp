#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace cmsckf;
using namespace cmsckf::testing;

namespace {

// Two clones on a 10 m circle around a landmark, `deg` degrees apart, each
// camera looking straight at it.
FeatureScene two_view_scene(double deg) {
  FeatureScene s;
  s.camera = SensorConfig::default_camera();
  s.landmark = Vec3(0.0, 10.0, 2.0);
  const double half = 0.5 * deg * std::numbers::pi / 180.0;
  const Mat3 r_ci = s.camera.extrinsics.orientation.rotation();
  for (double a : {-half, half}) {
    const Vec3 z(std::sin(a), std::cos(a), 0.0);
    Mat3 r_cg;
    r_cg.row(0) = Vec3(std::cos(a), -std::sin(a), 0.0);
    r_cg.row(1) = Vec3(0.0, 0.0, -1.0);
    r_cg.row(2) = z;
    Pose p;
    p.orientation = UnitQuaternion::from_rotation(r_ci.transpose() * r_cg);
    p.position = s.landmark - 10.0 * z - p.orientation.rotation().transpose() * s.camera.extrinsics.position;
    s.state.clones.push_back({s.state.next_clone_id++, p, 0.0});
    s.track.observations.push_back({FrameRef::clone(s.state.next_clone_id - 1),
                                    s.camera.project(landmark_in_camera(p, s.camera, s.landmark))});
  }
  return s;
}

}  // namespace

TEST(Camera, OpticalAxisProjectsToPrincipalPoint) {
  const PinholeCamera cam = SensorConfig::default_camera();
  EXPECT_EQ(cam.project(Vec3(0.0, 0.0, 7.0)), cam.principal_point);
  EXPECT_TRUE(cam.valid());
}

TEST(Triangulation, NoiselessTwoViews) {
  const FeatureScene s = two_view_scene(10.0);
  EXPECT_LT((triangulate(s.track, s.state, s.camera) - s.landmark).norm(), 1e-9);
}

TEST(Triangulation, Degenerate) {
  FeatureScene s = two_view_scene(10.0);
  s.state.clones[1].pose = s.state.clones[0].pose;
  s.track.observations[1].pixel = s.track.observations[0].pixel;
  EXPECT_THROW(triangulate(s.track, s.state, s.camera), LowParallax);
  s.track.observations.pop_back();
  EXPECT_THROW(triangulate(s.track, s.state, s.camera), InsufficientObservations);
}

TEST(Triangulation, NoisyWithinLinearizedBound) {
  Rng rng(41);
  int trials = 0;
  while (trials < 100) {
    FeatureScene s = random_feature_scene(rng, 8);
    const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, s.landmark);
    const Mat3 info = j.h_f.transpose() * j.h_f;  // R = I
    for (auto& o : s.track.observations) o.pixel += Vec2(rng.normal(), rng.normal());
    Vec3 p;
    try {
      p = triangulate(s.track, s.state, s.camera);
    } catch (const LowParallax&) {
      continue;
    }
    const Vec3 e = p - s.landmark;
    EXPECT_LT(std::sqrt(e.dot(info * e)), 5.0);
    ++trials;
  }
}

TEST(Triangulation, BehindCamera) {
  FeatureScene s = two_view_scene(10.0);
  for (auto& c : s.state.clones) c.pose.orientation = boxplus(c.pose.orientation, Vec3(0.0, 0.0, std::numbers::pi));
  EXPECT_THROW(triangulate(s.track, s.state, s.camera), BehindCamera);
}

TEST(Jacobians, FiniteDifferences) {
  Rng rng(42);
  for (int i = 0; i < 100; ++i) {
    const FeatureScene s = random_feature_scene(rng, 2 + i % 6, i % 2 == 1);
    const MeasurementFdError e = measurement_fd_error(s, s.landmark);
    EXPECT_LT(e.state, 1e-5);
    EXPECT_LT(e.feature, 1e-5);
  }
}

TEST(Jacobians, LinearizationOracle) {
  Rng rng(43);
  for (int i = 0; i < 50; ++i) {
    FeatureScene s = random_feature_scene(rng, 5);
    VectorXd d = random_vector(rng, s.state.dim());
    d *= 1e-6 / d.norm();
    StateVector truth = s.state;
    apply_correction(truth, d, 0);
    FeatureTrack z = s.track;
    for (std::size_t k = 0; k < z.observations.size(); ++k) {
      z.observations[k].pixel = s.camera.project(landmark_in_camera(truth.clones[k].pose, s.camera, s.landmark));
    }
    const FeatureJacobians j = build_feature_jacobians(z, s.state, s.camera, s.landmark);
    EXPECT_LT((j.residual - j.h_x * d).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Jacobians, StructuralZeros) {
  Rng rng(44);
  FeatureScene s = random_feature_scene(rng, 3);
  s.state.clones.push_back({99, s.state.clones[0].pose, 0.0});
  const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, s.landmark);
  EXPECT_TRUE(j.h_x.leftCols(15).isZero(0.0));
  EXPECT_TRUE(j.h_x.rightCols(6).isZero(0.0));
}

TEST(Jacobians, SingleViewOnAxisDepthUnobservable) {
  FeatureScene s = two_view_scene(10.0);
  s.track.observations.pop_back();
  const Pose c = camera_pose(s.state.clones[0].pose, s.camera);
  const Vec3 on_axis = c.position + c.orientation.rotation().transpose() * Vec3(0.0, 0.0, 5.0);
  const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, on_axis);
  const Eigen::JacobiSVD<MatrixXd> svd(j.h_f);
  EXPECT_LE((svd.singularValues().array() > 1e-9 * svd.singularValues()(0)).count(), 2);
  // the viewing ray direction is in the kernel
  EXPECT_LT((j.h_f * (on_axis - c.position)).norm(), 1e-9);
}

TEST(Jacobians, UnknownFrame) {
  Rng rng(45);
  FeatureScene s = random_feature_scene(rng, 3);
  s.track.observations[1].frame = FrameRef::clone(1234);
  EXPECT_THROW(build_feature_jacobians(s.track, s.state, s.camera, s.landmark), UnknownFrameRef);
}

TEST(Nullspace, TwoObservationsGiveOneRow) {
  Rng rng(46);
  const FeatureScene s = random_feature_scene(rng, 2);
  const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, s.landmark);
  ProjectionDiagnostics d;
  const LinearizedBlock b = nullspace_project(j.h_x, j.h_f, j.residual, MatrixXd::Identity(4, 4), &d);
  EXPECT_EQ(b.rows(), 1);
  EXPECT_EQ(d.output_rows, 1);
  EXPECT_LE(d.orthogonality, 1e-10);
}

TEST(Nullspace, IsotropicNoisePreserved) {
  Rng rng(47);
  for (int views = 2; views <= 10; ++views) {
    const FeatureScene s = random_feature_scene(rng, views);
    const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, s.landmark);
    const Index m = j.residual.size();
    const LinearizedBlock b = nullspace_project(j.h_x, j.h_f, j.residual, 2.25 * MatrixXd::Identity(m, m));
    EXPECT_EQ(b.rows(), m - 3);
    EXPECT_LT((b.noise_cov - 2.25 * MatrixXd::Identity(m - 3, m - 3)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Nullspace, ResidualIndependentOfFeatureError) {
  Rng rng(48);
  for (int i = 0; i < 50; ++i) {
    const FeatureScene s = random_feature_scene(rng, 6);
    const FeatureJacobians j = build_feature_jacobians(s.track, s.state, s.camera, s.landmark);
    const VectorXd x = random_vector(rng, s.state.dim(), 0.01);
    const Index m = j.residual.size();
    const MatrixXd r = MatrixXd::Identity(m, m);
    const VectorXd r1 = j.h_x * x + j.h_f * rng.normal3(1.0);
    const VectorXd r2 = j.h_x * x + j.h_f * rng.normal3(1.0);
    const LinearizedBlock b1 = nullspace_project(j.h_x, j.h_f, r1, r);
    const LinearizedBlock b2 = nullspace_project(j.h_x, j.h_f, r2, r);
    EXPECT_LE((b1.residual - b2.residual).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Nullspace, RankDeficient) {
  MatrixXd hf = MatrixXd::Zero(6, 3);
  hf.col(0).setOnes();
  hf.col(1) = VectorXd::LinSpaced(6, 0.0, 1.0);
  EXPECT_THROW(nullspace_project(MatrixXd::Zero(6, 15), hf, VectorXd::Zero(6), MatrixXd::Identity(6, 6)),
               RankDeficientFeature);
}

TEST(Gate, Threshold) {
  EXPECT_NEAR(chi2_threshold(1), 3.841458820694124, 1e-12);
  EXPECT_NEAR(chi2_threshold(10), 18.307038053275146, 1e-10);
  EXPECT_NEAR(chi2_threshold(600), 658.0936, 1e-3);
}

TEST(Gate, ZeroAndLargeResidual) {
  Rng rng(49);
  const FeatureScene s = random_feature_scene(rng, 5);
  LinearizedBlock b = build_feature_block(s.track, s.state, s.camera);
  const MatrixXd p = 1e-6 * MatrixXd::Identity(s.state.dim(), s.state.dim());
  b.residual.setZero();
  EXPECT_TRUE(chi2_gate(b, p));
  b.residual = VectorXd::Constant(b.rows(), 100.0);
  EXPECT_FALSE(chi2_gate(b, p));
}

TEST(Gate, NominalAcceptanceRate) {
  Rng rng(50);
  int accepted = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    FeatureScene s = random_feature_scene(rng, 6);
    const Index d = s.state.dim();
    const MatrixXd p = 1e-6 * random_spd(rng, d);
    const Eigen::LLT<MatrixXd> llt(p);
    const VectorXd x = llt.matrixL() * random_vector(rng, d);
    StateVector truth = s.state;
    apply_correction(truth, x, 0);
    for (std::size_t k = 0; k < s.track.observations.size(); ++k) {
      s.track.observations[k].pixel = s.camera.project(landmark_in_camera(truth.clones[k].pose, s.camera, s.landmark)) +
                                      Vec2(rng.normal(), rng.normal());
    }
    LinearizedBlock b;
    try {
      b = build_feature_block(s.track, s.state, s.camera);
    } catch (const Error&) {
      --i;
      continue;
    }
    accepted += chi2_gate(b, p) ? 1 : 0;
  }
  EXPECT_NEAR(static_cast<double>(accepted) / n, 0.95, 0.02);
}

TEST(KeyframeConstraint, Preconditions) {
  Rng rng(51);
  FeatureScene s = random_feature_scene(rng, 4, true);
  EXPECT_NO_THROW(build_keyframe_constraint(s.track, s.state, s.camera));
  const LinearizedBlock b = build_keyframe_constraint(s.track, s.state, s.camera);
  EXPECT_FALSE(b.jacobian.middleCols(s.state.keyframe_offset(0), 6).isZero(0.0));

  FeatureTrack only_kf = s.track;
  only_kf.observations.resize(1);
  EXPECT_THROW(build_keyframe_constraint(only_kf, s.state, s.camera), InsufficientObservations);

  s.state.keyframes[0].partition = Partition::kGlobal;
  EXPECT_THROW(build_keyframe_constraint(s.track, s.state, s.camera), GlobalKeyframeTouched);
}

TEST(KeyframeConstraint, ReducesCurrentPoseUncertainty) {
  Rng rng(52);
  const FeatureScene s = random_feature_scene(rng, 4, true);
  StateVector state = s.state;
  const Index d = state.dim();
  MatrixXd p = 1e-2 * MatrixXd::Identity(d, d);
  p.block(state.keyframe_offset(0), state.keyframe_offset(0), 6, 6) *= 1e-4;
  PartitionedCovariance cov{p, MatrixXd(d, 0), MatrixXd(0, 0)};
  const Index c = state.clone_offset(state.clones.size() - 1) + 3;
  const double before = cov.ll.block(c, c, 3, 3).trace();
  full_update(state, cov, build_keyframe_constraint(s.track, state, s.camera));
  EXPECT_LT(cov.ll.block(c, c, 3, 3).trace(), before);
}
