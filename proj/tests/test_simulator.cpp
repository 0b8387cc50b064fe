#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace cmsckf;
using namespace cmsckf::testing;

namespace {

SensorConfig noiseless() {
  SensorConfig c;
  c.imu_noise = {0.0, 0.0, 0.0, 0.0};
  c.pixel_sigma = 0.0;
  c.gps_pos_sigma = 0.0;
  c.gps_vel_sigma = 0.0;
  return c;
}

}  // namespace

TEST(Rng, StreamsAreDeterministicAndDistinct) {
  Rng a = Rng::stream(5, stream_tag::kImu);
  Rng b = Rng::stream(5, stream_tag::kImu);
  Rng c = Rng::stream(5, stream_tag::kCamera);
  Rng d = Rng::stream(5, stream_tag::kCamera, 1);
  const double x = a.uniform();
  EXPECT_EQ(x, b.uniform());
  EXPECT_NE(x, c.uniform());
  EXPECT_NE(Rng::stream(5, stream_tag::kCamera).uniform(), d.uniform());
}

TEST(Rng, NormalMoments) {
  Rng rng(80);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Trajectory, StartsAtOriginHeadingEast) {
  const TrajectorySpec spec;
  const TruthSample s = trajectory_at(spec, 0.0);
  EXPECT_LT((s.state.position - Vec3(0.0, 0.0, spec.altitude)).norm(), 1e-15);
  EXPECT_LT((s.state.velocity - Vec3(spec.speed, 0.0, 0.0)).norm(), 1e-15);
  EXPECT_EQ(s.state.attitude, UnitQuaternion::identity());
}

TEST(Trajectory, Periodic) {
  const TrajectorySpec spec;
  Rng rng(81);
  for (int i = 0; i < 100; ++i) {
    const double t = rng.uniform(0.0, spec.lap_period());
    const TruthSample a = trajectory_at(spec, t);
    const TruthSample b = trajectory_at(spec, t + spec.lap_period());
    EXPECT_LT((a.state.position - b.state.position).norm(), 1e-9);
    EXPECT_LT(boxminus(a.state.attitude, b.state.attitude).norm(), 1e-9);
  }
}

TEST(Trajectory, CentripetalAcceleration) {
  const TrajectorySpec spec;
  const double v2r = spec.speed * spec.speed / spec.turn_radius;
  const double straight = spec.straight_length / spec.speed;
  const double turn = std::numbers::pi * spec.turn_radius / spec.speed;
  EXPECT_NEAR(trajectory_at(spec, 0.5 * straight).accel.norm(), 0.0, 1e-15);
  EXPECT_NEAR(trajectory_at(spec, straight + 0.5 * turn).accel.norm(), v2r, 1e-12);
  EXPECT_NEAR(trajectory_at(spec, 2.0 * straight + 1.5 * turn).accel.norm(), v2r, 1e-12);
  const TruthSample mid = trajectory_at(spec, straight + 0.5 * turn);
  EXPECT_NEAR(mid.accel.dot(mid.state.velocity), 0.0, 1e-9);
  EXPECT_NEAR(mid.omega.z(), spec.speed / spec.turn_radius, 1e-15);
}

TEST(Trajectory, KinematicConsistency) {
  const TrajectorySpec spec;
  Rng rng(82);
  const double h = 1e-4;
  for (int i = 0; i < 200; ++i) {
    const double t = rng.uniform(h, spec.lap_period() - h);
    const TruthSample s = trajectory_at(spec, t);
    const TruthSample p = trajectory_at(spec, t + h);
    const TruthSample m = trajectory_at(spec, t - h);
    EXPECT_LT(((p.state.position - m.state.position) / (2.0 * h) - s.state.velocity).norm(), 1e-3);
    // velocity is aligned with the body x axis
    EXPECT_LT((s.state.attitude.rotation() * s.state.velocity - Vec3(spec.speed, 0.0, 0.0)).norm(), 1e-9);
    if (((p.state.velocity - m.state.velocity) / (2.0 * h) - s.accel).norm() < 1e-3) continue;
    // only allowed across a straight/turn boundary
    EXPECT_GT((p.accel - m.accel).norm(), 1.0);
  }
}

TEST(Trajectory, InvalidSpec) {
  TrajectorySpec spec;
  spec.speed = -1.0;
  EXPECT_THROW(spec.validate(), InvalidSpec);
  EXPECT_THROW(generate_trajectory(TrajectorySpec{}, 0.02), InvalidSpec);
  EXPECT_THROW(generate_trajectory(TrajectorySpec{}, 0.0), InvalidSpec);
}

TEST(Trajectory, SampleCountAndSpacing) {
  TrajectorySpec spec;
  spec.duration = 3.0;
  const GroundTruth gt = generate_trajectory(spec, 0.01);
  ASSERT_EQ(gt.samples.size(), 301u);
  EXPECT_DOUBLE_EQ(gt.samples.back().timestamp, 3.0);
}

TEST(Landmarks, DeterministicAndInsideRegion) {
  const TrajectorySpec spec;
  const LandmarkRegion region;
  const auto a = generate_landmarks(spec, region, 500, 3);
  const auto b = generate_landmarks(spec, region, 500, 3);
  const auto c = generate_landmarks(spec, region, 500, 4);
  ASSERT_EQ(a.size(), 500u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (const Vec3& p : a) {
    EXPECT_LE(std::abs(p.z() - spec.altitude), region.height + 1e-12);
  }
  EXPECT_THROW(generate_landmarks(spec, region, -1, 3), InvalidSpec);
}

TEST(ImuSynthesis, NoiselessRoundTripOverSixtySeconds) {
  TrajectorySpec spec;
  spec.duration = 60.0;
  const GroundTruth gt = generate_trajectory(spec, 0.01);
  const ImuStream imu = synthesize_imu(gt, noiseless(), 1);
  ASSERT_EQ(imu.samples.size(), gt.samples.size() - 1);
  ImuState x = gt.samples.front().state;
  double worst = 0.0;
  for (std::size_t k = 0; k < imu.samples.size(); ++k) {
    x = propagate_mean(x, imu.samples[k], gt.dt);
    worst = std::max(worst, (x.position - gt.samples[k + 1].state.position).norm());
  }
  EXPECT_LE(worst, 1e-3);
  EXPECT_LT(boxminus(x.attitude, gt.samples.back().state.attitude).norm(), 1e-9);
}

TEST(ImuSynthesis, BiasesEnterMeasurements) {
  TrajectorySpec spec;
  spec.duration = 1.0;
  const GroundTruth gt = generate_trajectory(spec, 0.01);
  const ImuBiasInit bias{Vec3(0.01, 0.0, 0.0), Vec3(0.0, 0.2, 0.0)};
  const ImuStream clean = synthesize_imu(gt, noiseless(), 1);
  const ImuStream biased = synthesize_imu(gt, noiseless(), 1, bias);
  for (std::size_t k = 0; k < clean.samples.size(); ++k) {
    EXPECT_LT((biased.samples[k].gyro - clean.samples[k].gyro - bias.gyro).norm(), 1e-12);
    EXPECT_LT((biased.samples[k].accel - clean.samples[k].accel - bias.accel).norm(), 1e-12);
  }
}

TEST(ImuSynthesis, Deterministic) {
  TrajectorySpec spec;
  spec.duration = 2.0;
  const GroundTruth gt = generate_trajectory(spec, 0.01);
  const SensorConfig cfg;
  const ImuStream a = synthesize_imu(gt, cfg, 9);
  const ImuStream b = synthesize_imu(gt, cfg, 9);
  const ImuStream c = synthesize_imu(gt, cfg, 10);
  for (std::size_t k = 0; k < a.samples.size(); ++k) {
    EXPECT_EQ(a.samples[k].gyro, b.samples[k].gyro);
    EXPECT_EQ(a.samples[k].accel, b.samples[k].accel);
  }
  EXPECT_NE(a.samples[5].gyro, c.samples[5].gyro);
}

TEST(ImuSynthesis, StationaryStatistics) {
  GroundTruth gt;
  gt.dt = 0.01;
  gt.samples.resize(20001);
  for (std::size_t k = 0; k < gt.samples.size(); ++k) gt.samples[k].timestamp = 0.01 * static_cast<double>(k);
  SensorConfig cfg;
  cfg.imu_noise.gyro_bias_walk = 0.0;
  cfg.imu_noise.accel_bias_walk = 0.0;
  const ImuStream imu = synthesize_imu(gt, cfg, 3);
  Vec3 mg = Vec3::Zero(), ma = Vec3::Zero(), vg = Vec3::Zero(), va = Vec3::Zero();
  const double n = static_cast<double>(imu.samples.size());
  for (const auto& m : imu.samples) {
    mg += m.gyro;
    ma += m.accel;
  }
  mg /= n;
  ma /= n;
  for (const auto& m : imu.samples) {
    vg += (m.gyro - mg).cwiseAbs2();
    va += (m.accel - ma).cwiseAbs2();
  }
  const double sg = cfg.imu_noise.gyro_noise_density / std::sqrt(gt.dt);
  const double sa = cfg.imu_noise.accel_noise_density / std::sqrt(gt.dt);
  EXPECT_LT((ma - Vec3(0.0, 0.0, 9.81)).norm(), 5.0 * sa / std::sqrt(n));
  EXPECT_LT(mg.norm(), 5.0 * sg / std::sqrt(n));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(std::sqrt(vg(i) / n), sg, 0.05 * sg);
    EXPECT_NEAR(std::sqrt(va(i) / n), sa, 0.05 * sa);
  }
}

TEST(CameraSynthesis, NoiselessMeasurementsReproject) {
  TrajectorySpec spec;
  GroundTruth gt = generate_trajectory(spec, 0.01);
  const SensorConfig cfg = noiseless();
  gt.landmarks = generate_landmarks(spec, cfg.landmark_region, cfg.landmark_count, 1);
  for (double t : {0.0, 12.3, 31.0, 55.5}) {
    const CameraFrame f = synthesize_camera(gt, cfg, 1, t, 0);
    ASSERT_FALSE(f.measurements.empty());
    const Pose pose = trajectory_at(spec, t).state.pose();
    std::uint64_t last = 0;
    for (std::size_t i = 0; i < f.measurements.size(); ++i) {
      const auto& m = f.measurements[i];
      if (i > 0) {
        EXPECT_GT(m.feature_id, last);
      }
      last = m.feature_id;
      const Vec3 pc = landmark_in_camera(pose, cfg.camera, gt.landmarks[m.feature_id]);
      EXPECT_GE(pc.z(), cfg.min_depth);
      EXPECT_LE(pc.z(), cfg.max_depth);
      EXPECT_TRUE(cfg.camera.in_image(m.pixel));
      EXPECT_LT((cfg.camera.project(pc) - m.pixel).norm(), 1e-12);
    }
  }
}

TEST(CameraSynthesis, LandmarkBehindCameraIsNotSeen) {
  TrajectorySpec spec;
  GroundTruth gt = generate_trajectory(spec, 0.01);
  const SensorConfig cfg = noiseless();
  const Pose pose = trajectory_at(spec, 0.0).state.pose();
  const Pose cam = camera_pose(pose, cfg.camera);
  const Vec3 axis = cam.orientation.rotation().transpose() * Vec3(0.0, 0.0, 1.0);
  gt.landmarks = {cam.position + 10.0 * axis, cam.position - 10.0 * axis};
  const CameraFrame f = synthesize_camera(gt, cfg, 1, 0.0, 0);
  ASSERT_EQ(f.measurements.size(), 1u);
  EXPECT_EQ(f.measurements[0].feature_id, 0u);
  EXPECT_LT((f.measurements[0].pixel - cfg.camera.principal_point).norm(), 1e-9);
}

TEST(CameraSynthesis, VisibilityIsSmoothAlongTheLap) {
  TrajectorySpec spec;
  GroundTruth gt = generate_trajectory(spec, 0.01);
  const SensorConfig cfg;
  gt.landmarks = generate_landmarks(spec, cfg.landmark_region, cfg.landmark_count, 1);
  std::set<std::uint64_t> prev;
  std::size_t min_visible = 1000000;
  for (int k = 0; k < 30 * 75; k += 3) {
    const CameraFrame f = synthesize_camera(gt, cfg, 1, k / 30.0, static_cast<std::uint64_t>(k));
    std::set<std::uint64_t> ids;
    for (const auto& m : f.measurements) ids.insert(m.feature_id);
    min_visible = std::min(min_visible, ids.size());
    if (!prev.empty()) {
      std::size_t shared = 0;
      for (auto id : ids) shared += prev.count(id);
      EXPECT_GE(static_cast<double>(shared), 0.5 * static_cast<double>(std::min(ids.size(), prev.size())));
    }
    prev = std::move(ids);
  }
  EXPECT_GE(min_visible, 5u);  // never blind, even in the turns
}

TEST(GpsSynthesis, ZeroSigmaIsTruth) {
  const GroundTruth gt = generate_trajectory(TrajectorySpec{}, 0.01);
  const GpsFix f = synthesize_gps(gt, noiseless(), 1, 17.0, 17);
  const TruthSample t = trajectory_at(gt.spec, 17.0);
  EXPECT_EQ(f.position, t.state.position);
  EXPECT_EQ(f.velocity, t.state.velocity);
}

TEST(GpsSynthesis, DeterministicWithStatedSigma) {
  const GroundTruth gt = generate_trajectory(TrajectorySpec{}, 0.01);
  SensorConfig cfg;
  cfg.gps_pos_sigma = 2.0;
  cfg.gps_vel_sigma = 0.3;
  EXPECT_EQ(synthesize_gps(gt, cfg, 1, 5.0, 5).position, synthesize_gps(gt, cfg, 1, 5.0, 5).position);
  double sp = 0.0, sv = 0.0;
  const int n = 3000;
  for (int i = 0; i < n; ++i) {
    const double t = 0.025 * i;
    const GpsFix f = synthesize_gps(gt, cfg, 1, t, static_cast<std::uint64_t>(i));
    const TruthSample s = trajectory_at(gt.spec, t);
    sp += (f.position - s.state.position).squaredNorm();
    sv += (f.velocity - s.state.velocity).squaredNorm();
  }
  EXPECT_NEAR(std::sqrt(sp / (3.0 * n)), 2.0, 0.2);
  EXPECT_NEAR(std::sqrt(sv / (3.0 * n)), 0.3, 0.03);
}

TEST(GpsSynthesis, UpdateBlock) {
  Rng rng(83);
  StateVector s;
  s.imu = random_imu_state(rng);
  GpsFix f;
  f.position = s.imu.position + Vec3(1.0, 2.0, 3.0);
  f.velocity = s.imu.velocity + Vec3(-1.0, 0.5, 0.0);
  const LinearizedBlock b = gps_update_block(f, s);
  ASSERT_EQ(b.rows(), 6);
  ASSERT_EQ(b.jacobian.cols(), 15);
  EXPECT_TRUE(b.jacobian.middleCols(imu_index::kVelocity, 3).topRows(3).isIdentity(0.0));
  EXPECT_TRUE(b.jacobian.middleCols(imu_index::kPosition, 3).bottomRows(3).isIdentity(0.0));
  EXPECT_EQ(b.jacobian.cwiseAbs().sum(), 6.0);
  EXPECT_LT((b.residual - (VectorXd(6) << -1.0, 0.5, 0.0, 1.0, 2.0, 3.0).finished()).norm(), 1e-12);
  EXPECT_DOUBLE_EQ(b.noise_cov(0, 0), 0.01);
  EXPECT_DOUBLE_EQ(b.noise_cov(5, 5), 1.0);
}

TEST(SensorConfig, RatesAndGrid) {
  SensorConfig c;
  EXPECT_EQ(c.tick_rate(), 300);
  EXPECT_EQ(c.imu_ticks(), 3);
  EXPECT_EQ(c.cam_ticks(), 10);
  EXPECT_EQ(c.gps_ticks(), 300);
  c.gps_rate = 7.0;
  EXPECT_THROW(c.validate(), InvalidSpec);
  c.gps_rate = 1.5;
  EXPECT_THROW(c.validate(), InvalidSpec);
}

TEST(ScenarioFile, RoundTrip) {
  Scenario s;
  s.trajectory.speed = 7.5;
  s.sensors.landmark_count = 321;
  s.filter.keyframe_init_cov = false;
  s.seed = 99;
  std::istringstream in(scenario_to_text(s));
  const Scenario back = parse_scenario(in);
  EXPECT_EQ(scenario_to_text(back), scenario_to_text(s));
  EXPECT_EQ(back.sensors.landmark_count, 321);
  EXPECT_FALSE(back.filter.keyframe_init_cov);
}

TEST(ScenarioFile, ShippedDefaultMatchesBuiltIn) {
  const Scenario s = load_scenario(std::string(CMSCKF_SOURCE_DIR) + "/scenarios/default.scn");
  EXPECT_EQ(scenario_to_text(s), scenario_to_text(Scenario{}));
}

TEST(ScenarioFile, Errors) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_scenario(in);
  };
  EXPECT_NO_THROW(parse("# comment only\n\nspeed = 5 # trailing\n"));
  EXPECT_THROW(parse("sped = 5\n"), ConfigError);
  EXPECT_THROW(parse("speed = fast\n"), ConfigError);
  EXPECT_THROW(parse("speed 5\n"), ConfigError);
  EXPECT_THROW(parse("landmark_count = 2.5\n"), ConfigError);
  EXPECT_THROW(parse("max_clones = 1\n"), ConfigError);
  EXPECT_THROW(parse("speed = -1\n"), InvalidSpec);
  EXPECT_THROW(load_scenario("/nonexistent/file.scn"), ConfigError);
}
