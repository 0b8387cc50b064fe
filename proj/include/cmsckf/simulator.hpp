#pragma once

// Racetrack ground truth and synthetic IMU / camera / GPS streams.
//
// All timing lives on an integer tick grid (lcm of the sensor rates) so that
// stream membership never depends on floating-point rounding.  Every random
// draw comes from a substream keyed by (seed, sensor, index), which keeps the
// streams independent of each other and of how far they are consumed.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"
#include "cmsckf/propagation.hpp"
#include "cmsckf/state.hpp"
#include "cmsckf/vision.hpp"

namespace cmsckf {

/// splitmix64 finalizer; used to derive substream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// mt19937_64 with platform-independent uniform and normal transforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    return Rng(mix_seed(mix_seed(seed ^ mix_seed(tag)) ^ index));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vec3 normal3(double sigma) {
    const double x = normal();
    const double y = normal();
    const double z = normal();
    return sigma * Vec3(x, y, z);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

namespace stream_tag {
inline constexpr std::uint64_t kLandmarks = 1;
inline constexpr std::uint64_t kImu = 2;
inline constexpr std::uint64_t kCamera = 3;
inline constexpr std::uint64_t kGps = 4;
inline constexpr std::uint64_t kInitialError = 5;
}  // namespace stream_tag

/// Oval: straight along +x from the origin, counter-clockwise turn, straight
/// back along y = 2R, second turn.  Constant speed, yaw tangent to the path.
struct TrajectorySpec {
  double straight_length = 200.0;
  double turn_radius = 50.0;
  double speed = 10.0;
  double duration = 75.0;
  double altitude = 2.0;

  double lap_length() const { return 2.0 * straight_length + 2.0 * std::numbers::pi * turn_radius; }
  double lap_period() const { return lap_length() / speed; }

  void validate() const {
    if (!(straight_length > 0.0 && turn_radius > 0.0 && speed > 0.0 && duration > 0.0 && altitude > 0.0)) {
      throw InvalidSpec("trajectory parameters must all be positive");
    }
  }
};

/// Ground-truth kinematics at one instant.  `state` carries the true pose and
/// velocity; its bias fields are zero (biases are owned by the IMU stream).
struct TruthSample {
  double timestamp = 0.0;
  ImuState state;
  Vec3 accel = Vec3::Zero();  // {G}
  Vec3 omega = Vec3::Zero();  // {I}
};

inline TruthSample trajectory_at(const TrajectorySpec& spec, double t) {
  const double l = spec.straight_length;
  const double r = spec.turn_radius;
  const double v = spec.speed;
  const double pi = std::numbers::pi;
  double s = std::fmod(v * t, spec.lap_length());
  if (s < 0.0) s += spec.lap_length();

  Vec2 p;
  Vec2 a = Vec2::Zero();
  double yaw = 0.0;
  double yaw_rate = 0.0;
  if (s < l) {
    p = {s, 0.0};
  } else if (s < l + pi * r) {
    const double th = (s - l) / r;
    p = {l + r * std::sin(th), r - r * std::cos(th)};
    a = (v * v / r) * Vec2(-std::sin(th), std::cos(th));
    yaw = th;
    yaw_rate = v / r;
  } else if (s < 2.0 * l + pi * r) {
    p = {l - (s - l - pi * r), 2.0 * r};
    yaw = pi;
  } else {
    const double th = (s - 2.0 * l - pi * r) / r;
    p = {-r * std::sin(th), r + r * std::cos(th)};
    a = (v * v / r) * Vec2(std::sin(th), -std::cos(th));
    yaw = pi + th;
    yaw_rate = v / r;
  }

  TruthSample out;
  out.timestamp = t;
  // R_IG = Rz(yaw)^T
  out.state.attitude = UnitQuaternion(std::cos(0.5 * yaw), 0.0, 0.0, -std::sin(0.5 * yaw));
  out.state.position = Vec3(p.x(), p.y(), spec.altitude);
  out.state.velocity = v * Vec3(std::cos(yaw), std::sin(yaw), 0.0);
  out.accel = Vec3(a.x(), a.y(), 0.0);
  out.omega = Vec3(0.0, 0.0, yaw_rate);
  return out;
}

struct GroundTruth {
  TrajectorySpec spec;
  double dt = 0.0;
  std::vector<TruthSample> samples;  // samples[k] at k * dt
  std::vector<Vec3> landmarks;       // index = feature id
};

/// Samples the trajectory every `dt` seconds over [0, duration].
inline GroundTruth generate_trajectory(const TrajectorySpec& spec, double dt) {
  spec.validate();
  if (!(dt > 0.0) || dt > 0.01 + 1e-15) throw InvalidSpec("sampling interval must lie in (0, 0.01] s");
  GroundTruth gt;
  gt.spec = spec;
  gt.dt = dt;
  const auto n = static_cast<std::size_t>(std::llround(std::floor(spec.duration / dt + 1e-9)));
  gt.samples.reserve(n + 1);
  for (std::size_t k = 0; k <= n; ++k) gt.samples.push_back(trajectory_at(spec, static_cast<double>(k) * dt));
  return gt;
}

/// Landmarks scattered in bands on both sides of the track.
struct LandmarkRegion {
  double lateral_min = 6.0;   // m from the centerline
  double lateral_max = 30.0;  // m
  double height = 4.0;        // +- m around the vehicle altitude
};

inline std::vector<Vec3> generate_landmarks(const TrajectorySpec& spec, const LandmarkRegion& region, int count,
                                            std::uint64_t seed) {
  if (count < 0 || !(region.lateral_max >= region.lateral_min && region.lateral_min >= 0.0 && region.height >= 0.0)) {
    throw InvalidSpec("invalid landmark region");
  }
  Rng rng = Rng::stream(seed, stream_tag::kLandmarks);
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double s = rng.uniform(0.0, spec.lap_length());
    const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
    const double offset = rng.uniform(region.lateral_min, region.lateral_max);
    const double dz = rng.uniform(-region.height, region.height);
    const TruthSample at = trajectory_at(spec, s / spec.speed);
    const Vec3 left = Vec3(-at.state.velocity.y(), at.state.velocity.x(), 0.0).normalized();
    Vec3 p = at.state.position + side * offset * left;
    p.z() += dz;
    out.push_back(p);
  }
  return out;
}

struct SensorConfig {
  double imu_rate = 100.0;
  double cam_rate = 30.0;
  double gps_rate = 1.0;
  ImuNoiseParams imu_noise;
  double pixel_sigma = 1.0;
  double gps_pos_sigma = 1.0;
  double gps_vel_sigma = 0.1;
  PinholeCamera camera = default_camera();
  int landmark_count = 1000;
  LandmarkRegion landmark_region;
  double min_depth = 1.0;
  double max_depth = 40.0;

  /// Side-looking camera (optical axis along -y of {I}).
  static PinholeCamera default_camera() {
    PinholeCamera cam;
    Mat3 r_ci;
    r_ci << -1.0, 0.0, 0.0,
             0.0, 0.0, -1.0,
             0.0, -1.0, 0.0;
    cam.extrinsics = {UnitQuaternion::from_rotation(r_ci), Vec3(0.1, -0.05, 0.02)};
    return cam;
  }

  /// Ticks per second of the common time grid.
  std::int64_t tick_rate() const {
    auto as_int = [](double r) { return static_cast<std::int64_t>(std::llround(r)); };
    return std::lcm(std::lcm(as_int(imu_rate), as_int(cam_rate)), as_int(gps_rate));
  }
  std::int64_t imu_ticks() const { return tick_rate() / std::llround(imu_rate); }
  std::int64_t cam_ticks() const { return tick_rate() / std::llround(cam_rate); }
  std::int64_t gps_ticks() const { return tick_rate() / std::llround(gps_rate); }

  void validate() const {
    for (double r : {imu_rate, cam_rate, gps_rate}) {
      if (!(r > 0.0) || std::abs(r - std::round(r)) > 1e-12) throw InvalidSpec("sensor rates must be positive integers");
    }
    if (!(imu_rate >= cam_rate && cam_rate >= gps_rate)) throw InvalidSpec("rates must satisfy imu >= cam >= gps");
    if (std::llround(cam_rate) % std::llround(gps_rate) != 0) {
      throw InvalidSpec("camera rate must be a multiple of the GPS rate");
    }
    if (!(pixel_sigma >= 0.0 && gps_pos_sigma >= 0.0 && gps_vel_sigma >= 0.0)) {
      throw InvalidSpec("noise sigmas must be non-negative");
    }
    if (imu_noise.gyro_noise_density < 0.0 || imu_noise.accel_noise_density < 0.0 || imu_noise.gyro_bias_walk < 0.0 ||
        imu_noise.accel_bias_walk < 0.0) {
      throw InvalidSpec("IMU noise densities must be non-negative");
    }
    if (!camera.valid()) throw InvalidSpec("invalid camera intrinsics");
    if (!(min_depth > 0.0 && max_depth > min_depth)) throw InvalidSpec("invalid depth range");
  }
};

struct ImuStream {
  std::vector<ImuSample> samples;   // samples[k] holds over [k dt, (k+1) dt)
  std::vector<Vec3> gyro_bias;      // true bias during sample k
  std::vector<Vec3> accel_bias;
};

struct ImuBiasInit {
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

/// Measurements that reproduce the sampled truth exactly under
/// propagate_mean: the gyro is the constant rate joining consecutive
/// attitudes, the accelerometer the constant specific force joining
/// consecutive velocities.  Biases (seeded random walks) and white noise are
/// then added on top.
inline ImuStream synthesize_imu(const GroundTruth& gt, const SensorConfig& config, std::uint64_t seed,
                                const ImuBiasInit& bias0 = {}, const Vec3& gravity = kDefaultGravity) {
  ImuStream out;
  if (gt.samples.size() < 2) return out;
  const double dt = gt.dt;
  const std::size_t n = gt.samples.size() - 1;
  out.samples.reserve(n);
  out.gyro_bias.reserve(n);
  out.accel_bias.reserve(n);
  Rng rng = Rng::stream(seed, stream_tag::kImu);
  const auto& q = config.imu_noise;
  const double sg = q.gyro_noise_density / std::sqrt(dt);
  const double sa = q.accel_noise_density / std::sqrt(dt);
  const double sbg = q.gyro_bias_walk * std::sqrt(dt);
  const double sba = q.accel_bias_walk * std::sqrt(dt);
  Vec3 bg = bias0.gyro;
  Vec3 ba = bias0.accel;
  for (std::size_t k = 0; k < n; ++k) {
    const ImuState& s0 = gt.samples[k].state;
    const ImuState& s1 = gt.samples[k + 1].state;
    const Mat3 r0 = s0.attitude.rotation();
    const Vec3 omega = -boxminus(s1.attitude, s0.attitude) / dt;
    const Mat3 sigma = (dt / 6.0) * (Mat3::Identity() + 4.0 * so3_exp(0.5 * dt * omega) + so3_exp(dt * omega));
    const Vec3 accel = sigma.inverse() * (r0 * (s1.velocity - s0.velocity - gravity * dt));

    ImuSample m;
    m.timestamp = gt.samples[k].timestamp;
    m.gyro = omega + bg + rng.normal3(sg);
    m.accel = accel + ba + rng.normal3(sa);
    out.samples.push_back(m);
    out.gyro_bias.push_back(bg);
    out.accel_bias.push_back(ba);
    bg += rng.normal3(sbg);
    ba += rng.normal3(sba);
  }
  return out;
}

struct PixelMeasurement {
  std::uint64_t feature_id = 0;
  Vec2 pixel = Vec2::Zero();
};

struct CameraFrame {
  double timestamp = 0.0;
  std::vector<PixelMeasurement> measurements;  // sorted by feature id
};

/// All landmarks inside the depth range and the image, with pixel noise.
/// `frame_index` keys the noise substream.
inline CameraFrame synthesize_camera(const GroundTruth& gt, const SensorConfig& config, std::uint64_t seed, double t,
                                     std::uint64_t frame_index) {
  CameraFrame frame;
  frame.timestamp = t;
  const Pose pose = trajectory_at(gt.spec, t).state.pose();
  Rng rng = Rng::stream(seed, stream_tag::kCamera, frame_index);
  for (std::size_t id = 0; id < gt.landmarks.size(); ++id) {
    const Vec3 pc = landmark_in_camera(pose, config.camera, gt.landmarks[id]);
    if (pc.z() < config.min_depth || pc.z() > config.max_depth) continue;
    const Vec2 px = config.camera.project(pc);
    if (!config.camera.in_image(px)) continue;
    const double nx = rng.normal();
    const double ny = rng.normal();
    frame.measurements.push_back({id, px + config.pixel_sigma * Vec2(nx, ny)});
  }
  return frame;
}

struct GpsFix {
  double timestamp = 0.0;
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  double pos_sigma = 1.0;
  double vel_sigma = 0.1;
};

inline GpsFix synthesize_gps(const GroundTruth& gt, const SensorConfig& config, std::uint64_t seed, double t,
                             std::uint64_t fix_index) {
  const TruthSample truth = trajectory_at(gt.spec, t);
  Rng rng = Rng::stream(seed, stream_tag::kGps, fix_index);
  GpsFix fix;
  fix.timestamp = t;
  fix.position = truth.state.position + rng.normal3(config.gps_pos_sigma);
  fix.velocity = truth.state.velocity + rng.normal3(config.gps_vel_sigma);
  fix.pos_sigma = config.gps_pos_sigma;
  fix.vel_sigma = config.gps_vel_sigma;
  return fix;
}

/// Direct position/velocity measurement of the IMU state.  Rows are
/// [velocity; position]; the Jacobian spans only the IMU block.
inline LinearizedBlock gps_update_block(const GpsFix& fix, const StateVector& state) {
  using namespace imu_index;
  LinearizedBlock block;
  block.jacobian = MatrixXd::Zero(6, kDim);
  block.jacobian.block<3, 3>(0, kVelocity).setIdentity();
  block.jacobian.block<3, 3>(3, kPosition).setIdentity();
  block.residual.resize(6);
  block.residual.head<3>() = fix.velocity - state.imu.velocity;
  block.residual.tail<3>() = fix.position - state.imu.position;
  block.noise_cov = MatrixXd::Zero(6, 6);
  block.noise_cov.diagonal().head<3>().setConstant(fix.vel_sigma * fix.vel_sigma);
  block.noise_cov.diagonal().tail<3>().setConstant(fix.pos_sigma * fix.pos_sigma);
  return block;
}

}  // namespace cmsckf
