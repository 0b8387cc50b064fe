#pragma once

// IMU time update.
//
// Inputs are held constant over each sample interval.  Attitude is integrated
// in closed form, velocity/position with RK4 on the resulting continuous
// kinematics.  The transition Jacobian is the exact derivative of that
// discrete map, so it agrees with finite differences of propagate_mean.

#include <string>

#include <Eigen/Core>

#include "cmsckf/accumulator.hpp"
#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"
#include "cmsckf/state.hpp"

namespace cmsckf {

inline const Vec3 kDefaultGravity{0.0, 0.0, -9.81};

struct ImuSample {
  double timestamp = 0.0;
  Vec3 accel = Vec3::Zero();  // specific force in {I}, m/s^2
  Vec3 gyro = Vec3::Zero();   // angular rate of {I}, rad/s
};

/// Continuous-time spectral densities.
struct ImuNoiseParams {
  double gyro_noise_density = 3e-4;   // rad/s/sqrt(Hz)
  double accel_noise_density = 3e-3;  // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 1e-5;       // rad/s^2/sqrt(Hz)
  double accel_bias_walk = 2e-4;      // m/s^3/sqrt(Hz)

  bool valid() const {
    return gyro_noise_density > 0.0 && accel_noise_density > 0.0 && gyro_bias_walk > 0.0 && accel_bias_walk > 0.0;
  }
};

/// IMU block of the active-state transition; clone blocks are identity.
struct TransitionBlock {
  Mat15 jacobian = Mat15::Identity();
  Mat15 noise = Mat15::Zero();
};

namespace detail {

inline void check_dt(double dt) {
  if (!(dt > 0.0)) throw NonPositiveDt("propagation interval must be positive, got " + std::to_string(dt));
}

// Global-frame acceleration at time tau into the interval.
inline Vec3 global_accel(const Mat3& r0_t, const Vec3& omega, const Vec3& accel, double tau, const Vec3& gravity) {
  return r0_t * (so3_exp(omega * tau) * accel) + gravity;
}

}  // namespace detail

inline ImuState propagate_mean(const ImuState& imu, const ImuSample& sample, double dt,
                               const Vec3& gravity = kDefaultGravity) {
  detail::check_dt(dt);
  const Vec3 omega = sample.gyro - imu.gyro_bias;
  const Vec3 accel = sample.accel - imu.accel_bias;
  const Mat3 r0_t = imu.attitude.rotation().transpose();

  const Vec3 k0 = detail::global_accel(r0_t, omega, accel, 0.0, gravity);
  const Vec3 k1 = detail::global_accel(r0_t, omega, accel, 0.5 * dt, gravity);
  const Vec3 k2 = detail::global_accel(r0_t, omega, accel, dt, gravity);

  ImuState out = imu;
  out.attitude = UnitQuaternion::exp(-omega * dt) * imu.attitude;
  out.velocity = imu.velocity + (dt / 6.0) * (k0 + 4.0 * k1 + k2);
  out.position = imu.position + dt * imu.velocity + (dt * dt / 6.0) * (k0 + 2.0 * k1);
  return out;
}

inline TransitionBlock compute_transition(const ImuState& imu, const ImuSample& sample, double dt,
                                          const ImuNoiseParams& noise) {
  using namespace imu_index;
  detail::check_dt(dt);
  const Vec3 omega = sample.gyro - imu.gyro_bias;
  const Vec3 accel = sample.accel - imu.accel_bias;
  const Mat3 r0_t = imu.attitude.rotation().transpose();

  struct Stage {
    Mat3 d_theta, d_bg, d_ba;
  };
  auto stage = [&](double tau) {
    const Mat3 e = so3_exp(omega * tau);
    return Stage{r0_t * skew(e * accel), r0_t * e * skew(accel) * so3_right_jacobian(omega * tau) * tau, -r0_t * e};
  };
  const Stage s0 = stage(0.0);
  const Stage s1 = stage(0.5 * dt);
  const Stage s2 = stage(dt);
  const double wv = dt / 6.0;
  const double wp = dt * dt / 6.0;

  TransitionBlock tb;
  Mat15& j = tb.jacobian;
  j.setIdentity();
  j.block<3, 3>(kAttitude, kAttitude) = so3_exp(-omega * dt);
  j.block<3, 3>(kAttitude, kGyroBias) = so3_left_jacobian(-omega * dt) * dt;

  j.block<3, 3>(kVelocity, kAttitude) = wv * (s0.d_theta + 4.0 * s1.d_theta + s2.d_theta);
  j.block<3, 3>(kVelocity, kGyroBias) = wv * (s0.d_bg + 4.0 * s1.d_bg + s2.d_bg);
  j.block<3, 3>(kVelocity, kAccelBias) = wv * (s0.d_ba + 4.0 * s1.d_ba + s2.d_ba);

  j.block<3, 3>(kPosition, kAttitude) = wp * (s0.d_theta + 2.0 * s1.d_theta);
  j.block<3, 3>(kPosition, kGyroBias) = wp * (s0.d_bg + 2.0 * s1.d_bg);
  j.block<3, 3>(kPosition, kAccelBias) = wp * (s0.d_ba + 2.0 * s1.d_ba);
  j.block<3, 3>(kPosition, kVelocity) = dt * Mat3::Identity();

  // First-order discretization of the white-noise inputs.
  auto sq = [](double v) { return v * v; };
  tb.noise.block<3, 3>(kAttitude, kAttitude) = sq(noise.gyro_noise_density) * dt * Mat3::Identity();
  tb.noise.block<3, 3>(kGyroBias, kGyroBias) = sq(noise.gyro_bias_walk) * dt * Mat3::Identity();
  tb.noise.block<3, 3>(kVelocity, kVelocity) = sq(noise.accel_noise_density) * dt * Mat3::Identity();
  tb.noise.block<3, 3>(kAccelBias, kAccelBias) = sq(noise.accel_bias_walk) * dt * Mat3::Identity();
  return tb;
}

/// P_LL <- Jbar P_LL Jbar^T + blkdiag(Q, 0) with Jbar = blkdiag(J, I).
/// P_LG and P_GG are never touched: the cross term is either propagated
/// directly (no accumulator) or deferred into acc.transform.
inline void propagate_covariance(PartitionedCovariance& cov, const TransitionBlock& tb,
                                 CompressedAccumulator* acc = nullptr) {
  constexpr Index n = imu_index::kDim;
  const Index dl = cov.local_dim();
  if (dl < n || cov.ll.cols() != dl) throw DimensionMismatch("local covariance smaller than the IMU block");
  if (acc != nullptr && acc->current_dim() != dl) {
    throw DimensionMismatch("accumulator rows do not match the local partition");
  }
  if (acc == nullptr && cov.lg.rows() != dl) throw DimensionMismatch("cross block rows do not match P_LL");

  const MatrixXd top = tb.jacobian * cov.ll.topRows(n);  // J [P_II P_IR]
  cov.ll.topRows(n) = top;
  cov.ll.leftCols(n) = top.transpose();
  const MatrixXd corner = top.leftCols(n) * tb.jacobian.transpose() + tb.noise;
  cov.ll.topLeftCorner(n, n) = 0.5 * (corner + corner.transpose());

  if (acc != nullptr) {
    acc->transform.topRows(n) = (tb.jacobian * acc->transform.topRows(n)).eval();
  } else if (cov.lg.cols() > 0) {
    cov.lg.topRows(n) = (tb.jacobian * cov.lg.topRows(n)).eval();
  }
}

}  // namespace cmsckf
