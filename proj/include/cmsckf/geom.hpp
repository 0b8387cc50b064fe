#pragma once

// Rotation and pose kernel shared by every Jacobian in the filter.
//
// Conventions (used everywhere, do not mix):
//  * Quaternions are Hamilton, stored scalar-first (w, x, y, z), canonical
//    sign w >= 0.
//  * An attitude quaternion q represents R(q) = R_IG, the rotation taking a
//    vector expressed in the global frame {G} into the body frame {I}:
//    v_I = R(q) v_G.
//  * Attitude error is a 3-vector dtheta applied on the left:
//    R_true = Exp(dtheta) * R_est.  Position error is additive in {G}.

#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace cmsckf {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

/// Rodrigues formula.
inline Mat3 so3_exp(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 k = skew(phi);
  if (theta2 < 1e-16) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() + (std::sin(theta) / theta) * k +
         ((1.0 - std::cos(theta)) / theta2) * k * k;
}

inline Vec3 so3_log(const Mat3& r) {
  // Quaternion route is stable near both 0 and pi.
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  const Vec3 v = q.vec();
  const double s = v.norm();
  if (s < 1e-12) {
    return 2.0 * v / q.w();
  }
  return (2.0 * std::atan2(s, q.w()) / s) * v;
}

/// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
inline Mat3 so3_right_jacobian(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 k = skew(phi);
  if (theta2 < 1e-10) {
    return Mat3::Identity() - 0.5 * k + (1.0 / 6.0) * k * k;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() - ((1.0 - std::cos(theta)) / theta2) * k +
         ((theta - std::sin(theta)) / (theta2 * theta)) * k * k;
}

/// Left Jacobian: Exp(phi + d) ~= Exp(Jl(phi) d) Exp(phi).
inline Mat3 so3_left_jacobian(const Vec3& phi) { return so3_right_jacobian(-phi); }

class UnitQuaternion {
 public:
  UnitQuaternion() : wxyz_(1.0, 0.0, 0.0, 0.0) {}
  UnitQuaternion(double w, double x, double y, double z) : wxyz_(w, x, y, z) { canonicalize(); }

  static UnitQuaternion identity() { return {}; }

  static UnitQuaternion from_rotation(const Mat3& r) {
    const Eigen::Quaterniond q(r);
    return {q.w(), q.x(), q.y(), q.z()};
  }

  /// Quaternion of Exp(rotation_vector).
  static UnitQuaternion exp(const Vec3& rotation_vector) {
    const double theta = rotation_vector.norm();
    if (theta < 1e-12) {
      const Vec3 h = 0.5 * rotation_vector;
      return {1.0, h.x(), h.y(), h.z()};
    }
    const Vec3 axis = rotation_vector / theta;
    const double s = std::sin(0.5 * theta);
    return {std::cos(0.5 * theta), s * axis.x(), s * axis.y(), s * axis.z()};
  }

  double w() const { return wxyz_[0]; }
  double x() const { return wxyz_[1]; }
  double y() const { return wxyz_[2]; }
  double z() const { return wxyz_[3]; }
  const Vec4& wxyz() const { return wxyz_; }

  Mat3 rotation() const {
    return Eigen::Quaterniond(w(), x(), y(), z()).toRotationMatrix();
  }

  /// Rotation vector of this quaternion.
  Vec3 log() const {
    const Vec3 v(x(), y(), z());
    const double s = v.norm();
    if (s < 1e-12) return 2.0 * v / w();
    return (2.0 * std::atan2(s, w()) / s) * v;
  }

  UnitQuaternion inverse() const { return {w(), -x(), -y(), -z()}; }

  friend UnitQuaternion operator*(const UnitQuaternion& a, const UnitQuaternion& b) {
    return {a.w() * b.w() - a.x() * b.x() - a.y() * b.y() - a.z() * b.z(),
            a.w() * b.x() + a.x() * b.w() + a.y() * b.z() - a.z() * b.y(),
            a.w() * b.y() - a.x() * b.z() + a.y() * b.w() + a.z() * b.x(),
            a.w() * b.z() + a.x() * b.y() - a.y() * b.x() + a.z() * b.w()};
  }

  friend bool operator==(const UnitQuaternion& a, const UnitQuaternion& b) {
    return a.wxyz_ == b.wxyz_;
  }

 private:
  void canonicalize() {
    wxyz_.normalize();
    if (wxyz_[0] < 0.0) wxyz_ = -wxyz_;
  }

  Vec4 wxyz_;
};

/// R(compose(a, b)) == R(a) * R(b).
inline UnitQuaternion compose(const UnitQuaternion& a, const UnitQuaternion& b) { return a * b; }

inline UnitQuaternion boxplus(const UnitQuaternion& q, const Vec3& dtheta) {
  return UnitQuaternion::exp(dtheta) * q;
}

/// dtheta such that boxplus(b, dtheta) == a.
inline Vec3 boxminus(const UnitQuaternion& a, const UnitQuaternion& b) {
  return (a * b.inverse()).log();
}

/// Pose of a body: orientation is R_IG (global to body), position is the
/// body origin in {G}.  Error-state layout is [dtheta, dp].
struct Pose {
  UnitQuaternion orientation;
  Vec3 position = Vec3::Zero();

  friend bool operator==(const Pose& a, const Pose& b) {
    return a.orientation == b.orientation && a.position == b.position;
  }
};

inline Pose boxplus(const Pose& pose, const Vec6& delta) {
  if (delta.isZero(0.0)) return pose;
  return {boxplus(pose.orientation, Vec3(delta.head<3>())), pose.position + delta.tail<3>()};
}

inline Vec6 boxminus(const Pose& a, const Pose& b) {
  Vec6 d;
  d << boxminus(a.orientation, b.orientation), a.position - b.position;
  return d;
}

}  // namespace cmsckf
