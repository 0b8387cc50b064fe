#pragma once

// Feature tracks -> feature-marginalized linear measurement blocks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <boost/math/distributions/chi_squared.hpp>

#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"
#include "cmsckf/state.hpp"

namespace cmsckf {

/// Pinhole camera rigidly mounted on the IMU.  `extrinsics.orientation` is
/// R_CI ({I} -> {C}); `extrinsics.position` is the camera origin in {I}.
/// Camera axes: z optical, x right, y down.
struct PinholeCamera {
  Vec2 focal{450.0, 450.0};
  Vec2 principal_point{320.0, 240.0};
  Pose extrinsics;
  int width = 640;
  int height = 480;

  bool valid() const {
    return focal.x() > 0.0 && focal.y() > 0.0 && width > 0 && height > 0 && principal_point.x() > 0.0 &&
           principal_point.y() > 0.0 && principal_point.x() < width && principal_point.y() < height;
  }

  bool in_image(const Vec2& px) const { return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height; }

  Vec2 project(const Vec3& p_c) const {
    return {focal.x() * p_c.x() / p_c.z() + principal_point.x(), focal.y() * p_c.y() / p_c.z() + principal_point.y()};
  }

  Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p_c) const {
    const double iz = 1.0 / p_c.z();
    Eigen::Matrix<double, 2, 3> j;
    j << focal.x() * iz, 0.0, -focal.x() * p_c.x() * iz * iz,
         0.0, focal.y() * iz, -focal.y() * p_c.y() * iz * iz;
    return j;
  }

  /// Unit bearing of a pixel in the camera frame.
  Vec3 bearing(const Vec2& px) const {
    return Vec3((px.x() - principal_point.x()) / focal.x(), (px.y() - principal_point.y()) / focal.y(), 1.0)
        .normalized();
  }
};

/// Camera pose in {G} for an IMU pose: orientation R_CG, position of the
/// camera origin in {G}.
inline Pose camera_pose(const Pose& imu_pose, const PinholeCamera& cam) {
  return {compose(cam.extrinsics.orientation, imu_pose.orientation),
          imu_pose.position + imu_pose.orientation.rotation().transpose() * cam.extrinsics.position};
}

/// Landmark expressed in the camera frame of the given IMU pose.
inline Vec3 landmark_in_camera(const Pose& imu_pose, const PinholeCamera& cam, const Vec3& p_g) {
  const Vec3 a = imu_pose.orientation.rotation() * (p_g - imu_pose.position);
  return cam.extrinsics.orientation.rotation() * (a - cam.extrinsics.position);
}

struct FrameRef {
  enum class Kind { kClone, kKeyframe };
  Kind kind = Kind::kClone;
  std::uint64_t id = 0;

  static FrameRef clone(std::uint64_t id) { return {Kind::kClone, id}; }
  static FrameRef keyframe(std::uint64_t id) { return {Kind::kKeyframe, id}; }
  friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

struct FeatureObservation {
  FrameRef frame;
  Vec2 pixel = Vec2::Zero();
};

struct FeatureTrack {
  std::uint64_t feature_id = 0;
  std::vector<FeatureObservation> observations;
  double pixel_sigma = 1.0;
};

/// Linear measurement r = H x~ + n.  `jacobian` covers the leading
/// jacobian.cols() error-state columns; any columns past that are zero.
struct LinearizedBlock {
  MatrixXd jacobian;
  VectorXd residual;
  MatrixXd noise_cov;

  Index rows() const { return residual.size(); }
};

namespace detail {

struct ResolvedFrame {
  Pose pose;      // IMU pose of the frame
  Index offset;   // error-state column of its [dtheta, dp] block
  bool keyframe;
  Partition partition;
};

inline ResolvedFrame resolve(const StateVector& state, const FrameRef& ref) {
  if (ref.kind == FrameRef::Kind::kClone) {
    if (const auto i = state.find_clone(ref.id)) {
      return {state.clones[*i].pose, state.clone_offset(*i), false, Partition::kLocal};
    }
    throw UnknownFrameRef("clone " + std::to_string(ref.id) + " not in the window");
  }
  if (const auto i = state.find_keyframe(ref.id)) {
    const Keyframe& kf = state.keyframes[*i];
    return {kf.pose, state.keyframe_offset(*i), true, kf.partition};
  }
  throw UnknownFrameRef("keyframe " + std::to_string(ref.id) + " not in the state");
}

}  // namespace detail

struct TriangulationOptions {
  double min_parallax_deg = 1.0;
  int max_iterations = 10;
  double step_tolerance = 1e-6;  // m
};

/// Multi-view triangulation: midpoint least-squares initialization refined
/// by Gauss-Newton on the reprojection error.
inline Vec3 triangulate(const FeatureTrack& track, const StateVector& state, const PinholeCamera& cam,
                        const TriangulationOptions& opt = {}) {
  const std::size_t n = track.observations.size();
  if (n < 2) throw InsufficientObservations("triangulation needs at least two observations");

  std::vector<Pose> cams;
  std::vector<Vec3> bearings;
  cams.reserve(n);
  bearings.reserve(n);
  for (const auto& obs : track.observations) {
    const Pose c = camera_pose(detail::resolve(state, obs.frame).pose, cam);
    cams.push_back(c);
    bearings.push_back(c.orientation.rotation().transpose() * cam.bearing(obs.pixel));
  }

  double max_angle = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      max_angle = std::max(max_angle, std::atan2(bearings[i].cross(bearings[j]).norm(), bearings[i].dot(bearings[j])));
  if (max_angle * 180.0 / std::numbers::pi < opt.min_parallax_deg) {
    throw LowParallax("max parallax " + std::to_string(max_angle * 180.0 / std::numbers::pi) + " deg");
  }

  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Mat3 proj = Mat3::Identity() - bearings[i] * bearings[i].transpose();
    a += proj;
    b += proj * cams[i].position;
  }
  Vec3 p = a.ldlt().solve(b);

  auto cost_at = [&](const Vec3& x) {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 pc = cams[i].orientation.rotation() * (x - cams[i].position);
      c += (track.observations[i].pixel - cam.project(pc)).squaredNorm();
    }
    return c;
  };

  double cost = cost_at(p);
  int grew = 0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Mat3 jtj = Mat3::Zero();
    Vec3 jtr = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const Mat3 r_cg = cams[i].orientation.rotation();
      const Vec3 pc = r_cg * (p - cams[i].position);
      const Eigen::Matrix<double, 2, 3> jac = cam.projection_jacobian(pc) * r_cg;
      jtj += jac.transpose() * jac;
      jtr += jac.transpose() * (track.observations[i].pixel - cam.project(pc));
    }
    const Vec3 step = jtj.ldlt().solve(jtr);
    p += step;
    const double next = cost_at(p);
    grew = next > cost ? grew + 1 : 0;
    if (grew >= 3) throw Diverged("reprojection error grew for 3 consecutive iterations");
    cost = next;
    if (step.norm() < opt.step_tolerance) break;
  }

  for (const Pose& c : cams) {
    if ((c.orientation.rotation() * (p - c.position)).z() <= 0.0) {
      throw BehindCamera("triangulated point has non-positive depth");
    }
  }
  return p;
}

struct FeatureJacobians {
  MatrixXd h_x;  // m x state.dim()
  MatrixXd h_f;  // m x 3
  VectorXd residual;
};

/// Stacked reprojection residual z - h(x, p_f) and its Jacobians.
inline FeatureJacobians build_feature_jacobians(const FeatureTrack& track, const StateVector& state,
                                                const PinholeCamera& cam, const Vec3& p_f) {
  const Index m = 2 * static_cast<Index>(track.observations.size());
  FeatureJacobians out{MatrixXd::Zero(m, state.dim()), MatrixXd::Zero(m, 3), VectorXd::Zero(m)};
  const Mat3 r_ci = cam.extrinsics.orientation.rotation();
  for (std::size_t k = 0; k < track.observations.size(); ++k) {
    const auto& obs = track.observations[k];
    const detail::ResolvedFrame f = detail::resolve(state, obs.frame);
    const Mat3 r_ig = f.pose.orientation.rotation();
    const Vec3 a = r_ig * (p_f - f.pose.position);
    const Vec3 pc = r_ci * (a - cam.extrinsics.position);
    const Eigen::Matrix<double, 2, 3> jp = cam.projection_jacobian(pc) * r_ci;
    const Index row = 2 * static_cast<Index>(k);
    out.h_x.block<2, 3>(row, f.offset) = jp * (-skew(a));
    out.h_x.block<2, 3>(row, f.offset + 3) = -jp * r_ig;
    out.h_f.block<2, 3>(row, 0) = jp * r_ig;
    out.residual.segment<2>(row) = obs.pixel - cam.project(pc);
  }
  return out;
}

struct ProjectionDiagnostics {
  double orthogonality = 0.0;  // max |N^T H_f|
  Index input_rows = 0;
  Index output_rows = 0;
};

/// Orthonormal basis of the left nullspace of H_f (m x (m - 3)), from a
/// Householder QR of H_f.
inline MatrixXd left_nullspace(const MatrixXd& h_f) {
  const Eigen::HouseholderQR<MatrixXd> qr(h_f);
  const MatrixXd q = qr.householderQ();
  return q.rightCols(h_f.rows() - h_f.cols());
}

/// Projects the stacked residual onto the left nullspace of H_f so that it no
/// longer depends on the feature position error.
inline LinearizedBlock nullspace_project(const MatrixXd& h_x, const MatrixXd& h_f, const VectorXd& residual,
                                         const MatrixXd& r_f, ProjectionDiagnostics* diag = nullptr) {
  const Index m = h_f.rows();
  if (m <= 3) throw InsufficientObservations("nullspace projection needs more than 3 rows");
  const Eigen::JacobiSVD<MatrixXd> svd(h_f);
  const auto& sv = svd.singularValues();
  if (sv.size() < 3 || !(sv(2) > 1e-9 * sv(0))) {
    throw RankDeficientFeature("feature Jacobian has rank < 3");
  }
  const MatrixXd n = left_nullspace(h_f);
  LinearizedBlock block;
  block.jacobian = n.transpose() * h_x;
  block.residual = n.transpose() * residual;
  block.noise_cov = n.transpose() * r_f * n;
  symmetrize(block.noise_cov);
  if (diag != nullptr) {
    diag->orthogonality = (n.transpose() * h_f).cwiseAbs().maxCoeff();
    diag->input_rows = m;
    diag->output_rows = block.rows();
  }
  return block;
}

/// Triangulate -> Jacobians -> nullspace projection for one track.  The
/// returned block's Jacobian is trimmed to the last observed column block.
inline LinearizedBlock build_feature_block(const FeatureTrack& track, const StateVector& state,
                                           const PinholeCamera& cam, ProjectionDiagnostics* diag = nullptr,
                                           const TriangulationOptions& opt = {}) {
  const Vec3 p_f = triangulate(track, state, cam, opt);
  FeatureJacobians j = build_feature_jacobians(track, state, cam, p_f);
  Index last = 0;
  for (const auto& obs : track.observations) last = std::max(last, detail::resolve(state, obs.frame).offset + kPoseDim);
  const double var = track.pixel_sigma * track.pixel_sigma;
  const Index m = j.residual.size();
  return nullspace_project(j.h_x.leftCols(last), j.h_f, j.residual, var * MatrixXd::Identity(m, m), diag);
}

/// Loop-closure style block: a track re-observing a landmark that a LOCAL
/// keyframe also saw.
inline LinearizedBlock build_keyframe_constraint(const FeatureTrack& track, const StateVector& state,
                                                 const PinholeCamera& cam, ProjectionDiagnostics* diag = nullptr) {
  bool has_clone = false;
  bool has_keyframe = false;
  for (const auto& obs : track.observations) {
    const detail::ResolvedFrame f = detail::resolve(state, obs.frame);
    if (f.keyframe) {
      has_keyframe = true;
      if (f.partition == Partition::kGlobal) {
        throw GlobalKeyframeTouched("track " + std::to_string(track.feature_id) + " references GLOBAL keyframe " +
                                    std::to_string(obs.frame.id));
      }
    } else {
      has_clone = true;
    }
  }
  if (!has_clone || !has_keyframe) {
    throw InsufficientObservations("keyframe constraint needs a keyframe and a clone observation");
  }
  return build_feature_block(track, state, cam, diag);
}

/// 95% chi-square quantile for `dof` degrees of freedom.
inline double chi2_threshold(Index dof) {
  constexpr Index kTable = 512;
  auto quantile = [](Index k) {
    return boost::math::quantile(boost::math::chi_squared(static_cast<double>(k)), 0.95);
  };
  static const std::vector<double> table = [&] {
    std::vector<double> t(kTable + 1, 0.0);
    for (Index k = 1; k <= kTable; ++k) t[static_cast<std::size_t>(k)] = quantile(k);
    return t;
  }();
  return dof <= kTable ? table[static_cast<std::size_t>(dof)] : quantile(dof);
}

/// Mahalanobis test of the block's residual against the covariance of the
/// columns it spans.
inline bool chi2_gate(const LinearizedBlock& block, const MatrixXd& cov, double* chi2 = nullptr) {
  const Index c = block.jacobian.cols();
  if (c > cov.rows() || block.jacobian.rows() != block.rows()) {
    throw DimensionMismatch("block spans more columns than the covariance");
  }
  const MatrixXd s = block.jacobian * cov.topLeftCorner(c, c) * block.jacobian.transpose() + block.noise_cov;
  const double value = block.residual.dot(s.ldlt().solve(block.residual));
  if (chi2 != nullptr) *chi2 = value;
  return value <= chi2_threshold(block.rows());
}

}  // namespace cmsckf
