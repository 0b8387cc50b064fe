#pragma once

#include <Eigen/Core>

namespace cmsckf {

/// Deferred record of everything that happened to the local partition since
/// the last global recovery.
///
///   transform   T  (dL_now x dL_epoch)  current local error = T * epoch local
///                                        error, as far as correlations with
///                                        the global partition are concerned.
///                                        Accumulates propagation Jacobians,
///                                        update factors (I - K H), and the row
///                                        duplication / deletion done by
///                                        cloning and marginalization.
///   information Y  (dL_epoch x dL_epoch) sum of T^T H^T S^-1 H T.
///   correction  u  (dL_epoch)            sum of T^T H^T S^-1 r.
///
/// With P_LG0 the local/global cross covariance at the epoch, the current
/// blocks are P_LG = T P_LG0, P_GG = P_GG0 - P_LG0^T Y P_LG0 and the global
/// mean is x_G0 [+] P_LG0^T u.
struct CompressedAccumulator {
  Eigen::MatrixXd transform;
  Eigen::MatrixXd information;
  Eigen::VectorXd correction;

  static CompressedAccumulator identity(Eigen::Index local_dim) {
    CompressedAccumulator acc;
    acc.reset(local_dim);
    return acc;
  }

  void reset(Eigen::Index local_dim) {
    transform = Eigen::MatrixXd::Identity(local_dim, local_dim);
    information = Eigen::MatrixXd::Zero(local_dim, local_dim);
    correction = Eigen::VectorXd::Zero(local_dim);
  }

  Eigen::Index epoch_dim() const { return transform.cols(); }
  Eigen::Index current_dim() const { return transform.rows(); }

  bool is_reset() const {
    return transform.rows() == transform.cols() && transform.isIdentity(0.0) &&
           information.isZero(0.0) && correction.isZero(0.0) &&
           information.rows() == transform.cols() && correction.size() == transform.cols();
  }
};

}  // namespace cmsckf
