#pragma once

// Measurement-update engines over a shared LinearizedBlock:
//
//   full_update        dense EKF over the whole state (the reference oracle)
//   schmidt_update     consider update, keyframe gain forced to zero
//   compressed_update  local EKF update; every local/global interaction is
//                      deferred into a CompressedAccumulator
//   recover_global     applies the accumulator to x_G, P_LG and P_GG at once

#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "cmsckf/accumulator.hpp"
#include "cmsckf/errors.hpp"
#include "cmsckf/state.hpp"
#include "cmsckf/vision.hpp"

namespace cmsckf {

struct UpdateReport {
  Index residual_dim = 0;
  double chi2 = 0.0;
  double flops = 0.0;  // analytic estimate
  bool accepted = false;
};

/// Analytic multiply-add counts (x2) of the dominant matrix products.
namespace flops {

inline double dense_update(double n, double c, double m) {
  return 2.0 * n * c * m        // P H^T
         + 2.0 * c * m * m      // H (P H^T)
         + m * m * m / 3.0      // Cholesky
         + 2.0 * n * m * m      // K
         + 2.0 * n * n * m      // K (H P)
         + 2.0 * n * m * m      // K S
         + 2.0 * n * n * m      // (K S) K^T
         + 2.0 * n * m;         // K r
}

inline double schmidt_update(double n, double active, double c, double m) {
  const double keyframes = n - active;
  return 2.0 * n * c * m + 2.0 * c * m * m + m * m * m / 3.0 + 2.0 * active * m * m  // gain
         + 2.0 * active * active * m                                                 // P_AA
         + 2.0 * active * keyframes * m                                              // P_AS
         + 2.0 * active * m;
}

inline double compressed_update(double local, double c, double m, double epoch) {
  return 2.0 * local * c * m + 2.0 * c * m * m + m * m * m / 3.0 + 2.0 * local * m * m  // gain
         + 2.0 * local * local * m                                                     // P_LL
         + 2.0 * m * c * epoch                                                         // H T
         + m * m * epoch                                                               // L^-1 (H T)
         + 2.0 * epoch * epoch * m                                                     // Y
         + 2.0 * epoch * m                                                             // u
         + 2.0 * local * m * epoch                                                     // T -= K H T
         + 2.0 * local * m;
}

inline double recovery(double local, double epoch, double global) {
  if (global == 0.0) return 0.0;
  return 2.0 * local * epoch * global      // T P_LG0
         + 2.0 * epoch * epoch * global    // Y P_LG0
         + 2.0 * epoch * global * global   // P_LG0^T (Y P_LG0)
         + 2.0 * epoch * global;           // P_LG0^T u
}

}  // namespace flops

namespace detail {

inline void check_block(const LinearizedBlock& block) {
  if (block.jacobian.rows() != block.rows() || block.noise_cov.rows() != block.rows() ||
      block.noise_cov.cols() != block.rows()) {
    throw DimensionMismatch("inconsistent block dimensions");
  }
}

inline Eigen::LLT<MatrixXd> factor_innovation(const MatrixXd& s) {
  Eigen::LLT<MatrixXd> llt(s);
  if (llt.info() != Eigen::Success || !(llt.rcond() >= 1e-12)) {
    throw SingularInnovation("innovation covariance is singular or ill-conditioned");
  }
  return llt;
}

// Runs `fn` on the full covariance; in place when there is no global block.
template <typename Fn>
void with_full_covariance(PartitionedCovariance& cov, Fn&& fn) {
  if (cov.global_dim() == 0) {
    fn(cov.ll);
    return;
  }
  const Index dl = cov.local_dim();
  MatrixXd p = cov.full();
  fn(p);
  cov = PartitionedCovariance::split(p, dl);
}

}  // namespace detail

/// Standard EKF update over the full state; covariance in Joseph form
/// (expanded, exploiting only that H has few rows).
///
/// With `deferred_tail` set, the last deferred_tail->size() entries of the
/// correction are added to it instead of being applied to the mean.  A dense
/// twin uses this to fold corrections of the global partition on the same
/// schedule as the compressed filter.
inline UpdateReport full_update(StateVector& state, PartitionedCovariance& cov, const LinearizedBlock& block,
                                VectorXd* deferred_tail = nullptr) {
  detail::check_block(block);
  const Index n = state.dim();
  const Index c = block.jacobian.cols();
  const Index m = block.rows();
  if (c > n || cov.dim() != n) throw DimensionMismatch("block or covariance does not match the full state");
  UpdateReport report{m, 0.0, flops::dense_update(double(n), double(c), double(m)), true};
  if (m == 0) return report;

  VectorXd dx;
  detail::with_full_covariance(cov, [&](MatrixXd& p) {
    const MatrixXd& h = block.jacobian;
    const MatrixXd pht = p.leftCols(c) * h.transpose();
    MatrixXd s = h * pht.topRows(c) + block.noise_cov;
    symmetrize(s);
    const auto llt = detail::factor_innovation(s);
    const MatrixXd k = llt.solve(pht.transpose()).transpose();
    const MatrixXd khp = k * pht.transpose();
    p += -khp - khp.transpose() + (k * s) * k.transpose();
    symmetrize(p);
    dx = k * block.residual;
    report.chi2 = block.residual.dot(llt.solve(block.residual));
  });
  if (deferred_tail != nullptr && deferred_tail->size() > 0) {
    const Index g = deferred_tail->size();
    if (g > n) throw DimensionMismatch("deferred tail longer than the state");
    *deferred_tail += dx.tail(g);
    apply_correction(state, dx.head(n - g), 0);
  } else {
    apply_correction(state, dx, 0);
  }
  return report;
}

/// Consider (Schmidt) update: the active part [IMU, clones] is updated, every
/// keyframe mean and the keyframe-keyframe covariance stay untouched, and
/// active/keyframe cross terms are kept consistent.
inline UpdateReport schmidt_update(StateVector& state, PartitionedCovariance& cov, const LinearizedBlock& block) {
  detail::check_block(block);
  const Index n = state.dim();
  const Index a = state.active_dim();
  const Index c = block.jacobian.cols();
  const Index m = block.rows();
  if (c > n || cov.dim() != n) throw DimensionMismatch("block or covariance does not match the full state");
  UpdateReport report{m, 0.0, flops::schmidt_update(double(n), double(a), double(c), double(m)), true};
  if (m == 0) return report;

  VectorXd dx;
  detail::with_full_covariance(cov, [&](MatrixXd& p) {
    const MatrixXd& h = block.jacobian;
    const MatrixXd pht = p.leftCols(c) * h.transpose();
    MatrixXd s = h * pht.topRows(c) + block.noise_cov;
    symmetrize(s);
    const auto llt = detail::factor_innovation(s);
    const MatrixXd k_a = llt.solve(pht.topRows(a).transpose()).transpose();
    MatrixXd p_aa = p.topLeftCorner(a, a) - k_a * pht.topRows(a).transpose();
    symmetrize(p_aa);
    p.topLeftCorner(a, a) = p_aa;
    if (n > a) {
      const MatrixXd p_as = p.topRightCorner(a, n - a) - k_a * pht.bottomRows(n - a).transpose();
      p.topRightCorner(a, n - a) = p_as;
      p.bottomLeftCorner(n - a, a) = p_as.transpose();
    }
    dx = k_a * block.residual;
    report.chi2 = block.residual.dot(llt.solve(block.residual));
  });
  apply_correction(state, dx, 0);
  return report;
}

/// Local EKF update with deferred global bookkeeping.  Touches only the local
/// mean, P_LL and the accumulator; cost depends on (dL, m) only.
inline UpdateReport compressed_update(StateVector& state, PartitionedCovariance& cov, const LinearizedBlock& block,
                                      CompressedAccumulator& acc) {
  detail::check_block(block);
  const Index dl = cov.local_dim();
  if (state.local_dim() != dl || acc.current_dim() != dl) {
    throw DimensionMismatch("local state, P_LL and accumulator disagree");
  }
  Index c = block.jacobian.cols();
  if (c > dl) {
    if (!block.jacobian.rightCols(c - dl).isZero(0.0)) {
      throw NonLocalBlock("block has nonzero columns on the global partition");
    }
    c = dl;
  }
  const Index m = block.rows();
  const Index e = acc.epoch_dim();
  UpdateReport report{m, 0.0, flops::compressed_update(double(dl), double(c), double(m), double(e)), true};
  if (m == 0) return report;

  const auto h = block.jacobian.leftCols(c);
  const MatrixXd pht = cov.ll.leftCols(c) * h.transpose();
  MatrixXd s = h * pht.topRows(c) + block.noise_cov;
  symmetrize(s);
  const auto llt = detail::factor_innovation(s);
  const MatrixXd k = llt.solve(pht.transpose()).transpose();

  // Accumulator terms use T before this update.
  const MatrixXd ht = h * acc.transform.topRows(c);
  const VectorXd s_inv_r = llt.solve(block.residual);
  acc.correction += ht.transpose() * s_inv_r;
  const MatrixXd w = llt.matrixL().solve(ht);
  acc.information.noalias() += w.transpose() * w;
  acc.transform.noalias() -= k * ht;

  cov.ll.noalias() -= k * pht.transpose();
  symmetrize(cov.ll);
  report.chi2 = block.residual.dot(s_inv_r);
  const VectorXd dx = k * block.residual;
  apply_correction(state, dx, 0);
  return report;
}

struct RecoveryReport {
  double flops = 0.0;
  Index global_dim = 0;
};

/// Applies the deferred corrections to the global partition and resets the
/// accumulator to (I, 0, 0).
inline RecoveryReport recover_global(StateVector& state, PartitionedCovariance& cov, CompressedAccumulator& acc) {
  const Index dl = cov.local_dim();
  const Index dg = cov.global_dim();
  if (acc.current_dim() != dl || acc.epoch_dim() != cov.lg.rows() || cov.lg.cols() != dg ||
      state.local_dim() != dl) {
    throw DimensionMismatch("accumulator does not match the partitioned covariance");
  }
  if (acc.is_reset()) return {0.0, dg};  // nothing deferred
  RecoveryReport report{flops::recovery(double(dl), double(acc.epoch_dim()), double(dg)), dg};
  if (dg == 0) {
    cov.lg.resize(dl, 0);
    acc.reset(dl);
    return report;
  }
  const MatrixXd lg0 = cov.lg;
  cov.lg = acc.transform * lg0;
  cov.gg.noalias() -= lg0.transpose() * (acc.information * lg0);
  symmetrize(cov.gg);
  const VectorXd dx = lg0.transpose() * acc.correction;
  apply_correction(state, dx, dl);
  acc.reset(dl);
  return report;
}

}  // namespace cmsckf
