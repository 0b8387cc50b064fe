#pragma once

// Filter state and its partitioned covariance.
//
// Error-state layout (always contiguous, local before global):
//
//   [ IMU (15) | clones (6 each) | LOCAL keyframes (6 each) | GLOBAL keyframes (6 each) ]
//   \______ active (A) ________/
//   \________________ local (L) ______________________/ \______ global (G) ______/
//
// IMU error: [dtheta, dbg, dv, dba, dp].  Clone/keyframe error: [dtheta, dp].
// Clones are always LOCAL.  Within each keyframe partition, keyframes are
// ordered by id.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmsckf/accumulator.hpp"
#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"

namespace cmsckf {

namespace imu_index {
inline constexpr Index kAttitude = 0;
inline constexpr Index kGyroBias = 3;
inline constexpr Index kVelocity = 6;
inline constexpr Index kAccelBias = 9;
inline constexpr Index kPosition = 12;
inline constexpr Index kDim = 15;
}  // namespace imu_index

inline constexpr Index kPoseDim = 6;

using Vec15 = Eigen::Matrix<double, 15, 1>;
using Mat15 = Eigen::Matrix<double, 15, 15>;

struct ImuState {
  UnitQuaternion attitude;  // R_IG
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 accel_bias = Vec3::Zero();
  Vec3 position = Vec3::Zero();

  Pose pose() const { return {attitude, position}; }
};

inline ImuState boxplus(const ImuState& s, const Vec15& d) {
  using namespace imu_index;
  ImuState out = s;
  out.attitude = boxplus(s.attitude, Vec3(d.segment<3>(kAttitude)));
  out.gyro_bias += d.segment<3>(kGyroBias);
  out.velocity += d.segment<3>(kVelocity);
  out.accel_bias += d.segment<3>(kAccelBias);
  out.position += d.segment<3>(kPosition);
  return out;
}

inline Vec15 boxminus(const ImuState& a, const ImuState& b) {
  using namespace imu_index;
  Vec15 d;
  d.segment<3>(kAttitude) = boxminus(a.attitude, b.attitude);
  d.segment<3>(kGyroBias) = a.gyro_bias - b.gyro_bias;
  d.segment<3>(kVelocity) = a.velocity - b.velocity;
  d.segment<3>(kAccelBias) = a.accel_bias - b.accel_bias;
  d.segment<3>(kPosition) = a.position - b.position;
  return d;
}

struct Clone {
  std::uint64_t id = 0;
  Pose pose;
  double timestamp = 0.0;
};

enum class Partition { kLocal, kGlobal };

inline char partition_char(Partition p) { return p == Partition::kLocal ? 'L' : 'G'; }

struct Keyframe {
  std::uint64_t id = 0;
  Pose pose;
  double timestamp = 0.0;
  Partition partition = Partition::kLocal;
};

struct StateVector {
  ImuState imu;
  std::vector<Clone> clones;
  std::vector<Keyframe> keyframes;  // error-state order: LOCAL then GLOBAL
  Vec3 local_center = Vec3::Zero();

  // Cadence reference for keyframe creation (run start until the first keyframe).
  double last_keyframe_time = 0.0;
  std::uint64_t next_clone_id = 0;
  std::uint64_t next_keyframe_id = 0;

  Index num_local_keyframes() const {
    return static_cast<Index>(std::count_if(keyframes.begin(), keyframes.end(), [](const Keyframe& k) {
      return k.partition == Partition::kLocal;
    }));
  }
  Index active_dim() const { return imu_index::kDim + kPoseDim * static_cast<Index>(clones.size()); }
  Index local_dim() const { return active_dim() + kPoseDim * num_local_keyframes(); }
  Index dim() const { return active_dim() + kPoseDim * static_cast<Index>(keyframes.size()); }
  Index global_dim() const { return dim() - local_dim(); }

  Index clone_offset(std::size_t i) const { return imu_index::kDim + kPoseDim * static_cast<Index>(i); }
  Index keyframe_offset(std::size_t i) const { return active_dim() + kPoseDim * static_cast<Index>(i); }

  std::optional<std::size_t> find_clone(std::uint64_t id) const {
    for (std::size_t i = 0; i < clones.size(); ++i)
      if (clones[i].id == id) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> find_keyframe(std::uint64_t id) const {
    for (std::size_t i = 0; i < keyframes.size(); ++i)
      if (keyframes[i].id == id) return i;
    return std::nullopt;
  }
};

/// Applies an error-state correction covering [offset, offset + delta.size()).
/// The range must start and end on block boundaries.
inline void apply_correction(StateVector& state, const Eigen::Ref<const VectorXd>& delta, Index offset = 0) {
  const Index end = offset + delta.size();
  auto covers = [&](Index start, Index len) { return start >= offset && start + len <= end; };
  if (covers(0, imu_index::kDim)) {
    state.imu = boxplus(state.imu, Vec15(delta.segment<imu_index::kDim>(-offset)));
  }
  for (std::size_t i = 0; i < state.clones.size(); ++i) {
    const Index o = state.clone_offset(i);
    if (covers(o, kPoseDim)) state.clones[i].pose = boxplus(state.clones[i].pose, Vec6(delta.segment<6>(o - offset)));
  }
  for (std::size_t i = 0; i < state.keyframes.size(); ++i) {
    const Index o = state.keyframe_offset(i);
    if (covers(o, kPoseDim)) {
      state.keyframes[i].pose = boxplus(state.keyframes[i].pose, Vec6(delta.segment<6>(o - offset)));
    }
  }
}

/// Rows of the IMU pose ([dtheta, dp]) inside the IMU error block.
inline std::vector<Index> imu_pose_rows() {
  return {imu_index::kAttitude, imu_index::kAttitude + 1, imu_index::kAttitude + 2,
          imu_index::kPosition, imu_index::kPosition + 1, imu_index::kPosition + 2};
}

struct PartitionedCovariance {
  MatrixXd ll;
  MatrixXd lg;
  MatrixXd gg;

  Index local_dim() const { return ll.rows(); }
  Index global_dim() const { return gg.rows(); }
  Index dim() const { return local_dim() + global_dim(); }

  /// Full matrix; only meaningful when no compressed update is pending.
  MatrixXd full() const {
    if (lg.rows() != ll.rows() || lg.cols() != gg.rows()) {
      throw DimensionMismatch("cross block does not match the current local partition");
    }
    const Index l = local_dim();
    const Index n = dim();
    MatrixXd p(n, n);
    p.topLeftCorner(l, l) = ll;
    p.topRightCorner(l, n - l) = lg;
    p.bottomLeftCorner(n - l, l) = lg.transpose();
    p.bottomRightCorner(n - l, n - l) = gg;
    return p;
  }

  static PartitionedCovariance split(const MatrixXd& p, Index local_dim) {
    const Index g = p.rows() - local_dim;
    return {p.topLeftCorner(local_dim, local_dim), p.topRightCorner(local_dim, g), p.bottomRightCorner(g, g)};
  }

  /// Marginal of the 6-dof block starting at `offset` (local or global).
  Mat6 pose_marginal(Index offset) const {
    if (offset < local_dim()) return ll.block<6, 6>(offset, offset);
    const Index o = offset - local_dim();
    return gg.block<6, 6>(o, o);
  }

  Mat6 imu_pose_marginal() const {
    const auto rows = imu_pose_rows();
    Mat6 m;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) m(i, j) = ll(rows[i], rows[j]);
    return m;
  }
};

inline void symmetrize(MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

struct StateConfig {
  Index max_clones = 10;
  double keyframe_interval = 5.0;
  double local_radius = 35.0;
  double recenter_radius = 17.5;
  bool keyframe_init_cov = true;
};

namespace detail {

// Rebuilds local rows/cols from `rows` (new index -> old index, duplicates
// allowed).  Rows of P_LG follow the same map, or the accumulator's T when a
// compressed epoch is open.
inline void remap_local(PartitionedCovariance& cov, const std::vector<Index>& rows, CompressedAccumulator* acc) {
  cov.ll = cov.ll(rows, rows).eval();
  if (acc != nullptr) {
    acc->transform = acc->transform(rows, Eigen::all).eval();
  } else {
    cov.lg = cov.lg(rows, Eigen::all).eval();
  }
}

inline void check_acc(const PartitionedCovariance& cov, const CompressedAccumulator* acc) {
  if (acc != nullptr && acc->current_dim() != cov.local_dim()) {
    throw DimensionMismatch("accumulator rows do not match the local partition");
  }
}

// Copies the IMU pose rows into a new trailing block of the range ending at
// `insert_at`; optionally zeroes the copy's cross terms.
inline void insert_pose_copy(PartitionedCovariance& cov, Index insert_at, bool keep_correlation,
                             CompressedAccumulator* acc) {
  const Index dl = cov.local_dim();
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(dl + kPoseDim));
  for (Index i = 0; i < insert_at; ++i) rows.push_back(i);
  for (Index r : imu_pose_rows()) rows.push_back(r);
  for (Index i = insert_at; i < dl; ++i) rows.push_back(i);
  remap_local(cov, rows, acc);
  if (!keep_correlation) {
    const Mat6 marginal = cov.ll.block<6, 6>(insert_at, insert_at);
    cov.ll.middleRows(insert_at, kPoseDim).setZero();
    cov.ll.middleCols(insert_at, kPoseDim).setZero();
    cov.ll.block<6, 6>(insert_at, insert_at) = marginal;
    if (acc != nullptr) {
      acc->transform.middleRows(insert_at, kPoseDim).setZero();
    } else {
      cov.lg.middleRows(insert_at, kPoseDim).setZero();
    }
  }
}

}  // namespace detail

/// Stochastic cloning of the current IMU pose into the sliding window.
/// The new clone is placed after the existing clones and is always LOCAL.
inline std::uint64_t augment_clone(StateVector& state, PartitionedCovariance& cov, double timestamp,
                                   const StateConfig& config, CompressedAccumulator* acc = nullptr) {
  if (static_cast<Index>(state.clones.size()) >= config.max_clones) {
    throw WindowFull("clone window holds " + std::to_string(state.clones.size()) + " clones");
  }
  detail::check_acc(cov, acc);
  const Index insert_at = state.active_dim();
  detail::insert_pose_copy(cov, insert_at, true, acc);
  const std::uint64_t id = state.next_clone_id++;
  state.clones.push_back({id, state.imu.pose(), timestamp});
  return id;
}

/// Removes the listed clones (Gaussian marginalization = submatrix).
inline void marginalize_clones(StateVector& state, PartitionedCovariance& cov, const std::vector<std::uint64_t>& ids,
                               CompressedAccumulator* acc = nullptr) {
  if (ids.empty()) return;
  detail::check_acc(cov, acc);
  std::vector<bool> drop(state.clones.size(), false);
  for (std::uint64_t id : ids) {
    const auto i = state.find_clone(id);
    if (!i) throw UnknownClone("no clone with id " + std::to_string(id));
    drop[*i] = true;
  }
  std::vector<Index> rows;
  for (Index i = 0; i < imu_index::kDim; ++i) rows.push_back(i);
  std::vector<Clone> kept;
  for (std::size_t c = 0; c < state.clones.size(); ++c) {
    if (drop[c]) continue;
    kept.push_back(state.clones[c]);
    for (Index k = 0; k < kPoseDim; ++k) rows.push_back(state.clone_offset(c) + k);
  }
  for (Index i = state.active_dim(); i < cov.local_dim(); ++i) rows.push_back(i);
  detail::remap_local(cov, rows, acc);
  state.clones = std::move(kept);
}

/// Registers the current IMU pose as a LOCAL keyframe.  With
/// `keyframe_init_cov` off only the marginal is copied and every cross
/// correlation of the new keyframe starts at zero.
inline std::uint64_t augment_keyframe(StateVector& state, PartitionedCovariance& cov, double timestamp,
                                      const StateConfig& config, CompressedAccumulator* acc = nullptr) {
  if (timestamp - state.last_keyframe_time < config.keyframe_interval - 1e-9) {
    throw TooSoon("keyframe requested " + std::to_string(timestamp - state.last_keyframe_time) +
                  " s after the previous one");
  }
  detail::check_acc(cov, acc);
  const Index insert_at = state.local_dim();
  detail::insert_pose_copy(cov, insert_at, config.keyframe_init_cov, acc);
  const std::uint64_t id = state.next_keyframe_id++;
  const auto first_global = std::find_if(state.keyframes.begin(), state.keyframes.end(),
                                         [](const Keyframe& k) { return k.partition == Partition::kGlobal; });
  state.keyframes.insert(first_global, Keyframe{id, state.imu.pose(), timestamp, Partition::kLocal});
  state.last_keyframe_time = timestamp;
  return id;
}

/// Re-tags keyframes against a new local center (radius rule) and permutes
/// the covariance to match.  Must directly follow a global recovery.
inline void repartition(StateVector& state, PartitionedCovariance& cov, CompressedAccumulator& acc,
                        const Vec3& new_center, const StateConfig& config) {
  if (!acc.is_reset() || acc.epoch_dim() != cov.local_dim()) {
    throw StaleAccumulator("repartition requires a freshly recovered accumulator");
  }
  std::vector<std::size_t> local;
  std::vector<std::size_t> global;
  for (std::size_t i = 0; i < state.keyframes.size(); ++i) {
    const bool inside = (state.keyframes[i].pose.position - new_center).norm() <= config.local_radius;
    (inside ? local : global).push_back(i);
  }
  auto by_id = [&](std::size_t a, std::size_t b) { return state.keyframes[a].id < state.keyframes[b].id; };
  std::sort(local.begin(), local.end(), by_id);
  std::sort(global.begin(), global.end(), by_id);

  std::vector<Index> rows;
  for (Index i = 0; i < state.active_dim(); ++i) rows.push_back(i);
  std::vector<Keyframe> ordered;
  for (const auto* group : {&local, &global}) {
    for (std::size_t i : *group) {
      Keyframe k = state.keyframes[i];
      k.partition = group == &local ? Partition::kLocal : Partition::kGlobal;
      ordered.push_back(k);
      for (Index j = 0; j < kPoseDim; ++j) rows.push_back(state.keyframe_offset(i) + j);
    }
  }
  const MatrixXd permuted = cov.full()(rows, rows);
  state.keyframes = std::move(ordered);
  state.local_center = new_center;
  cov = PartitionedCovariance::split(permuted, state.local_dim());
  acc.reset(state.local_dim());
}

/// Column index map from `from`'s error-state layout into `to`'s, matching
/// clones and keyframes by id.  Both states must hold the same clone and
/// keyframe ids.
inline std::vector<Index> error_state_map(const StateVector& from, const StateVector& to) {
  std::vector<Index> map(static_cast<std::size_t>(from.dim()));
  for (Index i = 0; i < imu_index::kDim; ++i) map[static_cast<std::size_t>(i)] = i;
  for (std::size_t c = 0; c < from.clones.size(); ++c) {
    const auto j = to.find_clone(from.clones[c].id);
    if (!j) throw UnknownClone("clone " + std::to_string(from.clones[c].id) + " missing from target layout");
    for (Index k = 0; k < kPoseDim; ++k)
      map[static_cast<std::size_t>(from.clone_offset(c) + k)] = to.clone_offset(*j) + k;
  }
  for (std::size_t f = 0; f < from.keyframes.size(); ++f) {
    const auto j = to.find_keyframe(from.keyframes[f].id);
    if (!j) throw DimensionMismatch("keyframe " + std::to_string(from.keyframes[f].id) + " missing from target layout");
    for (Index k = 0; k < kPoseDim; ++k)
      map[static_cast<std::size_t>(from.keyframe_offset(f) + k)] = to.keyframe_offset(*j) + k;
  }
  return map;
}

}  // namespace cmsckf
