#pragma once

// Per-update cost versus the number of GLOBAL keyframes, with the local
// partition held fixed.  Used by the complexity report.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "cmsckf/accumulator.hpp"
#include "cmsckf/simulator.hpp"
#include "cmsckf/state.hpp"
#include "cmsckf/updates.hpp"

namespace cmsckf {

struct ScalingRow {
  int global_keyframes = 0;
  Index local_dim = 0;
  Index total_dim = 0;
  double compressed_flops = 0.0;
  double dense_flops = 0.0;
  double recovery_flops = 0.0;
  double compressed_seconds = 0.0;  // median
  double dense_seconds = 0.0;       // median
};

struct ScalingOptions {
  int clones = 10;
  int local_keyframes = 4;
  int residual_rows = 30;
  int repeats = 31;
  std::uint64_t seed = 7;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

inline StateVector scaling_state(int clones, int local_kf, int global_kf, Rng& rng) {
  StateVector s;
  auto random_pose = [&] {
    return Pose{UnitQuaternion::exp(rng.normal3(1.0)), rng.normal3(10.0)};
  };
  for (int i = 0; i < clones; ++i) s.clones.push_back({s.next_clone_id++, random_pose(), 0.0});
  for (int i = 0; i < local_kf + global_kf; ++i) {
    s.keyframes.push_back({s.next_keyframe_id++, random_pose(), 0.0, i < local_kf ? Partition::kLocal : Partition::kGlobal});
  }
  return s;
}

}  // namespace detail

inline std::vector<ScalingRow> measure_update_scaling(const std::vector<int>& global_counts,
                                                      const ScalingOptions& opt = {}) {
  using Clock = std::chrono::steady_clock;
  std::vector<ScalingRow> out;
  for (int g : global_counts) {
    Rng rng = Rng::stream(opt.seed, 100, static_cast<std::uint64_t>(g));
    const StateVector state0 = detail::scaling_state(opt.clones, opt.local_keyframes, g, rng);
    const Index n = state0.dim();
    const Index dl = state0.local_dim();
    MatrixXd a(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) a(i, j) = rng.normal();
    const MatrixXd p = a * a.transpose() / static_cast<double>(n) + 0.1 * MatrixXd::Identity(n, n);
    const PartitionedCovariance cov0 = PartitionedCovariance::split(p, dl);

    const Index m = opt.residual_rows;
    LinearizedBlock block{MatrixXd(m, dl), VectorXd(m), MatrixXd::Identity(m, m)};
    for (Index i = 0; i < m; ++i) {
      block.residual(i) = 1e-3 * rng.normal();
      for (Index j = 0; j < dl; ++j) block.jacobian(i, j) = rng.normal();
    }

    ScalingRow row;
    row.global_keyframes = g;
    row.local_dim = dl;
    row.total_dim = n;
    std::vector<double> tc;
    std::vector<double> td;
    for (int r = 0; r < opt.repeats; ++r) {
      StateVector s = state0;
      PartitionedCovariance c = cov0;
      CompressedAccumulator acc = CompressedAccumulator::identity(dl);
      auto t0 = Clock::now();
      row.compressed_flops = compressed_update(s, c, block, acc).flops;
      tc.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
      row.recovery_flops = flops::recovery(double(dl), double(acc.epoch_dim()), double(c.global_dim()));

      s = state0;
      c = cov0;
      t0 = Clock::now();
      row.dense_flops = full_update(s, c, block).flops;
      td.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    }
    row.compressed_seconds = detail::median(tc);
    row.dense_seconds = detail::median(td);
    out.push_back(row);
  }
  return out;
}

}  // namespace cmsckf
