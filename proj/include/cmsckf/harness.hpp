#pragma once

// Experiment driver: simulator -> front end -> one filter back end, with an
// optional dense twin that replays the primary's linearizations.
//
// Per camera frame:
//   propagate to the frame time -> clone -> keyframe cadence -> vision update
//   -> GPS update -> marginalize clones -> recenter check
// and one final recovery at the end of the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "cmsckf/accumulator.hpp"
#include "cmsckf/errors.hpp"
#include "cmsckf/geom.hpp"
#include "cmsckf/propagation.hpp"
#include "cmsckf/scenario.hpp"
#include "cmsckf/simulator.hpp"
#include "cmsckf/state.hpp"
#include "cmsckf/updates.hpp"
#include "cmsckf/vision.hpp"

namespace cmsckf {

enum class Mode { kFull, kSchmidt, kCompressed };

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kFull: return "full";
    case Mode::kSchmidt: return "schmidt";
    case Mode::kCompressed: return "compressed";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "full") return Mode::kFull;
  if (s == "schmidt") return Mode::kSchmidt;
  if (s == "compressed") return Mode::kCompressed;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

namespace event {
inline constexpr unsigned kKeyframeAdded = 1u;
inline constexpr unsigned kGps = 2u;
inline constexpr unsigned kRecovery = 4u;
inline constexpr unsigned kRecenter = 8u;
}  // namespace event

inline std::string event_string(unsigned events) {
  static constexpr std::pair<unsigned, std::string_view> kNames[] = {
      {event::kKeyframeAdded, "KF_ADDED"}, {event::kGps, "GPS"}, {event::kRecovery, "RECOVERY"},
      {event::kRecenter, "RECENTER"}};
  std::string out;
  for (const auto& [bit, name] : kNames) {
    if ((events & bit) == 0) continue;
    if (!out.empty()) out += '|';
    out += name;
  }
  return out;
}

inline unsigned parse_events(std::string_view s) {
  unsigned out = 0;
  while (!s.empty()) {
    const auto bar = s.find('|');
    const std::string_view tok = s.substr(0, bar);
    if (tok == "KF_ADDED") out |= event::kKeyframeAdded;
    else if (tok == "GPS") out |= event::kGps;
    else if (tok == "RECOVERY") out |= event::kRecovery;
    else if (tok == "RECENTER") out |= event::kRecenter;
    else throw IoError("unknown event tag '" + std::string(tok) + "'");
    if (bar == std::string_view::npos) break;
    s.remove_prefix(bar + 1);
  }
  return out;
}

/// One filter back end and everything it owns.
struct FilterUnit {
  Mode mode = Mode::kCompressed;
  StateConfig config;
  ImuNoiseParams noise;
  Vec3 gravity = kDefaultGravity;
  StateVector state;
  PartitionedCovariance cov;
  CompressedAccumulator acc;
  // Dense twin only: corrections to the GLOBAL partition held back until the
  // primary recovers.
  bool defer_global = false;
  VectorXd deferred;

  static FilterUnit create(Mode mode, const ImuState& imu, const Mat15& p0, const StateConfig& config,
                           const ImuNoiseParams& noise) {
    FilterUnit u;
    u.mode = mode;
    u.config = config;
    u.noise = noise;
    u.state.imu = imu;
    u.state.local_center = imu.position;
    u.cov.ll = p0;
    u.cov.lg.resize(imu_index::kDim, 0);
    u.cov.gg.resize(0, 0);
    u.acc.reset(imu_index::kDim);
    return u;
  }

  CompressedAccumulator* accumulator() { return mode == Mode::kCompressed ? &acc : nullptr; }

  TransitionBlock transition(const ImuSample& sample, double dt) const {
    return compute_transition(state.imu, sample, dt, noise);
  }

  void propagate(const ImuSample& sample, double dt, const TransitionBlock& tb) {
    state.imu = propagate_mean(state.imu, sample, dt, gravity);
    propagate_covariance(cov, tb, accumulator());
  }

  std::uint64_t add_clone(double t) { return augment_clone(state, cov, t, config, accumulator()); }
  std::uint64_t add_keyframe(double t) { return augment_keyframe(state, cov, t, config, accumulator()); }
  void marginalize(const std::vector<std::uint64_t>& ids) { marginalize_clones(state, cov, ids, accumulator()); }

  UpdateReport update(const LinearizedBlock& block) {
    switch (mode) {
      case Mode::kFull:
        if (defer_global && deferred.size() != cov.global_dim()) deferred = VectorXd::Zero(cov.global_dim());
        return full_update(state, cov, block, defer_global ? &deferred : nullptr);
      case Mode::kSchmidt: return schmidt_update(state, cov, block);
      case Mode::kCompressed: return compressed_update(state, cov, block, acc);
    }
    return {};
  }

  RecoveryReport recover() {
    if (mode != Mode::kCompressed) return {};
    return recover_global(state, cov, acc);
  }

  void recenter(const Vec3& center) {
    if (mode != Mode::kCompressed) return;
    repartition(state, cov, acc, center, config);
  }

  void flush_deferred() {
    if (deferred.size() > 0) {
      apply_correction(state, deferred, cov.local_dim());
      deferred.setZero();
    }
  }
};

/// Puts `twin` into `primary`'s error-state layout (keyframe order and
/// partition tags).  The twin must have no pending deferred corrections.
inline void mirror_layout(FilterUnit& twin, const FilterUnit& primary) {
  const auto map = error_state_map(primary.state, twin.state);
  const MatrixXd p = twin.cov.full()(map, map);
  std::vector<Keyframe> ordered;
  ordered.reserve(primary.state.keyframes.size());
  for (const Keyframe& k : primary.state.keyframes) {
    Keyframe copy = twin.state.keyframes[*twin.state.find_keyframe(k.id)];
    copy.partition = k.partition;
    ordered.push_back(copy);
  }
  twin.state.keyframes = std::move(ordered);
  twin.state.local_center = primary.state.local_center;
  twin.cov = PartitionedCovariance::split(p, twin.state.local_dim());
  twin.deferred = VectorXd::Zero(twin.cov.global_dim());
}

struct Divergence {
  double mean = 0.0;        // max abs manifold difference
  double covariance = 0.0;  // max abs entry difference
};

inline Divergence divergence(const FilterUnit& a, const FilterUnit& b) {
  Divergence d;
  d.mean = boxminus(a.state.imu, b.state.imu).cwiseAbs().maxCoeff();
  for (const Clone& c : a.state.clones) {
    const auto j = b.state.find_clone(c.id);
    if (!j) throw UnknownClone("clone sets differ");
    d.mean = std::max(d.mean, boxminus(c.pose, b.state.clones[*j].pose).cwiseAbs().maxCoeff());
  }
  for (const Keyframe& k : a.state.keyframes) {
    const auto j = b.state.find_keyframe(k.id);
    if (!j) throw DimensionMismatch("keyframe sets differ");
    d.mean = std::max(d.mean, boxminus(k.pose, b.state.keyframes[*j].pose).cwiseAbs().maxCoeff());
  }
  const auto map = error_state_map(a.state, b.state);
  const MatrixXd pb = b.cov.full()(map, map);
  d.covariance = (a.cov.full() - pb).cwiseAbs().maxCoeff();
  return d;
}

/// ẽᵀ P⁻¹ ẽ for a 6-DoF pose, ẽ = truth [-] estimate.
inline double pose_nees(const Pose& truth, const Pose& estimate, const Mat6& cov) {
  const Eigen::LLT<Mat6> llt(cov);
  if (llt.info() != Eigen::Success) throw SingularMarginal("pose covariance is not positive definite");
  const Vec6 e = boxminus(truth, estimate);
  return e.dot(llt.solve(e));
}

/// Stacks blocks row-wise; the Jacobian is widened to the widest block.
inline LinearizedBlock stack_blocks(const std::vector<LinearizedBlock>& blocks) {
  Index rows = 0;
  Index cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols = std::max(cols, b.jacobian.cols());
  }
  LinearizedBlock out{MatrixXd::Zero(rows, cols), VectorXd::Zero(rows), MatrixXd::Zero(rows, rows)};
  Index r = 0;
  for (const auto& b : blocks) {
    out.jacobian.block(r, 0, b.rows(), b.jacobian.cols()) = b.jacobian;
    out.residual.segment(r, b.rows()) = b.residual;
    out.noise_cov.block(r, r, b.rows(), b.rows()) = b.noise_cov;
    r += b.rows();
  }
  return out;
}

struct KeyframeSnapshot {
  std::uint64_t id = 0;
  Partition partition = Partition::kLocal;
  Pose pose;
  Vec6 sigma3 = Vec6::Zero();  // 3 sigma of [dtheta, dp]
};

struct StepRow {
  std::uint64_t step = 0;
  double time = 0.0;
  ImuState estimate;
  ImuState truth;
  double pos_err = 0.0;
  double att_err = 0.0;
  double nees = 0.0;
  Index state_dim = 0;
  Index local_dim = 0;
  double update_flops = 0.0;
  double recovery_flops = 0.0;
  double wall_time = 0.0;  // s; not part of the deterministic outputs
  unsigned events = 0;
  std::vector<KeyframeSnapshot> keyframes;
  Mat6 pose_cov = Mat6::Zero();  // IMU pose marginal, [dtheta, dp]
};

struct LockstepRow {
  std::uint64_t step = 0;
  double time = 0.0;
  double mean_divergence = 0.0;
  double cov_divergence = 0.0;
  double min_eig_ratio = 0.0;  // min eig(P_primary - P_dense) / trace(P_primary)
};

struct RunSummary {
  Mode mode = Mode::kCompressed;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  double duration = 0.0;
  std::uint64_t imu_samples = 0;
  std::uint64_t camera_frames = 0;
  std::uint64_t gps_fixes = 0;
  std::uint64_t keyframes = 0;
  std::uint64_t recoveries = 0;
  std::uint64_t recenters = 0;
  double mean_recenter_period = 0.0;
  double rmse_position = 0.0;
  double rmse_attitude = 0.0;
  double mean_nees = 0.0;
  Index peak_state_dim = 0;
  std::uint64_t tracks_processed = 0;
  std::uint64_t tracks_accepted = 0;
  std::uint64_t tracks_gated = 0;
  std::uint64_t tracks_dropped = 0;
  std::uint64_t keyframe_constraints = 0;
  std::uint64_t global_touch_fallbacks = 0;
  double max_nullspace_orthogonality = 0.0;
  std::uint64_t nullspace_dim_violations = 0;
  bool lockstep = false;
  double max_mean_divergence = 0.0;
  double max_cov_divergence = 0.0;
  double min_eig_ratio = 0.0;
  std::uint64_t keyframe_mean_changes = 0;
  double mean_step_time = 0.0;  // s; not part of the deterministic outputs
};

struct RunReport {
  RunSummary summary;
  std::vector<StepRow> rows;
  std::vector<LockstepRow> lockstep;
};

struct RunConfig {
  Mode mode = Mode::kCompressed;
  std::uint64_t seed = 1;
  bool lockstep = false;
  std::optional<double> keyframe_interval;
  std::optional<double> local_radius;
  std::optional<double> recenter_radius;
  std::optional<Index> max_clones;
  std::optional<double> duration;
};

inline Scenario apply_overrides(Scenario s, const RunConfig& cfg) {
  if (cfg.keyframe_interval) s.filter.keyframe_interval = *cfg.keyframe_interval;
  if (cfg.local_radius) s.filter.local_radius = *cfg.local_radius;
  if (cfg.recenter_radius) s.filter.recenter_radius = *cfg.recenter_radius;
  if (cfg.max_clones) s.filter.max_clones = *cfg.max_clones;
  if (cfg.duration) s.trajectory.duration = *cfg.duration;
  s.validate();
  return s;
}

struct SensorStreams {
  GroundTruth truth;
  ImuStream imu;
  std::vector<CameraFrame> frames;  // frames[j] at j / cam_rate
  std::vector<GpsFix> gps;          // gps[g] at g / gps_rate
  std::int64_t tick_rate = 0;
  std::int64_t imu_ticks = 0;
  std::int64_t cam_ticks = 0;
  std::int64_t gps_ticks = 0;
  ImuState initial_truth;
  ImuState initial_estimate;
};

/// Generates every stream for (scenario, seed).  Frames and fixes cover
/// [0, duration); the IMU covers [0, duration].
inline SensorStreams simulate(const Scenario& scenario, std::uint64_t seed) {
  scenario.validate();
  const SensorConfig& sc = scenario.sensors;
  SensorStreams out;
  out.tick_rate = sc.tick_rate();
  out.imu_ticks = sc.imu_ticks();
  out.cam_ticks = sc.cam_ticks();
  out.gps_ticks = sc.gps_ticks();
  const double rate = static_cast<double>(out.tick_rate);
  const auto end_tick = static_cast<std::int64_t>(std::floor(scenario.trajectory.duration * rate + 1e-6));

  out.truth = generate_trajectory(scenario.trajectory, static_cast<double>(out.imu_ticks) / rate);
  out.truth.landmarks = generate_landmarks(scenario.trajectory, sc.landmark_region, sc.landmark_count, seed);

  Rng init = Rng::stream(seed, stream_tag::kInitialError);
  const InitialSigmas& s0 = scenario.initial;
  ImuBiasInit bias0;
  bias0.gyro = init.normal3(s0.gyro_bias);
  bias0.accel = init.normal3(s0.accel_bias);
  out.imu = synthesize_imu(out.truth, sc, seed, bias0);

  out.initial_truth = out.truth.samples.front().state;
  out.initial_truth.gyro_bias = bias0.gyro;
  out.initial_truth.accel_bias = bias0.accel;
  Vec15 delta;
  {
    using namespace imu_index;
    delta.segment<3>(kAttitude) = init.normal3(s0.attitude);
    delta.segment<3>(kGyroBias) = init.normal3(s0.gyro_bias);
    delta.segment<3>(kVelocity) = init.normal3(s0.velocity);
    delta.segment<3>(kAccelBias) = init.normal3(s0.accel_bias);
    delta.segment<3>(kPosition) = init.normal3(s0.position);
  }
  out.initial_estimate = boxplus(out.initial_truth, delta);

  for (std::int64_t tick = 0, j = 0; tick < end_tick; tick += out.cam_ticks, ++j) {
    out.frames.push_back(synthesize_camera(out.truth, sc, seed, static_cast<double>(tick) / rate,
                                           static_cast<std::uint64_t>(j)));
  }
  for (std::int64_t tick = 0, g = 0; tick < end_tick; tick += out.gps_ticks, ++g) {
    out.gps.push_back(synthesize_gps(out.truth, sc, seed, static_cast<double>(tick) / rate, static_cast<std::uint64_t>(g)));
  }
  return out;
}

namespace detail {

inline void fail_at_step(const Error& e, std::uint64_t step, double t) {
  throw Error(e.code(), "step " + std::to_string(step) + " (t=" + std::to_string(t) + " s): " + e.what());
}

inline bool droppable(Errc c) {
  return c == Errc::kLowParallax || c == Errc::kDiverged || c == Errc::kBehindCamera ||
         c == Errc::kRankDeficientFeature || c == Errc::kInsufficientObservations;
}

inline ImuState truth_at(const SensorStreams& s, std::int64_t tick) {
  TruthSample ts = trajectory_at(s.truth.spec, static_cast<double>(tick) / static_cast<double>(s.tick_rate));
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(tick / s.imu_ticks), s.imu.gyro_bias.size() - 1);
  ts.state.gyro_bias = s.imu.gyro_bias[k];
  ts.state.accel_bias = s.imu.accel_bias[k];
  return ts.state;
}

}  // namespace detail

/// Runs one back end over pre-generated streams.
inline RunReport run(const Scenario& scenario, const RunConfig& cfg, const SensorStreams& streams) {
  using Clock = std::chrono::steady_clock;
  const Scenario& sc = scenario;
  const PinholeCamera& cam = sc.sensors.camera;
  const double rate = static_cast<double>(streams.tick_rate);
  const Mode mode = cfg.mode;
  StateConfig fcfg = sc.filter;
  if (mode == Mode::kFull || mode == Mode::kSchmidt) {
    // every keyframe stays LOCAL
    fcfg.local_radius = std::numeric_limits<double>::infinity();
    fcfg.recenter_radius = std::numeric_limits<double>::infinity();
  }

  FilterUnit primary =
      FilterUnit::create(mode, streams.initial_estimate, sc.initial.covariance(), fcfg, sc.sensors.imu_noise);
  std::optional<FilterUnit> twin;
  if (cfg.lockstep) {
    twin = primary;
    twin->mode = Mode::kFull;
    twin->defer_global = mode == Mode::kCompressed;
  }

  RunReport report;
  RunSummary& sum = report.summary;
  sum.mode = mode;
  sum.seed = cfg.seed;
  sum.lockstep = cfg.lockstep;
  sum.duration = sc.trajectory.duration;
  sum.imu_samples = streams.imu.samples.size();
  sum.camera_frames = streams.frames.size();
  sum.gps_fixes = streams.gps.size();
  sum.min_eig_ratio = cfg.lockstep && mode == Mode::kSchmidt ? std::numeric_limits<double>::infinity() : 0.0;

  std::map<std::uint64_t, FeatureTrack> tracks;
  std::map<std::uint64_t, std::vector<FeatureObservation>> keyframe_obs;
  std::map<std::uint64_t, Pose> keyframe_init;
  std::vector<double> recenter_times;

  std::int64_t tick_now = 0;
  std::uint64_t step = 0;
  double sq_pos = 0.0;
  double sq_att = 0.0;
  double nees_sum = 0.0;
  double step_time_sum = 0.0;

  auto record_lockstep = [&](double t) {
    if (!twin) return;
    LockstepRow row;
    row.step = step;
    row.time = t;
    if (mode == Mode::kSchmidt) {
      const MatrixXd ps = primary.cov.full();
      const auto map = error_state_map(primary.state, twin->state);
      const MatrixXd diff = ps - twin->cov.full()(map, map);
      const Eigen::SelfAdjointEigenSolver<MatrixXd> es(diff, Eigen::EigenvaluesOnly);
      row.min_eig_ratio = es.eigenvalues().minCoeff() / ps.trace();
      sum.min_eig_ratio = std::min(sum.min_eig_ratio, row.min_eig_ratio);
    } else {
      const Divergence d = divergence(primary, *twin);
      row.mean_divergence = d.mean;
      row.cov_divergence = d.covariance;
      sum.max_mean_divergence = std::max(sum.max_mean_divergence, d.mean);
      sum.max_cov_divergence = std::max(sum.max_cov_divergence, d.covariance);
    }
    report.lockstep.push_back(row);
  };

  auto recover_and_recenter = [&](unsigned& events, double& recovery_flops, double t) {
    recovery_flops += primary.recover().flops;
    primary.recenter(primary.state.imu.position);
    events |= event::kRecovery | event::kRecenter;
    ++sum.recoveries;
    ++sum.recenters;
    recenter_times.push_back(t);
    if (twin) {
      twin->flush_deferred();
      mirror_layout(*twin, primary);
      record_lockstep(t);
    }
  };

  for (std::size_t j = 0; j < streams.frames.size(); ++j, ++step) {
    const std::int64_t tick = static_cast<std::int64_t>(j) * streams.cam_ticks;
    const double t = static_cast<double>(tick) / rate;
    const CameraFrame& frame = streams.frames[j];
    const auto started = Clock::now();
    unsigned events = 0;
    double update_flops = 0.0;
    double recovery_flops = 0.0;

    try {
      // Propagate with the IMU sample active on each sub-interval.
      while (tick_now < tick) {
        const std::int64_t k = tick_now / streams.imu_ticks;
        const std::int64_t seg_end = std::min((k + 1) * streams.imu_ticks, tick);
        const double dt = static_cast<double>(seg_end - tick_now) / rate;
        const ImuSample& sample = streams.imu.samples[static_cast<std::size_t>(k)];
        const TransitionBlock tb = primary.transition(sample, dt);
        primary.propagate(sample, dt, tb);
        if (twin) twin->propagate(sample, dt, tb);
        tick_now = seg_end;
      }

      const std::uint64_t clone_id = primary.add_clone(t);
      if (twin) twin->add_clone(t);

      bool keyframe_frame = false;
      std::uint64_t keyframe_id = 0;
      if (t - primary.state.last_keyframe_time >= fcfg.keyframe_interval - 1e-9) {
        keyframe_id = primary.add_keyframe(t);
        if (twin) twin->add_keyframe(t);
        keyframe_init[keyframe_id] = primary.state.keyframes[*primary.state.find_keyframe(keyframe_id)].pose;
        keyframe_frame = true;
        events |= event::kKeyframeAdded;
      }

      // Front end: extend tracks, collect the ones due for an update.
      std::vector<std::uint64_t> visible;
      visible.reserve(frame.measurements.size());
      for (const auto& m : frame.measurements) {
        visible.push_back(m.feature_id);
        if (keyframe_frame) {
          keyframe_obs[m.feature_id].push_back({FrameRef::keyframe(keyframe_id), m.pixel});
        } else {
          FeatureTrack& tr = tracks[m.feature_id];
          tr.feature_id = m.feature_id;
          tr.pixel_sigma = sc.sensors.pixel_sigma;
          tr.observations.push_back({FrameRef::clone(clone_id), m.pixel});
        }
      }
      const bool window_full = static_cast<Index>(primary.state.clones.size()) >= fcfg.max_clones;
      const std::uint64_t oldest = primary.state.clones.front().id;
      std::vector<FeatureTrack> due;
      for (auto it = tracks.begin(); it != tracks.end();) {
        const bool lost = !std::binary_search(visible.begin(), visible.end(), it->first);
        bool has_oldest = false;
        for (const auto& o : it->second.observations) has_oldest |= o.frame == FrameRef::clone(oldest);
        if (lost || (window_full && has_oldest)) {
          due.push_back(std::move(it->second));
          it = tracks.erase(it);
        } else {
          ++it;
        }
      }
      bool touches_global = false;
      for (FeatureTrack& tr : due) {
        if (const auto kf = keyframe_obs.find(tr.feature_id); kf != keyframe_obs.end()) {
          for (const auto& o : kf->second) {
            if (!primary.state.find_keyframe(o.frame.id)) continue;
            tr.observations.push_back(o);
            const auto& k = primary.state.keyframes[*primary.state.find_keyframe(o.frame.id)];
            touches_global |= k.partition == Partition::kGlobal;
          }
          keyframe_obs.erase(kf);
        }
      }
      if (touches_global) {
        ++sum.global_touch_fallbacks;
        recover_and_recenter(events, recovery_flops, t);
        for (FeatureTrack& tr : due) {
          std::erase_if(tr.observations, [&](const FeatureObservation& o) {
            if (o.frame.kind != FrameRef::Kind::kKeyframe) return false;
            const auto i = primary.state.find_keyframe(o.frame.id);
            return primary.state.keyframes[*i].partition == Partition::kGlobal;
          });
        }
      }

      std::vector<LinearizedBlock> blocks;
      for (const FeatureTrack& tr : due) {
        if (tr.observations.size() < 3) {
          ++sum.tracks_dropped;
          continue;
        }
        ++sum.tracks_processed;
        const bool with_keyframe = std::any_of(tr.observations.begin(), tr.observations.end(), [](const auto& o) {
          return o.frame.kind == FrameRef::Kind::kKeyframe;
        });
        ProjectionDiagnostics diag;
        LinearizedBlock block;
        try {
          block = with_keyframe ? build_keyframe_constraint(tr, primary.state, cam, &diag)
                                : build_feature_block(tr, primary.state, cam, &diag);
        } catch (const Error& e) {
          if (!detail::droppable(e.code())) throw;
          ++sum.tracks_dropped;
          continue;
        }
        sum.max_nullspace_orthogonality = std::max(sum.max_nullspace_orthogonality, diag.orthogonality);
        if (diag.output_rows != diag.input_rows - 3) ++sum.nullspace_dim_violations;
        if (!chi2_gate(block, primary.cov.ll)) {
          ++sum.tracks_gated;
          continue;
        }
        ++sum.tracks_accepted;
        if (with_keyframe) ++sum.keyframe_constraints;
        blocks.push_back(std::move(block));
      }
      if (!blocks.empty()) {
        const LinearizedBlock stacked = stack_blocks(blocks);
        update_flops += primary.update(stacked).flops;
        if (twin) twin->update(stacked);
      }

      if (tick % streams.gps_ticks == 0) {
        const auto g = static_cast<std::size_t>(tick / streams.gps_ticks);
        const LinearizedBlock block = gps_update_block(streams.gps[g], primary.state);
        update_flops += primary.update(block).flops;
        if (twin) twin->update(block);
        events |= event::kGps;
      }

      // Marginalize the oldest clone of a full window and every older clone
      // no pending track still needs.
      std::vector<std::uint64_t> drop;
      const auto& clones = primary.state.clones;
      for (std::size_t c = 0; c + 1 < clones.size(); ++c) {
        const std::uint64_t id = clones[c].id;
        bool needed = false;
        for (const auto& [fid, tr] : tracks) {
          for (const auto& o : tr.observations) needed |= o.frame == FrameRef::clone(id);
          if (needed) break;
        }
        if (!needed || (c == 0 && static_cast<Index>(clones.size()) >= fcfg.max_clones)) drop.push_back(id);
      }
      if (!drop.empty()) {
        for (auto& [fid, tr] : tracks) {
          std::erase_if(tr.observations, [&](const FeatureObservation& o) {
            return o.frame.kind == FrameRef::Kind::kClone && std::find(drop.begin(), drop.end(), o.frame.id) != drop.end();
          });
        }
        std::erase_if(tracks, [](const auto& kv) { return kv.second.observations.empty(); });
        primary.marginalize(drop);
        if (twin) twin->marginalize(drop);
      }

      if (mode == Mode::kCompressed &&
          (primary.state.imu.position - primary.state.local_center).norm() > fcfg.recenter_radius) {
        recover_and_recenter(events, recovery_flops, t);
      }
      if (twin && mode == Mode::kSchmidt) record_lockstep(t);
      if (mode == Mode::kSchmidt) {
        for (const Keyframe& k : primary.state.keyframes) {
          if (!(k.pose == keyframe_init.at(k.id))) ++sum.keyframe_mean_changes;
        }
      }
    } catch (const Error& e) {
      detail::fail_at_step(e, step, t);
    }

    if (j + 1 == streams.frames.size() && mode == Mode::kCompressed) {
      recovery_flops += primary.recover().flops;
      events |= event::kRecovery;
      ++sum.recoveries;
      if (twin) {
        twin->flush_deferred();
        record_lockstep(t);
      }
    }

    StepRow row;
    row.step = step;
    row.time = t;
    row.estimate = primary.state.imu;
    row.truth = detail::truth_at(streams, tick);
    const Vec6 err = boxminus(row.truth.pose(), row.estimate.pose());
    row.att_err = err.head<3>().norm();
    row.pos_err = err.tail<3>().norm();
    row.pose_cov = primary.cov.imu_pose_marginal();
    row.nees = pose_nees(row.truth.pose(), row.estimate.pose(), row.pose_cov);
    row.state_dim = primary.state.dim();
    row.local_dim = primary.state.local_dim();
    row.update_flops = update_flops;
    row.recovery_flops = recovery_flops;
    row.events = events;
    for (std::size_t i = 0; i < primary.state.keyframes.size(); ++i) {
      const Keyframe& k = primary.state.keyframes[i];
      const Mat6 m = primary.cov.pose_marginal(primary.state.keyframe_offset(i));
      row.keyframes.push_back({k.id, k.partition, k.pose, 3.0 * m.diagonal().cwiseSqrt()});
    }
    std::sort(row.keyframes.begin(), row.keyframes.end(),
              [](const KeyframeSnapshot& a, const KeyframeSnapshot& b) { return a.id < b.id; });
    row.wall_time = std::chrono::duration<double>(Clock::now() - started).count();

    sq_pos += row.pos_err * row.pos_err;
    sq_att += row.att_err * row.att_err;
    nees_sum += row.nees;
    step_time_sum += row.wall_time;
    sum.peak_state_dim = std::max(sum.peak_state_dim, row.state_dim);
    report.rows.push_back(std::move(row));
  }

  const double n = std::max<double>(1.0, static_cast<double>(report.rows.size()));
  sum.steps = report.rows.size();
  sum.keyframes = primary.state.keyframes.size();
  sum.rmse_position = std::sqrt(sq_pos / n);
  sum.rmse_attitude = std::sqrt(sq_att / n);
  sum.mean_nees = nees_sum / n;
  sum.mean_step_time = step_time_sum / n;
  if (recenter_times.size() >= 2) {
    sum.mean_recenter_period =
        (recenter_times.back() - recenter_times.front()) / static_cast<double>(recenter_times.size() - 1);
  }
  if (sum.min_eig_ratio == std::numeric_limits<double>::infinity()) sum.min_eig_ratio = 0.0;
  return report;
}

inline RunReport run(const Scenario& scenario, const RunConfig& cfg) {
  const Scenario s = apply_overrides(scenario, cfg);
  return run(s, cfg, simulate(s, cfg.seed));
}

struct NeesSeries {
  std::vector<double> per_step;
  double average = 0.0;
};

/// Recomputes the 6-DoF pose NEES of every row from its truth, estimate and
/// pose marginal.
inline NeesSeries compute_nees(const std::vector<StepRow>& rows) {
  NeesSeries out;
  out.per_step.reserve(rows.size());
  for (const StepRow& r : rows) out.per_step.push_back(pose_nees(r.truth.pose(), r.estimate.pose(), r.pose_cov));
  if (!rows.empty()) {
    double s = 0.0;
    for (double v : out.per_step) s += v;
    out.average = s / static_cast<double>(rows.size());
  }
  return out;
}

struct RunSpec {
  Scenario scenario;
  RunConfig config;
};

inline constexpr double kSchmidtEnvelopeSlack = 0.05;
inline constexpr double kSchmidtEnvelopeTolerance = 1e-9;

struct CompareReport {
  std::vector<RunReport> runs;  // input order
  double compressed_full_rmse_diff = std::numeric_limits<double>::quiet_NaN();
  bool schmidt_envelope_ok = true;
  double schmidt_envelope_margin = std::numeric_limits<double>::quiet_NaN();  // min relative gap of the 3-sigma position bounds
};

/// Runs every spec on one shared set of streams and compares them.
inline CompareReport compare_backends(const std::vector<RunSpec>& specs) {
  CompareReport out;
  if (specs.empty()) return out;
  const Scenario base = apply_overrides(specs.front().scenario, specs.front().config);
  const std::string text = scenario_to_text(base);
  for (const RunSpec& s : specs) {
    if (scenario_to_text(apply_overrides(s.scenario, s.config)) != text || s.config.seed != specs.front().config.seed) {
      throw MismatchedScenarios("compare requires one scenario and seed for every back end");
    }
  }
  const SensorStreams streams = simulate(base, specs.front().config.seed);
  for (const RunSpec& s : specs) out.runs.push_back(run(base, s.config, streams));

  const RunReport* full = nullptr;
  const RunReport* schmidt = nullptr;
  const RunReport* compressed = nullptr;
  for (const RunReport& r : out.runs) {
    if (r.summary.mode == Mode::kFull && !full) full = &r;
    if (r.summary.mode == Mode::kSchmidt && !schmidt) schmidt = &r;
    if (r.summary.mode == Mode::kCompressed && !compressed) compressed = &r;
  }
  if (full && compressed) {
    out.compressed_full_rmse_diff = std::abs(full->summary.rmse_position - compressed->summary.rmse_position);
  }
  if (full && schmidt) {
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < full->rows.size(); ++i) {
      const Vec3 sf = 3.0 * full->rows[i].pose_cov.diagonal().tail<3>().cwiseSqrt();
      const Vec3 ss = 3.0 * schmidt->rows[i].pose_cov.diagonal().tail<3>().cwiseSqrt();
      margin = std::min(margin, ((ss - sf).array() / sf.array()).minCoeff());
    }
    out.schmidt_envelope_margin = margin;
    if (schmidt->summary.lockstep) {
      // Exact check against a dense twin fed the same linearizations: P_s - P_f
      // positive semidefinite bounds every marginal.
      out.schmidt_envelope_ok = schmidt->summary.min_eig_ratio >= -kSchmidtEnvelopeTolerance;
    } else {
      // Separate runs linearize and gate independently, so the envelope only
      // holds up to a small relative slack.
      out.schmidt_envelope_ok = margin >= -kSchmidtEnvelopeSlack;
    }
  }
  return out;
}

inline CompareReport compare_backends(const Scenario& scenario, std::uint64_t seed) {
  std::vector<RunSpec> specs;
  for (Mode m : {Mode::kFull, Mode::kSchmidt, Mode::kCompressed}) {
    RunConfig c;
    c.mode = m;
    c.seed = seed;
    c.lockstep = m == Mode::kSchmidt;
    specs.push_back({scenario, c});
  }
  return compare_backends(specs);
}

}  // namespace cmsckf
