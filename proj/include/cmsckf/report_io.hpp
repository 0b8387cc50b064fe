#pragma once

// CSV / summary export of run reports and sensor streams.
//
// Doubles are written in shortest round-trip form, so parse(export(x)) == x
// bit for bit.  Wall-clock figures only go to timing.csv, keeping every other
// file a pure function of (scenario, seed, mode).
//
//   steps.csv      step,time,est_q{w,x,y,z},est_p{x,y,z},true_q{w,x,y,z},true_p{x,y,z},
//                  pos_err,att_err,nees,state_dim,local_dim,update_flops,recovery_flops,events
//   keyframes.csv  step,time,keyframe_id,partition,sigma3_r{x,y,z},sigma3_p{x,y,z},events
//                  (one row per keyframe per step; partition is L or G)
//   states.csv     step,time,q{w,x,y,z},bg{x,y,z},v{x,y,z},ba{x,y,z},p{x,y,z},keyframes
//                  keyframes = ';'-joined id|partition|qw|qx|qy|qz|px|py|pz
//   lockstep.csv   step,time,mean_divergence,cov_divergence,min_eig_ratio
//   timing.csv     step,time,wall_time
//   summary.txt    key: value
//   imu.csv        timestamp,ax,ay,az,gx,gy,gz
//   camera.csv     timestamp,feature_id,u,v
//   gps.csv        timestamp,px,py,pz,vx,vy,vz
//   landmarks.csv  feature_id,x,y,z

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "cmsckf/errors.hpp"
#include "cmsckf/harness.hpp"

namespace cmsckf {

namespace csv {

inline std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename Int>
std::string num_int(Int v) {
  return std::to_string(v);
}

inline double to_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("bad number '" + std::string(s) + "'");
  return v;
}

template <typename Int>
Int to_int(std::string_view s) {
  Int v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("bad integer '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
    out_ << header << '\n';
  }

  template <typename... T>
  void row(const T&... fields) {
    bool first = true;
    ((out_ << (first ? "" : ",") << fields, first = false), ...);
    out_ << '\n';
  }

  std::ofstream& stream() { return out_; }

  ~Writer() noexcept(false) {
    out_.flush();
    if (!out_ && std::uncaught_exceptions() == 0) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

/// Reads a CSV, checks the header, returns the data lines.
inline std::vector<std::string> read_lines(const std::filesystem::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != header) throw IoError("unexpected header in '" + path.string() + "'");
  std::vector<std::string> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace csv

inline const std::string kStepsHeader =
    "step,time,est_qw,est_qx,est_qy,est_qz,est_px,est_py,est_pz,true_qw,true_qx,true_qy,true_qz,true_px,true_py,"
    "true_pz,pos_err,att_err,nees,state_dim,local_dim,update_flops,recovery_flops,events";
inline const std::string kKeyframesHeader =
    "step,time,keyframe_id,partition,sigma3_rx,sigma3_ry,sigma3_rz,sigma3_px,sigma3_py,sigma3_pz,events";
inline const std::string kStatesHeader =
    "step,time,qw,qx,qy,qz,bgx,bgy,bgz,vx,vy,vz,bax,bay,baz,px,py,pz,keyframes";
inline const std::string kLockstepHeader = "step,time,mean_divergence,cov_divergence,min_eig_ratio";
inline const std::string kTimingHeader = "step,time,wall_time";

namespace detail {

inline std::string pose_fields(const Pose& p) {
  const Vec4& q = p.orientation.wxyz();
  std::string s;
  for (int i = 0; i < 4; ++i) s += csv::num(q[i]) + ",";
  for (int i = 0; i < 3; ++i) s += csv::num(p.position[i]) + (i < 2 ? "," : "");
  return s;
}

inline Pose parse_pose(const std::vector<std::string_view>& f, std::size_t at) {
  Pose p;
  p.orientation = UnitQuaternion(csv::to_double(f[at]), csv::to_double(f[at + 1]), csv::to_double(f[at + 2]),
                                 csv::to_double(f[at + 3]));
  p.position = Vec3(csv::to_double(f[at + 4]), csv::to_double(f[at + 5]), csv::to_double(f[at + 6]));
  return p;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

}  // namespace detail

inline void write_steps_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  csv::Writer w(path, kStepsHeader);
  for (const StepRow& r : rows) {
    w.row(r.step, csv::num(r.time), detail::pose_fields(r.estimate.pose()), detail::pose_fields(r.truth.pose()),
          csv::num(r.pos_err), csv::num(r.att_err), csv::num(r.nees), r.state_dim, r.local_dim,
          csv::num(r.update_flops), csv::num(r.recovery_flops), event_string(r.events));
  }
}

/// Parses steps.csv back into rows; fields not stored there keep defaults.
inline std::vector<StepRow> parse_steps_csv(const std::filesystem::path& path) {
  std::vector<StepRow> rows;
  for (const std::string& line : csv::read_lines(path, kStepsHeader)) {
    const auto f = csv::split(line, ',');
    if (f.size() != 24) throw IoError("steps.csv: expected 24 fields");
    StepRow r;
    r.step = csv::to_int<std::uint64_t>(f[0]);
    r.time = csv::to_double(f[1]);
    const Pose est = detail::parse_pose(f, 2);
    const Pose tru = detail::parse_pose(f, 9);
    r.estimate.attitude = est.orientation;
    r.estimate.position = est.position;
    r.truth.attitude = tru.orientation;
    r.truth.position = tru.position;
    r.pos_err = csv::to_double(f[16]);
    r.att_err = csv::to_double(f[17]);
    r.nees = csv::to_double(f[18]);
    r.state_dim = csv::to_int<Index>(f[19]);
    r.local_dim = csv::to_int<Index>(f[20]);
    r.update_flops = csv::to_double(f[21]);
    r.recovery_flops = csv::to_double(f[22]);
    r.events = parse_events(f[23]);
    rows.push_back(std::move(r));
  }
  return rows;
}

struct KeyframeRecord {
  std::uint64_t step = 0;
  double time = 0.0;
  std::uint64_t keyframe_id = 0;
  Partition partition = Partition::kLocal;
  Vec6 sigma3 = Vec6::Zero();
  unsigned events = 0;

  friend bool operator==(const KeyframeRecord&, const KeyframeRecord&) = default;
};

inline std::vector<KeyframeRecord> keyframe_records(const std::vector<StepRow>& rows) {
  std::vector<KeyframeRecord> out;
  for (const StepRow& r : rows) {
    for (const KeyframeSnapshot& k : r.keyframes) out.push_back({r.step, r.time, k.id, k.partition, k.sigma3, r.events});
  }
  return out;
}

inline void write_keyframes_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  csv::Writer w(path, kKeyframesHeader);
  for (const KeyframeRecord& k : keyframe_records(rows)) {
    std::string s;
    for (int i = 0; i < 6; ++i) s += csv::num(k.sigma3[i]) + (i < 5 ? "," : "");
    w.row(k.step, csv::num(k.time), k.keyframe_id, partition_char(k.partition), s, event_string(k.events));
  }
}

inline std::vector<KeyframeRecord> parse_keyframes_csv(const std::filesystem::path& path) {
  std::vector<KeyframeRecord> out;
  for (const std::string& line : csv::read_lines(path, kKeyframesHeader)) {
    const auto f = csv::split(line, ',');
    if (f.size() != 11) throw IoError("keyframes.csv: expected 11 fields");
    KeyframeRecord k;
    k.step = csv::to_int<std::uint64_t>(f[0]);
    k.time = csv::to_double(f[1]);
    k.keyframe_id = csv::to_int<std::uint64_t>(f[2]);
    if (f[3] == "L") k.partition = Partition::kLocal;
    else if (f[3] == "G") k.partition = Partition::kGlobal;
    else throw IoError("keyframes.csv: bad partition");
    for (int i = 0; i < 6; ++i) k.sigma3[i] = csv::to_double(f[4 + static_cast<std::size_t>(i)]);
    k.events = parse_events(f[10]);
    out.push_back(k);
  }
  return out;
}

inline void write_states_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  csv::Writer w(path, kStatesHeader);
  for (const StepRow& r : rows) {
    const ImuState& s = r.estimate;
    std::string imu;
    for (int i = 0; i < 4; ++i) imu += csv::num(s.attitude.wxyz()[i]) + ",";
    for (const Vec3* v : {&s.gyro_bias, &s.velocity, &s.accel_bias, &s.position}) {
      for (int i = 0; i < 3; ++i) imu += csv::num((*v)[i]) + ",";
    }
    std::string kfs;
    for (const KeyframeSnapshot& k : r.keyframes) {
      if (!kfs.empty()) kfs += ';';
      std::string pose = detail::pose_fields(k.pose);
      std::replace(pose.begin(), pose.end(), ',', '|');
      kfs += std::to_string(k.id) + "|" + partition_char(k.partition) + "|" + pose;
    }
    w.row(r.step, csv::num(r.time), imu + kfs);
  }
}

inline void write_lockstep_csv(const std::filesystem::path& path, const std::vector<LockstepRow>& rows) {
  csv::Writer w(path, kLockstepHeader);
  for (const LockstepRow& r : rows) {
    w.row(r.step, csv::num(r.time), csv::num(r.mean_divergence), csv::num(r.cov_divergence), csv::num(r.min_eig_ratio));
  }
}

inline void write_timing_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  csv::Writer w(path, kTimingHeader);
  for (const StepRow& r : rows) w.row(r.step, csv::num(r.time), csv::num(r.wall_time));
}

inline std::string summary_text(const RunSummary& s, bool timing = false) {
  std::ostringstream o;
  auto kv = [&](std::string_view k, const auto& v) { o << k << ": " << v << '\n'; };
  kv("mode", mode_name(s.mode));
  kv("seed", s.seed);
  kv("steps", s.steps);
  kv("duration", csv::num(s.duration));
  kv("imu_samples", s.imu_samples);
  kv("camera_frames", s.camera_frames);
  kv("gps_fixes", s.gps_fixes);
  kv("keyframes", s.keyframes);
  kv("recoveries", s.recoveries);
  kv("recenters", s.recenters);
  kv("mean_recenter_period", csv::num(s.mean_recenter_period));
  kv("rmse_position", csv::num(s.rmse_position));
  kv("rmse_attitude", csv::num(s.rmse_attitude));
  kv("mean_nees", csv::num(s.mean_nees));
  kv("peak_state_dim", s.peak_state_dim);
  kv("tracks_processed", s.tracks_processed);
  kv("tracks_accepted", s.tracks_accepted);
  kv("tracks_gated", s.tracks_gated);
  kv("tracks_dropped", s.tracks_dropped);
  kv("keyframe_constraints", s.keyframe_constraints);
  kv("global_touch_fallbacks", s.global_touch_fallbacks);
  kv("max_nullspace_orthogonality", csv::num(s.max_nullspace_orthogonality));
  kv("nullspace_dim_violations", s.nullspace_dim_violations);
  kv("lockstep", s.lockstep ? "true" : "false");
  if (s.lockstep) {
    kv("max_mean_divergence", csv::num(s.max_mean_divergence));
    kv("max_cov_divergence", csv::num(s.max_cov_divergence));
    kv("min_eig_ratio", csv::num(s.min_eig_ratio));
  }
  if (s.mode == Mode::kSchmidt) kv("keyframe_mean_changes", s.keyframe_mean_changes);
  if (timing) kv("mean_step_time", csv::num(s.mean_step_time));
  return o.str();
}

/// Writes steps/keyframes/states(/lockstep)(/timing).csv and summary.txt.
inline void export_run(const RunReport& report, const std::filesystem::path& dir, bool timing = false) {
  detail::ensure_dir(dir);
  write_steps_csv(dir / "steps.csv", report.rows);
  write_keyframes_csv(dir / "keyframes.csv", report.rows);
  write_states_csv(dir / "states.csv", report.rows);
  if (report.summary.lockstep) write_lockstep_csv(dir / "lockstep.csv", report.lockstep);
  if (timing) write_timing_csv(dir / "timing.csv", report.rows);
  std::ofstream s(dir / "summary.txt");
  if (!s) throw IoError("cannot write summary.txt");
  s << summary_text(report.summary, timing);
}

inline void export_streams(const SensorStreams& streams, const std::filesystem::path& dir) {
  detail::ensure_dir(dir);
  {
    csv::Writer w(dir / "imu.csv", "timestamp,ax,ay,az,gx,gy,gz");
    for (const ImuSample& s : streams.imu.samples) {
      w.row(csv::num(s.timestamp), csv::num(s.accel.x()), csv::num(s.accel.y()), csv::num(s.accel.z()),
            csv::num(s.gyro.x()), csv::num(s.gyro.y()), csv::num(s.gyro.z()));
    }
  }
  {
    csv::Writer w(dir / "camera.csv", "timestamp,feature_id,u,v");
    for (const CameraFrame& f : streams.frames) {
      for (const PixelMeasurement& m : f.measurements) {
        w.row(csv::num(f.timestamp), m.feature_id, csv::num(m.pixel.x()), csv::num(m.pixel.y()));
      }
    }
  }
  {
    csv::Writer w(dir / "gps.csv", "timestamp,px,py,pz,vx,vy,vz");
    for (const GpsFix& g : streams.gps) {
      w.row(csv::num(g.timestamp), csv::num(g.position.x()), csv::num(g.position.y()), csv::num(g.position.z()),
            csv::num(g.velocity.x()), csv::num(g.velocity.y()), csv::num(g.velocity.z()));
    }
  }
  {
    csv::Writer w(dir / "landmarks.csv", "feature_id,x,y,z");
    for (std::size_t i = 0; i < streams.truth.landmarks.size(); ++i) {
      const Vec3& p = streams.truth.landmarks[i];
      w.row(i, csv::num(p.x()), csv::num(p.y()), csv::num(p.z()));
    }
  }
}

inline void export_compare(const CompareReport& cmp, const std::filesystem::path& dir) {
  detail::ensure_dir(dir);
  {
    csv::Writer w(dir / "compare.csv", "mode,rmse_position,rmse_attitude,mean_nees,mean_step_time,peak_state_dim");
    for (const RunReport& r : cmp.runs) {
      const RunSummary& s = r.summary;
      w.row(mode_name(s.mode), csv::num(s.rmse_position), csv::num(s.rmse_attitude), csv::num(s.mean_nees),
            csv::num(s.mean_step_time), s.peak_state_dim);
    }
  }
  std::ofstream s(dir / "compare_summary.txt");
  if (!s) throw IoError("cannot write compare_summary.txt");
  s << "compressed_full_rmse_diff: " << csv::num(cmp.compressed_full_rmse_diff) << '\n'
    << "schmidt_envelope_ok: " << (cmp.schmidt_envelope_ok ? "true" : "false") << '\n'
    << "schmidt_envelope_margin: " << csv::num(cmp.schmidt_envelope_margin) << '\n';
}

}  // namespace cmsckf
