#pragma once

// Scenario files: one `key = value` per line, `#` starts a comment, unknown
// keys are errors.  Every key is optional; omitted keys keep their defaults.
//
//   trajectory   straight_length turn_radius speed duration altitude
//   sensors      imu_rate cam_rate gps_rate
//                gyro_noise_density accel_noise_density gyro_bias_walk accel_bias_walk
//                pixel_sigma gps_pos_sigma gps_vel_sigma
//                fx fy cx cy width height
//                landmark_count landmark_lateral_min landmark_lateral_max landmark_height
//                min_depth max_depth
//   filter       max_clones keyframe_interval local_radius recenter_radius keyframe_init_cov
//   initial      sigma_attitude sigma_gyro_bias sigma_velocity sigma_accel_bias sigma_position
//   misc         seed  (default seed when the CLI gives none)

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "cmsckf/errors.hpp"
#include "cmsckf/simulator.hpp"
#include "cmsckf/state.hpp"

namespace cmsckf {

struct InitialSigmas {
  double attitude = 2e-3;   // rad
  double gyro_bias = 5e-4;  // rad/s
  double velocity = 0.05;   // m/s
  double accel_bias = 2e-2; // m/s^2
  double position = 0.2;    // m

  Mat15 covariance() const {
    using namespace imu_index;
    Vec15 d;
    d.segment<3>(kAttitude).setConstant(attitude * attitude);
    d.segment<3>(kGyroBias).setConstant(gyro_bias * gyro_bias);
    d.segment<3>(kVelocity).setConstant(velocity * velocity);
    d.segment<3>(kAccelBias).setConstant(accel_bias * accel_bias);
    d.segment<3>(kPosition).setConstant(position * position);
    return d.asDiagonal();
  }
};

struct Scenario {
  TrajectorySpec trajectory;
  SensorConfig sensors;
  StateConfig filter;
  InitialSigmas initial;
  std::uint64_t seed = 1;

  void validate() const {
    trajectory.validate();
    sensors.validate();
    if (filter.max_clones < 2) throw ConfigError("max_clones must be at least 2");
    if (!(filter.keyframe_interval > 0.0)) throw ConfigError("keyframe_interval must be positive");
    if (!(filter.local_radius > 0.0 && filter.recenter_radius > 0.0)) throw ConfigError("radii must be positive");
  }
};

namespace detail {

using ScenarioField = std::variant<double*, int*, Index*, bool*, std::uint64_t*>;

inline std::map<std::string, ScenarioField> scenario_fields(Scenario& s) {
  auto& t = s.trajectory;
  auto& c = s.sensors;
  auto& f = s.filter;
  auto& i = s.initial;
  return {
      {"straight_length", &t.straight_length},
      {"turn_radius", &t.turn_radius},
      {"speed", &t.speed},
      {"duration", &t.duration},
      {"altitude", &t.altitude},
      {"imu_rate", &c.imu_rate},
      {"cam_rate", &c.cam_rate},
      {"gps_rate", &c.gps_rate},
      {"gyro_noise_density", &c.imu_noise.gyro_noise_density},
      {"accel_noise_density", &c.imu_noise.accel_noise_density},
      {"gyro_bias_walk", &c.imu_noise.gyro_bias_walk},
      {"accel_bias_walk", &c.imu_noise.accel_bias_walk},
      {"pixel_sigma", &c.pixel_sigma},
      {"gps_pos_sigma", &c.gps_pos_sigma},
      {"gps_vel_sigma", &c.gps_vel_sigma},
      {"fx", &c.camera.focal.x()},
      {"fy", &c.camera.focal.y()},
      {"cx", &c.camera.principal_point.x()},
      {"cy", &c.camera.principal_point.y()},
      {"width", &c.camera.width},
      {"height", &c.camera.height},
      {"landmark_count", &c.landmark_count},
      {"landmark_lateral_min", &c.landmark_region.lateral_min},
      {"landmark_lateral_max", &c.landmark_region.lateral_max},
      {"landmark_height", &c.landmark_region.height},
      {"min_depth", &c.min_depth},
      {"max_depth", &c.max_depth},
      {"max_clones", &f.max_clones},
      {"keyframe_interval", &f.keyframe_interval},
      {"local_radius", &f.local_radius},
      {"recenter_radius", &f.recenter_radius},
      {"keyframe_init_cov", &f.keyframe_init_cov},
      {"sigma_attitude", &i.attitude},
      {"sigma_gyro_bias", &i.gyro_bias},
      {"sigma_velocity", &i.velocity},
      {"sigma_accel_bias", &i.accel_bias},
      {"sigma_position", &i.position},
      {"seed", &s.seed},
  };
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline Scenario parse_scenario(std::istream& in, const std::string& source = "<scenario>") {
  Scenario s;
  auto fields = detail::scenario_fields(s);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    std::istringstream vs(value);
    bool ok = false;
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1" || value == "on") *p = true, ok = true;
            else if (value == "false" || value == "0" || value == "off") *p = false, ok = true;
          } else {
            T v{};
            vs >> v;
            ok = !vs.fail() && (vs >> std::ws).eof();
            if (ok) *p = v;
          }
        },
        it->second);
    if (!ok) throw ConfigError(where + ": bad value '" + value + "' for '" + key + "'");
  }
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  return parse_scenario(in, path);
}

inline std::string scenario_to_text(const Scenario& scenario) {
  Scenario copy = scenario;
  std::ostringstream out;
  out.precision(17);
  for (const auto& [key, field] : detail::scenario_fields(copy)) {
    out << key << " = ";
    std::visit(
        [&](auto* p) {
          if constexpr (std::is_same_v<std::remove_pointer_t<decltype(p)>, bool>) {
            out << (*p ? "true" : "false");
          } else {
            out << *p;
          }
        },
        field);
    out << '\n';
  }
  return out.str();
}

}  // namespace cmsckf
