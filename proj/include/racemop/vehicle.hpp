#pragma once

#include <stdexcept>

#include "racemop/geometry.hpp"

namespace racemop {

class Config;

class InvalidStateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Single-track model coefficients for a 1:10 scale car. Defaults are the
// usual F1TENTH-class values; friction follows the racing setup (0.8).
struct VehicleParams {
  double wheelbase = 0.33;       // m, front to rear axle
  double lf = 0.15875;           // m, center of gravity to front axle
  double mass = 3.74;            // kg
  double inertia = 0.04712;      // kg m^2 about z
  double cs_front = 4.718;       // 1/rad, normalized cornering stiffness
  double cs_rear = 5.4562;       // 1/rad
  double cg_height = 0.074;      // m
  double mu = 0.8;               // friction coefficient
  double g = 9.81;               // m/s^2
  double steer_max = 0.41;       // rad
  double steer_rate_max = 3.2;   // rad/s
  double accel_max = 9.51;       // m/s^2
  double v_max = 8.0;            // m/s
  double length = 0.58;          // m, footprint
  double width = 0.31;           // m, footprint
  double speed_gain = 5.0;       // 1/s, low-level speed loop
  double steer_gain = 20.0;      // 1/s, low-level steering loop
  double v_switch = 0.5;         // m/s, kinematic below
  double blend_width = 0.5;      // m/s, kinematic-to-dynamic ramp above v_switch

  double lr() const { return wheelbase - lf; }

  /// Throws ConfigError-style std::invalid_argument on violated invariants.
  void validate() const;

  /// Reads the `[vehicle]` section; missing keys keep their defaults.
  static VehicleParams from_config(const Config& cfg);
};

struct VehicleState {
  double x = 0.0;         // m
  double y = 0.0;         // m
  double yaw = 0.0;       // rad
  double v_long = 0.0;    // m/s
  double v_lat = 0.0;     // m/s
  double yaw_rate = 0.0;  // rad/s
  double slip = 0.0;      // rad, side slip angle at the center of gravity
  double steer = 0.0;     // rad
  double a_long = 0.0;    // m/s^2, last applied longitudinal acceleration

  bool is_finite() const;
  double speed() const;
  Vec2 position() const { return {x, y}; }
  Pose2 pose() const { return {x, y, yaw}; }
};

struct Control {
  double target_v = 0.0;      // m/s
  double target_steer = 0.0;  // rad
};

struct Actuation {
  double accel = 0.0;       // m/s^2
  double steer_rate = 0.0;  // rad/s
};

/// Proportional speed and steering loops with saturation. Negative speed
/// targets are treated as zero (no reverse gear).
Actuation low_level_control(const VehicleState& state, const Control& control,
                            const VehicleParams& params);

/// Advances the single-track model with linear tire forces by dt using RK4.
/// Below `v_switch` the kinematic bicycle is used; over the next
/// `blend_width` m/s the two derivative fields are linearly blended so the
/// trajectory is continuous in the speed.
VehicleState step_dynamics(const VehicleState& state, const Control& control,
                           const VehicleParams& params, double dt);

/// Friction-limited cornering speed sqrt(mu l g / tan|steer|), capped at v_max.
double friction_speed_limit(double mu, double wheelbase, double steer, double v_max = 8.0,
                            double g = 9.81);

}  // namespace racemop
