#include "racemop/vehicle.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "racemop/config.hpp"

namespace racemop {

namespace {

// [x, y, steer, speed, yaw, yaw_rate, slip]
using StVec = std::array<double, 7>;

StVec add_scaled(const StVec& a, const StVec& b, double s) {
  StVec out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s * b[i];
  return out;
}

double constrain_steer_rate(double steer, double rate, const VehicleParams& p) {
  rate = std::clamp(rate, -p.steer_rate_max, p.steer_rate_max);
  if ((steer >= p.steer_max && rate > 0.0) || (steer <= -p.steer_max && rate < 0.0)) return 0.0;
  return rate;
}

double constrain_accel(double v, double accel, const VehicleParams& p) {
  accel = std::clamp(accel, -p.accel_max, p.accel_max);
  if ((v >= p.v_max && accel > 0.0) || (v <= 0.0 && accel < 0.0)) return 0.0;
  return accel;
}

StVec derivative(const StVec& s, const Actuation& u_in, const VehicleParams& p) {
  const double steer = s[2];
  const double v = s[3];
  const double yaw = s[4];
  const double r = s[5];
  const double beta = s[6];
  const double u_steer = constrain_steer_rate(steer, u_in.steer_rate, p);
  const double a = constrain_accel(v, u_in.accel, p);
  const double l = p.wheelbase;

  StVec kin{};
  kin[0] = v * std::cos(yaw + beta);
  kin[1] = v * std::sin(yaw + beta);
  kin[2] = u_steer;
  kin[3] = a;
  kin[4] = v * std::tan(steer) / l;
  const double c = std::cos(steer);
  kin[5] = a * std::tan(steer) / l + v * u_steer / (l * c * c);
  kin[6] = 0.0;

  const double w = p.blend_width > 0.0
                       ? std::clamp((v - p.v_switch) / p.blend_width, 0.0, 1.0)
                       : (v >= p.v_switch ? 1.0 : 0.0);
  if (w <= 0.0) return kin;

  const double lf = p.lf;
  const double lr = p.lr();
  const double h = p.cg_height;
  const double g = p.g;
  const double mu = p.mu;
  const double fz_front = g * lr - a * h;
  const double fz_rear = g * lf + a * h;
  StVec dyn{};
  dyn[0] = kin[0];
  dyn[1] = kin[1];
  dyn[2] = u_steer;
  dyn[3] = a;
  dyn[4] = r;
  dyn[5] = -mu * p.mass / (v * p.inertia * l) *
               (lf * lf * p.cs_front * fz_front + lr * lr * p.cs_rear * fz_rear) * r +
           mu * p.mass / (p.inertia * l) * (lr * p.cs_rear * fz_rear - lf * p.cs_front * fz_front) *
               beta +
           mu * p.mass / (p.inertia * l) * lf * p.cs_front * fz_front * steer;
  dyn[6] = (mu / (v * v * l) * (p.cs_rear * fz_rear * lr - p.cs_front * fz_front * lf) - 1.0) * r -
           mu / (v * l) * (p.cs_rear * fz_rear + p.cs_front * fz_front) * beta +
           mu / (v * l) * p.cs_front * fz_front * steer;
  if (w >= 1.0) return dyn;

  StVec out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * kin[i] + w * dyn[i];
  return out;
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::invalid_argument(std::string("vehicle parameter '") + name + "' must be positive");
  }
}

}  // namespace

void VehicleParams::validate() const {
  require_positive(wheelbase, "wheelbase");
  require_positive(lf, "lf");
  require_positive(lr(), "lr (wheelbase - lf)");
  require_positive(mass, "mass");
  require_positive(inertia, "inertia");
  require_positive(cs_front, "cs_front");
  require_positive(cs_rear, "cs_rear");
  require_positive(g, "g");
  require_positive(steer_max, "steer_max");
  require_positive(steer_rate_max, "steer_rate_max");
  require_positive(accel_max, "accel_max");
  require_positive(v_max, "v_max");
  require_positive(length, "length");
  require_positive(width, "width");
  require_positive(speed_gain, "speed_gain");
  require_positive(steer_gain, "steer_gain");
  require_positive(v_switch, "v_switch");
  if (!(mu > 0.0 && mu <= 1.5)) throw std::invalid_argument("vehicle parameter 'mu' must be in (0, 1.5]");
  if (!(blend_width >= 0.0)) throw std::invalid_argument("vehicle parameter 'blend_width' must be >= 0");
}

VehicleParams VehicleParams::from_config(const Config& cfg) {
  VehicleParams p;
  p.wheelbase = cfg.get_double("vehicle.wheelbase", p.wheelbase);
  p.lf = cfg.get_double("vehicle.lf", p.lf);
  p.mass = cfg.get_double("vehicle.mass", p.mass);
  p.inertia = cfg.get_double("vehicle.inertia", p.inertia);
  p.cs_front = cfg.get_double("vehicle.cs_front", p.cs_front);
  p.cs_rear = cfg.get_double("vehicle.cs_rear", p.cs_rear);
  p.cg_height = cfg.get_double("vehicle.cg_height", p.cg_height);
  p.mu = cfg.get_double("vehicle.mu", p.mu);
  p.g = cfg.get_double("vehicle.g", p.g);
  p.steer_max = cfg.get_double("vehicle.steer_max", p.steer_max);
  p.steer_rate_max = cfg.get_double("vehicle.steer_rate_max", p.steer_rate_max);
  p.accel_max = cfg.get_double("vehicle.accel_max", p.accel_max);
  p.v_max = cfg.get_double("vehicle.v_max", p.v_max);
  p.length = cfg.get_double("vehicle.length", p.length);
  p.width = cfg.get_double("vehicle.width", p.width);
  p.speed_gain = cfg.get_double("vehicle.speed_gain", p.speed_gain);
  p.steer_gain = cfg.get_double("vehicle.steer_gain", p.steer_gain);
  p.v_switch = cfg.get_double("vehicle.v_switch", p.v_switch);
  p.blend_width = cfg.get_double("vehicle.blend_width", p.blend_width);
  p.validate();
  return p;
}

bool VehicleState::is_finite() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(yaw) && std::isfinite(v_long) &&
         std::isfinite(v_lat) && std::isfinite(yaw_rate) && std::isfinite(slip) &&
         std::isfinite(steer) && std::isfinite(a_long);
}

double VehicleState::speed() const { return std::hypot(v_long, v_lat); }

Actuation low_level_control(const VehicleState& state, const Control& control,
                            const VehicleParams& params) {
  const double target_v = std::clamp(control.target_v, 0.0, params.v_max);
  const double target_steer = std::clamp(control.target_steer, -params.steer_max, params.steer_max);
  Actuation out;
  out.accel = std::clamp(params.speed_gain * (target_v - state.v_long), -params.accel_max,
                         params.accel_max);
  out.steer_rate = std::clamp(params.steer_gain * (target_steer - state.steer),
                              -params.steer_rate_max, params.steer_rate_max);
  return out;
}

VehicleState step_dynamics(const VehicleState& state, const Control& control,
                           const VehicleParams& params, double dt) {
  if (!state.is_finite() || !std::isfinite(control.target_v) ||
      !std::isfinite(control.target_steer) || !std::isfinite(dt) || dt < 0.0) {
    throw InvalidStateError("step_dynamics: non-finite state, control or time step");
  }
  const Actuation u = low_level_control(state, control, params);

  const StVec s0{state.x,   state.y,        state.steer, state.speed(),
                 state.yaw, state.yaw_rate, state.slip};
  const StVec k1 = derivative(s0, u, params);
  const StVec k2 = derivative(add_scaled(s0, k1, 0.5 * dt), u, params);
  const StVec k3 = derivative(add_scaled(s0, k2, 0.5 * dt), u, params);
  const StVec k4 = derivative(add_scaled(s0, k3, dt), u, params);
  StVec s1;
  for (std::size_t i = 0; i < s1.size(); ++i) {
    s1[i] = s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }

  VehicleState out;
  out.x = s1[0];
  out.y = s1[1];
  out.steer = std::clamp(s1[2], -params.steer_max, params.steer_max);
  const double v = std::clamp(s1[3], 0.0, params.v_max);
  out.yaw = s1[4];
  out.yaw_rate = s1[5];
  // A spinning car (|slip| > pi/2) would report negative longitudinal speed.
  out.slip = std::clamp(s1[6], -std::numbers::pi / 2.0, std::numbers::pi / 2.0);
  out.v_long = v * std::cos(out.slip);
  out.v_lat = v * std::sin(out.slip);
  out.a_long = constrain_accel(s0[3], u.accel, params);
  if (!out.is_finite()) throw InvalidStateError("step_dynamics: integration diverged");
  return out;
}

double friction_speed_limit(double mu, double wheelbase, double steer, double v_max, double g) {
  const double a = std::abs(steer);
  if (a < 1e-4) return v_max;
  return std::min(v_max, std::sqrt(mu * wheelbase * g / std::tan(a)));
}

}  // namespace racemop
