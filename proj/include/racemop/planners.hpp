#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "racemop/action.hpp"
#include "racemop/geometry.hpp"
#include "racemop/lidar.hpp"
#include "racemop/vehicle.hpp"

namespace racemop {

class Config;

struct ApfParams {
  double k_att = 1000.0;
  double k_rep = 50.0;
  double rho0 = 8.0;        // m, repulsive cutoff
  double step = 0.1;        // m, gradient step
  int n_p = 20;             // path iterations
  double l_s = 1.2;         // m, spline lookahead
  double l_t = 1.0;         // m, tracking lookahead
  double eps_d = 1.0;       // m, gap disparity threshold
  double eps_f = 0.1;       // m, down-sample filter
  double d_f = -4.0;        // m, rear cut (ego-frame x)
  double k_g = 0.8;         // 1/s, goal-distance speed gain
  double v_floor = 1.0;     // m/s
  double fallback_v = 0.5;  // m/s, action on planner failure
  int median_window = 5;

  void validate() const;
  static ApfParams from_config(const Config& cfg);
};

struct GoalPoint {
  double range = 0.0;    // m
  double bearing = 0.0;  // rad, ego frame
  Vec2 p;                // ego frame
};

/// Largest-range candidate among gaps |d_{i+1} - d_i| > eps_d, placed at
/// (max(d_i, d_{i+1}), (a_i + a_{i+1}) / 2). Without any gap the deepest beam
/// is used. Equal ranges prefer the smaller |bearing|; a mirrored pair
/// resolves to bearing 0. Throws std::invalid_argument on an empty scan.
GoalPoint find_goal_point(const Scan& scan, double eps_d);

/// Four footprint corners and the two side mid-points, ego frame, centered
/// on the reference point.
std::array<Vec2, 6> body_points(double length, double width);

/// U = k_att/2 |pos - goal| + sum_j k_rep/2 (1/rho_j - 1/rho0) over the six
/// body points pos + body[j], rho_j being the distance to the nearest obstacle.
double apf_potential(const Vec2& pos, std::span<const Vec2> body, const PointSet& obstacles,
                     const Vec2& goal, const ApfParams& params);

/// Analytic gradient of apf_potential with respect to pos.
Vec2 apf_gradient(const Vec2& pos, std::span<const Vec2> body, const PointSet& obstacles,
                  const Vec2& goal, const ApfParams& params);

/// Normalized gradient descent: up to n_p steps of exactly params.step from
/// start. Stops early when the gradient vanishes. Includes start.
std::vector<Vec2> plan_path(const Vec2& start, std::span<const Vec2> body,
                            const PointSet& obstacles, const Vec2& goal, const ApfParams& params);

/// Natural cubic spline with chord-length parametrization.
class CubicSpline2 {
 public:
  explicit CubicSpline2(std::span<const Vec2> nodes);

  double parameter_length() const { return t_.back(); }
  Vec2 at(double t) const;
  /// Point at arc length s measured along the curve, or the end point.
  Vec2 at_arc_length(double s, int samples_per_piece = 64) const;

 private:
  std::vector<double> t_;
  std::vector<Vec2> p_;
  std::vector<Vec2> m_;  // second derivatives at the nodes
};

struct SmoothedPath {
  std::vector<Vec2> nodes;  // spline support, starting at the path start
  Vec2 tracking_point;
};

/// Down-samples the raw path, fits a spline from its start through the first
/// node at distance >= l_s, and returns the point at arc length l_t. A path
/// shorter than l_t yields its last point.
SmoothedPath smooth_and_target(std::span<const Vec2> raw_path, const ApfParams& params);

/// atan(wheelbase * 2y / (x^2 + y^2)), clamped to steer_max; targets with
/// x <= 0 saturate towards sign(y).
double pure_pursuit(const Vec2& tracking_point, double wheelbase, double steer_max);

/// min(friction_speed_limit(steer), clamp(k_g d_g, v_floor, v_max)).
double target_velocity(double steer, double d_g, const ApfParams& params,
                       const VehicleParams& vehicle);

struct ApfPlan {
  bool ok = false;
  std::string diagnostic;
  GoalPoint goal;
  PointSet obstacles;
  std::vector<Vec2> raw_path;
  SmoothedPath smoothed;
  double target_v = 0.0;
  double target_steer = 0.0;
  Action action{};
};

class ApfPlanner {
 public:
  ApfPlanner(const ApfParams& params, const VehicleParams& vehicle);

  /// Full pipeline on a raw scan. Never throws for degenerate scans: the
  /// result then carries the fallback action and a diagnostic.
  ApfPlan plan(const Scan& scan) const;
  Action act(const Scan& scan) const { return plan(scan).action; }

  const ApfParams& params() const { return params_; }

 private:
  ApfParams params_;
  VehicleParams vehicle_;
  std::array<Vec2, 6> body_;
};

struct DisparityParams {
  double threshold = 0.5;   // m, disparity between adjacent beams
  double half_width = 0.25; // m, car half width plus margin used for inflation
  double max_angle = 1.5707963267948966;  // rad, steer-target search window
  double speed_gain = 0.8;  // 1/s, speed per metre of free range ahead
  double v_floor = 1.0;     // m/s
  double side_clearance = 0.3;  // m, no turning into a closer side wall
  int median_window = 5;

  static DisparityParams from_config(const Config& cfg);
};

/// Ranges after extending every disparity by ceil(half_width / (d * dtheta))
/// beams on its far side, d being the near range.
std::vector<double> extend_disparities(const Scan& scan, double threshold, double half_width);

class DisparityExtender {
 public:
  DisparityExtender(const DisparityParams& params, const VehicleParams& vehicle);
  Action act(const Scan& scan) const;

 private:
  DisparityParams params_;
  VehicleParams vehicle_;
};

}  // namespace racemop
