#include "racemop/planners.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "racemop/config.hpp"

namespace racemop {

namespace {

constexpr double kRhoMin = 1e-3;

struct Candidate {
  double range;
  double bearing;
};

// Largest range; ties prefer smaller |bearing| and a mirrored pair collapses to 0.
Candidate select_deepest(const std::vector<Candidate>& cands) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : cands) best = std::max(best, c.range);
  double min_abs = std::numeric_limits<double>::infinity();
  for (const auto& c : cands) {
    if (c.range == best) min_abs = std::min(min_abs, std::abs(c.bearing));
  }
  bool pos = false;
  bool neg = false;
  for (const auto& c : cands) {
    if (c.range != best || std::abs(c.bearing) != min_abs) continue;
    if (c.bearing > 0.0) pos = true;
    if (c.bearing < 0.0) neg = true;
  }
  if (pos && neg) return {best, 0.0};
  return {best, pos ? min_abs : -min_abs};
}

const ObstaclePoint* nearest_obstacle(const Vec2& q, const PointSet& obstacles, double* dist) {
  const ObstaclePoint* best = nullptr;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (const auto& o : obstacles) {
    const double d2 = squared_norm(q - o.p);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = &o;
    }
  }
  *dist = std::sqrt(best_d2);
  return best;
}

}  // namespace

void ApfParams::validate() const {
  if (!(k_att > 0.0 && k_rep > 0.0 && rho0 > 0.0 && step > 0.0 && n_p > 0 && l_s > 0.0 &&
        l_t > 0.0 && eps_d > 0.0 && eps_f > 0.0 && d_f < 0.0 && k_g > 0.0 && v_floor > 0.0 &&
        fallback_v >= 0.0 && median_window > 0 && median_window % 2 == 1)) {
    throw ConfigError("invalid [apf] parameters");
  }
}

ApfParams ApfParams::from_config(const Config& cfg) {
  ApfParams p;
  p.k_att = cfg.get_double("apf.k_att", p.k_att);
  p.k_rep = cfg.get_double("apf.k_rep", p.k_rep);
  p.rho0 = cfg.get_double("apf.rho0", p.rho0);
  p.step = cfg.get_double("apf.step", p.step);
  p.n_p = static_cast<int>(cfg.get_int("apf.n_p", p.n_p));
  p.l_s = cfg.get_double("apf.l_s", p.l_s);
  p.l_t = cfg.get_double("apf.l_t", p.l_t);
  p.eps_d = cfg.get_double("apf.eps_d", p.eps_d);
  p.eps_f = cfg.get_double("apf.eps_f", p.eps_f);
  p.d_f = cfg.get_double("apf.d_f", p.d_f);
  p.k_g = cfg.get_double("apf.k_g", p.k_g);
  p.v_floor = cfg.get_double("apf.v_floor", p.v_floor);
  p.fallback_v = cfg.get_double("apf.fallback_v", p.fallback_v);
  p.median_window = static_cast<int>(cfg.get_int("apf.median_window", p.median_window));
  p.validate();
  return p;
}

GoalPoint find_goal_point(const Scan& scan, double eps_d) {
  const std::size_t n = scan.ranges.size();
  if (n == 0 || scan.angles.size() != n) throw std::invalid_argument("find_goal_point: empty scan");
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double d0 = scan.ranges[i];
    const double d1 = scan.ranges[i + 1];
    if (std::abs(d1 - d0) > eps_d) {
      cands.push_back({std::max(d0, d1), 0.5 * (scan.angles[i] + scan.angles[i + 1])});
    }
  }
  if (cands.empty()) {
    for (std::size_t i = 0; i < n; ++i) cands.push_back({scan.ranges[i], scan.angles[i]});
  }
  const Candidate c = select_deepest(cands);
  return {c.range, c.bearing, {c.range * std::cos(c.bearing), c.range * std::sin(c.bearing)}};
}

std::array<Vec2, 6> body_points(double length, double width) {
  const double hl = 0.5 * length;
  const double hw = 0.5 * width;
  return {Vec2{hl, hw}, Vec2{-hl, hw}, Vec2{-hl, -hw}, Vec2{hl, -hw}, Vec2{0.0, hw}, Vec2{0.0, -hw}};
}

double apf_potential(const Vec2& pos, std::span<const Vec2> body, const PointSet& obstacles,
                     const Vec2& goal, const ApfParams& params) {
  double u = 0.5 * params.k_att * distance(pos, goal);
  if (obstacles.empty()) return u;
  for (const auto& offset : body) {
    double rho = 0.0;
    nearest_obstacle(pos + offset, obstacles, &rho);
    rho = std::max(rho, kRhoMin);
    if (rho <= params.rho0) u += 0.5 * params.k_rep * (1.0 / rho - 1.0 / params.rho0);
  }
  return u;
}

Vec2 apf_gradient(const Vec2& pos, std::span<const Vec2> body, const PointSet& obstacles,
                  const Vec2& goal, const ApfParams& params) {
  Vec2 grad;
  const Vec2 to_goal = pos - goal;
  const double dg = norm(to_goal);
  if (dg > 0.0) grad += to_goal * (0.5 * params.k_att / dg);
  for (const auto& offset : body) {
    const Vec2 q = pos + offset;
    double d = 0.0;
    const ObstaclePoint* o = nearest_obstacle(q, obstacles, &d);
    if (o == nullptr || d > params.rho0 || d == 0.0) continue;
    const double rho = std::max(d, kRhoMin);
    // d/dq of k_rep/2 (1/rho - 1/rho0) = -k_rep/(2 rho^2) * (q - o)/|q - o|
    grad -= (q - o->p) * (0.5 * params.k_rep / (rho * rho * d));
  }
  return grad;
}

std::vector<Vec2> plan_path(const Vec2& start, std::span<const Vec2> body,
                            const PointSet& obstacles, const Vec2& goal, const ApfParams& params) {
  std::vector<Vec2> path{start};
  path.reserve(params.n_p + 1);
  Vec2 x = start;
  for (int i = 0; i < params.n_p; ++i) {
    const Vec2 g = apf_gradient(x, body, obstacles, goal, params);
    const double gn = norm(g);
    if (!(gn >= 1e-12) || !std::isfinite(gn)) break;
    x -= g * (params.step / gn);
    path.push_back(x);
  }
  return path;
}

CubicSpline2::CubicSpline2(std::span<const Vec2> nodes) {
  for (const auto& p : nodes) {
    if (!p_.empty() && distance(p, p_.back()) < 1e-12) continue;
    t_.push_back(p_.empty() ? 0.0 : t_.back() + distance(p, p_.back()));
    p_.push_back(p);
  }
  if (p_.size() < 2) throw std::invalid_argument("CubicSpline2: need two distinct nodes");
  const std::size_t n = p_.size();
  m_.assign(n, Vec2{});
  if (n == 2) return;

  // Thomas algorithm for the interior second derivatives, natural ends.
  const std::size_t k = n - 2;
  std::vector<double> diag(k), upper(k), lower(k);
  std::vector<Vec2> rhs(k);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double h0 = t_[i] - t_[i - 1];
    const double h1 = t_[i + 1] - t_[i];
    lower[i - 1] = h0;
    diag[i - 1] = 2.0 * (h0 + h1);
    upper[i - 1] = h1;
    rhs[i - 1] = ((p_[i + 1] - p_[i]) / h1 - (p_[i] - p_[i - 1]) / h0) * 6.0;
  }
  for (std::size_t i = 1; i < k; ++i) {
    const double w = lower[i] / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= rhs[i - 1] * w;
  }
  m_[k] = rhs[k - 1] / diag[k - 1];
  for (std::size_t i = k - 1; i-- > 0;) m_[i + 1] = (rhs[i] - m_[i + 2] * upper[i]) / diag[i];
}

Vec2 CubicSpline2::at(double t) const {
  t = std::clamp(t, 0.0, t_.back());
  std::size_t i = std::upper_bound(t_.begin(), t_.end(), t) - t_.begin();
  i = std::clamp<std::size_t>(i, 1, t_.size() - 1) - 1;
  const double h = t_[i + 1] - t_[i];
  const double a = t_[i + 1] - t;
  const double b = t - t_[i];
  return m_[i] * (a * a * a / (6.0 * h)) + m_[i + 1] * (b * b * b / (6.0 * h)) +
         (p_[i] / h - m_[i] * (h / 6.0)) * a + (p_[i + 1] / h - m_[i + 1] * (h / 6.0)) * b;
}

Vec2 CubicSpline2::at_arc_length(double s, int samples_per_piece) const {
  double acc = 0.0;
  Vec2 prev = p_.front();
  for (std::size_t i = 0; i + 1 < t_.size(); ++i) {
    const double h = t_[i + 1] - t_[i];
    for (int k = 1; k <= samples_per_piece; ++k) {
      const Vec2 cur = at(t_[i] + h * k / samples_per_piece);
      const double ds = distance(cur, prev);
      if (acc + ds >= s && ds > 0.0) return prev + (cur - prev) * ((s - acc) / ds);
      acc += ds;
      prev = cur;
    }
  }
  return p_.back();
}

SmoothedPath smooth_and_target(std::span<const Vec2> raw_path, const ApfParams& params) {
  if (raw_path.size() < 2) throw std::invalid_argument("smooth_and_target: path needs two points");
  SmoothedPath out;
  double length = 0.0;
  for (std::size_t i = 1; i < raw_path.size(); ++i) length += distance(raw_path[i], raw_path[i - 1]);
  if (length < params.l_t) {
    out.nodes.assign(raw_path.begin(), raw_path.end());
    out.tracking_point = raw_path.back();
    return out;
  }

  PointSet pts;
  pts.reserve(raw_path.size());
  for (const auto& p : raw_path) pts.push_back({p, false});
  const PointSet kept = downsample(pts, params.eps_f);
  const Vec2 start = raw_path.front();
  for (const auto& k : kept) {
    out.nodes.push_back(k.p);
    if (distance(k.p, start) >= params.l_s) break;
  }
  if (out.nodes.size() < 2) out.nodes.push_back(raw_path.back());
  const CubicSpline2 spline(out.nodes);
  out.tracking_point = spline.at_arc_length(params.l_t);
  return out;
}

double pure_pursuit(const Vec2& tracking_point, double wheelbase, double steer_max) {
  if (tracking_point.x <= 0.0) return std::copysign(steer_max, tracking_point.y);
  const double l2 = squared_norm(tracking_point);
  const double curvature = 2.0 * tracking_point.y / l2;
  return std::clamp(std::atan(wheelbase * curvature), -steer_max, steer_max);
}

double target_velocity(double steer, double d_g, const ApfParams& params,
                       const VehicleParams& vehicle) {
  const double v1 = friction_speed_limit(vehicle.mu, vehicle.wheelbase, steer, vehicle.v_max, vehicle.g);
  const double v2 = std::clamp(params.k_g * d_g, params.v_floor, vehicle.v_max);
  return std::min(v1, v2);
}

ApfPlanner::ApfPlanner(const ApfParams& params, const VehicleParams& vehicle)
    : params_(params), vehicle_(vehicle), body_(body_points(vehicle.length, vehicle.width)) {
  params_.validate();
}

ApfPlan ApfPlanner::plan(const Scan& scan) const {
  ApfPlan out;
  try {
    for (const double r : scan.ranges) {
      if (!std::isfinite(r)) throw std::invalid_argument("non-finite range");
    }
    const Scan filtered = median_filter(scan, params_.median_window);
    const PointSet points = downsample_from_center(scan_to_points(filtered), params_.eps_f);
    out.obstacles = close_gap(points, params_.d_f, params_.eps_f);
    out.goal = find_goal_point(filtered, params_.eps_d);
    out.raw_path = plan_path({0.0, 0.0}, body_, out.obstacles, out.goal.p, params_);
    if (out.raw_path.size() < 2) throw std::runtime_error("gradient vanished at the ego position");
    out.smoothed = smooth_and_target(out.raw_path, params_);
    out.target_steer = pure_pursuit(out.smoothed.tracking_point, vehicle_.wheelbase, vehicle_.steer_max);
    out.target_v = target_velocity(out.target_steer, out.goal.range, params_, vehicle_);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.diagnostic = std::string("apf fallback: ") + e.what();
    out.target_v = params_.fallback_v;
    out.target_steer = 0.0;
  }
  out.action = normalize_action(out.target_v, out.target_steer, vehicle_);
  return out;
}

DisparityParams DisparityParams::from_config(const Config& cfg) {
  DisparityParams p;
  p.threshold = cfg.get_double("disparity.threshold", p.threshold);
  p.half_width = cfg.get_double("disparity.half_width", p.half_width);
  p.max_angle = cfg.get_double("disparity.max_angle", p.max_angle);
  p.speed_gain = cfg.get_double("disparity.speed_gain", p.speed_gain);
  p.v_floor = cfg.get_double("disparity.v_floor", p.v_floor);
  p.side_clearance = cfg.get_double("disparity.side_clearance", p.side_clearance);
  p.median_window = static_cast<int>(cfg.get_int("disparity.median_window", p.median_window));
  if (!(p.threshold > 0.0 && p.half_width > 0.0 && p.max_angle > 0.0 && p.speed_gain > 0.0 &&
        p.v_floor > 0.0 && p.side_clearance >= 0.0 && p.median_window % 2 == 1)) {
    throw ConfigError("invalid [disparity] parameters");
  }
  return p;
}

std::vector<double> extend_disparities(const Scan& scan, double threshold, double half_width) {
  const auto& r = scan.ranges;
  const int n = static_cast<int>(r.size());
  std::vector<double> out = r;
  if (n < 2) return out;
  const double dtheta = scan.angles[1] - scan.angles[0];
  for (int i = 0; i + 1 < n; ++i) {
    if (std::abs(r[i + 1] - r[i]) <= threshold) continue;
    const double near = std::min(r[i], r[i + 1]);
    const int count = static_cast<int>(std::ceil(half_width / near / dtheta));
    if (r[i + 1] > r[i]) {
      for (int k = 1; k <= count && i + k < n; ++k) out[i + k] = std::min(out[i + k], near);
    } else {
      for (int k = 0; k < count && i - k >= 0; ++k) out[i - k] = std::min(out[i - k], near);
    }
  }
  return out;
}

DisparityExtender::DisparityExtender(const DisparityParams& params, const VehicleParams& vehicle)
    : params_(params), vehicle_(vehicle) {}

Action DisparityExtender::act(const Scan& scan) const {
  if (scan.ranges.size() < 2) return normalize_action(0.5, 0.0, vehicle_);
  const Scan filtered = median_filter(scan, params_.median_window);
  const std::vector<double> ext =
      extend_disparities(filtered, params_.threshold, params_.half_width);
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < ext.size(); ++i) {
    if (std::abs(filtered.angles[i]) <= params_.max_angle) cands.push_back({ext[i], filtered.angles[i]});
  }
  if (cands.empty()) return normalize_action(0.5, 0.0, vehicle_);
  const Candidate target = select_deepest(cands);
  double steer = std::clamp(target.bearing, -vehicle_.steer_max, vehicle_.steer_max);

  double left_min = std::numeric_limits<double>::infinity();
  double right_min = left_min;
  const double side = std::numbers::pi / 2.0;
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    const double a = filtered.angles[i];
    if (std::abs(a - side) <= 0.5) left_min = std::min(left_min, filtered.ranges[i]);
    if (std::abs(a + side) <= 0.5) right_min = std::min(right_min, filtered.ranges[i]);
  }
  if ((steer > 0.0 && left_min < params_.side_clearance) ||
      (steer < 0.0 && right_min < params_.side_clearance)) {
    steer = 0.0;
  }

  const std::size_t n = ext.size();
  const double ahead = n % 2 ? ext[n / 2] : 0.5 * (ext[n / 2 - 1] + ext[n / 2]);
  const double v1 = friction_speed_limit(vehicle_.mu, vehicle_.wheelbase, steer, vehicle_.v_max, vehicle_.g);
  const double v2 = std::clamp(params_.speed_gain * ahead, params_.v_floor, vehicle_.v_max);
  return normalize_action(std::min(v1, v2), steer, vehicle_);
}

}  // namespace racemop
