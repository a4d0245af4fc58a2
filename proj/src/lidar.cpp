#include "racemop/lidar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "racemop/config.hpp"

namespace racemop {

LidarConfig LidarConfig::from_config(const Config& cfg) {
  LidarConfig c;
  c.beams = static_cast<int>(cfg.get_int("lidar.beams", c.beams));
  c.fov = cfg.get_double("lidar.fov", c.fov);
  c.max_range = cfg.get_double("lidar.max_range", c.max_range);
  c.range_min = cfg.get_double("lidar.range_min", c.range_min);
  c.noise_std = cfg.get_double("lidar.noise_std", c.noise_std);
  if (c.beams < 2 || !(c.fov > 0.0) || !(c.max_range > c.range_min) || !(c.range_min > 0.0) ||
      c.noise_std < 0.0) {
    throw ConfigError("invalid [lidar] section");
  }
  return c;
}

std::vector<double> beam_angles(int beams, double fov) {
  std::vector<double> a(beams);
  const double step = fov / (beams - 1);
  const double center = 0.5 * (beams - 1);
  for (int i = 0; i < beams; ++i) a[i] = (i - center) * step;
  return a;
}

WallIndex::WallIndex(std::vector<Segment> segments, double cell_size)
    : segments_(std::move(segments)), cell_(cell_size) {
  if (segments_.empty()) return;
  double min_x = std::numeric_limits<double>::infinity();
  double min_y = min_x;
  double max_x = -min_x;
  double max_y = -min_x;
  for (const auto& s : segments_) {
    min_x = std::min({min_x, s.a.x, s.b.x});
    min_y = std::min({min_y, s.a.y, s.b.y});
    max_x = std::max({max_x, s.a.x, s.b.x});
    max_y = std::max({max_y, s.a.y, s.b.y});
  }
  origin_ = {min_x - cell_, min_y - cell_};
  nx_ = static_cast<int>(std::ceil((max_x - min_x) / cell_)) + 3;
  ny_ = static_cast<int>(std::ceil((max_y - min_y) / cell_)) + 3;
  cells_.assign(static_cast<std::size_t>(nx_) * ny_, {});
  for (int k = 0; k < static_cast<int>(segments_.size()); ++k) {
    const auto& s = segments_[k];
    const int x0 = static_cast<int>(std::floor((std::min(s.a.x, s.b.x) - origin_.x) / cell_));
    const int x1 = static_cast<int>(std::floor((std::max(s.a.x, s.b.x) - origin_.x) / cell_));
    const int y0 = static_cast<int>(std::floor((std::min(s.a.y, s.b.y) - origin_.y) / cell_));
    const int y1 = static_cast<int>(std::floor((std::max(s.a.y, s.b.y) - origin_.y) / cell_));
    for (int ix = x0; ix <= x1; ++ix) {
      for (int iy = y0; iy <= y1; ++iy) cells_[static_cast<std::size_t>(iy) * nx_ + ix].push_back(k);
    }
  }
}

double WallIndex::cast_brute_force(const Vec2& origin, const Vec2& dir, double max_range) const {
  double best = max_range;
  for (const auto& s : segments_) {
    if (const auto t = ray_segment_distance(origin, dir, s); t && *t < best) best = *t;
  }
  return best;
}

double WallIndex::cast(const Vec2& origin, const Vec2& dir, double max_range) const {
  if (cells_.empty()) return max_range;
  int ix = static_cast<int>(std::floor((origin.x - origin_.x) / cell_));
  int iy = static_cast<int>(std::floor((origin.y - origin_.y) / cell_));
  if (ix < 0 || iy < 0 || ix >= nx_ || iy >= ny_) return cast_brute_force(origin, dir, max_range);

  constexpr double kInf = std::numeric_limits<double>::infinity();
  const int step_x = dir.x > 0.0 ? 1 : -1;
  const int step_y = dir.y > 0.0 ? 1 : -1;
  double t_max_x = kInf;
  double t_max_y = kInf;
  double t_delta_x = kInf;
  double t_delta_y = kInf;
  if (dir.x != 0.0) {
    const double boundary = origin_.x + (ix + (step_x > 0 ? 1 : 0)) * cell_;
    t_max_x = (boundary - origin.x) / dir.x;
    t_delta_x = cell_ / std::abs(dir.x);
  }
  if (dir.y != 0.0) {
    const double boundary = origin_.y + (iy + (step_y > 0 ? 1 : 0)) * cell_;
    t_max_y = (boundary - origin.y) / dir.y;
    t_delta_y = cell_ / std::abs(dir.y);
  }

  double best = max_range;
  while (true) {
    for (const int k : cells_[static_cast<std::size_t>(iy) * nx_ + ix]) {
      if (const auto t = ray_segment_distance(origin, dir, segments_[k]); t && *t < best) best = *t;
    }
    const double t_exit = std::min(t_max_x, t_max_y);
    if (best <= t_exit || t_exit >= max_range) return best;
    if (t_max_x < t_max_y) {
      ix += step_x;
      t_max_x += t_delta_x;
    } else {
      iy += step_y;
      t_max_y += t_delta_y;
    }
    if (ix < 0 || iy < 0 || ix >= nx_ || iy >= ny_) return best;
  }
}

LidarSimulator::LidarSimulator(const LidarConfig& config, std::vector<Segment> walls)
    : config_(config), angles_(beam_angles(config.beams, config.fov)), walls_(std::move(walls)) {}

double LidarSimulator::cast_ray(const Vec2& origin, double world_angle,
                                std::span<const OrientedBox> boxes) const {
  const Vec2 dir{std::cos(world_angle), std::sin(world_angle)};
  double best = walls_.cast(origin, dir, config_.max_range);
  for (const auto& box : boxes) {
    const double radius = std::hypot(box.half_length, box.half_width);
    const Vec2 w = box.center - origin;
    const double along = dot(w, dir);
    if (along + radius < 0.0 || along - radius > best) continue;
    if (std::abs(cross(dir, w)) > radius) continue;
    for (const auto& edge : box.edges()) {
      if (const auto t = ray_segment_distance(origin, dir, edge); t && *t < best) best = *t;
    }
  }
  return best;
}

Scan LidarSimulator::scan(const Pose2& ego, std::span<const OrientedBox> boxes, double noise_std,
                          Rng& rng) const {
  Scan out;
  out.max_range = config_.max_range;
  out.angles = angles_;
  out.ranges.resize(angles_.size());
  const Vec2 origin = ego.position();
  for (std::size_t i = 0; i < angles_.size(); ++i) {
    double r = cast_ray(origin, ego.yaw + angles_[i], boxes);
    if (noise_std > 0.0) r += noise_std * standard_normal(rng);
    out.ranges[i] = std::clamp(r, config_.range_min, config_.max_range);
  }
  return out;
}

Scan median_filter(const Scan& scan, int window) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("median_filter: window must be odd");
  Scan out = scan;
  const int n = static_cast<int>(scan.ranges.size());
  const int half = window / 2;
  std::vector<double> buf(window);
  for (int i = 0; i < n; ++i) {
    for (int k = -half; k <= half; ++k) buf[k + half] = scan.ranges[std::clamp(i + k, 0, n - 1)];
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out.ranges[i] = buf[half];
  }
  return out;
}

PointSet scan_to_points(const Scan& scan) {
  PointSet pts(scan.ranges.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pts[i].p = {scan.ranges[i] * std::cos(scan.angles[i]), scan.ranges[i] * std::sin(scan.angles[i])};
  }
  return pts;
}

PointSet downsample(const PointSet& points, double eps_f) {
  if (!(eps_f > 0.0)) throw std::invalid_argument("downsample: eps_f must be positive");
  PointSet out;
  if (points.empty()) return out;
  out.push_back(points.front());
  // Points at exactly eps_f (e.g. a path of eps_f steps) must not flip on
  // rounding, so the threshold carries a small relative margin.
  const double eps2 = eps_f * eps_f * (1.0 + 1e-9);
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (squared_norm(points[i].p - out.back().p) > eps2) out.push_back(points[i]);
  }
  return out;
}

PointSet downsample_from_center(const PointSet& points, double eps_f) {
  const std::size_t n = points.size();
  if (n < 2) return downsample(points, eps_f);
  const std::size_t mid = n / 2;
  // Odd counts share the central point between both halves.
  PointSet right(points.begin(), points.begin() + (n % 2 ? mid + 1 : mid));
  std::reverse(right.begin(), right.end());
  const PointSet left(points.begin() + mid, points.end());
  PointSet kept_right = downsample(right, eps_f);
  const PointSet kept_left = downsample(left, eps_f);
  std::reverse(kept_right.begin(), kept_right.end());
  if (n % 2) kept_right.pop_back();
  kept_right.insert(kept_right.end(), kept_left.begin(), kept_left.end());
  return kept_right;
}

PointSet close_gap(const PointSet& points, double rear_cut, double eps_f) {
  if (!(eps_f > 0.0)) throw std::invalid_argument("close_gap: eps_f must be positive");
  PointSet out;
  out.reserve(points.size() + 64);
  for (const auto& pt : points) {
    if (pt.p.x >= rear_cut) out.push_back(pt);
  }
  if (out.size() < 2) throw std::invalid_argument("close_gap: fewer than two points remain");
  const Vec2 from = out.back().p;
  const Vec2 to = out.front().p;
  const double gap = distance(from, to);
  const int pieces = static_cast<int>(std::ceil(gap / eps_f));
  for (int k = 1; k < pieces; ++k) {
    out.push_back({from + (to - from) * (static_cast<double>(k) / pieces), true});
  }
  return out;
}

}  // namespace racemop
