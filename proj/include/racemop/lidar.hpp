#pragma once

#include <span>
#include <vector>

#include "racemop/geometry.hpp"
#include "racemop/rng.hpp"

namespace racemop {

class Config;

struct LidarConfig {
  int beams = 1080;
  double fov = 4.71238898038469;  // rad, 270 degrees
  double max_range = 30.0;        // m
  double range_min = 0.05;        // m
  double noise_std = 0.01;        // m

  static LidarConfig from_config(const Config& cfg);
};

struct Scan {
  std::vector<double> ranges;  // m
  std::vector<double> angles;  // rad, ego frame, strictly increasing
  double max_range = 30.0;

  std::size_t size() const { return ranges.size(); }
};

/// Uniformly spaced beam angles, symmetric about zero so that beam i and beam
/// n-1-i are exact negatives.
std::vector<double> beam_angles(int beams, double fov);

/// Uniform-grid index over static wall segments for ray casting.
class WallIndex {
 public:
  explicit WallIndex(std::vector<Segment> segments, double cell_size = 1.0);

  /// Distance to the first wall along the unit direction, or `max_range`.
  double cast(const Vec2& origin, const Vec2& dir, double max_range) const;
  const std::vector<Segment>& segments() const { return segments_; }

 private:
  double cast_brute_force(const Vec2& origin, const Vec2& dir, double max_range) const;

  std::vector<Segment> segments_;
  double cell_ = 1.0;
  Vec2 origin_;
  int nx_ = 0;
  int ny_ = 0;
  std::vector<std::vector<int>> cells_;
};

class LidarSimulator {
 public:
  LidarSimulator(const LidarConfig& config, std::vector<Segment> walls);

  /// Noiseless distance along one ray against walls and opponent boxes.
  double cast_ray(const Vec2& origin, double world_angle, std::span<const OrientedBox> boxes) const;

  /// Full scan from the ego pose. Opponent bodies occlude walls behind them.
  /// noise_std <= 0 yields a deterministic scan.
  Scan scan(const Pose2& ego, std::span<const OrientedBox> boxes, double noise_std, Rng& rng) const;

  const LidarConfig& config() const { return config_; }
  const std::vector<double>& angles() const { return angles_; }
  const WallIndex& walls() const { return walls_; }

 private:
  LidarConfig config_;
  std::vector<double> angles_;
  WallIndex walls_;
};

/// Per-beam median over an odd window, indices clamped at the scan edges.
Scan median_filter(const Scan& scan, int window = 5);

struct ObstaclePoint {
  Vec2 p;
  bool artificial = false;
};
using PointSet = std::vector<ObstaclePoint>;

/// Ego-frame x-y points ordered by beam angle.
PointSet scan_to_points(const Scan& scan);

/// Greedy filter from the first point: a point is kept iff it lies more than
/// eps_f from the last kept point.
PointSet downsample(const PointSet& points, double eps_f);

/// The same filter run outward from the central beam towards both ends, so
/// that mirrored inputs give mirrored outputs. Result stays angle-ordered.
PointSet downsample_from_center(const PointSet& points, double eps_f);

/// Drops points with ego-frame x < rear_cut and closes the field-of-view gap
/// with artificial points interpolated from the last to the first remaining
/// point, spaced at most eps_f apart. Throws std::invalid_argument when fewer
/// than two points remain.
PointSet close_gap(const PointSet& points, double rear_cut, double eps_f);

}  // namespace racemop
