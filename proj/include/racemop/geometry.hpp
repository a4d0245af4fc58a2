#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace racemop {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2 operator/(double s) const { return {x / s, y / s}; }
  Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  Vec2& operator-=(const Vec2& o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  bool operator==(const Vec2&) const = default;
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }
inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }
inline double norm(const Vec2& v) { return std::hypot(v.x, v.y); }
inline double squared_norm(const Vec2& v) { return v.x * v.x + v.y * v.y; }
inline double distance(const Vec2& a, const Vec2& b) { return norm(a - b); }
inline Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

/// Wraps an angle to (-pi, pi].
double wrap_angle(double angle);

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double yaw = 0.0;

  Vec2 position() const { return {x, y}; }
  Vec2 to_world(const Vec2& local) const { return position() + rotate(local, yaw); }
  Vec2 to_local(const Vec2& world) const { return rotate(world - position(), -yaw); }
};

struct Segment {
  Vec2 a;
  Vec2 b;
};

/// Distance along a unit-direction ray to the segment, if the ray hits it.
std::optional<double> ray_segment_distance(const Vec2& origin, const Vec2& dir,
                                           const Segment& seg);

bool segments_intersect(const Segment& s, const Segment& t);

/// Shortest distance from point p to segment s, and the clamped projection
/// parameter in [0, 1].
double point_segment_distance(const Vec2& p, const Segment& s, double* t_out = nullptr);

/// A rectangle centered on a pose; used for car footprints.
struct OrientedBox {
  Vec2 center;
  double yaw = 0.0;
  double half_length = 0.0;
  double half_width = 0.0;

  /// Counter-clockwise: front-left, rear-left, rear-right, front-right.
  std::array<Vec2, 4> corners() const;
  std::array<Segment, 4> edges() const;
};

/// Separating-axis tests.
bool boxes_overlap(const OrientedBox& a, const OrientedBox& b);
bool box_segment_overlap(const OrientedBox& box, const Segment& seg);

/// Even-odd rule; polygon is implicitly closed.
bool point_in_polygon(const Vec2& p, std::span<const Vec2> polygon);

/// True when any two non-adjacent edges of the closed polyline intersect.
bool closed_polyline_self_intersects(std::span<const Vec2> polyline);

}  // namespace racemop
