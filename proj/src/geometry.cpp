#include "racemop/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

namespace racemop {

double wrap_angle(double angle) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  angle = std::fmod(angle + std::numbers::pi, kTwoPi);
  if (angle <= 0.0) angle += kTwoPi;
  return angle - std::numbers::pi;
}

std::optional<double> ray_segment_distance(const Vec2& origin, const Vec2& dir,
                                           const Segment& seg) {
  const Vec2 e = seg.b - seg.a;
  const double denom = cross(dir, e);
  if (std::abs(denom) < 1e-15) return std::nullopt;  // parallel
  const Vec2 w = seg.a - origin;
  const double t = cross(w, e) / denom;
  const double u = cross(w, dir) / denom;
  if (t < 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

namespace {

int orientation_sign(const Vec2& a, const Vec2& b, const Vec2& c) {
  const double v = cross(b - a, c - a);
  if (v > 0.0) return 1;
  if (v < 0.0) return -1;
  return 0;
}

bool on_segment(const Vec2& a, const Vec2& b, const Vec2& p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
         std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
}

// Projects the corners onto axis and reports the interval.
template <typename Points>
std::pair<double, double> project(const Points& pts, const Vec2& axis) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& p : pts) {
    const double v = dot(p, axis);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {lo, hi};
}

template <typename A, typename B>
bool separated_on(const A& a, const B& b, const Vec2& axis) {
  const auto [alo, ahi] = project(a, axis);
  const auto [blo, bhi] = project(b, axis);
  return ahi < blo || bhi < alo;
}

}  // namespace

bool segments_intersect(const Segment& s, const Segment& t) {
  const int o1 = orientation_sign(s.a, s.b, t.a);
  const int o2 = orientation_sign(s.a, s.b, t.b);
  const int o3 = orientation_sign(t.a, t.b, s.a);
  const int o4 = orientation_sign(t.a, t.b, s.b);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(s.a, s.b, t.a)) return true;
  if (o2 == 0 && on_segment(s.a, s.b, t.b)) return true;
  if (o3 == 0 && on_segment(t.a, t.b, s.a)) return true;
  if (o4 == 0 && on_segment(t.a, t.b, s.b)) return true;
  return false;
}

double point_segment_distance(const Vec2& p, const Segment& s, double* t_out) {
  const Vec2 e = s.b - s.a;
  const double len2 = squared_norm(e);
  double t = len2 > 0.0 ? dot(p - s.a, e) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  if (t_out) *t_out = t;
  return distance(p, s.a + e * t);
}

std::array<Vec2, 4> OrientedBox::corners() const {
  const Vec2 f = rotate({half_length, 0.0}, yaw);
  const Vec2 l = rotate({0.0, half_width}, yaw);
  return {center + f + l, center - f + l, center - f - l, center + f - l};
}

std::array<Segment, 4> OrientedBox::edges() const {
  const auto c = corners();
  return {Segment{c[0], c[1]}, Segment{c[1], c[2]}, Segment{c[2], c[3]},
          Segment{c[3], c[0]}};
}

bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const std::array<Vec2, 4> axes = {rotate({1, 0}, a.yaw), rotate({0, 1}, a.yaw),
                                    rotate({1, 0}, b.yaw), rotate({0, 1}, b.yaw)};
  for (const auto& axis : axes) {
    if (separated_on(ca, cb, axis)) return false;
  }
  return true;
}

bool box_segment_overlap(const OrientedBox& box, const Segment& seg) {
  const auto c = box.corners();
  const std::array<Vec2, 2> s = {seg.a, seg.b};
  const Vec2 e = seg.b - seg.a;
  const double len = norm(e);
  const std::array<Vec2, 2> box_axes = {rotate({1, 0}, box.yaw), rotate({0, 1}, box.yaw)};
  for (const auto& axis : box_axes) {
    if (separated_on(c, s, axis)) return false;
  }
  if (len > 0.0) {
    const Vec2 n{-e.y / len, e.x / len};
    if (separated_on(c, s, n)) return false;
  }
  return true;
}

bool point_in_polygon(const Vec2& p, std::span<const Vec2> polygon) {
  bool inside = false;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = polygon[i];
    const Vec2& b = polygon[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

bool closed_polyline_self_intersects(std::span<const Vec2> poly) {
  const std::size_t n = poly.size();
  if (n < 4) return false;
  std::vector<Segment> segs(n);
  std::vector<std::array<double, 4>> boxes(n);
  for (std::size_t i = 0; i < n; ++i) {
    segs[i] = {poly[i], poly[(i + 1) % n]};
    boxes[i] = {std::min(segs[i].a.x, segs[i].b.x), std::max(segs[i].a.x, segs[i].b.x),
                std::min(segs[i].a.y, segs[i].b.y), std::max(segs[i].a.y, segs[i].b.y)};
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;  // adjacent through the closure
      if (boxes[i][1] < boxes[j][0] || boxes[j][1] < boxes[i][0] ||
          boxes[i][3] < boxes[j][2] || boxes[j][3] < boxes[i][2]) {
        continue;
      }
      if (segments_intersect(segs[i], segs[j])) return true;
    }
  }
  return false;
}

}  // namespace racemop
