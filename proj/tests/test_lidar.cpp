#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "racemop/geometry.hpp"
#include "racemop/lidar.hpp"
#include "racemop/rng.hpp"

namespace racemop {
namespace {

std::vector<Segment> square_room(double half) {
  const Vec2 a{-half, -half}, b{half, -half}, c{half, half}, d{-half, half};
  return {{a, b}, {b, c}, {c, d}, {d, a}};
}

// Cramer's rule on origin + t dir = a + u (b - a).
double brute_hit(const Vec2& o, const Vec2& dir, const Vec2& a, const Vec2& b) {
  const double ex = b.x - a.x, ey = b.y - a.y;
  const double det = -dir.x * ey + dir.y * ex;
  if (std::abs(det) < 1e-15) return std::numeric_limits<double>::infinity();
  const double rx = a.x - o.x, ry = a.y - o.y;
  const double t = (-rx * ey + ry * ex) / det;
  const double u = (dir.x * ry - dir.y * rx) / det;
  if (t < 0.0 || u < 0.0 || u > 1.0) return std::numeric_limits<double>::infinity();
  return t;
}

std::array<Vec2, 4> box_corners(const OrientedBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  std::array<Vec2, 4> out;
  const double sx[4] = {1, -1, -1, 1}, sy[4] = {1, 1, -1, -1};
  for (int k = 0; k < 4; ++k) {
    const double lx = sx[k] * b.half_length, ly = sy[k] * b.half_width;
    out[k] = {b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly};
  }
  return out;
}

TEST(Lidar, SquareRoomAxisAndDiagonal) {
  const LidarSimulator sim(LidarConfig{}, square_room(5.0));
  EXPECT_NEAR(sim.cast_ray({0, 0}, 0.0, {}), 5.0, 1e-12);
  EXPECT_NEAR(sim.cast_ray({0, 0}, M_PI / 4, {}), 7.0711, 1e-4);
  EXPECT_NEAR(sim.cast_ray({0, 0}, M_PI / 4, {}), 5.0 * std::sqrt(2.0), 1e-12);
}

TEST(Lidar, ScanShapeAndAngles) {
  const LidarSimulator sim(LidarConfig{}, square_room(5.0));
  Rng rng(1);
  const Scan s = sim.scan({0, 0, 0}, {}, 0.01, rng);
  ASSERT_EQ(s.size(), 1080u);
  EXPECT_NEAR(s.angles.front(), -0.75 * M_PI, 1e-12);
  EXPECT_NEAR(s.angles.back(), 0.75 * M_PI, 1e-12);
  const double step = s.angles[1] - s.angles[0];
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_NEAR(s.angles[i] - s.angles[i - 1], step, 1e-12);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_DOUBLE_EQ(s.angles[i], -s.angles[s.size() - 1 - i]);
    EXPECT_GT(s.ranges[i], 0.0);
    EXPECT_LE(s.ranges[i], s.max_range);
  }
}

TEST(Lidar, RandomScenesMatchBruteForceWithOcclusion) {
  Rng rng(2024);
  const LidarConfig cfg;
  for (int scene = 0; scene < 100; ++scene) {
    std::vector<Segment> walls = square_room(uniform(rng, 8.0, 20.0));
    for (int k = 0; k < 15; ++k) {
      const Vec2 a{uniform(rng, -15, 15), uniform(rng, -15, 15)};
      walls.push_back({a, a + Vec2{uniform(rng, -4, 4), uniform(rng, -4, 4)}});
    }
    std::vector<OrientedBox> boxes;
    for (int k = 0; k < 4; ++k) {
      const double r = uniform(rng, 1.0, 6.0), th = uniform(rng, -M_PI, M_PI);
      boxes.push_back({{r * std::cos(th), r * std::sin(th)}, uniform(rng, -M_PI, M_PI), 0.29, 0.155});
    }
    const Pose2 ego{uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, -M_PI, M_PI)};
    const LidarSimulator sim(cfg, walls);
    Rng unused(0);
    const Scan s = sim.scan(ego, boxes, 0.0, unused);

    std::vector<std::pair<Vec2, Vec2>> all;
    for (const auto& w : walls) all.push_back({w.a, w.b});
    for (const auto& b : boxes) {
      const auto c = box_corners(b);
      for (int k = 0; k < 4; ++k) all.push_back({c[k], c[(k + 1) % 4]});
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double ang = ego.yaw + s.angles[i];
      const Vec2 dir{std::cos(ang), std::sin(ang)};
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [a, b] : all) best = std::min(best, brute_hit(ego.position(), dir, a, b));
      const double oracle = std::clamp(best, cfg.range_min, cfg.max_range);
      ASSERT_NEAR(s.ranges[i], oracle, 1e-9) << "scene " << scene << " beam " << i;
    }
  }
}

TEST(Lidar, OpponentNeverIncreasesRanges) {
  Rng rng(7);
  const LidarSimulator sim(LidarConfig{}, square_room(10.0));
  for (int trial = 0; trial < 50; ++trial) {
    const Pose2 ego{uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -M_PI, M_PI)};
    const OrientedBox box{{ego.x + uniform(rng, 1, 4), ego.y + uniform(rng, -2, 2)}, uniform(rng, -1, 1), 0.29, 0.155};
    Rng r0(0);
    const Scan bare = sim.scan(ego, {}, 0.0, r0);
    const Scan occl = sim.scan(ego, std::span<const OrientedBox>(&box, 1), 0.0, r0);
    for (std::size_t i = 0; i < bare.size(); ++i) ASSERT_LE(occl.ranges[i], bare.ranges[i]);
  }
}

TEST(Lidar, NoiselessDeterministicNoisyUnbiased) {
  LidarConfig cfg;
  cfg.beams = 2;
  cfg.fov = 0.01;
  const LidarSimulator sim(cfg, square_room(5.0));
  Rng a(1), b(2);
  EXPECT_EQ(sim.scan({0, 0, 0}, {}, 0.0, a).ranges, sim.scan({0, 0, 0}, {}, 0.0, b).ranges);

  const double truth = sim.scan({0, 0, 0}, {}, 0.0, a).ranges[0];
  const double sigma = 0.01;
  const int n = 100000;
  Rng rng(99);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += sim.scan({0, 0, 0}, {}, sigma, rng).ranges[0];
  EXPECT_NEAR(sum / n, truth, 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST(WallIndex, GridMatchesAllSegments) {
  Rng rng(3);
  std::vector<Segment> segs;
  for (int k = 0; k < 200; ++k) {
    const Vec2 a{uniform(rng, -20, 20), uniform(rng, -20, 20)};
    segs.push_back({a, a + Vec2{uniform(rng, -2, 2), uniform(rng, -2, 2)}});
  }
  const WallIndex idx(segs, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const Vec2 o{uniform(rng, -25, 25), uniform(rng, -25, 25)};
    const double th = uniform(rng, -M_PI, M_PI);
    const Vec2 dir{std::cos(th), std::sin(th)};
    double best = 30.0;
    for (const auto& s : segs) best = std::min(best, brute_hit(o, dir, s.a, s.b));
    ASSERT_NEAR(idx.cast(o, dir, 30.0), best, 1e-9);
  }
}

Scan scan_of(std::vector<double> ranges) {
  Scan s;
  s.angles = beam_angles(static_cast<int>(ranges.size()), 1.0);
  s.ranges = std::move(ranges);
  return s;
}

TEST(MedianFilter, ConstantSpikeAndIdentity) {
  const Scan flat = scan_of(std::vector<double>(20, 3.0));
  EXPECT_EQ(median_filter(flat, 5).ranges, flat.ranges);

  Scan spike = flat;
  spike.ranges[7] = 25.0;
  EXPECT_EQ(median_filter(spike, 5).ranges, flat.ranges);
  // Clamped indices repeat the edge beam, so an edge outlier survives.
  spike.ranges[0] = 0.1;
  const Scan edge = median_filter(spike, 5);
  EXPECT_EQ(edge.ranges[0], 0.1);
  EXPECT_EQ(edge.ranges[1], 3.0);

  Rng rng(4);
  std::vector<double> r(50);
  for (auto& x : r) x = uniform(rng, 0.1, 30);
  EXPECT_EQ(median_filter(scan_of(r), 1).ranges, r);
  EXPECT_THROW(median_filter(flat, 4), std::invalid_argument);
}

PointSet points_of(const std::vector<Vec2>& ps) {
  PointSet out;
  for (const auto& p : ps) out.push_back({p, false});
  return out;
}

TEST(Downsample, ThresholdExample) {
  const PointSet out = downsample(points_of({{0, 0}, {0.05, 0}, {0.12, 0}}), 0.1);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].p, (Vec2{0, 0}));
  EXPECT_EQ(out[1].p, (Vec2{0.12, 0}));
}

TEST(Downsample, WideSpacingIsIdentity) {
  std::vector<Vec2> ps;
  for (int i = 0; i < 30; ++i) ps.push_back({0.2 * i, std::sin(i)});
  const PointSet out = downsample(points_of(ps), 0.1);
  ASSERT_EQ(out.size(), ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(out[i].p, ps[i]);
}

TEST(Downsample, KeptPointsExceedEpsProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec2> ps;
    Vec2 p{0, 0};
    for (int i = 0; i < 200; ++i) {
      p += Vec2{uniform(rng, -0.08, 0.12), uniform(rng, -0.08, 0.08)};
      ps.push_back(p);
    }
    const double eps = uniform(rng, 0.05, 0.3);
    const PointSet out = downsample(points_of(ps), eps);
    ASSERT_EQ(out.front().p, ps.front());
    for (std::size_t i = 1; i < out.size(); ++i) ASSERT_GT(distance(out[i].p, out[i - 1].p), eps);
    // Every dropped point lies within eps of the kept point before it.
    std::size_t k = 0;
    for (const auto& q : ps) {
      if (k + 1 < out.size() && q == out[k + 1].p) {
        ++k;
        continue;
      }
      ASSERT_LE(distance(q, out[k].p), eps);
    }
  }
}

TEST(DownsampleFromCenter, MirrorEquivariant) {
  Rng rng(6);
  std::vector<Vec2> ps;
  for (int i = 0; i < 101; ++i) ps.push_back({uniform(rng, 0.5, 5), uniform(rng, -3, 3)});
  std::vector<Vec2> mirrored;
  for (auto it = ps.rbegin(); it != ps.rend(); ++it) mirrored.push_back({it->x, -it->y});
  const PointSet a = downsample_from_center(points_of(ps), 0.3);
  const PointSet b = downsample_from_center(points_of(mirrored), 0.3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].p.x, b[a.size() - 1 - i].p.x);
    EXPECT_EQ(a[i].p.y, -b[a.size() - 1 - i].p.y);
  }
}

PointSet corridor_points(double half_width, double length, double back, double offset) {
  std::vector<double> r;
  const auto angles = beam_angles(1080, 1.5 * M_PI);
  Scan s;
  s.angles = angles;
  for (double a : angles) {
    const Vec2 dir{std::cos(a), std::sin(a)};
    double best = 30.0;
    const double yl = half_width - offset, yr = -half_width - offset;
    if (dir.y > 1e-12) best = std::min(best, yl / dir.y);
    if (dir.y < -1e-12) best = std::min(best, yr / dir.y);
    if (dir.x > 1e-12) best = std::min(best, length / dir.x);
    if (dir.x < -1e-12) best = std::min(best, -back / dir.x);
    s.ranges.push_back(best);
  }
  return scan_to_points(s);
}

TEST(CloseGap, SymmetricCorridorBridgesBehindEgo) {
  const PointSet pts = corridor_points(1.5, 20.0, 10.0, 0.0);
  const PointSet out = close_gap(pts, -4.0, 0.1);
  const auto first = std::find_if(out.begin(), out.end(), [](const ObstaclePoint& p) { return p.artificial; });
  ASSERT_NE(first, out.end());
  // Real points respect the cut; the bridge connects the rear-most kept points.
  Vec2 front{}, back{};
  bool seen = false;
  for (const auto& p : out) {
    if (p.artificial) continue;
    EXPECT_GE(p.p.x, -4.0);
    if (!seen) front = p.p;
    back = p.p;
    seen = true;
  }
  EXPECT_NEAR(front.x, back.x, 1e-9);
  EXPECT_NEAR(front.y, -back.y, 1e-9);
  EXPECT_LT(front.x, 0.0);
  for (auto it = first; it != out.end(); ++it) {
    EXPECT_TRUE(it->artificial);
    EXPECT_NEAR(it->p.x, front.x, 1e-9);
  }
  for (auto it = first; it + 1 != out.end(); ++it) EXPECT_LE(distance(it->p, (it + 1)->p), 0.1 + 1e-12);
}

TEST(CloseGap, NothingBehindCutStillCloses) {
  const PointSet pts = corridor_points(1.5, 20.0, 2.0, 0.0);
  const PointSet out = close_gap(pts, -4.0, 0.1);
  std::size_t real = 0;
  for (const auto& p : out) real += p.artificial ? 0 : 1;
  EXPECT_EQ(real, pts.size());
  EXPECT_GT(out.size(), pts.size());
}

TEST(CloseGap, PolygonEnclosesEgoOnRandomCorridors) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const PointSet pts = corridor_points(uniform(rng, 0.8, 3.0), uniform(rng, 3.0, 25.0), uniform(rng, 1.0, 12.0),
                                         uniform(rng, -0.5, 0.5));
    const PointSet out = close_gap(downsample(pts, 0.1), -4.0, 0.1);
    std::vector<Vec2> poly;
    for (const auto& p : out) poly.push_back(p.p);
    ASSERT_TRUE(point_in_polygon({0, 0}, poly)) << trial;
  }
}

TEST(CloseGap, TooFewPointsThrows) {
  EXPECT_THROW(close_gap(points_of({{-5, 0}, {-6, 1}, {1, 1}}), -4.0, 0.1), std::invalid_argument);
}

}  // namespace
}  // namespace racemop
