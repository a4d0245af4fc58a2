#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "racemop/track.hpp"
#include "test_util.hpp"

namespace racemop {
namespace {

using testing::fixture;
using testing::stadium;

double documented_length(const std::string& name) {
  std::ifstream in(fixture(name));
  return nlohmann::json::parse(in).at("length").get<double>();
}

TEST(LoadTrack, FixtureLengthsMatchDocumented) {
  for (const std::string name : {"oval", "scurve"}) {
    const Track t = load_track(fixture(name));
    EXPECT_NEAR(t.total_length, documented_length(name), 1e-6) << name;
    EXPECT_EQ(t.left_wall.size(), t.size());
  }
}

TEST(LoadTrack, SaveLoadRoundTrip) {
  const Track a = load_track(fixture("scurve"));
  const auto path = std::filesystem::temp_directory_path() / "racemop_roundtrip.json";
  save_track(a, path);
  const Track b = load_track(path);
  std::filesystem::remove(path);
  EXPECT_EQ(a.name, b.name);
  EXPECT_EQ(a.centerline, b.centerline);
  EXPECT_EQ(a.half_width, b.half_width);
  EXPECT_EQ(a.left_wall, b.left_wall);
  EXPECT_EQ(a.right_wall, b.right_wall);
  EXPECT_EQ(a.arc_length, b.arc_length);
  EXPECT_EQ(a.total_length, b.total_length);
}

TEST(LoadTrack, ParseErrors) {
  const auto path = std::filesystem::temp_directory_path() / "racemop_bad.json";
  {
    std::ofstream(path) << "{\"centerline\": [[0, 0], [1, 0]";
  }
  EXPECT_THROW(load_track(path), TrackParseError);
  {
    std::ofstream(path) << "{\"name\": \"x\", \"half_width\": [1, 1, 1]}";
  }
  EXPECT_THROW(load_track(path), TrackParseError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_track("/nonexistent/track.json"), TrackParseError);
}

TEST(MakeTrack, SelfIntersectingWallsRejected) {
  // Tight square: the inner offset of a 1.5 m half width folds over itself.
  std::vector<Vec2> pts;
  for (int i = 0; i < 8; ++i) pts.push_back({0.25 * i, 0.0});
  for (int i = 0; i < 8; ++i) pts.push_back({2.0, 0.25 * i});
  for (int i = 0; i < 8; ++i) pts.push_back({2.0 - 0.25 * i, 2.0});
  for (int i = 0; i < 8; ++i) pts.push_back({0.0, 2.0 - 0.25 * i});
  try {
    make_track("bad", pts, std::vector<double>(pts.size(), 1.5));
    FAIL() << "expected TrackInvariantError";
  } catch (const TrackInvariantError& e) {
    EXPECT_EQ(e.check(), "wall_self_intersection");
  }
}

TEST(MakeTrack, NarrowTrackRejected) {
  try {
    stadium(40.0, 8.0, 0.3);
    FAIL() << "expected TrackInvariantError";
  } catch (const TrackInvariantError& e) {
    EXPECT_EQ(e.check(), "min_half_width");
  }
}

TEST(MakeTrack, WallOffsetEqualsHalfWidthOnStraights) {
  const Track t = stadium(40.0, 8.0, 1.5, 0.25);
  const std::size_t n = t.size();
  // Interior of the bottom straight, away from the arc junctions.
  for (std::size_t i = 10; i < 150; ++i) {
    const Segment seg{t.centerline[i], t.centerline[(i + 1) % n]};
    EXPECT_NEAR(point_segment_distance(t.left_wall[i], seg), 1.5, 1e-9);
    EXPECT_NEAR(point_segment_distance(t.right_wall[i], seg), 1.5, 1e-9);
  }
  // Arcs: within discretization error.
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(distance(t.left_wall[i], t.centerline[i]), t.half_width[i], 1e-9);
  }
}

TEST(GenerateTrack, DeterministicAndSeedSensitive) {
  const TrackGenParams p;
  const Track a = generate_track(3, p);
  const Track b = generate_track(3, p);
  const Track c = generate_track(4, p);
  EXPECT_EQ(a.centerline, b.centerline);
  EXPECT_EQ(a.half_width, b.half_width);
  EXPECT_NE(a.centerline, c.centerline);
}

TEST(GenerateTrack, HundredSeedsSatisfyInvariants) {
  const TrackGenParams p;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Track t;
    ASSERT_NO_THROW(t = generate_track(seed, p)) << seed;
    // Rebuilding re-runs every invariant check.
    ASSERT_NO_THROW(make_track(t.name, t.centerline, t.half_width)) << seed;
    for (double w : t.half_width) ASSERT_GE(w, 1.1 * 0.31);
  }
}

TEST(RacingLine, StraightRunsAtVMax) {
  const Track t = stadium(40.0, 8.0, 1.5, 0.25);
  const RacingLine line = racing_line(t);
  // Middle of the bottom straight.
  EXPECT_DOUBLE_EQ(line.velocity[80], 8.0);
  EXPECT_DOUBLE_EQ(line.speed_at(t.arc_length[80]), 8.0);
}

TEST(RacingLine, PointwiseCurvatureLimit) {
  const auto v = curvature_speed_limit({0.5, -0.5, 0.0, 1e-6}, 0.8, 8.0);
  EXPECT_NEAR(v[0], std::sqrt(0.8 * 9.81 / 0.5), 1e-12);
  EXPECT_NEAR(v[0], 3.962, 5e-4);
  EXPECT_DOUBLE_EQ(v[1], v[0]);
  EXPECT_DOUBLE_EQ(v[2], 8.0);
  EXPECT_DOUBLE_EQ(v[3], 8.0);
}

TEST(RacingLine, SmoothedProfileBoundedAndContinuous) {
  const double accel = 4.0;
  for (const std::string name : {"oval", "scurve"}) {
    const Track t = load_track(fixture(name));
    const RacingLine line = racing_line(t, 0.8, 8.0, accel);
    const auto raw = curvature_speed_limit(line.curvature, 0.8, 8.0);
    const std::size_t n = line.velocity.size();
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_LE(line.velocity[i], raw[i] + 1e-12);
      ASSERT_LE(line.velocity[i], 8.0);
      const std::size_t j = (i + 1) % n;
      const double ds = (j == 0 ? line.total_length : line.arc_length[j]) - line.arc_length[i];
      const double v2a = line.velocity[i] * line.velocity[i];
      const double v2b = line.velocity[j] * line.velocity[j];
      ASSERT_LE(std::abs(v2b - v2a), 2.0 * accel * ds + 1e-9) << name << " at " << i;
    }
  }
}

TEST(TrackProgress, OnLineQuery) {
  const Track t = load_track(fixture("oval"));
  for (std::size_t k = 0; k < t.size(); k += 7) {
    EXPECT_NEAR(track_progress(t, t.centerline[k]), t.arc_length[k], 1e-9);
  }
}

TEST(TrackProgress, LateralOffsetKeepsProgress) {
  const Track straight = stadium(40.0, 8.0, 1.5, 0.25);
  for (std::size_t k = 10; k < 150; k += 7) {
    const Vec2 mid = (straight.left_wall[k] + straight.centerline[k]) * 0.5;
    EXPECT_NEAR(track_progress(straight, mid), straight.arc_length[k], 1e-9);
  }
  // On curves the vertex normal is not perpendicular to either adjacent
  // segment, so projection moves by a fraction of the point spacing.
  const Track t = load_track(fixture("oval"));
  for (std::size_t k = 1; k < t.size(); k += 7) {
    const Vec2 mid = (t.left_wall[k] + t.centerline[k]) * 0.5;
    EXPECT_NEAR(track_progress(t, mid), t.arc_length[k], 0.05);
  }
}

TEST(TrackProgress, FarPointThrows) {
  const Track t = load_track(fixture("oval"));
  EXPECT_THROW(track_progress(t, {1e4, 1e4}), TrackProgressError);
}

TEST(TrackProgress, FullLapIntegratesToLengthAndIsMonotone) {
  const Track t = load_track(fixture("scurve"));
  const double step = 8.0 * 0.02;  // 50 Hz at top speed
  double s = track_progress(t, t.point_at(3.0));
  const double s0 = s;
  for (double q = 3.0 + step; q <= 3.0 + t.total_length + 1e-9; q += step) {
    const double h = t.heading_at(q);
    const double off = 0.4 * std::sin(q / 3.0);
    const Vec2 p = t.point_at(q) + Vec2{-std::sin(h), std::cos(h)} * off;
    const double next = track_progress(t, p, s);
    ASSERT_GE(next, s);
    s = next;
  }
  // The sweep ends slightly before the start point; account for it.
  const double tail = std::fmod(t.total_length, step);
  EXPECT_NEAR(s - s0 + tail, t.total_length, 0.1);
}

TEST(StartPositions, ThirtyEquidistant) {
  const Track t = load_track(fixture("oval"));
  const auto starts = start_positions(t, 30);
  ASSERT_EQ(starts.size(), 30u);
  for (int i = 0; i < 30; ++i) {
    const Vec2 expect = t.point_at(t.total_length * i / 30.0);
    EXPECT_NEAR(starts[i].x, expect.x, 1e-9);
    EXPECT_NEAR(starts[i].y, expect.y, 1e-9);
    EXPECT_NEAR(starts[i].yaw, t.heading_at(t.total_length * i / 30.0), 1e-9);
  }
}

}  // namespace
}  // namespace racemop
