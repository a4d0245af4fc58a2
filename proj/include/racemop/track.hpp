#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "racemop/geometry.hpp"

namespace racemop {

class TrackParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a track violates a geometric invariant; `check()` names it.
class TrackInvariantError : public std::runtime_error {
 public:
  TrackInvariantError(std::string check, const std::string& detail)
      : std::runtime_error("track invariant '" + check + "' violated: " + detail),
        check_(std::move(check)) {}
  const std::string& check() const { return check_; }

 private:
  std::string check_;
};

class TrackProgressError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Closed-loop racetrack. The centerline is stored without repeating the
/// first point; segment i runs from point i to point (i + 1) % n.
struct Track {
  std::string name;
  std::vector<Vec2> centerline;
  std::vector<double> half_width;
  std::vector<Vec2> left_wall;   // offset along +normal (left of travel)
  std::vector<Vec2> right_wall;  // offset along -normal
  std::vector<double> arc_length;  // arc_length[i] = distance from point 0 to point i
  double total_length = 0.0;

  std::size_t size() const { return centerline.size(); }
  /// All wall edges of both closed polylines.
  std::vector<Segment> wall_segments() const;
  /// Point and heading on the centerline at arc length s (wrapped).
  Vec2 point_at(double s) const;
  double heading_at(double s) const;
  /// Interpolated half width at arc length s.
  double half_width_at(double s) const;
  double wrap(double s) const;
};

/// Builds a Track from raw data, derives walls and the arc-length table and
/// checks every invariant. A repeated closing point is dropped.
Track make_track(std::string name, std::vector<Vec2> centerline, std::vector<double> half_width,
                 double vehicle_width = 0.31);

/// JSON: {"name", "length", "centerline": [[x, y], ...], "half_width": [...]}
Track load_track(const std::filesystem::path& path, double vehicle_width = 0.31);
void save_track(const Track& track, const std::filesystem::path& path);

struct TrackGenParams {
  int n_curves = 4;           // harmonics of the radial perturbation
  double width_min = 1.0;     // m, half width range
  double width_max = 1.4;
  double length_scale = 25.0; // m, mean radius of the loop
  double spacing = 0.5;       // m, centerline resampling
  int max_attempts = 200;
};

/// Star-shaped closed loop r(theta) = R (1 + sum a_k sin(k theta + phi_k)),
/// resampled at roughly uniform spacing. Deterministic in the seed.
Track generate_track(std::uint64_t seed, const TrackGenParams& params,
                     double vehicle_width = 0.31);

struct RacingLine {
  std::vector<Vec2> points;
  std::vector<double> velocity;    // m/s, the profile {v_w0, v_w1, ...}
  std::vector<double> arc_length;  // m
  std::vector<double> curvature;   // 1/m, signed
  double total_length = 0.0;

  /// Linear interpolation of the velocity profile at arc length s (wrapped).
  double speed_at(double s) const;
};

/// Centerline racing line with a friction-limited profile
/// v = min(v_max, sqrt(mu g / |kappa|)) and forward/backward acceleration passes.
RacingLine racing_line(const Track& track, double mu = 0.8, double v_max = 8.0,
                       double accel_limit = 4.0, double g = 9.81);

/// Pointwise friction limit before the acceleration passes.
std::vector<double> curvature_speed_limit(const std::vector<double>& curvature, double mu,
                                          double v_max, double g = 9.81);

/// Arc length of the projection onto the nearest centerline segment, in
/// [0, total_length). Throws TrackProgressError when `pos` is farther than
/// two track widths from the centerline.
double track_progress(const Track& track, const Vec2& pos);

/// Unwrapped progress: the representative of track_progress(pos) modulo
/// total_length closest to `previous_s`. Searches near `previous_s` first.
double track_progress(const Track& track, const Vec2& pos, double previous_s);

/// `count` poses equidistant in arc length, starting at s = 0, facing along
/// the track.
std::vector<Pose2> start_positions(const Track& track, int count = 30);

}  // namespace racemop
