#include "racemop/track.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

#include "racemop/rng.hpp"

namespace racemop {

namespace {

using json = nlohmann::json;

Vec2 unit(const Vec2& v) {
  const double n = norm(v);
  return n > 0.0 ? v / n : Vec2{};
}

std::size_t segment_at(const Track& t, double s) {
  const auto it = std::upper_bound(t.arc_length.begin(), t.arc_length.end(), s);
  const std::size_t i = static_cast<std::size_t>(std::distance(t.arc_length.begin(), it));
  return i == 0 ? 0 : i - 1;
}

double segment_length(const Track& t, std::size_t i) {
  const std::size_t n = t.size();
  return (i + 1 < n ? t.arc_length[i + 1] : t.total_length) - t.arc_length[i];
}

}  // namespace

double Track::wrap(double s) const {
  double w = std::fmod(s, total_length);
  if (w < 0.0) w += total_length;
  if (w >= total_length) w = 0.0;
  return w;
}

std::vector<Segment> Track::wall_segments() const {
  std::vector<Segment> out;
  out.reserve(left_wall.size() + right_wall.size());
  for (const auto* wall : {&left_wall, &right_wall}) {
    const std::size_t n = wall->size();
    for (std::size_t i = 0; i < n; ++i) out.push_back({(*wall)[i], (*wall)[(i + 1) % n]});
  }
  return out;
}

Vec2 Track::point_at(double s) const {
  s = wrap(s);
  const std::size_t i = segment_at(*this, s);
  const double len = segment_length(*this, i);
  const double t = len > 0.0 ? (s - arc_length[i]) / len : 0.0;
  const Vec2& a = centerline[i];
  const Vec2& b = centerline[(i + 1) % size()];
  return a + (b - a) * t;
}

double Track::heading_at(double s) const {
  s = wrap(s);
  const std::size_t i = segment_at(*this, s);
  const Vec2 d = centerline[(i + 1) % size()] - centerline[i];
  return std::atan2(d.y, d.x);
}

double Track::half_width_at(double s) const {
  s = wrap(s);
  const std::size_t i = segment_at(*this, s);
  const double len = segment_length(*this, i);
  const double t = len > 0.0 ? (s - arc_length[i]) / len : 0.0;
  return half_width[i] + (half_width[(i + 1) % size()] - half_width[i]) * t;
}

Track make_track(std::string name, std::vector<Vec2> centerline, std::vector<double> half_width,
                 double vehicle_width) {
  if (centerline.size() != half_width.size()) {
    throw TrackInvariantError("sizes", "centerline has " + std::to_string(centerline.size()) +
                                           " points but half_width has " +
                                           std::to_string(half_width.size()));
  }
  if (centerline.size() >= 2 && distance(centerline.front(), centerline.back()) < 1e-9) {
    centerline.pop_back();
    half_width.pop_back();
  }
  const std::size_t n = centerline.size();
  if (n < 3) throw TrackInvariantError("closed_loop", "need at least 3 distinct points");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(centerline[i].x) || !std::isfinite(centerline[i].y) ||
        !std::isfinite(half_width[i])) {
      throw TrackInvariantError("finite", "non-finite value at point " + std::to_string(i));
    }
    if (distance(centerline[i], centerline[(i + 1) % n]) < 1e-9) {
      throw TrackInvariantError("closed_loop", "repeated point at index " + std::to_string(i));
    }
  }
  const double min_hw = 1.1 * vehicle_width;
  for (std::size_t i = 0; i < n; ++i) {
    if (half_width[i] < min_hw) {
      throw TrackInvariantError("min_half_width", "half_width[" + std::to_string(i) +
                                                      "] = " + std::to_string(half_width[i]) +
                                                      " < " + std::to_string(min_hw));
    }
  }

  Track t;
  t.name = std::move(name);
  t.centerline = std::move(centerline);
  t.half_width = std::move(half_width);
  t.arc_length.resize(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    t.arc_length[i] = s;
    s += distance(t.centerline[i], t.centerline[(i + 1) % n]);
  }
  t.total_length = s;

  t.left_wall.resize(n);
  t.right_wall.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& prev = t.centerline[(i + n - 1) % n];
    const Vec2& cur = t.centerline[i];
    const Vec2& next = t.centerline[(i + 1) % n];
    Vec2 tangent = unit(unit(cur - prev) + unit(next - cur));
    if (norm(tangent) == 0.0) tangent = unit(next - cur);
    const Vec2 normal{-tangent.y, tangent.x};
    t.left_wall[i] = cur + normal * t.half_width[i];
    t.right_wall[i] = cur - normal * t.half_width[i];
  }

  if (closed_polyline_self_intersects(t.centerline)) {
    throw TrackInvariantError("centerline_self_intersection", "centerline crosses itself");
  }
  if (closed_polyline_self_intersects(t.left_wall)) {
    throw TrackInvariantError("wall_self_intersection", "left wall crosses itself");
  }
  if (closed_polyline_self_intersects(t.right_wall)) {
    throw TrackInvariantError("wall_self_intersection", "right wall crosses itself");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Segment a{t.left_wall[i], t.left_wall[(i + 1) % n]};
    for (std::size_t j = 0; j < n; ++j) {
      const Segment b{t.right_wall[j], t.right_wall[(j + 1) % n]};
      if (std::max(a.a.x, a.b.x) < std::min(b.a.x, b.b.x) ||
          std::max(b.a.x, b.b.x) < std::min(a.a.x, a.b.x) ||
          std::max(a.a.y, a.b.y) < std::min(b.a.y, b.b.y) ||
          std::max(b.a.y, b.b.y) < std::min(a.a.y, a.b.y)) {
        continue;
      }
      if (segments_intersect(a, b)) {
        throw TrackInvariantError("wall_self_intersection", "left and right walls intersect");
      }
    }
  }
  return t;
}

Track load_track(const std::filesystem::path& path, double vehicle_width) {
  std::ifstream in(path);
  if (!in) throw TrackParseError("cannot open track file '" + path.string() + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw TrackParseError("track file '" + path.string() + "': " + e.what());
  }
  std::vector<Vec2> centerline;
  std::vector<double> half_width;
  std::string name;
  try {
    name = doc.value("name", path.stem().string());
    for (const auto& p : doc.at("centerline")) {
      if (p.size() != 2) throw TrackParseError("centerline entries must be [x, y] pairs");
      centerline.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    half_width = doc.at("half_width").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw TrackParseError("track file '" + path.string() + "': " + e.what());
  }
  return make_track(std::move(name), std::move(centerline), std::move(half_width), vehicle_width);
}

void save_track(const Track& track, const std::filesystem::path& path) {
  json doc;
  doc["name"] = track.name;
  doc["length"] = track.total_length;
  json pts = json::array();
  for (const auto& p : track.centerline) pts.push_back({p.x, p.y});
  doc["centerline"] = std::move(pts);
  doc["half_width"] = track.half_width;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write track file '" + path.string() + "'");
  out << doc.dump(1) << "\n";
}

Track generate_track(std::uint64_t seed, const TrackGenParams& params, double vehicle_width) {
  if (params.n_curves < 1 || params.width_min <= 0.0 || params.width_max < params.width_min ||
      params.length_scale <= 0.0 || params.spacing <= 0.0 || params.max_attempts < 1) {
    throw std::invalid_argument("generate_track: invalid parameters");
  }
  Rng rng(derive_seed(seed, "track-generator"));
  constexpr int kDense = 4096;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  std::string last_error;
  for (int attempt = 0; attempt < params.max_attempts; ++attempt) {
    std::vector<double> amp(params.n_curves);
    std::vector<double> phase(params.n_curves);
    for (int k = 0; k < params.n_curves; ++k) {
      const double order = k + 2.0;
      amp[k] = uniform(rng, 0.0, 1.6) / (order * order);
      phase[k] = uniform(rng, 0.0, kTwoPi);
    }
    const double width_phase = uniform(rng, 0.0, kTwoPi);
    const double width_mid = 0.5 * (params.width_min + params.width_max);
    const double width_amp = 0.5 * (params.width_max - params.width_min);

    std::vector<Vec2> dense(kDense + 1);
    std::vector<double> dense_hw(kDense + 1);
    std::vector<double> dense_s(kDense + 1, 0.0);
    for (int i = 0; i <= kDense; ++i) {
      const double th = kTwoPi * i / kDense;
      double r = 1.0;
      for (int k = 0; k < params.n_curves; ++k) r += amp[k] * std::sin((k + 2.0) * th + phase[k]);
      r *= params.length_scale;
      dense[i] = {r * std::cos(th), r * std::sin(th)};
      dense_hw[i] = width_mid + width_amp * std::sin(th + width_phase);
      if (i > 0) dense_s[i] = dense_s[i - 1] + distance(dense[i], dense[i - 1]);
    }
    const double length = dense_s.back();
    const int n = std::max(16, static_cast<int>(std::lround(length / params.spacing)));
    std::vector<Vec2> pts(n);
    std::vector<double> hw(n);
    int j = 0;
    for (int i = 0; i < n; ++i) {
      const double s = length * i / n;
      while (j + 1 < kDense && dense_s[j + 1] < s) ++j;
      const double seg = dense_s[j + 1] - dense_s[j];
      const double t = seg > 0.0 ? (s - dense_s[j]) / seg : 0.0;
      pts[i] = dense[j] + (dense[j + 1] - dense[j]) * t;
      hw[i] = dense_hw[j] + (dense_hw[j + 1] - dense_hw[j]) * t;
    }

    // Reject loops whose tightest bend cannot hold the track width.
    bool tight = false;
    for (int i = 0; i < n && !tight; ++i) {
      const Vec2& a = pts[(i + n - 1) % n];
      const Vec2& b = pts[i];
      const Vec2& c = pts[(i + 1) % n];
      const double denom = distance(a, b) * distance(b, c) * distance(a, c);
      const double kappa = denom > 0.0 ? 2.0 * std::abs(cross(b - a, c - b)) / denom : 0.0;
      if (kappa * 2.5 * hw[i] > 1.0) tight = true;
    }
    if (tight) {
      last_error = "curvature too tight for the track width";
      continue;
    }
    try {
      return make_track("generated-" + std::to_string(seed), std::move(pts), std::move(hw),
                        vehicle_width);
    } catch (const TrackInvariantError& e) {
      last_error = e.what();
    }
  }
  throw std::runtime_error("generate_track: no valid track after " +
                           std::to_string(params.max_attempts) + " attempts (" + last_error + ")");
}

double RacingLine::speed_at(double s) const {
  double w = std::fmod(s, total_length);
  if (w < 0.0) w += total_length;
  const auto it = std::upper_bound(arc_length.begin(), arc_length.end(), w);
  const std::size_t i =
      it == arc_length.begin() ? 0 : static_cast<std::size_t>(it - arc_length.begin()) - 1;
  const std::size_t next = (i + 1) % points.size();
  const double end = i + 1 < points.size() ? arc_length[i + 1] : total_length;
  const double len = end - arc_length[i];
  const double t = len > 0.0 ? (w - arc_length[i]) / len : 0.0;
  return velocity[i] + (velocity[next] - velocity[i]) * t;
}

std::vector<double> curvature_speed_limit(const std::vector<double>& curvature, double mu,
                                          double v_max, double g) {
  std::vector<double> v(curvature.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double k = std::abs(curvature[i]);
    v[i] = k > 0.0 ? std::min(v_max, std::sqrt(mu * g / k)) : v_max;
  }
  return v;
}

RacingLine racing_line(const Track& track, double mu, double v_max, double accel_limit,
                       double g) {
  const std::size_t n = track.size();
  RacingLine line;
  line.points = track.centerline;
  line.arc_length = track.arc_length;
  line.total_length = track.total_length;
  line.curvature.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = track.centerline[(i + n - 1) % n];
    const Vec2& b = track.centerline[i];
    const Vec2& c = track.centerline[(i + 1) % n];
    const double denom = distance(a, b) * distance(b, c) * distance(a, c);
    line.curvature[i] = denom > 0.0 ? 2.0 * cross(b - a, c - b) / denom : 0.0;
  }
  line.velocity = curvature_speed_limit(line.curvature, mu, v_max, g);

  std::vector<double> ds(n);
  for (std::size_t i = 0; i < n; ++i) ds[i] = distance(track.centerline[i], track.centerline[(i + 1) % n]);
  // Two laps each way settle the wrap-around.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t j = (k + 1) % n;
      line.velocity[j] =
          std::min(line.velocity[j], std::sqrt(line.velocity[k] * line.velocity[k] + 2.0 * accel_limit * ds[k]));
    }
  }
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t k = n; k-- > 0;) {
      const std::size_t j = (k + 1) % n;
      line.velocity[k] =
          std::min(line.velocity[k], std::sqrt(line.velocity[j] * line.velocity[j] + 2.0 * accel_limit * ds[k]));
    }
  }
  return line;
}

namespace {

struct Projection {
  double s = 0.0;
  double dist = std::numeric_limits<double>::infinity();
  std::size_t segment = 0;
};

void project_onto(const Track& track, const Vec2& pos, std::size_t i, Projection& best) {
  const std::size_t n = track.size();
  double t = 0.0;
  const double d = point_segment_distance(pos, {track.centerline[i], track.centerline[(i + 1) % n]}, &t);
  if (d < best.dist) {
    best.dist = d;
    best.segment = i;
    best.s = track.arc_length[i] + t * segment_length(track, i);
  }
}

Projection project_global(const Track& track, const Vec2& pos) {
  Projection best;
  for (std::size_t i = 0; i < track.size(); ++i) project_onto(track, pos, i, best);
  return best;
}

void check_on_track(const Track& track, const Vec2& pos, const Projection& p) {
  const double limit = 4.0 * track.half_width[p.segment];
  if (p.dist > limit) {
    throw TrackProgressError("position (" + std::to_string(pos.x) + ", " + std::to_string(pos.y) +
                             ") is " + std::to_string(p.dist) + " m from the centerline");
  }
}

}  // namespace

double track_progress(const Track& track, const Vec2& pos) {
  const Projection p = project_global(track, pos);
  check_on_track(track, pos, p);
  return track.wrap(p.s);
}

double track_progress(const Track& track, const Vec2& pos, double previous_s) {
  constexpr double kWindow = 15.0;  // m searched around the previous progress
  const std::size_t n = track.size();
  const double wrapped_prev = track.wrap(previous_s);
  Projection best;
  const std::size_t start = segment_at(track, track.wrap(wrapped_prev - kWindow));
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = (start + k) % n;
    project_onto(track, pos, i, best);
    double covered = track.arc_length[i] - track.arc_length[start];
    if (covered < 0.0) covered += track.total_length;
    if (covered > 2.0 * kWindow) break;
  }
  if (best.dist > 1.5 * track.half_width[best.segment]) best = project_global(track, pos);
  check_on_track(track, pos, best);
  const double raw = track.wrap(best.s);
  const double L = track.total_length;
  const double laps = std::round((previous_s - raw) / L);
  return raw + laps * L;
}

std::vector<Pose2> start_positions(const Track& track, int count) {
  std::vector<Pose2> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) {
    const double s = track.total_length * k / count;
    const Vec2 p = track.point_at(s);
    out.push_back({p.x, p.y, track.heading_at(s)});
  }
  return out;
}

}  // namespace racemop
