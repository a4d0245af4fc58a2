#include "racemop/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace racemop {

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

RaceMetrics compute_metrics(const std::vector<EpisodeRecord>& records, const std::string& name) {
  RaceMetrics m;
  m.name = name;
  m.episodes = static_cast<int>(records.size());
  std::vector<double> laps;
  double distance = 0.0;
  for (const auto& r : records) {
    laps.insert(laps.end(), r.lap_times.begin(), r.lap_times.end());
    m.successes += r.count(EventType::OvertakeSuccess);
    m.overtake_crashes += r.count(EventType::OvertakeCrash);
    m.env_crashes += r.count(EventType::EnvCrash);
    m.lapsed += r.count(EventType::AttemptLapsed);
    m.attempts += r.attempts;
    distance += r.distance;
  }
  m.laps = static_cast<int>(laps.size());
  if (!laps.empty()) m.lap_time = median(laps);
  const int closed = m.successes + m.overtake_crashes;
  if (closed > 0) m.crash_rate = 100.0 * m.overtake_crashes / closed;
  m.distance_km = distance / 1000.0;
  if (m.distance_km > 0.0) m.env_crashes_per_km = m.env_crashes / m.distance_km;
  return m;
}

RaceMetrics aggregate_metrics(const std::vector<RaceMetrics>& per_track, const std::string& name) {
  RaceMetrics m;
  m.name = name;
  double lap_sum = 0.0;
  int lap_tracks = 0;
  double env_sum = 0.0;
  for (const auto& t : per_track) {
    m.episodes += t.episodes;
    m.laps += t.laps;
    m.successes += t.successes;
    m.overtake_crashes += t.overtake_crashes;
    m.env_crashes += t.env_crashes;
    m.lapsed += t.lapsed;
    m.attempts += t.attempts;
    m.distance_km += t.distance_km;
    if (t.lap_time) {
      lap_sum += *t.lap_time;
      ++lap_tracks;
    }
    env_sum += t.env_crashes_per_km;
  }
  if (lap_tracks > 0) m.lap_time = lap_sum / lap_tracks;
  const int closed = m.successes + m.overtake_crashes;
  if (closed > 0) m.crash_rate = 100.0 * m.overtake_crashes / closed;
  if (!per_track.empty()) m.env_crashes_per_km = env_sum / static_cast<double>(per_track.size());
  return m;
}

std::optional<double> relative_delta(std::optional<double> a, std::optional<double> b) {
  if (!a || !b || *a == 0.0) {
    if (a && b && *a == 0.0 && *b == 0.0) return 0.0;
    return std::nullopt;
  }
  return 100.0 * (*b - *a) / *a;
}

}  // namespace racemop
