#pragma once

#include <optional>
#include <string>
#include <vector>

#include "racemop/racing_env.hpp"

namespace racemop {

struct RaceMetrics {
  std::string name;
  int episodes = 0;
  int laps = 0;
  std::optional<double> lap_time;    // I_T, s, median running-start lap
  std::optional<double> crash_rate;  // I_C, %, absent without any closed attempt
  double env_crashes_per_km = 0.0;   // I_E
  int successes = 0;
  int overtake_crashes = 0;
  int env_crashes = 0;
  int lapsed = 0;
  int attempts = 0;
  double distance_km = 0.0;
};

double median(std::vector<double> values);

/// I_T is the median over all completed running-start laps; I_C pools
/// crashes / (successes + crashes) during attempts; I_E is crashes outside
/// attempts per km driven.
RaceMetrics compute_metrics(const std::vector<EpisodeRecord>& records, const std::string& name = "");

/// The "All" row: mean of the per-track I_T and I_E, I_C pooled over tracks.
RaceMetrics aggregate_metrics(const std::vector<RaceMetrics>& per_track, const std::string& name = "All");

/// Relative change (b - a) / a in percent; absent if either side is absent
/// or a is zero.
std::optional<double> relative_delta(std::optional<double> a, std::optional<double> b);

}  // namespace racemop
