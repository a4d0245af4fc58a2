#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "racemop/track.hpp"

namespace racemop::testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(RACEMOP_DATA_DIR) / "tracks" / (name + ".json");
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Straight loop: two long parallel straights joined by semicircles.
inline Track stadium(double straight = 40.0, double radius = 8.0, double half_width = 1.5, double spacing = 0.25) {
  std::vector<Vec2> pts;
  const int n_straight = static_cast<int>(straight / spacing);
  const int n_arc = static_cast<int>(M_PI * radius / spacing);
  for (int i = 0; i < n_straight; ++i) pts.push_back({-straight / 2 + i * spacing, -radius});
  for (int i = 0; i < n_arc; ++i) {
    const double a = -M_PI / 2 + M_PI * i / n_arc;
    pts.push_back({straight / 2 + radius * std::cos(a), radius * std::sin(a)});
  }
  for (int i = 0; i < n_straight; ++i) pts.push_back({straight / 2 - i * spacing, radius});
  for (int i = 0; i < n_arc; ++i) {
    const double a = M_PI / 2 + M_PI * i / n_arc;
    pts.push_back({-straight / 2 + radius * std::cos(a), radius * std::sin(a)});
  }
  return make_track("stadium", pts, std::vector<double>(pts.size(), half_width));
}

}  // namespace racemop::testing
