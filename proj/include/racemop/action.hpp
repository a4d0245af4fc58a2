#pragma once

#include <algorithm>
#include <array>

#include "racemop/vehicle.hpp"

namespace racemop {

/// Normalized action (speed, steer) in [-1, 1]^2.
using Action = std::array<double, 2>;

/// Speed maps affinely [0, v_max] -> [-1, 1]; steer maps [-steer_max, steer_max] -> [-1, 1].
inline Action normalize_action(double target_v, double target_steer, const VehicleParams& p) {
  return {std::clamp(2.0 * target_v / p.v_max - 1.0, -1.0, 1.0),
          std::clamp(target_steer / p.steer_max, -1.0, 1.0)};
}

inline Control denormalize_action(const Action& a, const VehicleParams& p) {
  const double v = std::clamp(a[0], -1.0, 1.0);
  const double s = std::clamp(a[1], -1.0, 1.0);
  return {0.5 * (v + 1.0) * p.v_max, s * p.steer_max};
}

}  // namespace racemop
