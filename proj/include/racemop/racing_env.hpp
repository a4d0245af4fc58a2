#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "racemop/action.hpp"
#include "racemop/lidar.hpp"
#include "racemop/planners.hpp"
#include "racemop/rng.hpp"
#include "racemop/track.hpp"
#include "racemop/vehicle.hpp"

namespace racemop {

class Config;

/// Read-only per-track data shared by every environment instance.
struct TrackAssets {
  Track track;
  RacingLine line;
  std::vector<Pose2> starts;
  std::vector<Segment> walls;
  LidarSimulator lidar;

  TrackAssets(Track t, const VehicleParams& vehicle, const LidarConfig& lidar_config,
              int n_starts = 30, double accel_limit = 4.0);
};
using TrackAssetsPtr = std::shared_ptr<const TrackAssets>;

enum class ProximityMode { Verbatim, Linear };

struct EnvConfig {
  int n_opponents = 9;
  std::vector<double> k_v_choices{0.8, 0.75, 0.7};
  int max_laps = 2;
  int max_steps = 10000;
  double dt = 0.02;
  int substeps = 2;
  double attempt_window = 10.0;     // m, opponent ahead within this opens an attempt
  double respawn_distance = 8.0;    // m ahead of the ego after a successful pass
  double pass_margin = 1.0;         // m beyond the vehicle length to count a pass
  double proximity_threshold = 0.4; // m
  ProximityMode proximity = ProximityMode::Verbatim;
  double w_progress = 0.1;
  double w_action = 0.005;
  double w_proximity = 0.2;
  double w_overtake = 0.5;
  double w_crash = 5.0;
  double opponent_lookahead = 1.0;       // m
  double opponent_lookahead_gain = 0.15; // s, extra lookahead per m/s
  bool compute_base_action = true;

  void validate() const;
  static EnvConfig from_config(const Config& cfg);
};

struct RewardTerms {
  double progress = 0.0;
  double action_change = 0.0;
  double proximity = 0.0;
  double overtake = 0.0;
  double crash = 0.0;
  double total() const { return progress + action_change + proximity + overtake + crash; }
};

/// r = w_p v_long dt - w_a |a - a_prev|_1 - w_d d_L [d_L < thr] + w_o [overtake] - w_c [crash];
/// the Linear mode replaces the proximity term by -w_d (thr - d_L) [d_L < thr].
RewardTerms compute_reward(double v_long, double dt, const Action& action, const Action& prev_action,
                           double min_range, bool overtake, bool crash, const EnvConfig& cfg);

enum class EventType { OvertakeSuccess, OvertakeCrash, EnvCrash, AttemptLapsed };
const char* to_string(EventType type);

struct Event {
  EventType type;
  int step = 0;
  double time = 0.0;  // s since episode start
  double s = 0.0;     // ego progress, unwrapped
  int opponent = -1;
};

enum class EpisodeEnd { Running, Crash, LapsDone, StepLimit };
const char* to_string(EpisodeEnd end);

struct EpisodeRecord {
  int track = 0;
  std::string track_name;
  int start = 0;
  double k_v = 0.0;
  int steps = 0;
  double time = 0.0;
  double distance = 0.0;  // m driven by the ego
  double reward = 0.0;    // undiscounted raw reward
  std::vector<Event> events;
  std::vector<double> lap_times;  // complete running-start laps
  int attempts = 0;
  EpisodeEnd end = EpisodeEnd::Running;

  int count(EventType type) const;
  nlohmann::json to_json() const;
  static EpisodeRecord from_json(const nlohmann::json& j);
};

struct StepResult {
  double reward = 0.0;
  RewardTerms terms;
  bool done = false;
  bool crashed = false;
  bool truncated = false;
  std::vector<Event> events;
};

struct Opponent {
  VehicleState state;
  double s = 0.0;  // unwrapped progress
};

struct ResetOptions {
  int track = -1;   // random when negative
  int start = -1;   // random when negative
  double k_v = -1.0;  // sampled from k_v_choices when negative
  std::optional<std::uint64_t> noise_seed;  // reseeds the LiDAR noise stream
};

/// Multi-agent racing episode: ego plus non-reactive opponents following the
/// racing line. Observation frames are 1080 median-filtered ranges scaled by
/// 1/max_range followed by v_long, v_lat, a_long, yaw_rate, slip, steer and
/// the previous action.
class RacingEnv {
 public:
  static constexpr int kProprio = 8;

  RacingEnv(std::vector<TrackAssetsPtr> tracks, const EnvConfig& config,
            const VehicleParams& vehicle, const ApfParams& apf, std::uint64_t seed);

  void reset(const ResetOptions& options = {});
  StepResult step(const Action& action);

  int frame_size() const;
  /// Writes the current observation frame (frame_size() values).
  void observation_frame(double* out) const;

  const Scan& scan() const { return scan_; }
  const Action& base_action() const { return base_action_; }
  const Action& prev_action() const { return prev_action_; }
  const VehicleState& ego() const { return ego_; }
  double ego_progress() const { return ego_s_; }
  const std::vector<Opponent>& opponents() const { return opponents_; }
  const EpisodeRecord& record() const { return record_; }
  const TrackAssets& assets() const { return *tracks_[track_]; }
  int open_attempt() const { return attempt_; }
  const EnvConfig& config() const { return config_; }
  const VehicleParams& vehicle() const { return vehicle_; }

  /// Writes one JSON line per step (poses, actions, reward terms, events).
  void set_trace(std::ostream* out) { trace_ = out; }

  /// Complete dynamic state, sufficient to continue bit-identically.
  nlohmann::json save_state() const;
  void load_state(const nlohmann::json& j);

  /// Test hook: places the ego and recomputes the observation.
  void set_ego_state(const VehicleState& s);
  /// Test hook: replaces the opponents (progress recomputed).
  void set_opponents(const std::vector<VehicleState>& states);

  /// Pure-pursuit command of an opponent on the racing line, scaled by k_v.
  Control opponent_control(const Opponent& o) const;

 private:
  OrientedBox footprint(const VehicleState& s) const;
  void observe();
  void place_opponent(Opponent& o, double s) const;
  bool ego_collides() const;
  void write_trace(const Action& action, const StepResult& r) const;

  std::vector<TrackAssetsPtr> tracks_;
  EnvConfig config_;
  VehicleParams vehicle_;
  ApfPlanner apf_;
  Rng episode_rng_;
  Rng noise_rng_;

  int track_ = 0;
  double k_v_ = 0.75;
  VehicleState ego_;
  double ego_s_ = 0.0;
  double start_s_ = 0.0;
  double lap_start_time_ = -1.0;
  std::vector<Opponent> opponents_;
  int attempt_ = -1;            // opponent index of the open attempt
  double attempt_offset_ = 0.0; // lap multiple aligning the opponent's progress
  Scan scan_;
  Action base_action_{};
  Action prev_action_{};
  EpisodeRecord record_;
  std::ostream* trace_ = nullptr;
};

}  // namespace racemop
