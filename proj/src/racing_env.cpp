#include "racemop/racing_env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "racemop/config.hpp"

namespace racemop {

using nlohmann::json;

namespace {

json state_to_json(const VehicleState& s) {
  return json::array({s.x, s.y, s.yaw, s.v_long, s.v_lat, s.yaw_rate, s.slip, s.steer, s.a_long});
}

VehicleState state_from_json(const json& j) {
  VehicleState s;
  s.x = j.at(0);
  s.y = j.at(1);
  s.yaw = j.at(2);
  s.v_long = j.at(3);
  s.v_lat = j.at(4);
  s.yaw_rate = j.at(5);
  s.slip = j.at(6);
  s.steer = j.at(7);
  s.a_long = j.at(8);
  return s;
}

EventType event_from_string(const std::string& s) {
  for (const auto t : {EventType::OvertakeSuccess, EventType::OvertakeCrash, EventType::EnvCrash,
                       EventType::AttemptLapsed}) {
    if (s == to_string(t)) return t;
  }
  throw std::invalid_argument("unknown event type '" + s + "'");
}

EpisodeEnd end_from_string(const std::string& s) {
  for (const auto e : {EpisodeEnd::Running, EpisodeEnd::Crash, EpisodeEnd::LapsDone, EpisodeEnd::StepLimit}) {
    if (s == to_string(e)) return e;
  }
  throw std::invalid_argument("unknown episode end '" + s + "'");
}

}  // namespace

TrackAssets::TrackAssets(Track t, const VehicleParams& vehicle, const LidarConfig& lidar_config,
                         int n_starts, double accel_limit)
    : track(std::move(t)),
      line(racing_line(track, vehicle.mu, vehicle.v_max, accel_limit, vehicle.g)),
      starts(start_positions(track, n_starts)),
      walls(track.wall_segments()),
      lidar(lidar_config, walls) {}

void EnvConfig::validate() const {
  if (n_opponents < 0 || k_v_choices.empty() || max_laps < 1 || max_steps < 1 || !(dt > 0.0) ||
      substeps < 1 || !(attempt_window > 0.0) || !(respawn_distance > 0.0) || pass_margin < 0.0 ||
      !(proximity_threshold > 0.0) || !(opponent_lookahead > 0.0) || opponent_lookahead_gain < 0.0) {
    throw ConfigError("invalid [env] parameters");
  }
  for (const double k : k_v_choices) {
    if (!(k > 0.0)) throw ConfigError("env.k_v_choices must be positive");
  }
}

EnvConfig EnvConfig::from_config(const Config& cfg) {
  EnvConfig c;
  c.n_opponents = static_cast<int>(cfg.get_int("env.n_opponents", c.n_opponents));
  c.k_v_choices = cfg.get_doubles("env.k_v_choices", c.k_v_choices);
  c.max_laps = static_cast<int>(cfg.get_int("env.max_laps", c.max_laps));
  c.max_steps = static_cast<int>(cfg.get_int("env.max_steps", c.max_steps));
  c.dt = cfg.get_double("env.dt", c.dt);
  c.substeps = static_cast<int>(cfg.get_int("env.substeps", c.substeps));
  c.attempt_window = cfg.get_double("env.attempt_window", c.attempt_window);
  c.respawn_distance = cfg.get_double("env.respawn_distance", c.respawn_distance);
  c.pass_margin = cfg.get_double("env.pass_margin", c.pass_margin);
  c.proximity_threshold = cfg.get_double("env.proximity_threshold", c.proximity_threshold);
  const std::string mode = cfg.get_string("env.proximity", "verbatim");
  if (mode == "verbatim") {
    c.proximity = ProximityMode::Verbatim;
  } else if (mode == "linear") {
    c.proximity = ProximityMode::Linear;
  } else {
    throw ConfigError("env.proximity must be 'verbatim' or 'linear', got '" + mode + "'");
  }
  c.w_progress = cfg.get_double("env.w_progress", c.w_progress);
  c.w_action = cfg.get_double("env.w_action", c.w_action);
  c.w_proximity = cfg.get_double("env.w_proximity", c.w_proximity);
  c.w_overtake = cfg.get_double("env.w_overtake", c.w_overtake);
  c.w_crash = cfg.get_double("env.w_crash", c.w_crash);
  c.opponent_lookahead = cfg.get_double("env.opponent_lookahead", c.opponent_lookahead);
  c.opponent_lookahead_gain = cfg.get_double("env.opponent_lookahead_gain", c.opponent_lookahead_gain);
  c.validate();
  return c;
}

RewardTerms compute_reward(double v_long, double dt, const Action& action, const Action& prev_action,
                           double min_range, bool overtake, bool crash, const EnvConfig& cfg) {
  RewardTerms r;
  r.progress = cfg.w_progress * (v_long * dt);
  r.action_change = -cfg.w_action * (std::abs(action[0] - prev_action[0]) + std::abs(action[1] - prev_action[1]));
  if (min_range < cfg.proximity_threshold) {
    r.proximity = cfg.proximity == ProximityMode::Verbatim
                      ? -cfg.w_proximity * min_range
                      : -cfg.w_proximity * (cfg.proximity_threshold - min_range);
  }
  if (overtake) r.overtake = cfg.w_overtake;
  if (crash) r.crash = -cfg.w_crash;
  return r;
}

const char* to_string(EventType type) {
  switch (type) {
    case EventType::OvertakeSuccess: return "overtake_success";
    case EventType::OvertakeCrash: return "overtake_crash";
    case EventType::EnvCrash: return "env_crash";
    case EventType::AttemptLapsed: return "attempt_lapsed";
  }
  return "?";
}

const char* to_string(EpisodeEnd end) {
  switch (end) {
    case EpisodeEnd::Running: return "running";
    case EpisodeEnd::Crash: return "crash";
    case EpisodeEnd::LapsDone: return "laps_done";
    case EpisodeEnd::StepLimit: return "step_limit";
  }
  return "?";
}

int EpisodeRecord::count(EventType type) const {
  return static_cast<int>(std::count_if(events.begin(), events.end(), [type](const Event& e) { return e.type == type; }));
}

json EpisodeRecord::to_json() const {
  json ev = json::array();
  for (const auto& e : events) {
    ev.push_back({{"type", to_string(e.type)}, {"step", e.step}, {"time", e.time}, {"s", e.s}, {"opponent", e.opponent}});
  }
  return {{"track", track},     {"track_name", track_name}, {"start", start},       {"k_v", k_v},
          {"steps", steps},     {"time", time},             {"distance", distance}, {"reward", reward},
          {"events", ev},       {"lap_times", lap_times},   {"attempts", attempts}, {"end", to_string(end)}};
}

EpisodeRecord EpisodeRecord::from_json(const json& j) {
  EpisodeRecord r;
  r.track = j.at("track");
  r.track_name = j.at("track_name");
  r.start = j.at("start");
  r.k_v = j.at("k_v");
  r.steps = j.at("steps");
  r.time = j.at("time");
  r.distance = j.at("distance");
  r.reward = j.at("reward");
  for (const auto& e : j.at("events")) {
    r.events.push_back({event_from_string(e.at("type")), e.at("step"), e.at("time"), e.at("s"), e.at("opponent")});
  }
  r.lap_times = j.at("lap_times").get<std::vector<double>>();
  r.attempts = j.at("attempts");
  r.end = end_from_string(j.at("end"));
  return r;
}

RacingEnv::RacingEnv(std::vector<TrackAssetsPtr> tracks, const EnvConfig& config,
                     const VehicleParams& vehicle, const ApfParams& apf, std::uint64_t seed)
    : tracks_(std::move(tracks)),
      config_(config),
      vehicle_(vehicle),
      apf_(apf, vehicle),
      episode_rng_(derive_seed(seed, "env-episode")),
      noise_rng_(derive_seed(seed, "env-lidar")) {
  if (tracks_.empty()) throw std::invalid_argument("RacingEnv: no tracks");
  config_.validate();
  vehicle_.validate();
  reset();
}

int RacingEnv::frame_size() const { return tracks_.front()->lidar.config().beams + kProprio; }

OrientedBox RacingEnv::footprint(const VehicleState& s) const {
  return {{s.x, s.y}, s.yaw, 0.5 * vehicle_.length, 0.5 * vehicle_.width};
}

void RacingEnv::place_opponent(Opponent& o, double s) const {
  const Track& t = assets().track;
  const Vec2 p = t.point_at(s);
  o.state = VehicleState{};
  o.state.x = p.x;
  o.state.y = p.y;
  o.state.yaw = t.heading_at(s);
  o.state.v_long = k_v_ * assets().line.speed_at(s);
  o.s = s;
}

void RacingEnv::reset(const ResetOptions& options) {
  const int n_tracks = static_cast<int>(tracks_.size());
  track_ = options.track >= 0 ? options.track : static_cast<int>(uniform_index(episode_rng_, n_tracks));
  if (track_ >= n_tracks) throw std::out_of_range("RacingEnv::reset: track index out of range");
  const TrackAssets& a = assets();
  const int n_starts = static_cast<int>(a.starts.size());
  const int start = options.start >= 0 ? options.start : static_cast<int>(uniform_index(episode_rng_, n_starts));
  if (start >= n_starts) throw std::out_of_range("RacingEnv::reset: start index out of range");
  k_v_ = options.k_v > 0.0 ? options.k_v
                           : config_.k_v_choices[uniform_index(episode_rng_, config_.k_v_choices.size())];
  if (options.noise_seed) noise_rng_.seed(*options.noise_seed);

  const double L = a.track.total_length;
  start_s_ = L * start / n_starts;
  ego_s_ = start_s_;
  ego_ = VehicleState{};
  ego_.x = a.starts[start].x;
  ego_.y = a.starts[start].y;
  ego_.yaw = a.starts[start].yaw;
  lap_start_time_ = -1.0;
  opponents_.assign(config_.n_opponents, Opponent{});
  for (int k = 0; k < config_.n_opponents; ++k) {
    place_opponent(opponents_[k], start_s_ + L * (k + 1) / (config_.n_opponents + 1));
  }
  attempt_ = -1;
  attempt_offset_ = 0.0;

  record_ = EpisodeRecord{};
  record_.track = track_;
  record_.track_name = a.track.name;
  record_.start = start;
  record_.k_v = k_v_;
  observe();
  prev_action_ = base_action_;
}

void RacingEnv::observe() {
  std::vector<OrientedBox> boxes;
  boxes.reserve(opponents_.size());
  for (const auto& o : opponents_) boxes.push_back(footprint(o.state));
  const TrackAssets& a = assets();
  scan_ = a.lidar.scan(ego_.pose(), boxes, a.lidar.config().noise_std, noise_rng_);
  base_action_ = config_.compute_base_action ? apf_.act(scan_) : Action{0.0, 0.0};
}

void RacingEnv::observation_frame(double* out) const {
  const Scan filtered = median_filter(scan_, apf_.params().median_window);
  const std::size_t n = filtered.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = filtered.ranges[i] / filtered.max_range;
  double* p = out + n;
  p[0] = ego_.v_long;
  p[1] = ego_.v_lat;
  p[2] = ego_.a_long;
  p[3] = ego_.yaw_rate;
  p[4] = ego_.slip;
  p[5] = ego_.steer;
  p[6] = prev_action_[0];
  p[7] = prev_action_[1];
}

Control RacingEnv::opponent_control(const Opponent& o) const {
  const TrackAssets& a = assets();
  const double v = std::max(o.state.v_long, 0.0);
  const double lookahead = config_.opponent_lookahead + config_.opponent_lookahead_gain * v;
  const Vec2 target = o.state.pose().to_local(a.track.point_at(o.s + lookahead));
  Control c;
  c.target_steer = pure_pursuit(target, vehicle_.wheelbase, vehicle_.steer_max);
  c.target_v = k_v_ * a.line.speed_at(o.s);
  return c;
}

bool RacingEnv::ego_collides() const {
  const OrientedBox box = footprint(ego_);
  const double reach = std::hypot(box.half_length, box.half_width);
  for (const auto& seg : assets().walls) {
    const double lo_x = std::min(seg.a.x, seg.b.x) - reach;
    const double hi_x = std::max(seg.a.x, seg.b.x) + reach;
    const double lo_y = std::min(seg.a.y, seg.b.y) - reach;
    const double hi_y = std::max(seg.a.y, seg.b.y) + reach;
    if (box.center.x < lo_x || box.center.x > hi_x || box.center.y < lo_y || box.center.y > hi_y) continue;
    if (box_segment_overlap(box, seg)) return true;
  }
  for (const auto& o : opponents_) {
    if (distance(o.state.position(), box.center) > 2.0 * reach) continue;
    if (boxes_overlap(box, footprint(o.state))) return true;
  }
  return false;
}

StepResult RacingEnv::step(const Action& action_in) {
  if (record_.end != EpisodeEnd::Running) throw std::logic_error("RacingEnv::step: episode is over, call reset()");
  const Action action{std::clamp(action_in[0], -1.0, 1.0), std::clamp(action_in[1], -1.0, 1.0)};
  if (!std::isfinite(action[0]) || !std::isfinite(action[1])) {
    throw std::invalid_argument("RacingEnv::step: non-finite action");
  }
  const TrackAssets& a = assets();
  const Track& track = a.track;
  const double L = track.total_length;
  const double h = config_.dt / config_.substeps;

  const Control ego_control = denormalize_action(action, vehicle_);
  std::vector<Control> opp_controls;
  opp_controls.reserve(opponents_.size());
  for (const auto& o : opponents_) opp_controls.push_back(opponent_control(o));

  const double s_prev = ego_s_;
  for (int k = 0; k < config_.substeps; ++k) {
    const Vec2 before = ego_.position();
    ego_ = step_dynamics(ego_, ego_control, vehicle_, h);
    record_.distance += distance(before, ego_.position());
    for (std::size_t i = 0; i < opponents_.size(); ++i) {
      opponents_[i].state = step_dynamics(opponents_[i].state, opp_controls[i], vehicle_, h);
    }
  }
  record_.steps += 1;
  record_.time = record_.steps * config_.dt;

  StepResult r;
  bool off_track = false;
  try {
    ego_s_ = track_progress(track, ego_.position(), ego_s_);
  } catch (const TrackProgressError&) {
    off_track = true;
  }
  for (auto& o : opponents_) {
    try {
      o.s = track_progress(track, o.state.position(), o.s);
    } catch (const TrackProgressError&) {
      place_opponent(o, o.s);
    }
  }

  // Running-start lap timing at start-line crossings.
  if (!off_track && std::floor(ego_s_ / L) > std::floor(s_prev / L)) {
    const double line = std::floor(ego_s_ / L) * L;
    const double frac = ego_s_ > s_prev ? (line - s_prev) / (ego_s_ - s_prev) : 1.0;
    const double t_cross = record_.time - config_.dt + frac * config_.dt;
    if (lap_start_time_ >= 0.0) record_.lap_times.push_back(t_cross - lap_start_time_);
    lap_start_time_ = t_cross;
  }

  const bool crash = off_track || ego_collides();
  bool overtake = false;
  auto add_event = [&](EventType type, int opp) {
    const Event e{type, record_.steps, record_.time, ego_s_, opp};
    r.events.push_back(e);
    record_.events.push_back(e);
  };
  if (crash) {
    add_event(attempt_ >= 0 ? EventType::OvertakeCrash : EventType::EnvCrash, attempt_);
    attempt_ = -1;
  } else {
    if (attempt_ >= 0) {
      const double rel = opponents_[attempt_].s + attempt_offset_ - ego_s_;
      if (rel < -(vehicle_.length + config_.pass_margin)) {
        add_event(EventType::OvertakeSuccess, attempt_);
        overtake = true;
        place_opponent(opponents_[attempt_], ego_s_ + config_.respawn_distance);
        attempt_ = -1;
      } else if (rel > config_.attempt_window) {
        add_event(EventType::AttemptLapsed, attempt_);
        attempt_ = -1;
      }
    }
    if (attempt_ < 0) {
      double best_gap = config_.attempt_window;
      int best = -1;
      for (int i = 0; i < static_cast<int>(opponents_.size()); ++i) {
        const double gap = track.wrap(opponents_[i].s - ego_s_);
        if (gap > 0.0 && gap <= best_gap) {
          best_gap = gap;
          best = i;
        }
      }
      if (best >= 0) {
        attempt_ = best;
        attempt_offset_ = best_gap - (opponents_[best].s - ego_s_);
        record_.attempts += 1;
      }
    }
  }

  observe();
  double min_range = scan_.max_range;
  for (const double d : scan_.ranges) min_range = std::min(min_range, d);
  r.terms = compute_reward(ego_.v_long, config_.dt, action, prev_action_, min_range, overtake, crash, config_);
  r.reward = r.terms.total();
  record_.reward += r.reward;
  prev_action_ = action;

  r.crashed = crash;
  if (crash) {
    record_.end = EpisodeEnd::Crash;
  } else if (ego_s_ - start_s_ >= config_.max_laps * L) {
    record_.end = EpisodeEnd::LapsDone;
    r.truncated = true;
  } else if (record_.steps >= config_.max_steps) {
    record_.end = EpisodeEnd::StepLimit;
    r.truncated = true;
  }
  r.done = record_.end != EpisodeEnd::Running;
  if (r.done && attempt_ >= 0) {
    // An attempt still open at truncation neither succeeded nor crashed.
    add_event(EventType::AttemptLapsed, attempt_);
    attempt_ = -1;
  }
  if (trace_ != nullptr) write_trace(action, r);
  return r;
}

void RacingEnv::write_trace(const Action& action, const StepResult& r) const {
  json line;
  line["track"] = assets().track.name;
  line["step"] = record_.steps;
  line["t"] = record_.time;
  line["ego"] = {{"x", ego_.x}, {"y", ego_.y}, {"yaw", ego_.yaw}, {"v", ego_.v_long}, {"s", ego_s_}};
  json opps = json::array();
  for (const auto& o : opponents_) opps.push_back({o.state.x, o.state.y, o.state.yaw, o.state.v_long});
  line["opponents"] = std::move(opps);
  line["action"] = {action[0], action[1]};
  line["base_action"] = {base_action_[0], base_action_[1]};
  line["reward"] = {{"total", r.reward},
                    {"progress", r.terms.progress},
                    {"action_change", r.terms.action_change},
                    {"proximity", r.terms.proximity},
                    {"overtake", r.terms.overtake},
                    {"crash", r.terms.crash}};
  json ev = json::array();
  for (const auto& e : r.events) ev.push_back({{"type", to_string(e.type)}, {"opponent", e.opponent}});
  line["events"] = std::move(ev);
  line["attempt"] = attempt_;
  line["done"] = r.done;
  *trace_ << line.dump() << '\n';
}

json RacingEnv::save_state() const {
  json opps = json::array();
  for (const auto& o : opponents_) opps.push_back({{"state", state_to_json(o.state)}, {"s", o.s}});
  return {{"track", track_},
          {"k_v", k_v_},
          {"ego", state_to_json(ego_)},
          {"ego_s", ego_s_},
          {"start_s", start_s_},
          {"lap_start_time", lap_start_time_},
          {"opponents", opps},
          {"attempt", attempt_},
          {"attempt_offset", attempt_offset_},
          {"scan", scan_.ranges},
          {"base_action", {base_action_[0], base_action_[1]}},
          {"prev_action", {prev_action_[0], prev_action_[1]}},
          {"record", record_.to_json()},
          {"episode_rng", rng_state_string(episode_rng_)},
          {"noise_rng", rng_state_string(noise_rng_)}};
}

void RacingEnv::load_state(const json& j) {
  track_ = j.at("track");
  if (track_ < 0 || track_ >= static_cast<int>(tracks_.size())) throw std::invalid_argument("RacingEnv::load_state: bad track");
  k_v_ = j.at("k_v");
  ego_ = state_from_json(j.at("ego"));
  ego_s_ = j.at("ego_s");
  start_s_ = j.at("start_s");
  lap_start_time_ = j.at("lap_start_time");
  opponents_.clear();
  for (const auto& o : j.at("opponents")) opponents_.push_back({state_from_json(o.at("state")), o.at("s").get<double>()});
  attempt_ = j.at("attempt");
  attempt_offset_ = j.at("attempt_offset");
  scan_.angles = assets().lidar.angles();
  scan_.max_range = assets().lidar.config().max_range;
  scan_.ranges = j.at("scan").get<std::vector<double>>();
  base_action_ = {j.at("base_action").at(0), j.at("base_action").at(1)};
  prev_action_ = {j.at("prev_action").at(0), j.at("prev_action").at(1)};
  record_ = EpisodeRecord::from_json(j.at("record"));
  rng_restore(episode_rng_, j.at("episode_rng"));
  rng_restore(noise_rng_, j.at("noise_rng"));
}

void RacingEnv::set_ego_state(const VehicleState& s) {
  ego_ = s;
  ego_s_ = track_progress(assets().track, ego_.position(), ego_s_);
  observe();
}

void RacingEnv::set_opponents(const std::vector<VehicleState>& states) {
  opponents_.clear();
  for (const auto& s : states) {
    Opponent o;
    o.state = s;
    o.s = track_progress(assets().track, s.position(), ego_s_);
    opponents_.push_back(o);
  }
  attempt_ = -1;
  observe();
}

}  // namespace racemop
