#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "racemop/metrics.hpp"
#include "racemop/network.hpp"
#include "racemop/observation.hpp"
#include "racemop/planners.hpp"
#include "racemop/ppo.hpp"
#include "racemop/racing_env.hpp"

namespace racemop {

/// Chooses the ego action from the environment's current observation.
class Driver {
 public:
  virtual ~Driver() = default;
  virtual std::string name() const = 0;
  virtual void begin_episode(const RacingEnv& env) { (void)env; }
  virtual Action act(const RacingEnv& env) = 0;
};

/// The base planner alone.
class ApfDriver : public Driver {
 public:
  std::string name() const override { return "apf"; }
  Action act(const RacingEnv& env) override { return env.base_action(); }
};

class DisparityDriver : public Driver {
 public:
  DisparityDriver(const DisparityParams& params, const VehicleParams& vehicle) : planner_(params, vehicle) {}
  std::string name() const override { return "disparity"; }
  Action act(const RacingEnv& env) override { return planner_.act(env.scan()); }

 private:
  DisparityExtender planner_;
};

/// Trained residual policy with frozen observation statistics. Acts with the
/// distribution mode unless stochastic, in which case it samples.
class ResidualDriver : public Driver {
 public:
  ResidualDriver(PolicySnapshot snapshot, bool stochastic = false, std::uint64_t seed = 0);
  std::string name() const override { return name_; }
  void begin_episode(const RacingEnv& env) override;
  Action act(const RacingEnv& env) override;

  void set_name(std::string n) { name_ = std::move(n); }

 private:
  void observe(const RacingEnv& env, bool first);

  PolicySnapshot snap_;
  ResidualNetwork<float> net_;
  std::unique_ptr<FrameHistory> history_;
  bool stochastic_;
  Rng rng_;
  bool fresh_ = true;
  std::string name_;
  std::vector<double> raw_;
  std::vector<float> frame_;
  std::vector<float> lidar_;
  std::vector<float> proprio_;
  ResidualNetwork<float>::Output out_;
};

struct EvalOptions {
  std::vector<TrackAssetsPtr> tracks;
  std::vector<std::string> track_names;
  EnvConfig env;
  VehicleParams vehicle;
  ApfParams apf;
  int episodes = 30;  // per track
  double k_v = 0.75;
  std::uint64_t seed = 1;
  std::filesystem::path trace_dir;  // JSON-lines trajectories when set
};

/// Runs `episodes` episodes per track. Episode i starts at start position
/// i mod n_starts with a LiDAR noise stream fixed by (seed, track, i), so
/// every driver meets identical opponents and noise.
std::vector<std::vector<EpisodeRecord>> run_episodes(Driver& driver, const EvalOptions& options);

struct EvalReport {
  std::string driver;
  std::vector<RaceMetrics> tracks;
  RaceMetrics all;
};

EvalReport evaluate(Driver& driver, const EvalOptions& options);

/// CSV: one row per track plus "All".
std::string metrics_csv(const EvalReport& report);
/// Aligned plain-text table of the same rows.
std::string metrics_table(const EvalReport& report);

/// Paired comparison against the first report, with Delta_rel columns.
std::string bench_csv(const std::vector<EvalReport>& reports);
std::string bench_table(const std::vector<EvalReport>& reports);

/// Names accepted by make_driver.
std::vector<std::string> available_drivers();

struct DriverOptions {
  VehicleParams vehicle;
  DisparityParams disparity;
  std::filesystem::path checkpoint;  // for "racemop"
  const NetworkSpec* expected_spec = nullptr;
  bool stochastic = false;
  std::uint64_t seed = 0;
};

/// "apf", "disparity" or "racemop" (needs a checkpoint). Unknown names throw
/// std::invalid_argument listing the available ones.
std::unique_ptr<Driver> make_driver(const std::string& name, const DriverOptions& options);

}  // namespace racemop
