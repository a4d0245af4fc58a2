#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "racemop/action.hpp"
#include "racemop/network.hpp"
#include "racemop/observation.hpp"
#include "racemop/racing_env.hpp"
#include "racemop/rng.hpp"

namespace racemop {

class Config;

enum class FusionKind { Truncated, ClippedSum };
const char* to_string(FusionKind kind);
FusionKind parse_fusion(const std::string& name);

struct PpoConfig {
  long total_steps = 2'000'000;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double lr = 1e-4;
  double lr_final = 0.0;
  int traj_length = 2048;
  double clip = 0.1;
  int batch = 512;
  int epochs = 7;
  double value_coef = 0.5;
  double max_grad_norm = 1.0;
  double rpo_alpha = 0.05;
  double entropy_coef = 0.0;
  double adam_eps = 1e-5;
  int n_envs = 16;
  int n_f = 6;
  int n_s = 2;
  Action alpha{0.5, 0.5};
  double log_sigma_init = -0.7;
  double policy_init_gain = 0.01;
  FusionKind fusion = FusionKind::Truncated;
  double obs_clip = 10.0;
  int checkpoint_every = 10;  // updates; 0 disables periodic checkpoints
  int threads = 1;            // env worker threads
  bool check_ratio_all = false;
  NetworkSpec network;

  long rollout_size() const { return static_cast<long>(traj_length) * n_envs; }
  void validate() const;
  /// 256 environments and 30e6 steps.
  void apply_paper_scale();
  static PpoConfig from_config(const Config& cfg);
  nlohmann::json to_json() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// dones[t] marks that the episode ended with step t, which masks V(t + 1)
/// and the advantage carried back from t + 1.
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, double bootstrap_value, double gamma,
                      double lambda);

/// lr_final + (lr - lr_final) (1 + cos(pi step / total)) / 2, constant at
/// lr_final past the end.
double cosine_lr(double lr, double lr_final, long step, long total_steps);

/// Scales g in place so that its L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(std::span<float> grads, double max_norm);

class Adam {
 public:
  explicit Adam(std::size_t n = 0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-5);
  void step(std::span<float> params, std::span<const float> grads, double lr);
  long steps() const { return t_; }
  std::vector<float>& m() { return m_; }
  std::vector<float>& v() { return v_; }
  const std::vector<float>& m() const { return m_; }
  const std::vector<float>& v() const { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<float> m_;
  std::vector<float> v_;
};

/// Divides rewards by the running standard deviation of the discounted
/// return, tracked per environment and pooled across environments.
class RewardNormalizer {
 public:
  RewardNormalizer(int n_envs = 0, double gamma = 0.99);
  double operator()(int env, double reward, bool done);
  double variance() const { return stats_.variance(0); }

  nlohmann::json to_json() const;
  void from_json(const nlohmann::json& j);

 private:
  double gamma_;
  std::vector<double> returns_;
  RunningMeanStd stats_;
};

struct LossParams {
  double clip = 0.1;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  Action alpha{0.5, 0.5};
  FusionKind fusion = FusionKind::Truncated;
};

/// One minibatch. For the clipped-sum fusion `action` holds the unclipped
/// Gaussian draw. `perturbation`, if given, shifts the fused mean (RPO).
struct LossBatch {
  std::span<const Action> base;
  std::span<const Action> action;
  std::span<const double> logp_old;
  std::span<const double> advantage;
  std::span<const double> returns;
  std::span<const Action> perturbation;
};

struct LossOutput {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double total = 0.0;
  Eigen::MatrixXd d_mu;        // d total / d mu_R, action_dim x batch
  Eigen::MatrixXd d_value;     // 1 x batch
  Action d_log_sigma{0.0, 0.0};
  std::vector<double> ratio;
};

/// total = mean(-min(r A, clip(r, 1 - eps, 1 + eps) A)) + value_coef mean((V - R)^2)
///         - entropy_coef mean(H), with analytic gradients.
LossOutput ppo_loss(const Eigen::MatrixXd& mu_residual, const Eigen::MatrixXd& value,
                    const Action& log_sigma, const LossBatch& batch, const LossParams& params);

/// Log-likelihood of a stored action under the configured fusion.
double fused_log_prob(FusionKind kind, const Action& mu, const Action& sigma, const Action& action);

/// Runs `fn(i)` for i in [0, n) on a fixed set of worker threads and waits.
class WorkerPool {
 public:
  explicit WorkerPool(int threads);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void run(int n, const std::function<void(int)>& fn);
  int threads() const { return static_cast<int>(workers_.size()) + 1; }

 private:
  struct State;
  std::unique_ptr<State> state_;
  std::vector<std::thread> workers_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainerOptions {
  PpoConfig ppo;
  EnvConfig env;
  VehicleParams vehicle;
  ApfParams apf;
  std::vector<TrackAssetsPtr> tracks;
  std::vector<std::string> track_names;
  std::uint64_t seed = 1;
  std::filesystem::path diagnostics_dir;  // non-finite dumps go here when set
};

struct UpdateLog {
  long update = 0;
  long steps = 0;
  long episodes = 0;
  double mean_reward = 0.0;     // raw per-step reward over the rollout
  double episode_return = 0.0;  // raw, episodes finished in this rollout; NaN if none
  double episode_length = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double ratio_deviation = 0.0;  // max |r - 1| before the first gradient step
  double sigma_speed = 0.0;
  double sigma_steer = 0.0;
  int overtakes = 0;
  int crashes = 0;
  int incidents = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

/// Everything needed to run a trained residual policy.
struct PolicySnapshot {
  NetworkSpec spec;
  std::vector<float> params;
  RunningMeanStd obs_stats;
  Action alpha{0.5, 0.5};
  FusionKind fusion = FusionKind::Truncated;
  int n_f = 6;
  int n_s = 2;
  double obs_clip = 10.0;
};

/// Reads the policy part of a training checkpoint. Throws if the stored
/// parameter count differs from `expected` (when given) or from its spec.
PolicySnapshot load_policy(const std::filesystem::path& path, const NetworkSpec* expected = nullptr);

class Trainer {
 public:
  explicit Trainer(TrainerOptions options);
  ~Trainer();

  /// One rollout of traj_length steps on every environment followed by the
  /// PPO update.
  UpdateLog step();
  bool finished() const { return global_step_ >= options_.ppo.total_steps; }

  long update_index() const { return update_; }
  long global_step() const { return global_step_; }
  const std::vector<std::string>& incidents() const { return incidents_; }

  ResidualNetwork<float>& network() { return *net_; }
  const RunningMeanStd& obs_stats() const { return obs_stats_; }
  const TrainerOptions& options() const { return options_; }
  RacingEnv& env(int i) { return *envs_[i]; }
  PolicySnapshot snapshot() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores a checkpoint written with the same options; training then
  /// continues exactly as the uninterrupted run.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  struct Rollout;
  void collect();
  void update(UpdateLog& log);
  void push_frame(int env, bool episode_start);
  void dump_diagnostics(const std::string& what, const nlohmann::json& extra) const;

  TrainerOptions options_;
  std::unique_ptr<ResidualNetwork<float>> net_;
  Adam adam_;
  RunningMeanStd obs_stats_;
  RewardNormalizer reward_norm_;
  std::vector<std::unique_ptr<RacingEnv>> envs_;
  std::vector<FrameHistory> histories_;
  std::vector<Rng> policy_rngs_;
  Rng rpo_rng_;
  Rng shuffle_rng_;
  std::unique_ptr<WorkerPool> pool_;
  std::unique_ptr<Rollout> rollout_;
  long update_ = 0;
  long global_step_ = 0;
  long episodes_ = 0;
  std::vector<std::string> incidents_;
  std::vector<float> frame_scratch_;
  std::vector<double> raw_frame_;
};

}  // namespace racemop
