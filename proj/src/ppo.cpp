#include "racemop/ppo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>

#include "racemop/config.hpp"
#include "racemop/fusion.hpp"

namespace racemop {

using nlohmann::json;

const char* to_string(FusionKind kind) {
  return kind == FusionKind::Truncated ? "truncated" : "clipped";
}

FusionKind parse_fusion(const std::string& name) {
  if (name == "truncated") return FusionKind::Truncated;
  if (name == "clipped") return FusionKind::ClippedSum;
  throw ConfigError("fusion must be 'truncated' or 'clipped', got '" + name + "'");
}

// ---------------------------------------------------------------------------
// PpoConfig

void PpoConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("ppo: " + m); };
  if (total_steps <= 0) fail("total_steps must be positive");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must be in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must be in [0, 1]");
  if (!(lr > 0.0) || lr_final < 0.0 || lr_final > lr) fail("need 0 <= lr_final <= lr, lr > 0");
  if (traj_length <= 0 || n_envs <= 0) fail("traj_length and n_envs must be positive");
  if (!(clip > 0.0 && clip < 1.0)) fail("clip must be in (0, 1)");
  if (batch <= 0 || rollout_size() % batch != 0) {
    fail("batch (" + std::to_string(batch) + ") must divide traj_length * n_envs (" +
         std::to_string(rollout_size()) + ")");
  }
  if (epochs <= 0) fail("epochs must be positive");
  if (value_coef < 0.0 || entropy_coef < 0.0 || max_grad_norm <= 0.0 || rpo_alpha < 0.0) {
    fail("coefficients must be non-negative");
  }
  if (n_f < 0 || n_s < 0) fail("n_f and n_s must be non-negative");
  if (threads <= 0) fail("threads must be positive");
  if (network.in_channels != n_f + 1) fail("network.in_channels must equal n_f + 1");
  if (network.proprio != (n_f + 1) * RacingEnv::kProprio) fail("network.proprio must equal 8 (n_f + 1)");
  if (network.action_dim != 2) fail("network.action_dim must be 2");
  network.validate();
}

void PpoConfig::apply_paper_scale() {
  n_envs = 256;
  total_steps = 30'000'000;
}

PpoConfig PpoConfig::from_config(const Config& cfg) {
  PpoConfig c;
  if (cfg.get_bool("ppo.paper_scale", false)) c.apply_paper_scale();
  c.total_steps = cfg.get_int("ppo.total_steps", c.total_steps);
  c.gamma = cfg.get_double("ppo.gamma", c.gamma);
  c.gae_lambda = cfg.get_double("ppo.gae_lambda", c.gae_lambda);
  c.lr = cfg.get_double("ppo.lr", c.lr);
  c.lr_final = cfg.get_double("ppo.lr_final", c.lr_final);
  c.traj_length = static_cast<int>(cfg.get_int("ppo.traj_length", c.traj_length));
  c.clip = cfg.get_double("ppo.clip", c.clip);
  c.batch = static_cast<int>(cfg.get_int("ppo.batch", c.batch));
  c.epochs = static_cast<int>(cfg.get_int("ppo.epochs", c.epochs));
  c.value_coef = cfg.get_double("ppo.value_coef", c.value_coef);
  c.max_grad_norm = cfg.get_double("ppo.max_grad_norm", c.max_grad_norm);
  c.rpo_alpha = cfg.get_double("ppo.rpo_alpha", c.rpo_alpha);
  c.entropy_coef = cfg.get_double("ppo.entropy_coef", c.entropy_coef);
  c.adam_eps = cfg.get_double("ppo.adam_eps", c.adam_eps);
  c.n_envs = static_cast<int>(cfg.get_int("ppo.n_envs", c.n_envs));
  c.n_f = static_cast<int>(cfg.get_int("policy.n_f", c.n_f));
  c.n_s = static_cast<int>(cfg.get_int("policy.n_s", c.n_s));
  const auto alpha = cfg.get_doubles("policy.alpha", {c.alpha[0], c.alpha[1]});
  if (alpha.size() != 2) throw ConfigError("policy.alpha needs two values");
  c.alpha = {alpha[0], alpha[1]};
  c.log_sigma_init = cfg.get_double("policy.log_sigma_init", c.log_sigma_init);
  c.policy_init_gain = cfg.get_double("policy.init_gain", c.policy_init_gain);
  c.fusion = parse_fusion(cfg.get_string("policy.fusion", to_string(c.fusion)));
  c.obs_clip = cfg.get_double("policy.obs_clip", c.obs_clip);
  c.checkpoint_every = static_cast<int>(cfg.get_int("ppo.checkpoint_every", c.checkpoint_every));
  c.threads = static_cast<int>(cfg.get_int("ppo.threads", c.threads));
  c.check_ratio_all = cfg.get_bool("ppo.check_ratio_all", c.check_ratio_all);

  c.network.in_channels = c.n_f + 1;
  c.network.proprio = (c.n_f + 1) * RacingEnv::kProprio;
  if (cfg.has("policy.conv_filters")) {
    const auto f = cfg.get_doubles("policy.conv_filters", {});
    const auto k = cfg.get_doubles("policy.conv_kernels", {});
    const auto s = cfg.get_doubles("policy.conv_strides", {});
    if (f.size() != k.size() || f.size() != s.size()) {
      throw ConfigError("policy.conv_filters/kernels/strides must have equal lengths");
    }
    c.network.conv.clear();
    for (std::size_t i = 0; i < f.size(); ++i) {
      c.network.conv.push_back({static_cast<int>(f[i]), static_cast<int>(k[i]), static_cast<int>(s[i])});
    }
  }
  c.network.projection = static_cast<int>(cfg.get_int("policy.projection", c.network.projection));
  c.network.hidden = static_cast<int>(cfg.get_int("policy.hidden", c.network.hidden));
  c.validate();
  return c;
}

json PpoConfig::to_json() const {
  return {{"total_steps", total_steps},
          {"gamma", gamma},
          {"gae_lambda", gae_lambda},
          {"lr", lr},
          {"lr_final", lr_final},
          {"traj_length", traj_length},
          {"clip", clip},
          {"batch", batch},
          {"epochs", epochs},
          {"value_coef", value_coef},
          {"max_grad_norm", max_grad_norm},
          {"rpo_alpha", rpo_alpha},
          {"entropy_coef", entropy_coef},
          {"adam_eps", adam_eps},
          {"n_envs", n_envs},
          {"n_f", n_f},
          {"n_s", n_s},
          {"alpha", {alpha[0], alpha[1]}},
          {"log_sigma_init", log_sigma_init},
          {"policy_init_gain", policy_init_gain},
          {"fusion", to_string(fusion)},
          {"obs_clip", obs_clip},
          {"network", network.to_json()}};
}

// ---------------------------------------------------------------------------
// Numerics

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> dones, double bootstrap_value, double gamma,
                      double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw std::invalid_argument("compute_gae: rewards, values and dones differ in length");
  }
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap_value;
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double keep = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value * keep - values[i];
    next_adv = delta + gamma * lambda * keep * next_adv;
    out.advantages[i] = next_adv;
    out.returns[i] = next_adv + values[i];
    next_value = values[i];
  }
  return out;
}

double cosine_lr(double lr, double lr_final, long step, long total_steps) {
  if (total_steps <= 0 || step >= total_steps) return lr_final;
  const double f = static_cast<double>(std::max(step, 0L)) / static_cast<double>(total_steps);
  return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * f));
}

double clip_grad_norm(std::span<float> grads, double max_norm) {
  double sq = 0.0;
  for (float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (float& g : grads) g *= scale;
  }
  return norm;
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0f), v_(n, 0.0f) {}

void Adam::step(std::span<float> params, std::span<const float> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: size mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double step = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = beta1_ * m_[i] + (1.0 - beta1_) * g;
    const double v = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    m_[i] = static_cast<float>(m);
    v_[i] = static_cast<float>(v);
    params[i] -= static_cast<float>(step * m / (std::sqrt(v) / sqrt_bc2 + eps_));
  }
}

RewardNormalizer::RewardNormalizer(int n_envs, double gamma)
    : gamma_(gamma), returns_(n_envs, 0.0), stats_(1) {}

double RewardNormalizer::operator()(int env, double reward, bool done) {
  double& ret = returns_.at(env);
  ret = ret * gamma_ + reward;
  stats_.update(&ret);
  const double scaled = reward / std::sqrt(stats_.variance(0) + 1e-8);
  if (done) ret = 0.0;
  return scaled;
}

json RewardNormalizer::to_json() const {
  return {{"gamma", gamma_}, {"returns", returns_}, {"stats", stats_.to_json()}};
}

void RewardNormalizer::from_json(const json& j) {
  gamma_ = j.at("gamma");
  returns_ = j.at("returns").get<std::vector<double>>();
  stats_ = RunningMeanStd::from_json(j.at("stats"));
}

double fused_log_prob(FusionKind kind, const Action& mu, const Action& sigma, const Action& action) {
  double lp = 0.0;
  for (int k = 0; k < 2; ++k) {
    lp += kind == FusionKind::Truncated ? truncnorm::log_prob(action[k], mu[k], sigma[k], -1.0, 1.0)
                                        : gaussian::log_prob(action[k], mu[k], sigma[k]);
  }
  return lp;
}

namespace {

double entropy_1d(FusionKind kind, double mu, double sigma) {
  return kind == FusionKind::Truncated ? truncnorm::entropy(mu, sigma, -1.0, 1.0) : gaussian::entropy(sigma);
}

}  // namespace

LossOutput ppo_loss(const Eigen::MatrixXd& mu_residual, const Eigen::MatrixXd& value,
                    const Action& log_sigma, const LossBatch& batch, const LossParams& p) {
  const Eigen::Index n = mu_residual.cols();
  if (mu_residual.rows() != 2 || value.rows() != 1 || value.cols() != n ||
      batch.base.size() != static_cast<std::size_t>(n) || batch.action.size() != batch.base.size() ||
      batch.logp_old.size() != batch.base.size() || batch.advantage.size() != batch.base.size() ||
      batch.returns.size() != batch.base.size() ||
      (!batch.perturbation.empty() && batch.perturbation.size() != batch.base.size())) {
    throw std::invalid_argument("ppo_loss: inconsistent batch shapes");
  }
  if (n == 0) throw std::invalid_argument("ppo_loss: empty batch");

  LossOutput out;
  out.d_mu = Eigen::MatrixXd::Zero(2, n);
  out.d_value = Eigen::MatrixXd::Zero(1, n);
  out.ratio.resize(n);
  const Action sigma{std::exp(log_sigma[0]), std::exp(log_sigma[1])};
  const double inv_n = 1.0 / static_cast<double>(n);

  for (Eigen::Index b = 0; b < n; ++b) {
    Action mu;
    for (int k = 0; k < 2; ++k) {
      mu[k] = batch.base[b][k] + p.alpha[k] * mu_residual(k, b);
      if (!batch.perturbation.empty()) mu[k] += batch.perturbation[b][k];
    }
    const Action& a = batch.action[b];
    double logp = 0.0;
    truncnorm::LogProbGrad g[2];
    for (int k = 0; k < 2; ++k) {
      if (p.fusion == FusionKind::Truncated) {
        logp += truncnorm::log_prob(a[k], mu[k], sigma[k], -1.0, 1.0);
        g[k] = truncnorm::log_prob_grad(a[k], mu[k], sigma[k], -1.0, 1.0);
      } else {
        logp += gaussian::log_prob(a[k], mu[k], sigma[k]);
        g[k] = gaussian::log_prob_grad(a[k], mu[k], sigma[k]);
      }
    }
    const double log_ratio = logp - batch.logp_old[b];
    const double r = std::exp(log_ratio);
    out.ratio[b] = r;
    const double adv = batch.advantage[b];
    const double surr1 = r * adv;
    const double surr2 = std::clamp(r, 1.0 - p.clip, 1.0 + p.clip) * adv;
    out.policy_loss -= std::min(surr1, surr2) * inv_n;
    out.approx_kl += ((r - 1.0) - log_ratio) * inv_n;
    if (std::abs(r - 1.0) > p.clip) out.clip_fraction += inv_n;

    // d(-min)/d logp: the unclipped branch carries -A r, the clipped one 0.
    const double d_logp = surr1 <= surr2 ? -adv * r * inv_n : 0.0;
    for (int k = 0; k < 2; ++k) {
      out.d_mu(k, b) += d_logp * g[k].d_mu * p.alpha[k];
      out.d_log_sigma[k] += d_logp * g[k].d_sigma * sigma[k];
    }

    const double err = value(0, b) - batch.returns[b];
    out.value_loss += err * err * inv_n;
    out.d_value(0, b) = p.value_coef * 2.0 * err * inv_n;

    double h = 0.0;
    for (int k = 0; k < 2; ++k) h += entropy_1d(p.fusion, mu[k], sigma[k]);
    out.entropy += h * inv_n;
    if (p.entropy_coef != 0.0) {
      for (int k = 0; k < 2; ++k) {
        const double hm = 1e-6;
        const double dh_dmu = (entropy_1d(p.fusion, mu[k] + hm, sigma[k]) -
                               entropy_1d(p.fusion, mu[k] - hm, sigma[k])) / (2.0 * hm);
        const double hs = 1e-6;
        const double dh_dls = (entropy_1d(p.fusion, mu[k], sigma[k] * std::exp(hs)) -
                               entropy_1d(p.fusion, mu[k], sigma[k] * std::exp(-hs))) / (2.0 * hs);
        out.d_mu(k, b) -= p.entropy_coef * inv_n * dh_dmu * p.alpha[k];
        out.d_log_sigma[k] -= p.entropy_coef * inv_n * dh_dls;
      }
    }
  }
  out.total = out.policy_loss + p.value_coef * out.value_loss - p.entropy_coef * out.entropy;
  return out;
}

// ---------------------------------------------------------------------------
// WorkerPool

struct WorkerPool::State {
  std::mutex mutex;
  std::condition_variable start;
  std::condition_variable done;
  const std::function<void(int)>* fn = nullptr;
  int n = 0;
  std::atomic<int> next{0};
  int busy = 0;
  long generation = 0;
  bool stop = false;
  std::exception_ptr error;

  void drain() {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        (*fn)(i);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
      }
    }
  }
};

WorkerPool::WorkerPool(int threads) : state_(std::make_unique<State>()) {
  for (int t = 1; t < threads; ++t) {
    workers_.emplace_back([s = state_.get()] {
      long seen = 0;
      for (;;) {
        {
          std::unique_lock lock(s->mutex);
          s->start.wait(lock, [&] { return s->stop || s->generation != seen; });
          if (s->stop) return;
          seen = s->generation;
        }
        s->drain();
        std::lock_guard lock(s->mutex);
        if (--s->busy == 0) s->done.notify_all();
      }
    });
  }
}

WorkerPool::~WorkerPool() {
  {
    std::lock_guard lock(state_->mutex);
    state_->stop = true;
  }
  state_->start.notify_all();
  for (auto& w : workers_) w.join();
}

void WorkerPool::run(int n, const std::function<void(int)>& fn) {
  if (workers_.empty()) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  {
    std::lock_guard lock(state_->mutex);
    state_->fn = &fn;
    state_->n = n;
    state_->next = 0;
    state_->busy = static_cast<int>(workers_.size());
    state_->error = nullptr;
    ++state_->generation;
  }
  state_->start.notify_all();
  state_->drain();
  std::unique_lock lock(state_->mutex);
  state_->done.wait(lock, [&] { return state_->busy == 0; });
  if (state_->error) std::rethrow_exception(state_->error);
}

// ---------------------------------------------------------------------------
// Training log

std::string UpdateLog::csv_header() {
  return "update,steps,episodes,mean_reward,episode_return,episode_length,policy_loss,value_loss,"
         "entropy,approx_kl,clip_fraction,grad_norm,lr,ratio_deviation,sigma_speed,sigma_steer,"
         "overtakes,crashes,incidents";
}

std::string UpdateLog::csv_row() const {
  char buf[768];
  std::snprintf(buf, sizeof(buf),
                "%ld,%ld,%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d,%d,%d",
                update, steps, episodes, mean_reward, episode_return, episode_length, policy_loss,
                value_loss, entropy, approx_kl, clip_fraction, grad_norm, lr, ratio_deviation,
                sigma_speed, sigma_steer, overtakes, crashes, incidents);
  return buf;
}

// ---------------------------------------------------------------------------
// Checkpoint files: a magic line, the header length, a JSON header and raw
// little-endian float32 blobs in the order listed under "blobs".

namespace {

constexpr const char* kMagic = "RACEMOP-CHECKPOINT 1";

using Blobs = std::vector<std::pair<std::string, std::vector<float>>>;

void write_checkpoint_file(const std::filesystem::path& path, json header, const Blobs& blobs) {
  json list = json::array();
  for (const auto& [name, data] : blobs) list.push_back({{"name", name}, {"count", data.size()}});
  header["blobs"] = list;
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << kMagic << '\n' << text.size() << '\n' << text;
    for (const auto& [name, data] : blobs) {
      out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointFile {
  json header;
  std::map<std::string, std::vector<float>> blobs;
};

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kMagic) throw std::runtime_error(path.string() + " is not a checkpoint file");
  std::string len_line;
  std::getline(in, len_line);
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": corrupt checkpoint header");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path.string() + ": truncated checkpoint header");
  CheckpointFile f;
  f.header = json::parse(text);
  for (const auto& b : f.header.at("blobs")) {
    std::vector<float> data(b.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path.string() + ": truncated blob " + b.at("name").get<std::string>());
    f.blobs[b.at("name")] = std::move(data);
  }
  return f;
}

}  // namespace

PolicySnapshot load_policy(const std::filesystem::path& path, const NetworkSpec* expected) {
  const CheckpointFile f = read_checkpoint_file(path);
  PolicySnapshot s;
  const json& h = f.header;
  s.spec = NetworkSpec::from_json(h.at("spec"));
  s.params = f.blobs.at("params");
  const std::size_t spec_count = s.spec.parameter_count();
  if (s.params.size() != spec_count) {
    throw std::runtime_error("checkpoint " + path.string() + " holds " + std::to_string(s.params.size()) +
                             " parameters but its network spec has " + std::to_string(spec_count));
  }
  if (expected && (expected->parameter_count() != s.params.size() || !(*expected == s.spec))) {
    throw std::runtime_error("checkpoint " + path.string() + " holds " + std::to_string(s.params.size()) +
                             " parameters; the configured network has " +
                             std::to_string(expected->parameter_count()));
  }
  s.obs_stats = RunningMeanStd::from_json(h.at("obs_stats"));
  const json& p = h.at("ppo");
  s.alpha = {p.at("alpha")[0].get<double>(), p.at("alpha")[1].get<double>()};
  s.fusion = parse_fusion(p.at("fusion"));
  s.n_f = p.at("n_f");
  s.n_s = p.at("n_s");
  s.obs_clip = p.at("obs_clip");
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

struct Trainer::Rollout {
  int T = 0;
  int E = 0;
  int P = 0;  // frame prefix per env
  int F = 0;
  std::vector<float> frames;       // E x (P + T) x F
  std::vector<long> episode_start; // E x T, buffer frame index
  std::vector<Action> base;
  std::vector<Action> action;
  std::vector<double> logp;
  std::vector<double> value;
  std::vector<double> reward;      // normalized
  std::vector<double> raw_reward;
  std::vector<std::uint8_t> done;
  std::vector<double> advantage;
  std::vector<double> returns;

  Rollout(int t, int e, int p, int f) : T(t), E(e), P(p), F(f) {
    frames.assign(static_cast<std::size_t>(E) * (P + T) * F, 0.0f);
    const std::size_t n = static_cast<std::size_t>(T) * E;
    episode_start.assign(n, 0);
    base.assign(n, {});
    action.assign(n, {});
    logp.assign(n, 0.0);
    value.assign(n, 0.0);
    reward.assign(n, 0.0);
    raw_reward.assign(n, 0.0);
    done.assign(n, 0);
  }

  float* frame(int e, long j) { return frames.data() + (static_cast<std::size_t>(e) * (P + T) + j) * F; }

  /// Stacked observations of samples idx (i = e * T + t) into the batch.
  void assemble(std::span<const long> idx, int n_f, int n_s, float* lidar, float* proprio) {
    const int beams = F - RacingEnv::kProprio;
    const int channels = n_f + 1;
    std::vector<const float*> ptrs(channels);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const int e = static_cast<int>(idx[b] / T);
      const long t = idx[b] % T;
      const auto js = stack_indices(P + t, n_f, n_s, episode_start[idx[b]]);
      for (int c = 0; c < channels; ++c) ptrs[c] = frame(e, js[c]);
      stack_frames(ptrs, beams, RacingEnv::kProprio, lidar + b * static_cast<std::size_t>(beams) * channels,
                   proprio + b * static_cast<std::size_t>(RacingEnv::kProprio) * channels);
    }
  }
};

Trainer::Trainer(TrainerOptions options)
    : options_(std::move(options)),
      rpo_rng_(derive_seed(options_.seed, "rpo")),
      shuffle_rng_(derive_seed(options_.seed, "shuffle")) {
  const PpoConfig& c = options_.ppo;
  c.validate();
  if (options_.tracks.empty()) throw std::invalid_argument("Trainer: no tracks");

  net_ = std::make_unique<ResidualNetwork<float>>(c.network);
  Rng init(derive_seed(options_.seed, "policy-init"));
  net_->initialize(init, c.policy_init_gain, c.log_sigma_init);
  adam_ = Adam(net_->size(), 0.9, 0.999, c.adam_eps);
  reward_norm_ = RewardNormalizer(c.n_envs, c.gamma);
  pool_ = std::make_unique<WorkerPool>(std::min(c.threads, c.n_envs));

  for (int e = 0; e < c.n_envs; ++e) {
    envs_.push_back(std::make_unique<RacingEnv>(options_.tracks, options_.env, options_.vehicle, options_.apf,
                                                derive_seed(options_.seed, "env", e)));
    policy_rngs_.emplace_back(derive_seed(options_.seed, "policy", e));
  }
  const int frame = envs_.front()->frame_size();
  if (frame - RacingEnv::kProprio != c.network.in_length) {
    throw std::invalid_argument("Trainer: network in_length " + std::to_string(c.network.in_length) +
                                " does not match " + std::to_string(frame - RacingEnv::kProprio) + " beams");
  }
  obs_stats_ = RunningMeanStd(frame);
  raw_frame_.resize(frame);
  frame_scratch_.resize(frame);
  for (int e = 0; e < c.n_envs; ++e) {
    histories_.emplace_back(frame, c.n_f, c.n_s);
    envs_[e]->reset();
    push_frame(e, true);
  }
  rollout_ = std::make_unique<Rollout>(c.traj_length, c.n_envs, c.n_f * (1 + c.n_s), frame);
}

Trainer::~Trainer() = default;

void Trainer::push_frame(int e, bool episode_start) {
  envs_[e]->observation_frame(raw_frame_.data());
  obs_stats_.update(raw_frame_.data());
  obs_stats_.normalize(raw_frame_.data(), frame_scratch_.data(), options_.ppo.obs_clip);
  if (episode_start) {
    histories_[e].reset(frame_scratch_.data());
  } else {
    histories_[e].push(frame_scratch_.data());
  }
}

PolicySnapshot Trainer::snapshot() const {
  PolicySnapshot s;
  s.spec = options_.ppo.network;
  s.params.assign(net_->params().data(), net_->params().data() + net_->size());
  s.obs_stats = obs_stats_;
  s.alpha = options_.ppo.alpha;
  s.fusion = options_.ppo.fusion;
  s.n_f = options_.ppo.n_f;
  s.n_s = options_.ppo.n_s;
  s.obs_clip = options_.ppo.obs_clip;
  return s;
}

UpdateLog Trainer::step() {
  UpdateLog log;
  log.update = update_;
  log.lr = cosine_lr(options_.ppo.lr, options_.ppo.lr_final, global_step_, options_.ppo.total_steps);

  const long episodes_before = episodes_;
  const std::size_t incidents_before = incidents_.size();
  std::vector<double> ep_returns;
  std::vector<double> ep_lengths;

  Rollout& ro = *rollout_;
  const PpoConfig& c = options_.ppo;
  const int E = c.n_envs;
  const int T = c.traj_length;
  const int channels = c.n_f + 1;
  const int beams = ro.F - RacingEnv::kProprio;

  for (int e = 0; e < E; ++e) {
    for (int j = 0; j <= ro.P; ++j) std::memcpy(ro.frame(e, j), histories_[e].frame_at(ro.P - j), sizeof(float) * ro.F);
  }
  std::vector<long> current_start(E, 0);
  std::vector<float> lidar(static_cast<std::size_t>(E) * beams * channels);
  std::vector<float> proprio(static_cast<std::size_t>(E) * RacingEnv::kProprio * channels);
  ResidualNetwork<float>::Output out;
  std::vector<Action> env_action(E);
  std::vector<StepResult> results(E);
  std::vector<EpisodeRecord> finished(E);
  std::vector<std::string> panic(E);

  auto forward_current = [&] {
    for (int e = 0; e < E; ++e) {
      const auto frames = histories_[e].stacked();
      stack_frames(frames, beams, RacingEnv::kProprio, lidar.data() + static_cast<std::size_t>(e) * beams * channels,
                   proprio.data() + static_cast<std::size_t>(e) * RacingEnv::kProprio * channels);
    }
    net_->forward(lidar.data(), proprio.data(), E, out, false);
  };

  double reward_sum = 0.0;
  for (int t = 0; t < T; ++t) {
    forward_current();
    const Action sigma{std::exp(static_cast<double>(net_->log_sigma(0))),
                       std::exp(static_cast<double>(net_->log_sigma(1)))};
    for (int e = 0; e < E; ++e) {
      const std::size_t i = static_cast<std::size_t>(e) * T + t;
      const Action base = envs_[e]->base_action();
      const Action mu_r{static_cast<double>(out.mu(0, e)), static_cast<double>(out.mu(1, e))};
      if (c.fusion == FusionKind::Truncated) {
        const FusedDistribution dist = fuse(base, mu_r, sigma, c.alpha);
        const Action a = dist.sample(policy_rngs_[e]);
        ro.action[i] = a;
        ro.logp[i] = dist.log_prob(a);
        env_action[e] = a;
      } else {
        const ClippedSample s = clipped_sum_policy(base, mu_r, sigma, policy_rngs_[e], c.alpha);
        ro.action[i] = s.unclipped;
        const Action mu{base[0] + c.alpha[0] * mu_r[0], base[1] + c.alpha[1] * mu_r[1]};
        ro.logp[i] = fused_log_prob(FusionKind::ClippedSum, mu, sigma, s.unclipped);
        env_action[e] = s.action;
      }
      ro.base[i] = base;
      ro.value[i] = out.value(0, e);
      ro.episode_start[i] = current_start[e];
    }

    pool_->run(E, [&](int e) {
      panic[e].clear();
      try {
        results[e] = envs_[e]->step(env_action[e]);
        if (results[e].done) {
          finished[e] = envs_[e]->record();
          envs_[e]->reset();
        }
      } catch (const std::exception& ex) {
        panic[e] = ex.what();
        results[e] = StepResult{};
        results[e].done = true;
        finished[e] = envs_[e]->record();
        envs_[e]->reset();
      }
    });

    for (int e = 0; e < E; ++e) {
      const std::size_t i = static_cast<std::size_t>(e) * T + t;
      if (!panic[e].empty()) {
        incidents_.push_back("update " + std::to_string(update_) + " step " + std::to_string(t) + " env " +
                             std::to_string(e) + ": " + panic[e]);
      }
      const StepResult& r = results[e];
      ro.raw_reward[i] = r.reward;
      reward_sum += r.reward;
      ro.reward[i] = reward_norm_(e, r.reward, r.done);
      ro.done[i] = r.done ? 1 : 0;
      if (r.done) {
        ++episodes_;
        const EpisodeRecord& rec = finished[e];
        ep_returns.push_back(rec.reward);
        ep_lengths.push_back(rec.steps);
        log.overtakes += rec.count(EventType::OvertakeSuccess);
        if (rec.end == EpisodeEnd::Crash) ++log.crashes;
      }
      push_frame(e, r.done);
      if (t + 1 < T) {
        std::memcpy(ro.frame(e, ro.P + t + 1), histories_[e].frame_at(0), sizeof(float) * ro.F);
        if (r.done) current_start[e] = ro.P + t + 1;
      }
    }
    global_step_ += E;
  }

  forward_current();
  ro.advantage.assign(ro.value.size(), 0.0);
  ro.returns.assign(ro.value.size(), 0.0);
  for (int e = 0; e < E; ++e) {
    const std::size_t off = static_cast<std::size_t>(e) * T;
    const GaeResult g = compute_gae(std::span(ro.reward).subspan(off, T), std::span(ro.value).subspan(off, T),
                                    std::span(ro.done).subspan(off, T), out.value(0, e), c.gamma, c.gae_lambda);
    std::copy(g.advantages.begin(), g.advantages.end(), ro.advantage.begin() + off);
    std::copy(g.returns.begin(), g.returns.end(), ro.returns.begin() + off);
  }

  log.mean_reward = reward_sum / static_cast<double>(static_cast<long>(T) * E);
  log.episodes = episodes_ - episodes_before;
  log.episode_return = std::numeric_limits<double>::quiet_NaN();
  log.episode_length = std::numeric_limits<double>::quiet_NaN();
  if (!ep_returns.empty()) {
    double sr = 0.0;
    double sl = 0.0;
    for (std::size_t k = 0; k < ep_returns.size(); ++k) {
      sr += ep_returns[k];
      sl += ep_lengths[k];
    }
    log.episode_return = sr / static_cast<double>(ep_returns.size());
    log.episode_length = sl / static_cast<double>(ep_returns.size());
  }

  update(log);
  log.steps = global_step_;
  log.incidents = static_cast<int>(incidents_.size() - incidents_before);
  log.sigma_speed = std::exp(static_cast<double>(net_->log_sigma(0)));
  log.sigma_steer = std::exp(static_cast<double>(net_->log_sigma(1)));
  ++update_;
  return log;
}

void Trainer::update(UpdateLog& log) {
  Rollout& ro = *rollout_;
  const PpoConfig& c = options_.ppo;
  const long n = c.rollout_size();
  const int mb = c.batch;
  const int channels = c.n_f + 1;
  const int beams = ro.F - RacingEnv::kProprio;
  const LossParams lp{c.clip, c.value_coef, c.entropy_coef, c.alpha, c.fusion};

  std::vector<float> lidar(static_cast<std::size_t>(mb) * beams * channels);
  std::vector<float> proprio(static_cast<std::size_t>(mb) * RacingEnv::kProprio * channels);
  std::vector<Action> base(mb), action(mb), noise(mb);
  std::vector<double> logp_old(mb), adv(mb), ret(mb);
  Eigen::MatrixXd mu_r(2, mb), value(1, mb);
  ResidualNetwork<float>::Output out;

  auto gather = [&](std::span<const long> idx) {
    ro.assemble(idx, c.n_f, c.n_s, lidar.data(), proprio.data());
    double mean = 0.0;
    for (int b = 0; b < mb; ++b) {
      const long i = idx[b];
      base[b] = ro.base[i];
      action[b] = ro.action[i];
      logp_old[b] = ro.logp[i];
      adv[b] = ro.advantage[i];
      ret[b] = ro.returns[i];
      mean += adv[b];
    }
    mean /= mb;
    double var = 0.0;
    for (int b = 0; b < mb; ++b) var += (adv[b] - mean) * (adv[b] - mean);
    const double sd = mb > 1 ? std::sqrt(var / (mb - 1)) : 0.0;
    for (int b = 0; b < mb; ++b) adv[b] = (adv[b] - mean) / (sd + 1e-8);
  };
  auto copy_outputs = [&] {
    for (int b = 0; b < mb; ++b) {
      mu_r(0, b) = out.mu(0, b);
      mu_r(1, b) = out.mu(1, b);
      value(0, b) = out.value(0, b);
    }
  };
  const Action log_sigma_now = [&] {
    return Action{static_cast<double>(net_->log_sigma(0)), static_cast<double>(net_->log_sigma(1))};
  }();

  std::vector<long> perm(n);
  for (long i = 0; i < n; ++i) perm[i] = i;

  double ratio_dev = 0.0;
  if (c.check_ratio_all) {
    for (long start = 0; start < n; start += mb) {
      gather(std::span<const long>(perm).subspan(start, mb));
      net_->forward(lidar.data(), proprio.data(), mb, out, false);
      copy_outputs();
      const LossOutput lo = ppo_loss(mu_r, value, log_sigma_now, {base, action, logp_old, adv, ret, {}}, lp);
      for (double r : lo.ratio) ratio_dev = std::max(ratio_dev, std::abs(r - 1.0));
    }
  }

  const std::vector<float> params_before(net_->params().data(), net_->params().data() + net_->size());
  double sum_pg = 0.0, sum_v = 0.0, sum_h = 0.0, sum_kl = 0.0, sum_cf = 0.0, sum_gn = 0.0;
  long minibatches = 0;
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    for (long i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(shuffle_rng_, i + 1)]);
    for (long start = 0; start < n; start += mb) {
      gather(std::span<const long>(perm).subspan(start, mb));
      for (int b = 0; b < mb; ++b) {
        for (int k = 0; k < 2; ++k) noise[b][k] = uniform(rpo_rng_, -c.rpo_alpha, c.rpo_alpha);
      }
      net_->forward(lidar.data(), proprio.data(), mb, out, true);
      copy_outputs();
      const Action log_sigma{static_cast<double>(net_->log_sigma(0)), static_cast<double>(net_->log_sigma(1))};
      if (minibatches == 0 && !c.check_ratio_all) {
        const LossOutput check = ppo_loss(mu_r, value, log_sigma, {base, action, logp_old, adv, ret, {}}, lp);
        for (double r : check.ratio) ratio_dev = std::max(ratio_dev, std::abs(r - 1.0));
      }
      const LossOutput lo = ppo_loss(mu_r, value, log_sigma, {base, action, logp_old, adv, ret, noise}, lp);
      if (!std::isfinite(lo.total) || !lo.d_mu.allFinite() || !lo.d_value.allFinite()) {
        std::copy(params_before.begin(), params_before.end(), net_->params().data());
        dump_diagnostics("non-finite loss", {{"epoch", epoch},
                                             {"minibatch_start", start},
                                             {"policy_loss", lo.policy_loss},
                                             {"value_loss", lo.value_loss},
                                             {"log_sigma", {log_sigma[0], log_sigma[1]}}});
        throw TrainingError("non-finite loss in update " + std::to_string(update_) + "; update aborted");
      }
      net_->zero_grad();
      net_->backward(lo.d_mu.cast<float>(), lo.d_value.cast<float>());
      auto& grads = net_->grads();
      const std::size_t ls = net_->log_sigma_offset();
      grads[ls] += static_cast<float>(lo.d_log_sigma[0]);
      grads[ls + 1] += static_cast<float>(lo.d_log_sigma[1]);
      const double gn = clip_grad_norm(std::span<float>(grads.data(), net_->size()), c.max_grad_norm);
      if (!std::isfinite(gn)) {
        std::copy(params_before.begin(), params_before.end(), net_->params().data());
        dump_diagnostics("non-finite gradient", {{"epoch", epoch}, {"minibatch_start", start}});
        throw TrainingError("non-finite gradient in update " + std::to_string(update_) + "; update aborted");
      }
      adam_.step(std::span<float>(net_->params().data(), net_->size()),
                 std::span<const float>(grads.data(), net_->size()), log.lr);
      sum_pg += lo.policy_loss;
      sum_v += lo.value_loss;
      sum_h += lo.entropy;
      sum_kl += lo.approx_kl;
      sum_cf += lo.clip_fraction;
      sum_gn += gn;
      ++minibatches;
    }
  }
  const double m = static_cast<double>(minibatches);
  log.policy_loss = sum_pg / m;
  log.value_loss = sum_v / m;
  log.entropy = sum_h / m;
  log.approx_kl = sum_kl / m;
  log.clip_fraction = sum_cf / m;
  log.grad_norm = sum_gn / m;
  log.ratio_deviation = ratio_dev;
}

void Trainer::dump_diagnostics(const std::string& what, const json& extra) const {
  if (options_.diagnostics_dir.empty()) return;
  std::filesystem::create_directories(options_.diagnostics_dir);
  const auto path = options_.diagnostics_dir / ("diagnostic-update-" + std::to_string(update_) + ".json");
  json j = {{"what", what},
            {"update", update_},
            {"global_step", global_step_},
            {"detail", extra},
            {"obs_stats", obs_stats_.to_json()},
            {"reward_norm", reward_norm_.to_json()}};
  std::ofstream(path) << j.dump(2) << '\n';
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  json h;
  h["spec"] = options_.ppo.network.to_json();
  h["ppo"] = options_.ppo.to_json();
  h["seed"] = options_.seed;
  h["track_names"] = options_.track_names;
  h["update"] = update_;
  h["global_step"] = global_step_;
  h["episodes"] = episodes_;
  h["incidents"] = incidents_;
  h["obs_stats"] = obs_stats_.to_json();
  h["reward_norm"] = reward_norm_.to_json();
  h["adam_steps"] = adam_.steps();
  h["rpo_rng"] = rng_state_string(rpo_rng_);
  h["shuffle_rng"] = rng_state_string(shuffle_rng_);
  json envs = json::array();
  json rngs = json::array();
  json hist = json::array();
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    envs.push_back(envs_[e]->save_state());
    rngs.push_back(rng_state_string(policy_rngs_[e]));
    hist.push_back(histories_[e].to_json_meta());
  }
  h["envs"] = envs;
  h["policy_rngs"] = rngs;
  h["histories"] = hist;

  Blobs blobs;
  blobs.emplace_back("params", std::vector<float>(net_->params().data(), net_->params().data() + net_->size()));
  blobs.emplace_back("adam_m", adam_.m());
  blobs.emplace_back("adam_v", adam_.v());
  for (std::size_t e = 0; e < histories_.size(); ++e) {
    blobs.emplace_back("history_" + std::to_string(e), histories_[e].export_frames());
  }
  write_checkpoint_file(path, std::move(h), blobs);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const CheckpointFile f = read_checkpoint_file(path);
  const json& h = f.header;
  if (h.at("ppo") != options_.ppo.to_json()) {
    throw std::runtime_error("checkpoint " + path.string() + " was written with a different training config");
  }
  if (h.at("seed").get<std::uint64_t>() != options_.seed ||
      h.at("track_names").get<std::vector<std::string>>() != options_.track_names) {
    throw std::runtime_error("checkpoint " + path.string() + " was written with a different seed or track set");
  }
  const auto& params = f.blobs.at("params");
  if (params.size() != net_->size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(params.size()) + " parameters; the network has " +
                             std::to_string(net_->size()));
  }
  std::copy(params.begin(), params.end(), net_->params().data());
  adam_.m() = f.blobs.at("adam_m");
  adam_.v() = f.blobs.at("adam_v");
  adam_.set_steps(h.at("adam_steps"));
  update_ = h.at("update");
  global_step_ = h.at("global_step");
  episodes_ = h.at("episodes");
  incidents_ = h.at("incidents").get<std::vector<std::string>>();
  obs_stats_ = RunningMeanStd::from_json(h.at("obs_stats"));
  reward_norm_.from_json(h.at("reward_norm"));
  rng_restore(rpo_rng_, h.at("rpo_rng"));
  rng_restore(shuffle_rng_, h.at("shuffle_rng"));
  if (h.at("envs").size() != envs_.size()) throw std::runtime_error("checkpoint env count mismatch");
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    envs_[e]->load_state(h.at("envs")[e]);
    rng_restore(policy_rngs_[e], h.at("policy_rngs")[e]);
    histories_[e].import_frames(h.at("histories")[e], f.blobs.at("history_" + std::to_string(e)));
  }
}

}  // namespace racemop
