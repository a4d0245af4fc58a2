#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "racemop/config.hpp"
#include "racemop/evaluation.hpp"
#include "racemop/fusion.hpp"
#include "racemop/ppo.hpp"
#include "racemop/rng.hpp"
#include "test_util.hpp"

namespace racemop {
namespace {

// Direct discounted sums, restarted at every episode boundary.
std::vector<double> brute_force_advantages(const std::vector<double>& r, const std::vector<double>& v,
                                           const std::vector<std::uint8_t>& done, double bootstrap, double gamma,
                                           double lambda) {
  const std::size_t n = r.size();
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double weight = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      const double next = k + 1 < n ? v[k + 1] : bootstrap;
      const double delta = r[k] + gamma * next * (done[k] ? 0.0 : 1.0) - v[k];
      adv[t] += weight * delta;
      if (done[k]) break;
      weight *= gamma * lambda;
    }
  }
  return adv;
}

TEST(Gae, SingleTerminalStep) {
  const std::vector<double> r{1.0}, v{0.0};
  const std::vector<std::uint8_t> d{1};
  const GaeResult g = compute_gae(r, v, d, 0.0, 0.99, 0.95);
  EXPECT_DOUBLE_EQ(g.advantages[0], 1.0);
  EXPECT_DOUBLE_EQ(g.returns[0], 1.0);
}

TEST(Gae, LambdaZeroIsTdResidual) {
  Rng rng(1);
  std::vector<double> r(20), v(20);
  std::vector<std::uint8_t> d(20);
  for (int t = 0; t < 20; ++t) {
    r[t] = uniform(rng, -1, 1);
    v[t] = uniform(rng, -1, 1);
    d[t] = uniform01(rng) < 0.2;
  }
  const double boot = 0.7, gamma = 0.9;
  const GaeResult g = compute_gae(r, v, d, boot, gamma, 0.0);
  for (int t = 0; t < 20; ++t) {
    const double next = t + 1 < 20 ? v[t + 1] : boot;
    EXPECT_DOUBLE_EQ(g.advantages[t], r[t] + gamma * next * (1 - d[t]) - v[t]);
    EXPECT_DOUBLE_EQ(g.returns[t], g.advantages[t] + v[t]);
  }
}

TEST(Gae, MatchesBruteForceOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 50;
    std::vector<double> r(n), v(n);
    std::vector<std::uint8_t> d(n);
    for (int t = 0; t < n; ++t) {
      r[t] = uniform(rng, -2, 2);
      v[t] = uniform(rng, -2, 2);
      d[t] = uniform01(rng) < 0.1;
    }
    const double boot = uniform(rng, -2, 2), gamma = uniform(rng, 0.8, 1.0), lambda = uniform(rng, 0.0, 1.0);
    const GaeResult g = compute_gae(r, v, d, boot, gamma, lambda);
    const auto oracle = brute_force_advantages(r, v, d, boot, gamma, lambda);
    for (int t = 0; t < n; ++t) ASSERT_NEAR(g.advantages[t], oracle[t], 1e-10);
  }
}

TEST(Gae, LengthMismatchThrows) {
  const std::vector<double> r{1.0, 2.0}, v{0.0};
  const std::vector<std::uint8_t> d{0, 0};
  EXPECT_THROW(compute_gae(r, v, d, 0.0, 0.99, 0.95), std::invalid_argument);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-4, 0.0, 0, 2'000'000), 1e-4);
  EXPECT_LE(cosine_lr(1e-4, 0.0, 2'000'000, 2'000'000), 1e-6);
  EXPECT_NEAR(cosine_lr(1e-4, 0.0, 1'000'000, 2'000'000), 5e-5, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(1e-4, 1e-6, 5'000'000, 2'000'000), 1e-6);
  double prev = 1.0;
  for (long s = 0; s <= 2'000'000; s += 10'000) {
    const double lr = cosine_lr(1e-4, 0.0, s, 2'000'000);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(ClipGradNorm, ScalesDownOnlyWhenNeeded) {
  std::vector<float> g{3.0f, 4.0f};
  EXPECT_NEAR(clip_grad_norm(g, 1.0), 5.0, 1e-6);
  EXPECT_LE(std::hypot(g[0], g[1]), 1.0 + 1e-6);
  EXPECT_NEAR(g[0] / g[1], 0.75, 1e-6);
  std::vector<float> small{0.1f, 0.2f};
  clip_grad_norm(small, 1.0);
  EXPECT_EQ(small, (std::vector<float>{0.1f, 0.2f}));
  Rng rng(3);
  std::vector<float> big(1000);
  for (auto& x : big) x = static_cast<float>(uniform(rng, -10, 10));
  clip_grad_norm(big, 1.0);
  double n = 0;
  for (float x : big) n += static_cast<double>(x) * x;
  EXPECT_LE(std::sqrt(n), 1.0 + 1e-6);
}

TEST(Adam, MatchesReferenceUpdate) {
  Adam adam(2, 0.9, 0.999, 1e-5);
  std::vector<float> p{1.0f, -2.0f};
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (int t = 1; t <= 5; ++t) {
    const std::vector<float> g{static_cast<float>(0.5 * t), static_cast<float>(-1.0 / t)};
    adam.step(p, g, 1e-2);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 1e-2 * mh / (std::sqrt(vh) + 1e-5);
    }
  }
  EXPECT_NEAR(p[0], ref[0], 1e-6);
  EXPECT_NEAR(p[1], ref[1], 1e-6);
  EXPECT_EQ(adam.steps(), 5);
}

TEST(RewardNormalizer, ConstantStreamConvergesAndKeepsSign) {
  RewardNormalizer norm(1, 0.99);
  double last = 0.0, before = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const bool done = i % 500 == 499;
    const double s = norm(0, 1.0, done);
    ASSERT_GT(s, 0.0);
    if (i == 18999) before = s;
    last = s;
  }
  EXPECT_NEAR(last, before, 0.01 * before);
  RewardNormalizer mixed(2, 0.99);
  Rng rng(4);
  for (int i = 0; i < 5000; ++i) {
    const double r = uniform(rng, -3, 3);
    const double s = mixed(i % 2, r, false);
    ASSERT_TRUE((r > 0 && s > 0) || (r < 0 && s < 0) || r == 0);
  }
}

TEST(RewardNormalizer, VarianceEstimateWithinFivePercent) {
  RewardNormalizer norm(1, 0.99);
  Rng rng(5);
  const double sigma = 1.7;
  for (int i = 0; i < 10000; ++i) norm(0, 0.4 + sigma * standard_normal(rng), true);
  EXPECT_NEAR(norm.variance(), sigma * sigma, 0.05 * sigma * sigma);
}

struct LossCase {
  Eigen::MatrixXd mu, value;
  Action log_sigma;
  std::vector<Action> base, action, perturb;
  std::vector<double> logp_old, adv, ret;
  LossBatch batch() const { return {base, action, logp_old, adv, ret, perturb}; }
};

LossCase random_case(Rng& rng, int n, FusionKind kind, const LossParams& p) {
  LossCase c;
  c.mu.resize(2, n);
  c.value.resize(1, n);
  c.log_sigma = {uniform(rng, -1.5, 0), uniform(rng, -1.5, 0)};
  for (int b = 0; b < n; ++b) {
    c.mu(0, b) = uniform(rng, -0.9, 0.9);
    c.mu(1, b) = uniform(rng, -0.9, 0.9);
    c.value(0, b) = uniform(rng, -1, 1);
    c.base.push_back({uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8)});
    c.perturb.push_back({uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05)});
    const Action mu{c.base[b][0] + p.alpha[0] * c.mu(0, b), c.base[b][1] + p.alpha[1] * c.mu(1, b)};
    const Action sigma{std::exp(c.log_sigma[0]), std::exp(c.log_sigma[1])};
    Action a;
    if (kind == FusionKind::Truncated) {
      a = FusedDistribution(mu, sigma).sample(rng);
    } else {
      a = {mu[0] + sigma[0] * standard_normal(rng), mu[1] + sigma[1] * standard_normal(rng)};
    }
    c.action.push_back(a);
    // Old policy slightly off so both clip branches occur.
    c.logp_old.push_back(fused_log_prob(kind, mu, sigma, a) + uniform(rng, -0.3, 0.3));
    c.adv.push_back(uniform(rng, -2, 2));
    c.ret.push_back(uniform(rng, -1, 1));
  }
  return c;
}

void check_loss_gradients(FusionKind kind, double entropy_coef) {
  LossParams p;
  p.fusion = kind;
  p.entropy_coef = entropy_coef;
  Rng rng(kind == FusionKind::Truncated ? 6 : 7);
  for (int trial = 0; trial < 20; ++trial) {
    LossCase c = random_case(rng, 16, kind, p);
    const LossOutput out = ppo_loss(c.mu, c.value, c.log_sigma, c.batch(), p);
    const double h = 1e-6;
    auto total = [&]() { return ppo_loss(c.mu, c.value, c.log_sigma, c.batch(), p).total; };
    auto check = [&](double& x, double analytic) {
      const double keep = x;
      x = keep + h;
      const double up = total();
      x = keep - h;
      const double down = total();
      x = keep;
      const double fd = (up - down) / (2 * h);
      EXPECT_LE(std::abs(analytic - fd), 1e-4 * std::max({std::abs(fd), std::abs(analytic), 1e-3}));
    };
    for (int b = 0; b < 16; ++b) {
      // Skip samples sitting on the clip boundary, where the loss has a kink.
      if (std::abs(out.ratio[b] - 1.0 - p.clip) < 1e-4 || std::abs(out.ratio[b] - 1.0 + p.clip) < 1e-4) continue;
      check(c.mu(0, b), out.d_mu(0, b));
      check(c.mu(1, b), out.d_mu(1, b));
      check(c.value(0, b), out.d_value(0, b));
    }
    check(c.log_sigma[0], out.d_log_sigma[0]);
    check(c.log_sigma[1], out.d_log_sigma[1]);
  }
}

TEST(PpoLoss, GradientsMatchFiniteDifferencesTruncated) { check_loss_gradients(FusionKind::Truncated, 0.0); }
TEST(PpoLoss, GradientsMatchFiniteDifferencesClipped) { check_loss_gradients(FusionKind::ClippedSum, 0.0); }
TEST(PpoLoss, GradientsMatchFiniteDifferencesWithEntropy) { check_loss_gradients(FusionKind::Truncated, 0.01); }

TEST(PpoLoss, ZeroAdvantageOnlyTrainsValue) {
  LossParams p;
  Rng rng(8);
  LossCase c = random_case(rng, 32, FusionKind::Truncated, p);
  std::fill(c.adv.begin(), c.adv.end(), 0.0);
  const LossOutput out = ppo_loss(c.mu, c.value, c.log_sigma, c.batch(), p);
  EXPECT_EQ(out.policy_loss, 0.0);
  EXPECT_TRUE((out.d_mu.array() == 0.0).all());
  EXPECT_EQ(out.d_log_sigma, (Action{0.0, 0.0}));
  EXPECT_GT(out.d_value.cwiseAbs().maxCoeff(), 0.0);
  double vl = 0;
  for (int b = 0; b < 32; ++b) vl += std::pow(c.value(0, b) - c.ret[b], 2);
  EXPECT_NEAR(out.value_loss, vl / 32, 1e-12);
}

TEST(PpoLoss, ClippedBranchHasZeroGradient) {
  LossParams p;
  Rng rng(9);
  LossCase c = random_case(rng, 8, FusionKind::Truncated, p);
  c.perturb.clear();
  const Action sigma{std::exp(c.log_sigma[0]), std::exp(c.log_sigma[1])};
  for (int b = 0; b < 8; ++b) {
    const Action mu{c.base[b][0] + 0.5 * c.mu(0, b), c.base[b][1] + 0.5 * c.mu(1, b)};
    const double lp = fused_log_prob(FusionKind::Truncated, mu, sigma, c.action[b]);
    // Even samples: ratio 1.5 with positive advantage. Odd: ratio 0.5 with negative.
    c.logp_old[b] = lp - std::log(b % 2 ? 0.5 : 1.5);
    c.adv[b] = b % 2 ? -1.0 : 1.0;
  }
  const LossOutput out = ppo_loss(c.mu, c.value, c.log_sigma, c.batch(), p);
  EXPECT_TRUE((out.d_mu.array() == 0.0).all());
  EXPECT_EQ(out.d_log_sigma, (Action{0.0, 0.0}));
  EXPECT_DOUBLE_EQ(out.clip_fraction, 1.0);
}

TEST(PpoLoss, OnPolicyRatioIsOne) {
  LossParams p;
  Rng rng(10);
  LossCase c = random_case(rng, 64, FusionKind::Truncated, p);
  c.perturb.clear();
  const Action sigma{std::exp(c.log_sigma[0]), std::exp(c.log_sigma[1])};
  for (int b = 0; b < 64; ++b) {
    const Action mu{c.base[b][0] + 0.5 * c.mu(0, b), c.base[b][1] + 0.5 * c.mu(1, b)};
    c.logp_old[b] = fused_log_prob(FusionKind::Truncated, mu, sigma, c.action[b]);
  }
  const LossOutput out = ppo_loss(c.mu, c.value, c.log_sigma, c.batch(), p);
  for (double r : out.ratio) EXPECT_NEAR(r, 1.0, 1e-12);
  EXPECT_NEAR(out.approx_kl, 0.0, 1e-12);
}

// One-dimensional Gaussian bandit: a ~ N(tanh(theta), exp(log_sigma)) truncated
// to [-1, 1], reward -(a - a*)^2. The expected reward is maximized by a mean at
// a* with vanishing scale, so tanh(theta) must approach a*.
TEST(PpoLoss, GaussianBanditReachesOptimum) {
  const double target = 0.3;
  LossParams p;
  p.alpha = {1.0, 1.0};
  p.value_coef = 0.0;
  double theta = -0.5, log_sigma = -0.5;
  const double fixed_log_sigma = -1.0;
  Adam adam(2, 0.9, 0.999, 1e-8);
  Rng rng(11);
  const int n = 256;
  for (int update = 0; update < 500; ++update) {
    const Action sigma{std::exp(log_sigma), std::exp(fixed_log_sigma)};
    const FusedDistribution dist({std::tanh(theta), 0.0}, sigma);
    std::vector<Action> base(n, Action{0.0, 0.0}), actions(n);
    std::vector<double> logp(n), adv(n), ret(n, 0.0);
    for (int b = 0; b < n; ++b) {
      actions[b] = dist.sample(rng);
      logp[b] = dist.log_prob(actions[b]);
      adv[b] = -std::pow(actions[b][0] - target, 2);
    }
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
    double var = 0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / (n - 1)) + 1e-8;
    for (double& a : adv) a = (a - mean) / sd;
    for (int epoch = 0; epoch < 4; ++epoch) {
      Eigen::MatrixXd mu(2, n), value = Eigen::MatrixXd::Zero(1, n);
      mu.row(0).setConstant(std::tanh(theta));
      mu.row(1).setZero();
      const LossBatch batch{base, actions, logp, adv, ret, {}};
      const LossOutput out = ppo_loss(mu, value, {log_sigma, fixed_log_sigma}, batch, p);
      const float g[2] = {static_cast<float>(out.d_mu.row(0).sum() * (1 - std::pow(std::tanh(theta), 2))),
                          static_cast<float>(out.d_log_sigma[0])};
      float params[2] = {static_cast<float>(theta), static_cast<float>(log_sigma)};
      adam.step(params, g, cosine_lr(0.02, 0.0, update, 500));
      theta = params[0];
      log_sigma = params[1];
    }
  }
  EXPECT_NEAR(std::tanh(theta), target, 1e-2);
  EXPECT_LT(std::exp(log_sigma), 0.1);
}

TEST(WorkerPool, RunsEveryIndexOnce) {
  for (int threads : {1, 3}) {
    WorkerPool pool(threads);
    std::vector<int> hits(100, 0);
    for (int rep = 0; rep < 5; ++rep) pool.run(100, [&](int i) { ++hits[i]; });
    for (int h : hits) EXPECT_EQ(h, 5);
  }
}

TEST(PpoConfig, ValidationAndPaperScale) {
  PpoConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch = 500;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PpoConfig{};
  c.clip = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PpoConfig{};
  c.apply_paper_scale();
  EXPECT_EQ(c.n_envs, 256);
  EXPECT_EQ(c.total_steps, 30'000'000);
  EXPECT_EQ(parse_fusion("clipped"), FusionKind::ClippedSum);
  EXPECT_EQ(parse_fusion(to_string(FusionKind::Truncated)), FusionKind::Truncated);
}

// Small trainer setup for the closed-loop tests.
TrainerOptions small_options(std::uint64_t seed) {
  TrainerOptions o;
  o.tracks.push_back(std::make_shared<TrackAssets>(load_track(testing::fixture("oval")), o.vehicle, LidarConfig{}));
  o.track_names = {"oval"};
  o.env.n_opponents = 3;
  o.ppo.n_envs = 2;
  o.ppo.traj_length = 64;
  o.ppo.batch = 64;
  o.ppo.epochs = 2;
  o.ppo.total_steps = 64 * 2 * 4;
  o.ppo.check_ratio_all = true;
  o.ppo.network.conv = {{16, 8, 8}, {16, 4, 4}};
  o.ppo.network.projection = 16;
  o.ppo.network.hidden = 32;
  o.seed = seed;
  return o;
}

TEST(Trainer, IdenticalSeedsGiveIdenticalLogs) {
  Trainer a(small_options(3)), b(small_options(3)), c(small_options(4));
  bool differs = false;
  for (int u = 0; u < 3; ++u) {
    const std::string ra = a.step().csv_row();
    EXPECT_EQ(ra, b.step().csv_row());
    differs |= ra != c.step().csv_row();
  }
  EXPECT_TRUE(differs);
}

TEST(Trainer, FirstEpochIsOnPolicyAndUpdatesStayBounded) {
  Trainer t(small_options(5));
  while (!t.finished()) {
    const UpdateLog log = t.step();
    EXPECT_LE(log.ratio_deviation, 1e-6);
    EXPECT_TRUE(std::isfinite(log.approx_kl));
    EXPECT_LT(log.approx_kl, 0.2);
    EXPECT_TRUE(std::isfinite(log.policy_loss) && std::isfinite(log.value_loss));
  }
  EXPECT_EQ(t.global_step(), 64 * 2 * 4);
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const auto path = std::filesystem::temp_directory_path() / "racemop_resume_test.bin";
  Trainer a(small_options(6));
  a.step();
  a.save_checkpoint(path);
  const std::string next_a = a.step().csv_row();
  const std::string after_a = a.step().csv_row();

  Trainer b(small_options(6));
  b.load_checkpoint(path);
  EXPECT_EQ(b.update_index(), 1);
  EXPECT_EQ(b.step().csv_row(), next_a);
  EXPECT_EQ(b.step().csv_row(), after_a);

  auto other = small_options(7);
  Trainer c(other);
  EXPECT_THROW(c.load_checkpoint(path), std::exception);
  std::filesystem::remove(path);
}

TEST(Trainer, PolicyCheckpointValidatesParameterCount) {
  const auto path = std::filesystem::temp_directory_path() / "racemop_policy_test.bin";
  Trainer t(small_options(8));
  t.save_checkpoint(path);
  const PolicySnapshot s = load_policy(path);
  EXPECT_EQ(s.params.size(), t.network().size());
  const NetworkSpec full;
  try {
    load_policy(path, &full);
    FAIL() << "expected a parameter-count error";
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(t.network().size())), std::string::npos) << msg;
    EXPECT_NE(msg.find("828293"), std::string::npos) << msg;
  }
  std::filesystem::remove(path);
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnostics) {
  auto o = small_options(9);
  o.diagnostics_dir = std::filesystem::temp_directory_path() / "racemop_diag_test";
  std::filesystem::remove_all(o.diagnostics_dir);
  Trainer t(o);
  auto& net = t.network();
  net.params()[net.log_sigma_offset() - 1] = std::numeric_limits<float>::quiet_NaN();  // value head bias
  EXPECT_THROW(t.step(), TrainingError);
  EXPECT_TRUE(std::filesystem::exists(o.diagnostics_dir));
  EXPECT_FALSE(std::filesystem::is_empty(o.diagnostics_dir));
  std::filesystem::remove_all(o.diagnostics_dir);
}

// A loop with a deliberately slow base planner: the residual can only earn
// more progress reward by adding speed, so the deterministic policy must cover
// more ground after training.
TEST(Trainer, LearnsToSpeedUpOverSlowBasePlanner) {
  TrainerOptions o;
  o.apf.k_g = 0.15;
  o.apf.v_floor = 1.5;
  o.tracks.push_back(std::make_shared<TrackAssets>(testing::stadium(60.0, 10.0, 3.0, 0.25), o.vehicle, LidarConfig{}));
  o.track_names = {"corridor"};
  o.env.n_opponents = 0;
  o.env.max_steps = 400;
  o.env.w_action = 0.0;
  o.ppo.n_envs = 4;
  o.ppo.traj_length = 256;
  o.ppo.batch = 256;
  o.ppo.epochs = 4;
  o.ppo.lr = 3e-3;
  o.ppo.total_steps = 256 * 4 * 30;
  o.ppo.network.conv = {{16, 8, 8}, {16, 4, 4}};
  o.ppo.network.projection = 16;
  o.ppo.network.hidden = 64;
  o.seed = 10;

  EvalOptions eval;
  eval.tracks = o.tracks;
  eval.track_names = o.track_names;
  eval.env = o.env;
  eval.vehicle = o.vehicle;
  eval.apf = o.apf;
  eval.episodes = 4;
  auto mean_distance = [&](const PolicySnapshot& snap) {
    ResidualDriver driver(snap);
    double d = 0.0;
    const auto records = run_episodes(driver, eval);
    for (const auto& r : records[0]) d += r.distance;
    return d / eval.episodes;
  };

  Trainer t(o);
  const double before = mean_distance(t.snapshot());
  while (!t.finished()) t.step();
  const double after = mean_distance(t.snapshot());
  EXPECT_GT(after, 1.15 * before) << "before " << before << " after " << after;
}

}  // namespace
}  // namespace racemop
