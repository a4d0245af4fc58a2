#include "racemop/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "racemop/fusion.hpp"

namespace racemop {

ResidualDriver::ResidualDriver(PolicySnapshot snapshot, bool stochastic, std::uint64_t seed)
    : snap_(std::move(snapshot)), net_(snap_.spec), stochastic_(stochastic), rng_(seed), name_("racemop") {
  if (snap_.params.size() != net_.size()) {
    throw std::invalid_argument("ResidualDriver: snapshot holds " + std::to_string(snap_.params.size()) +
                                " parameters, network needs " + std::to_string(net_.size()));
  }
  std::copy(snap_.params.begin(), snap_.params.end(), net_.params().data());
  const int frame = static_cast<int>(snap_.obs_stats.dim());
  history_ = std::make_unique<FrameHistory>(frame, snap_.n_f, snap_.n_s);
  raw_.resize(frame);
  frame_.resize(frame);
  const int channels = snap_.n_f + 1;
  lidar_.resize(static_cast<std::size_t>(snap_.spec.in_length) * channels);
  proprio_.resize(static_cast<std::size_t>(RacingEnv::kProprio) * channels);
}

void ResidualDriver::begin_episode(const RacingEnv& env) {
  if (env.frame_size() != static_cast<int>(raw_.size())) {
    throw std::invalid_argument("ResidualDriver: observation frame size " + std::to_string(env.frame_size()) +
                                " does not match the checkpoint's " + std::to_string(raw_.size()));
  }
  fresh_ = true;
}

void ResidualDriver::observe(const RacingEnv& env, bool first) {
  env.observation_frame(raw_.data());
  snap_.obs_stats.normalize(raw_.data(), frame_.data(), snap_.obs_clip);
  if (first) {
    history_->reset(frame_.data());
  } else {
    history_->push(frame_.data());
  }
}

Action ResidualDriver::act(const RacingEnv& env) {
  observe(env, fresh_);
  fresh_ = false;
  const auto frames = history_->stacked();
  stack_frames(frames, snap_.spec.in_length, RacingEnv::kProprio, lidar_.data(), proprio_.data());
  net_.forward(lidar_.data(), proprio_.data(), 1, out_, false);
  const Action base = env.base_action();
  const Action mu_r{static_cast<double>(out_.mu(0, 0)), static_cast<double>(out_.mu(1, 0))};
  const Action sigma{std::exp(static_cast<double>(net_.log_sigma(0))), std::exp(static_cast<double>(net_.log_sigma(1)))};
  if (stochastic_) {
    if (snap_.fusion == FusionKind::Truncated) return fuse(base, mu_r, sigma, snap_.alpha).sample(rng_);
    return clipped_sum_policy(base, mu_r, sigma, rng_, snap_.alpha).action;
  }
  // Both fusions share the mode clamp(a_B + alpha mu_R).
  return fuse(base, mu_r, sigma, snap_.alpha).mode();
}

std::vector<std::vector<EpisodeRecord>> run_episodes(Driver& driver, const EvalOptions& o) {
  if (o.tracks.empty()) throw std::invalid_argument("run_episodes: no tracks");
  if (o.episodes <= 0) throw std::invalid_argument("run_episodes: episodes must be positive");
  RacingEnv env(o.tracks, o.env, o.vehicle, o.apf, derive_seed(o.seed, "eval"));
  if (!o.trace_dir.empty()) std::filesystem::create_directories(o.trace_dir);

  std::vector<std::vector<EpisodeRecord>> out(o.tracks.size());
  for (std::size_t t = 0; t < o.tracks.size(); ++t) {
    const int n_starts = static_cast<int>(o.tracks[t]->starts.size());
    for (int i = 0; i < o.episodes; ++i) {
      ResetOptions r;
      r.track = static_cast<int>(t);
      r.start = i % n_starts;
      r.k_v = o.k_v;
      r.noise_seed = derive_seed(o.seed, "eval-noise", t * 100000 + static_cast<std::uint64_t>(i));
      env.reset(r);

      std::ofstream trace;
      if (!o.trace_dir.empty()) {
        const std::string name = t < o.track_names.size() ? o.track_names[t] : "track" + std::to_string(t);
        trace.open(o.trace_dir / (driver.name() + "_" + name + "_" + std::to_string(i) + ".jsonl"));
        env.set_trace(&trace);
      }
      driver.begin_episode(env);
      StepResult step;
      do {
        step = env.step(driver.act(env));
      } while (!step.done);
      env.set_trace(nullptr);
      out[t].push_back(env.record());
    }
  }
  return out;
}

EvalReport evaluate(Driver& driver, const EvalOptions& o) {
  const auto records = run_episodes(driver, o);
  EvalReport rep;
  rep.driver = driver.name();
  for (std::size_t t = 0; t < records.size(); ++t) {
    const std::string name = t < o.track_names.size() ? o.track_names[t] : "track" + std::to_string(t);
    rep.tracks.push_back(compute_metrics(records[t], name));
  }
  rep.all = aggregate_metrics(rep.tracks);
  return rep;
}

namespace {

std::string num(std::optional<double> v, int precision = 6) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, *v);
  return buf;
}

std::string pretty(std::optional<double> v, int decimals) {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, *v);
  return buf;
}

std::vector<const RaceMetrics*> rows(const EvalReport& r) {
  std::vector<const RaceMetrics*> out;
  for (const auto& m : r.tracks) out.push_back(&m);
  out.push_back(&r.all);
  return out;
}

}  // namespace

std::string metrics_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "track,episodes,laps,lap_time_s,crash_rate_pct,env_crashes_per_km,successes,overtake_crashes,"
        "env_crashes,lapsed,attempts,distance_km\n";
  for (const RaceMetrics* m : rows(report)) {
    os << m->name << ',' << m->episodes << ',' << m->laps << ',' << num(m->lap_time, 8) << ','
       << num(m->crash_rate, 8) << ',' << num(m->env_crashes_per_km, 8) << ',' << m->successes << ','
       << m->overtake_crashes << ',' << m->env_crashes << ',' << m->lapsed << ',' << m->attempts << ','
       << num(m->distance_km, 8) << '\n';
  }
  return os.str();
}

std::string metrics_table(const EvalReport& report) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-12s %8s %10s %9s %9s %7s %7s\n", "track", "I_T [s]", "I_C [%]", "I_E [1/km]",
                "succ", "crash", "env");
  os << "driver: " << report.driver << '\n' << buf;
  for (const RaceMetrics* m : rows(report)) {
    std::snprintf(buf, sizeof(buf), "%-12s %8s %10s %9s %9d %7d %7d\n", m->name.c_str(), pretty(m->lap_time, 2).c_str(),
                  pretty(m->crash_rate, 2).c_str(), pretty(m->env_crashes_per_km, 2).c_str(), m->successes,
                  m->overtake_crashes, m->env_crashes);
    os << buf;
  }
  return os.str();
}

namespace {

void check_paired(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("bench: no reports");
  for (const auto& r : reports) {
    if (r.tracks.size() != reports.front().tracks.size()) throw std::invalid_argument("bench: track sets differ");
  }
}

}  // namespace

std::string bench_csv(const std::vector<EvalReport>& reports) {
  check_paired(reports);
  std::ostringstream os;
  os << "track,driver,lap_time_s,crash_rate_pct,env_crashes_per_km,d_rel_lap_time_pct,d_rel_crash_rate_pct,"
        "d_rel_env_crashes_pct\n";
  const auto ref = rows(reports.front());
  for (std::size_t k = 0; k < ref.size(); ++k) {
    for (const auto& r : reports) {
      const RaceMetrics& m = *rows(r)[k];
      const RaceMetrics& a = *ref[k];
      os << m.name << ',' << r.driver << ',' << num(m.lap_time, 8) << ',' << num(m.crash_rate, 8) << ','
         << num(m.env_crashes_per_km, 8) << ',' << num(relative_delta(a.lap_time, m.lap_time), 8) << ','
         << num(relative_delta(a.crash_rate, m.crash_rate), 8) << ','
         << num(relative_delta(a.env_crashes_per_km, m.env_crashes_per_km), 8) << '\n';
    }
  }
  return os.str();
}

std::string bench_table(const std::vector<EvalReport>& reports) {
  check_paired(reports);
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-12s %-12s %8s %8s %9s %9s %9s %9s\n", "track", "driver", "I_T", "dI_T%", "I_C", "dI_C%",
                "I_E", "dI_E%");
  os << buf;
  const auto ref = rows(reports.front());
  for (std::size_t k = 0; k < ref.size(); ++k) {
    for (const auto& r : reports) {
      const RaceMetrics& m = *rows(r)[k];
      const RaceMetrics& a = *ref[k];
      std::snprintf(buf, sizeof(buf), "%-12s %-12s %8s %8s %9s %9s %9s %9s\n", m.name.c_str(), r.driver.c_str(),
                    pretty(m.lap_time, 2).c_str(), pretty(relative_delta(a.lap_time, m.lap_time), 2).c_str(),
                    pretty(m.crash_rate, 2).c_str(), pretty(relative_delta(a.crash_rate, m.crash_rate), 2).c_str(),
                    pretty(m.env_crashes_per_km, 2).c_str(),
                    pretty(relative_delta(a.env_crashes_per_km, m.env_crashes_per_km), 2).c_str());
      os << buf;
    }
  }
  return os.str();
}

std::vector<std::string> available_drivers() { return {"apf", "disparity", "racemop"}; }

std::unique_ptr<Driver> make_driver(const std::string& name, const DriverOptions& o) {
  if (name == "apf") return std::make_unique<ApfDriver>();
  if (name == "disparity") return std::make_unique<DisparityDriver>(o.disparity, o.vehicle);
  if (name == "racemop") {
    if (o.checkpoint.empty()) throw std::invalid_argument("driver 'racemop' needs a checkpoint");
    return std::make_unique<ResidualDriver>(load_policy(o.checkpoint, o.expected_spec), o.stochastic, o.seed);
  }
  std::string list;
  for (const auto& n : available_drivers()) list += (list.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown planner '" + name + "'; available: " + list);
}

}  // namespace racemop
