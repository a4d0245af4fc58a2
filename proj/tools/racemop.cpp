// racemop: train, evaluate, compare and export.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "racemop/config.hpp"
#include "racemop/evaluation.hpp"
#include "racemop/ppo.hpp"
#include "racemop/track.hpp"

namespace fs = std::filesystem;
using namespace racemop;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::string> tracks;
  int generate = -1;
  long long seed = -1;
  std::string out_dir = "runs/latest";
};

struct Setup {
  Config cfg;
  std::uint64_t seed = 1;
  std::vector<std::string> track_names;
  std::vector<Track> tracks;
  VehicleParams vehicle;
  LidarConfig lidar;
  ApfParams apf;
  EnvConfig env;
  fs::path out;
};

fs::path resolve_track(const std::string& arg) {
  fs::path p(arg);
  if (fs::exists(p)) return p;
  if (!p.has_extension()) {
    const fs::path fixture = fs::path(RACEMOP_DATA_DIR) / "tracks" / (arg + ".json");
    if (fs::exists(fixture)) return fixture;
  }
  return p;
}

Setup load_setup(const CommonFlags& f) {
  Setup s;
  if (!f.config_path.empty()) {
    if (!fs::exists(f.config_path)) throw UsageError("config file not found: " + f.config_path);
    s.cfg = Config::load(f.config_path);
  }
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    s.cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!f.tracks.empty()) {
    std::string list;
    for (const auto& t : f.tracks) list += (list.empty() ? "" : ", ") + t;
    s.cfg.set("tracks.files", "[" + list + "]");
  }
  if (f.generate >= 0) s.cfg.set("tracks.generate", std::to_string(f.generate));

  if (f.seed >= 0) {
    s.seed = static_cast<std::uint64_t>(f.seed);
  } else if (const char* env = std::getenv("RACEMOP_SEED")) {
    try {
      s.seed = std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("RACEMOP_SEED is not an unsigned integer: ") + env);
    }
  } else {
    s.seed = static_cast<std::uint64_t>(s.cfg.get_int("run.seed", 1));
  }
  s.cfg.set("run.seed", std::to_string(s.seed));

  s.vehicle = VehicleParams::from_config(s.cfg);
  s.lidar = LidarConfig::from_config(s.cfg);
  s.apf = ApfParams::from_config(s.cfg);
  s.env = EnvConfig::from_config(s.cfg);

  const auto files = s.cfg.get_strings("tracks.files", {"oval", "scurve"});
  std::vector<std::string> missing;
  std::vector<fs::path> paths;
  for (const auto& t : files) {
    const fs::path p = resolve_track(t);
    if (!fs::exists(p)) missing.push_back(p.string());
    paths.push_back(p);
  }
  if (!missing.empty()) {
    std::string msg = "missing track files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw UsageError(msg);
  }
  for (const auto& p : paths) {
    s.tracks.push_back(load_track(p, s.vehicle.width));
    s.track_names.push_back(p.stem().string());
  }
  const long long n_gen = s.cfg.get_int("tracks.generate", 0);
  const auto gen_seed = static_cast<std::uint64_t>(s.cfg.get_int("tracks.generate_seed", 1));
  for (long long i = 0; i < n_gen; ++i) {
    s.tracks.push_back(generate_track(derive_seed(gen_seed, "track", i), TrackGenParams{}, s.vehicle.width));
    s.track_names.push_back("proc" + std::to_string(i));
  }
  if (s.tracks.empty()) throw UsageError("no tracks given");
  s.out = f.out_dir;
  return s;
}

std::vector<TrackAssetsPtr> make_assets(const Setup& s) {
  std::vector<TrackAssetsPtr> out;
  for (const auto& t : s.tracks) out.push_back(std::make_shared<TrackAssets>(t, s.vehicle, s.lidar));
  return out;
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_manifest(const Setup& s, const std::string& command, int argc, char** argv, const json& extra = {}) {
  fs::create_directories(s.out);
  std::vector<std::string> args(argv, argv + argc);
  json m = {{"command", command},
            {"argv", args},
            {"code_version", RACEMOP_GIT_VERSION},
            {"seed", s.seed},
            {"config_hash", hex(s.cfg.hash())},
            {"config", s.cfg.dump()},
            {"tracks", s.track_names}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  std::ofstream(s.out / "manifest.json") << m.dump(2) << '\n';
  std::ofstream(s.out / "config.snapshot.toml") << s.cfg.dump();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

EvalOptions eval_options(const Setup& s, int episodes, double k_v) {
  EvalOptions o;
  o.tracks = make_assets(s);
  o.track_names = s.track_names;
  o.env = s.env;
  o.vehicle = s.vehicle;
  o.apf = s.apf;
  o.episodes = episodes;
  o.k_v = k_v;
  o.seed = s.seed;
  return o;
}

int cmd_train(const CommonFlags& f, bool paper_scale, const std::string& resume, int argc, char** argv) {
  Setup s = load_setup(f);
  if (paper_scale) s.cfg.set("ppo.paper_scale", "true");
  TrainerOptions o;
  o.ppo = PpoConfig::from_config(s.cfg);
  o.env = s.env;
  o.vehicle = s.vehicle;
  o.apf = s.apf;
  o.tracks = make_assets(s);
  o.track_names = s.track_names;
  o.seed = s.seed;
  o.diagnostics_dir = s.out / "diagnostics";
  write_manifest(s, "train", argc, argv, {{"ppo", o.ppo.to_json()}});

  Trainer trainer(o);
  const fs::path ckpt_dir = s.out / "checkpoints";
  fs::create_directories(ckpt_dir);
  const fs::path log_path = s.out / "train_log.csv";
  std::ofstream log;
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    // Keep the rows up to the checkpoint so the log matches an uninterrupted run.
    std::vector<std::string> kept;
    if (std::ifstream in(log_path); in) {
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (std::stol(line.substr(0, line.find(','))) < trainer.update_index()) kept.push_back(line);
      }
    }
    log.open(log_path, std::ios::trunc);
    log << UpdateLog::csv_header() << '\n';
    for (const auto& l : kept) log << l << '\n';
    std::cerr << "resumed at update " << trainer.update_index() << ", step " << trainer.global_step() << '\n';
  } else {
    log.open(log_path, std::ios::trunc);
    log << UpdateLog::csv_header() << '\n';
  }
  if (!log) throw std::runtime_error("cannot write " + log_path.string());

  const auto t0 = std::chrono::steady_clock::now();
  std::size_t incidents_seen = trainer.incidents().size();
  while (!trainer.finished()) {
    const UpdateLog row = trainer.step();
    log << row.csv_row() << '\n';
    log.flush();
    for (; incidents_seen < trainer.incidents().size(); ++incidents_seen) {
      std::cerr << "incident: " << trainer.incidents()[incidents_seen] << '\n';
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "update %ld  steps %ld  reward/step %.4f  return %.2f  kl %.4f  lr %.2e  %.0fs\n", row.update,
                 row.steps, row.mean_reward, row.episode_return, row.approx_kl, row.lr, elapsed);
    const int every = o.ppo.checkpoint_every;
    if (every > 0 && (row.update + 1) % every == 0) {
      trainer.save_checkpoint(ckpt_dir / ("update_" + std::to_string(row.update + 1) + ".bin"));
      trainer.save_checkpoint(ckpt_dir / "latest.bin");
    }
  }
  trainer.save_checkpoint(ckpt_dir / "final.bin");
  std::cerr << "wrote " << (ckpt_dir / "final.bin").string() << '\n';
  return 0;
}

std::unique_ptr<Driver> driver_for(const Setup& s, const std::string& name, const std::string& checkpoint,
                                   bool stochastic, const NetworkSpec& spec) {
  DriverOptions d;
  d.vehicle = s.vehicle;
  d.disparity = DisparityParams::from_config(s.cfg);
  d.checkpoint = checkpoint;
  d.expected_spec = &spec;
  d.stochastic = stochastic;
  d.seed = derive_seed(s.seed, "eval-policy");
  try {
    return make_driver(name, d);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

int cmd_eval(const CommonFlags& f, std::string planner, const std::string& checkpoint, int episodes, double k_v,
             bool stochastic, bool trace, int argc, char** argv) {
  Setup s = load_setup(f);
  if (planner.empty()) planner = checkpoint.empty() ? "apf" : "racemop";
  if (episodes <= 0) episodes = static_cast<int>(s.cfg.get_int("eval.episodes", 30));
  if (k_v <= 0.0) k_v = s.cfg.get_double("eval.k_v", 0.75);
  const NetworkSpec spec = PpoConfig::from_config(s.cfg).network;
  auto driver = driver_for(s, planner, checkpoint, stochastic, spec);
  write_manifest(s, "eval", argc, argv, {{"planner", planner}, {"checkpoint", checkpoint}, {"episodes", episodes}, {"k_v", k_v}});
  EvalOptions o = eval_options(s, episodes, k_v);
  if (trace) o.trace_dir = s.out / "trajectories";
  const EvalReport rep = evaluate(*driver, o);
  write_file(s.out / "metrics.csv", metrics_csv(rep));
  std::cout << metrics_table(rep);
  return 0;
}

int cmd_bench(const CommonFlags& f, const std::vector<std::string>& planners, const std::string& checkpoint,
              int episodes, double k_v, int argc, char** argv) {
  if (planners.size() < 2) throw UsageError("bench needs at least two --planner names");
  Setup s = load_setup(f);
  if (episodes <= 0) episodes = static_cast<int>(s.cfg.get_int("eval.episodes", 30));
  if (k_v <= 0.0) k_v = s.cfg.get_double("eval.k_v", 0.75);
  const NetworkSpec spec = PpoConfig::from_config(s.cfg).network;
  std::vector<std::unique_ptr<Driver>> drivers;
  for (const auto& p : planners) drivers.push_back(driver_for(s, p, checkpoint, false, spec));
  write_manifest(s, "bench", argc, argv, {{"planners", planners}, {"checkpoint", checkpoint}, {"episodes", episodes}, {"k_v", k_v}});
  const EvalOptions o = eval_options(s, episodes, k_v);
  std::vector<EvalReport> reports;
  for (std::size_t i = 0; i < drivers.size(); ++i) {
    reports.push_back(evaluate(*drivers[i], o));
    reports.back().driver = planners[i];
    write_file(s.out / ("metrics_" + std::to_string(i) + "_" + planners[i] + ".csv"), metrics_csv(reports.back()));
  }
  write_file(s.out / "bench.csv", bench_csv(reports));
  std::cout << bench_table(reports);
  return 0;
}

int cmd_export(const CommonFlags& f, const std::string& planner, const std::string& checkpoint, int episodes,
               double k_v, int argc, char** argv) {
  Setup s = load_setup(f);
  fs::create_directories(s.out / "tracks");
  const auto assets = make_assets(s);
  for (std::size_t i = 0; i < s.tracks.size(); ++i) {
    save_track(s.tracks[i], s.out / "tracks" / (s.track_names[i] + ".json"));
    const RacingLine& line = assets[i]->line;
    std::ofstream csv(s.out / "tracks" / (s.track_names[i] + "_line.csv"));
    csv << "s,x,y,curvature,speed\n";
    for (std::size_t k = 0; k < line.points.size(); ++k) {
      csv << line.arc_length[k] << ',' << line.points[k].x << ',' << line.points[k].y << ',' << line.curvature[k]
          << ',' << line.velocity[k] << '\n';
    }
  }
  if (episodes > 0) {
    if (k_v <= 0.0) k_v = s.cfg.get_double("eval.k_v", 0.75);
    const NetworkSpec spec = PpoConfig::from_config(s.cfg).network;
    auto driver = driver_for(s, planner.empty() ? (checkpoint.empty() ? "apf" : "racemop") : planner, checkpoint,
                             false, spec);
    EvalOptions o = eval_options(s, episodes, k_v);
    o.trace_dir = s.out / "trajectories";
    run_episodes(*driver, o);
  }
  write_manifest(s, "export", argc, argv, {{"episodes", episodes}});
  std::cerr << "exported to " << s.out.string() << '\n';
  return 0;
}

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("-c,--config", f.config_path, "Configuration file");
  app->add_option("--set", f.sets, "Override a config key, e.g. --set ppo.lr=3e-4");
  app->add_option("-t,--track", f.tracks, "Track file or fixture name (repeatable)");
  app->add_option("--generate", f.generate, "Number of procedural tracks to add");
  app->add_option("-s,--seed", f.seed, "Master seed (else RACEMOP_SEED, else run.seed, else 1)");
  app->add_option("-o,--out", f.out_dir, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual policy racing: training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(RACEMOP_GIT_VERSION));

  CommonFlags f;
  bool paper_scale = false;
  std::string resume;
  std::string checkpoint;
  std::string planner;
  std::vector<std::string> planners;
  int episodes = -1;
  double k_v = -1.0;
  bool stochastic = false;
  bool trace = false;

  auto* train = app.add_subcommand("train", "Train the residual policy with PPO");
  add_common(train, f);
  train->add_flag("--paper-scale", paper_scale, "256 environments and 30e6 steps");
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate one planner or a checkpoint");
  add_common(eval, f);
  eval->add_option("-p,--planner", planner, "apf | disparity | racemop");
  eval->add_option("--checkpoint", checkpoint, "Trained policy")->check(CLI::ExistingFile);
  eval->add_option("-n,--episodes", episodes, "Episodes per track");
  eval->add_option("--k-v", k_v, "Opponent speed gain");
  eval->add_flag("--stochastic", stochastic, "Sample actions instead of the mode");
  eval->add_flag("--trace", trace, "Write JSON-lines trajectories");

  auto* bench = app.add_subcommand("bench", "Compare planners on paired episodes");
  add_common(bench, f);
  bench->add_option("-p,--planner", planners, "Planner names; the first is the reference")->required();
  bench->add_option("--checkpoint", checkpoint, "Trained policy for 'racemop'")->check(CLI::ExistingFile);
  bench->add_option("-n,--episodes", episodes, "Episodes per track");
  bench->add_option("--k-v", k_v, "Opponent speed gain");

  auto* exp = app.add_subcommand("export", "Write tracks, racing lines and trajectories");
  add_common(exp, f);
  exp->add_option("-p,--planner", planner, "Planner for trajectories");
  exp->add_option("--checkpoint", checkpoint, "Trained policy")->check(CLI::ExistingFile);
  exp->add_option("-n,--episodes", episodes, "Trajectories per track (0 for tracks only)");
  exp->add_option("--k-v", k_v, "Opponent speed gain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(f, paper_scale, resume, argc, argv);
    if (*eval) return cmd_eval(f, planner, checkpoint, episodes, k_v, stochastic, trace, argc, argv);
    if (*bench) return cmd_bench(f, planners, checkpoint, episodes, k_v, argc, argv);
    if (*exp) return cmd_export(f, planner, checkpoint, episodes < 0 ? 0 : episodes, k_v, argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
