// Command implementations behind the `mvattn` executable. Each command
// validates its inputs completely before computing, writes only under its
// output directory, and returns an exit code: 0 success, 1 threshold or
// training failure, 2 usage or IO error.
#pragma once

#include "mvattn/checkpoint.hpp"
#include "mvattn/config.hpp"
#include "mvattn/correspondence.hpp"
#include "mvattn/geometry.hpp"
#include "mvattn/model.hpp"
#include "mvattn/training.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mvattn::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using training::ExperimentConfig;

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2 };

/// Usage or IO problem; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + p.string());
  out << content;
  if (!out) throw UsageError("write failed for " + p.string());
}

/// Creates `dir` and checks that a file can be written inside it.
inline void prepare_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw UsageError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

/// Git-style object hash: SHA-1 over "blob <size>\0<content>".
inline std::string git_blob_hash(const std::string& content) {
  const std::string obj = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, obj.data(), obj.size()) != 1 || EVP_DigestFinal_ex(ctx, md, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  try {
    return config::load_config(path);
  } catch (const config::ConfigError& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Data directories
//
//   <out>/data.json                 generation parameters and intrinsics
//   <out>/views.txt                 view grid ("azimuth elevation" per line)
//   <out>/cameras.csv               one camera per view
//   <out>/scene_NNNN/points.csv     scene points, labels and features
//   <out>/scene_NNNN/correspondences.csv

struct GenDataOptions {
  int scenes = 1;
  int points = -1;  // -1: config value
  std::string views_file;
  double noise_px = 0.0;
  std::uint64_t seed = 0;
  std::string out;
  std::string config_path;
};

inline std::string scene_dir_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", i);
  return buf;
}

inline std::string format_cameras_csv(const geometry::ViewGrid& g) {
  std::string s = "view,azimuth_deg,elevation_deg,radius,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2\n";
  char buf[64];
  const auto poses = g.poses();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    s += std::to_string(i);
    auto put = [&](double v) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      s += buf;
    };
    put(g.views[i].azimuth_deg);
    put(g.views[i].elevation_deg);
    put(g.views[i].radius);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) put(poses[i].rotation(r, c));
    }
    for (int r = 0; r < 3; ++r) put(poses[i].translation(r));
    s += '\n';
  }
  return s;
}

inline int cmd_gen_data(const GenDataOptions& o, std::ostream& log = std::cout) {
  // Validation before any output.
  if (o.out.empty()) throw UsageError("--out is required");
  if (o.scenes < 1) throw UsageError("--scenes must be >= 1");
  if (o.noise_px < 0.0) throw UsageError("--noise-px must be >= 0");
  ExperimentConfig cfg = load_config_or_default(o.config_path);
  const int points = o.points < 0 ? cfg.data.points : o.points;
  if (points < 1) throw UsageError("--points must be >= 1");
  geometry::ViewGrid grid;
  if (o.views_file.empty()) {
    grid = geometry::default_grid(cfg.data.radius);
  } else {
    try {
      grid = geometry::read_view_grid(o.views_file, cfg.data.radius);
    } catch (const std::exception& e) {
      throw UsageError(std::string("views file: ") + e.what());
    }
    if (grid.views.empty()) throw UsageError("views file " + o.views_file + " lists no views");
  }
  const fs::path out(o.out);
  prepare_output_dir(out);

  const auto intr = training::pixel_intrinsics(cfg.data);
  const auto pgrid = training::patch_grid(cfg.model);
  const auto poses = grid.poses();
  json meta;
  meta["scenes"] = o.scenes;
  meta["points"] = points;
  meta["seed"] = o.seed;
  meta["noise_px"] = o.noise_px;
  meta["sigma_c"] = cfg.data.sigma_c;
  meta["latent_dim"] = cfg.model.latent_dim;
  meta["patch_rows"] = pgrid.rows;
  meta["patch_cols"] = pgrid.cols;
  meta["intrinsics"] = {{"fx", intr.fx}, {"fy", intr.fy}, {"cx", intr.cx}, {"cy", intr.cy},
                        {"width", intr.width}, {"height", intr.height}, {"fov_deg", cfg.data.fov_deg}};
  meta["views"] = grid.views.size();
  write_file(out / "data.json", meta.dump(2) + "\n");
  write_file(out / "views.txt", geometry::format_view_grid(grid));
  write_file(out / "cameras.csv", format_cameras_csv(grid));
  for (int i = 0; i < o.scenes; ++i) {
    const auto scene =
        correspondence::generate_scene(correspondence::mix_seed(o.seed, 2 * static_cast<std::uint64_t>(i)), points,
                                       cfg.model.latent_dim);
    correspondence::SfmOptions so;
    so.noise_px = o.noise_px;
    so.sigma_c = cfg.data.sigma_c;
    so.budget = cfg.train.pair_budget;
    so.grid = pgrid;
    so.seed = correspondence::mix_seed(o.seed, 2 * static_cast<std::uint64_t>(i) + 1);
    const auto set = correspondence::synthetic_sfm(scene, poses, intr, so);
    const fs::path sd = out / scene_dir_name(i);
    fs::create_directories(sd);
    write_file(sd / "points.csv", correspondence::format_scene_csv(scene));
    write_file(sd / "correspondences.csv", correspondence::format_correspondences_csv(set));
    log << scene_dir_name(i) << ": " << scene.size() << " points, " << set.size() << " pairs\n";
  }
  log << "wrote " << o.scenes << " scene(s) and " << grid.views.size() << " cameras to " << out.string() << "\n";
  return kOk;
}

struct DataSet {
  json meta;
  geometry::ViewGrid grid;
  std::vector<correspondence::SyntheticScene> scenes;
  std::vector<correspondence::CorrespondenceSet> pairs;
};

inline DataSet load_data_dir(const fs::path& dir, double radius) {
  if (!fs::is_directory(dir)) throw UsageError("data directory " + dir.string() + " does not exist");
  DataSet d;
  try {
    d.meta = json::parse(read_file(dir / "data.json"));
    d.grid = geometry::read_view_grid((dir / "views.txt").string(), radius);
    const int n = d.meta.at("scenes").get<int>();
    for (int i = 0; i < n; ++i) {
      const fs::path sd = dir / scene_dir_name(i);
      std::istringstream ps(read_file(sd / "points.csv")), cs(read_file(sd / "correspondences.csv"));
      d.scenes.push_back(correspondence::parse_scene_csv(ps));
      d.pairs.push_back(correspondence::parse_correspondences_csv(cs));
    }
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError("malformed data directory " + dir.string() + ": " + e.what());
  }
  return d;
}

/// Model inputs for a stored scene, using the stored correspondences.
inline training::Batch stored_batch(const DataSet& d, std::size_t scene, const ExperimentConfig& cfg) {
  auto b = training::assemble_batch(d.scenes[scene], d.grid.poses(), cfg, 0, 1);
  b.pairs = d.pairs[scene];
  return b;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::string config_path;
  std::string ablation = "full";  // arm name or "all"
  std::string out;
  bool resume = false;
  long steps = -1;            // -1: config value
  long long seed = -1;        // -1: config value
  bool quiet = false;
};

inline json report_json(const training::RunReport& r) {
  json j;
  j["arm"] = training::arm_name(r.arm);
  j["seed"] = r.seed;
  j["corr_acc_median"] = r.corr_acc_median;
  j["corr_acc_per_scene"] = r.scene_corr_acc;
  j["final_l_flow"] = r.final_l_flow;
  j["final_l_corr"] = r.final_l_corr;
  j["steps"] = r.trace.size();
  j["seconds"] = r.seconds;
  return j;
}

inline json manifest_json(const ExperimentConfig& cfg, const std::vector<training::Arm>& arms, const std::string& started) {
  json m;
  const std::string text = config::dump_config(cfg);
  m["config"] = config::to_json(cfg);
  m["config_hash"] = git_blob_hash(text);
  m["seed"] = cfg.train.seed;
  json a = json::array();
  for (auto arm : arms) {
    const auto c = training::apply_arm(cfg, arm);
    a.push_back({{"arm", training::arm_name(arm)},
                 {"lambda_pinned_zero", c.train.no_csl || c.train.no_ca3},
                 {"no_csl", c.train.no_csl},
                 {"no_ca3", c.train.no_ca3},
                 {"no_lora", c.train.no_lora},
                 {"no_frame_replication", c.train.no_frame_replication},
                 {"dir", training::arm_name(arm)}});
  }
  m["arms"] = a;
  m["started_utc"] = started;
  m["layout"] = {{"config", "config.json"},
                 {"manifest", "manifest.json"},
                 {"per_arm", {"trace.csv", "checkpoint.bin", "config.json", "report.json"}},
                 {"ranking", "report.json"}};
  return m;
}

/// Trains one arm inside `dir`, checkpointing every K steps; resumes from dir/checkpoint.bin when asked.
inline training::RunReport train_arm(const ExperimentConfig& arm_cfg, const fs::path& dir, bool resume, bool quiet,
                                     std::ostream& log) {
  fs::create_directories(dir);
  write_file(dir / "config.json", config::dump_config(arm_cfg));
  training::Trainer tr(arm_cfg);
  const fs::path ckpt = dir / "checkpoint.bin";
  if (resume && fs::exists(ckpt)) {
    try {
      tr.load(ckpt.string());
    } catch (const std::exception& e) {
      throw UsageError("cannot resume from " + ckpt.string() + ": " + e.what());
    }
    if (!quiet) log << "resumed " << dir.filename().string() << " at step " << tr.step() << "\n";
  }
  const long every = arm_cfg.train.checkpoint_every;
  std::ofstream trace(dir / "trace.csv", std::ios::trunc);
  trace << training::format_trace_csv(tr.trace());
  trace.flush();
  auto on_step = [&](training::Trainer& t, const training::LossBreakdown& lb) {
    trace << training::format_trace_row(lb);
    trace.flush();
    if (every > 0 && t.step() % every == 0) t.save(ckpt.string());
    if (!quiet && (lb.step % 100 == 0 || t.done())) {
      char buf[200];
      std::snprintf(buf, sizeof(buf), "[%s] step %ld  l_flow %.5f  l_corr %.4f  lambda %.4g\n",
                    dir.filename().string().c_str(), lb.step, lb.l_flow, lb.l_corr, lb.lambda_corr);
      log << buf << std::flush;
    }
  };
  const auto rep = training::run_training(tr, on_step);
  tr.save(ckpt.string());
  write_file(dir / "report.json", report_json(rep).dump(2) + "\n");
  return rep;
}

inline int cmd_train(const TrainOptions& o, std::ostream& log = std::cout) {
  if (o.out.empty()) throw UsageError("--out is required");
  ExperimentConfig cfg = load_config_or_default(o.config_path);
  if (o.steps >= 0) cfg.train.steps = o.steps;
  if (o.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(o.seed);
  std::vector<training::Arm> arms;
  if (o.ablation == "all") {
    arms = training::all_arms();
  } else {
    try {
      arms.push_back(training::parse_arm(o.ablation));
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  // The base config always describes the full model; arms are derived from it.
  cfg = training::apply_arm(cfg, training::Arm::Full);
  for (auto arm : arms) {
    const auto p = training::apply_arm(cfg, arm).problems();
    if (!p.empty()) {
      std::string msg = "invalid configuration for arm " + training::arm_name(arm) + ":";
      for (const auto& s : p) msg += "\n  - " + s;
      throw UsageError(msg);
    }
  }
  const fs::path out(o.out);
  prepare_output_dir(out);
  const std::string started = utc_now();
  json manifest = manifest_json(cfg, arms, started);
  write_file(out / "config.json", config::dump_config(cfg));
  write_file(out / "manifest.json", manifest.dump(2) + "\n");

  std::vector<training::RunReport> reports(arms.size());
  std::vector<std::exception_ptr> errors(arms.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  std::ostringstream sink;
  auto worker = [&] {
    for (std::size_t i = next++; i < arms.size(); i = next++) {
      try {
        std::ostringstream local;
        const auto arm_cfg = training::apply_arm(cfg, arms[i]);
        reports[i] = train_arm(arm_cfg, out / training::arm_name(arms[i]), o.resume, o.quiet, arms.size() > 1 ? local : log);
        if (arms.size() > 1) {
          std::lock_guard<std::mutex> lock(log_mu);
          log << local.str() << std::flush;
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = training::worker_threads(arms.size());
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  json ranking = json::array();
  for (const auto& r : training::rank_by_corr_acc(reports)) ranking.push_back(report_json(r));
  write_file(out / "report.json", json{{"ranking", ranking}}.dump(2) + "\n");
  manifest["finished_utc"] = utc_now();
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  for (const auto& r : ranking) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-22s corr_acc_median %.4f  l_flow %.5f  l_corr %.4f\n",
                  r["arm"].get<std::string>().c_str(), r["corr_acc_median"].get<double>(),
                  r["final_l_flow"].get<double>(), r["final_l_corr"].get<double>());
    log << buf;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::string config_path;  // default: config.json next to the checkpoint
  std::string metric = "corr-acc";
  double threshold_px = 5.0;
  std::string predictions;  // CSV scene,pair,u,v: externally predicted target pixels
  std::string out;          // metric JSON; default eval.json next to the checkpoint or predictions
};

/// Loads the run configuration and parameters stored by `train`.
inline model::Model load_model(const std::string& ckpt, const std::string& config_path, ExperimentConfig& cfg) {
  if (ckpt.empty()) throw UsageError("--ckpt is required");
  if (!fs::exists(ckpt)) throw UsageError("checkpoint " + ckpt + " does not exist");
  const std::string cp = config_path.empty() ? (fs::path(ckpt).parent_path() / "config.json").string() : config_path;
  if (!fs::exists(cp)) throw UsageError("no configuration found at " + cp + " (pass --config)");
  cfg = load_config_or_default(cp);
  model::Model m(cfg.model);
  try {
    m.load_state(ad::load_checkpoint(ckpt));
  } catch (const std::exception& e) {
    throw UsageError("cannot load checkpoint " + ckpt + ": " + e.what());
  }
  return m;
}

inline json corr_acc_json(const std::vector<double>& per_scene, double threshold, std::size_t probes) {
  json j;
  j["metric"] = "corr-acc";
  j["threshold_px"] = threshold;
  j["per_scene"] = per_scene;
  j["median"] = training::median(per_scene);
  double mean = 0.0;
  for (double v : per_scene) mean += v / static_cast<double>(per_scene.size());
  j["mean"] = per_scene.empty() ? 0.0 : mean;
  j["probes"] = probes;
  return j;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& log = std::cout) {
  if (o.metric != "corr-acc") throw UsageError("unsupported metric '" + o.metric + "'");
  if (o.threshold_px < 0.0) throw UsageError("--threshold-px must be >= 0");
  if (o.ckpt.empty() && o.predictions.empty()) throw UsageError("--ckpt (or --predictions with --data) is required");
  json result;
  fs::path out_path;
  if (!o.predictions.empty()) {
    if (o.data.empty()) throw UsageError("--predictions needs --data");
    const DataSet d = load_data_dir(o.data, 2.0);
    std::vector<std::vector<geometry::Vec2>> pred(d.pairs.size()), oracle(d.pairs.size());
    std::istringstream in(read_file(o.predictions));
    std::string line;
    std::getline(in, line);
    std::size_t probes = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::size_t s = 0, p = 0;
      double u = 0.0, v = 0.0;
      if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf", &s, &p, &u, &v) != 4 || s >= d.pairs.size() ||
          p >= d.pairs[s].size()) {
        throw UsageError("malformed prediction row '" + line + "'");
      }
      pred[s].emplace_back(u, v);
      oracle[s].emplace_back(d.pairs[s].pairs[p].u_k, d.pairs[s].pairs[p].v_k);
      ++probes;
    }
    std::vector<double> acc;
    for (std::size_t s = 0; s < pred.size(); ++s) {
      if (!pred[s].empty()) acc.push_back(correspondence::corr_acc(pred[s], oracle[s], o.threshold_px));
    }
    result = corr_acc_json(acc, o.threshold_px, probes);
    out_path = o.out.empty() ? fs::path(o.predictions).parent_path() / "eval.json" : fs::path(o.out);
  } else {
    ExperimentConfig cfg;
    const model::Model m = load_model(o.ckpt, o.config_path, cfg);
    cfg.data.threshold_px = o.threshold_px;
    std::vector<double> acc;
    std::size_t probes = 0;
    if (o.data.empty()) {
      acc = training::evaluate_corr_acc(m, cfg);
      for (int s = 0; s < cfg.data.eval_scenes; ++s) probes += 2 * training::eval_batch(cfg, s).pairs.size();
    } else {
      const DataSet d = load_data_dir(o.data, cfg.data.radius);
      const auto intr = training::pixel_intrinsics(cfg.data);
      for (std::size_t s = 0; s < d.scenes.size(); ++s) {
        const auto b = stored_batch(d, s, cfg);
        std::mt19937_64 rng(correspondence::mix_seed(cfg.data.eval_seed, s));
        const auto eps = training::gaussian_like(b.z0.shape, rng);
        const auto attn = training::batch_attention(m, b, cfg.data.eval_t, eps, cfg.data.eval_layer);
        const auto pr = training::probe_pairs(attn, b, m.config(), intr);
        probes += pr.predicted.size();
        acc.push_back(correspondence::corr_acc(pr.predicted, pr.oracle, o.threshold_px));
      }
    }
    result = corr_acc_json(acc, o.threshold_px, probes);
    result["checkpoint"] = o.ckpt;
    out_path = o.out.empty() ? fs::path(o.ckpt).parent_path() / "eval.json" : fs::path(o.out);
  }
  if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
  write_file(out_path, result.dump(2) + "\n");
  log << "corr_acc median " << result["median"].get<double>() << " over " << result["per_scene"].size()
      << " scene(s), threshold " << o.threshold_px << " px -> " << out_path.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Attention maps

struct AttnVizOptions {
  std::string ckpt;
  std::string config_path;
  std::string data;  // optional gen-data directory; otherwise a held-out scene
  int scene = 0;
  int query_view = 0;
  int query_patch = 0;
  int layer = -1;  // -1: configured evaluation layer
  std::string out;
};

/// 8-bit binary PGM of a rows x cols grid, min-max normalized.
inline std::string format_pgm(const std::vector<double>& v, int rows, int cols) {
  double lo = v.front(), hi = v.front();
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::string s = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double x : v) {
    const double n = hi > lo ? (x - lo) / (hi - lo) : 0.0;
    s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * n))));
  }
  return s;
}

inline int cmd_attn_viz(const AttnVizOptions& o, std::ostream& log = std::cout) {
  if (o.out.empty()) throw UsageError("--out is required");
  ExperimentConfig cfg;
  const model::Model m = load_model(o.ckpt, o.config_path, cfg);
  const int layer = o.layer < 0 ? cfg.data.eval_layer : o.layer;
  if (layer >= cfg.model.depth) throw UsageError("--layer must lie in [0, " + std::to_string(cfg.model.depth) + ")");
  training::Batch b;
  if (o.data.empty()) {
    if (o.scene < 0 || o.scene >= cfg.data.eval_scenes) throw UsageError("--scene out of range");
    b = training::eval_batch(cfg, o.scene);
  } else {
    const DataSet d = load_data_dir(o.data, cfg.data.radius);
    if (o.scene < 0 || static_cast<std::size_t>(o.scene) >= d.scenes.size()) throw UsageError("--scene out of range");
    b = stored_batch(d, static_cast<std::size_t>(o.scene), cfg);
  }
  const int views = static_cast<int>(b.poses.size());
  const int p = cfg.model.patches();
  if (o.query_view < 0 || o.query_view >= views) throw UsageError("--query-view must lie in [0, " + std::to_string(views) + ")");
  if (o.query_patch < 0 || o.query_patch >= p) throw UsageError("--query-patch must lie in [0, " + std::to_string(p) + ")");
  const fs::path out(o.out);
  prepare_output_dir(out);

  std::mt19937_64 rng(correspondence::mix_seed(cfg.data.eval_seed, static_cast<std::uint64_t>(o.scene)));
  const auto eps = training::gaussian_like(b.z0.shape, rng);
  const auto attn = training::batch_attention(m, b, cfg.data.eval_t, eps, layer);
  const int qf = b.frame_of_view[static_cast<std::size_t>(o.query_view)];
  const auto row = attn.row(qf * p + o.query_patch);

  std::string csv = "token,frame,patch,row,col,weight\n";
  char buf[128];
  for (Eigen::Index t = 0; t < row.size(); ++t) {
    const int f = static_cast<int>(t) / p, s = static_cast<int>(t) % p;
    std::snprintf(buf, sizeof(buf), "%ld,%d,%d,%d,%d,%.17g\n", static_cast<long>(t), f, s, s / cfg.model.patch_cols,
                  s % cfg.model.patch_cols, row[t]);
    csv += buf;
  }
  write_file(out / "attention.csv", csv);
  int written = 0;
  for (int v = 0; v < views; ++v) {
    if (v == o.query_view) continue;
    const int f = b.frame_of_view[static_cast<std::size_t>(v)];
    std::vector<double> w(static_cast<std::size_t>(p));
    for (int s = 0; s < p; ++s) w[static_cast<std::size_t>(s)] = row[f * p + s];
    char name[32];
    std::snprintf(name, sizeof(name), "view_%02d.pgm", v);
    write_file(out / name, format_pgm(w, cfg.model.patch_rows, cfg.model.patch_cols));
    ++written;
  }
  log << "layer " << layer << ", query view " << o.query_view << " patch " << o.query_patch << ": wrote " << written
      << " heatmap(s) to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Tiny configuration for finite-difference checks.
inline ExperimentConfig micro_config() {
  ExperimentConfig c;
  c.model.depth = 2;
  c.model.model_dim = 16;
  c.model.heads = 2;
  c.model.ffn_mult = 2;
  c.model.adapter_bottleneck_ratio = 2;
  c.model.adapter_heads = 1;
  c.model.lora_rank = 2;
  c.model.supervised_layers = {0, 1};
  c.model.patch_rows = 2;
  c.model.patch_cols = 2;
  c.model.views = 2;
  c.model.latent_dim = 4;
  c.train.n_neg = 2;
  c.train.lambda_target = 0.5;
  c.data.points = 3;
  c.data.eval_layer = 1;
  return c;
}

struct GradCheckResult {
  double l_flow = 0.0;
  double l_corr = 0.0;
  double l_total = 0.0;
};

/// Max relative error of analytic vs central-difference gradients over every
/// trainable parameter, for the flow, correspondence and total losses.
/// Trainable parameters are first moved off their zero initialization.
inline GradCheckResult run_grad_check(const ExperimentConfig& cfg, double eps, std::uint64_t seed = 7) {
  model::Model m(cfg.model);
  std::mt19937_64 init(seed);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& p : m.parameters()) {
    if (p.group == model::ParamGroup::Frozen) continue;
    for (auto& v : p.tensor.mutable_value().data) v += nd(init);
  }
  const auto batch = training::make_batch(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  const auto noise = training::gaussian_like(batch.z0.shape, rng);
  const double t = 0.4;
  const std::uint64_t neg_seed = seed + 2;

  auto loss = [&](int which) -> ad::Tensor {
    std::mt19937_64 r(neg_seed);
    if (which == 1) {
      const auto fs = training::flow_sample(batch.z0, noise, t);
      model::HiddenCache cache;
      model::ForwardInputs in{ad::Tensor::constant(fs.z_t), t, ad::Tensor::constant(batch.cond), batch.cameras};
      (void)m.forward(in, &cache);
      const auto targets = training::batch_targets(batch, m.config(), cfg.train.n_neg, r);
      return training::correspondence_loss(m, cache, batch, targets, cfg.train.tau);
    }
    const auto st = training::compute_losses(m, cfg, batch, t, noise, which == 2 ? cfg.train.lambda_target : 0.0, r);
    return st.l_total;
  };

  GradCheckResult res;
  double* slots[3] = {&res.l_flow, &res.l_corr, &res.l_total};
  for (int which = 0; which < 3; ++which) {
    double worst = 0.0;
    for (auto& p : m.parameters()) {
      if (p.group == model::ParamGroup::Frozen) continue;
      worst = std::max(worst, ad::grad_check([&](const ad::Tensor&) { return loss(which); }, p.tensor, eps));
    }
    *slots[which] = worst;
  }
  return res;
}

struct GradCheckOptions {
  std::string config_path;
  double eps = 1e-5;
  double threshold = 1e-4;
};

inline int cmd_grad_check(const GradCheckOptions& o, std::ostream& log = std::cout) {
  if (!(o.eps > 0.0)) throw UsageError("--eps must be > 0");
  const ExperimentConfig cfg = o.config_path.empty() ? micro_config() : load_config_or_default(o.config_path);
  const auto r = run_grad_check(cfg, o.eps);
  char buf[200];
  std::snprintf(buf, sizeof(buf), "max_rel_err l_flow %.3e\nmax_rel_err l_corr %.3e\nmax_rel_err l_total %.3e\n",
                r.l_flow, r.l_corr, r.l_total);
  log << buf;
  const bool ok = r.l_flow < o.threshold && r.l_corr < o.threshold && r.l_total < o.threshold;
  log << (ok ? "PASS" : "FAIL") << " (threshold " << o.threshold << ", eps " << o.eps << ")\n";
  return ok ? kOk : kFailure;
}

}  // namespace mvattn::cli
