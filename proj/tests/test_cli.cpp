#include "mvattn/cli.hpp"

#include "generators.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

using namespace mvattn;
using namespace mvattn::cli;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("mvattn_cli_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Exit status of the built executable.
int run_cli(const std::string& args) {
  const std::string cmd = std::string(MVATTN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string micro_config_file(const TempDir& d, long steps = 6) {
  auto c = mvattn::testing::micro_experiment();
  c.train.steps = steps;
  c.train.checkpoint_every = 2;
  const auto p = (d / "micro.json").string();
  write_file(p, config::dump_config(c));
  return p;
}

std::string tree_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string s;
  for (const auto& f : files) s += fs::relative(f, dir).string() + " " + git_blob_hash(read_file(f)) + "\n";
  return s;
}

std::ostringstream quiet_log;

}  // namespace

// ---------------------------------------------------------------------------
// gen-data

TEST(GenData, SameSeedGivesByteIdenticalOutput) {
  TempDir d("gen_repeat");
  GenDataOptions o;
  o.scenes = 1;
  o.seed = 7;
  o.out = (d / "a").string();
  cmd_gen_data(o, quiet_log);
  o.out = (d / "b").string();
  cmd_gen_data(o, quiet_log);
  EXPECT_EQ(tree_digest(d / "a"), tree_digest(d / "b"));
  o.seed = 8;
  o.out = (d / "c").string();
  cmd_gen_data(o, quiet_log);
  EXPECT_NE(tree_digest(d / "a"), tree_digest(d / "c"));
}

TEST(GenData, DefaultGridViewsFileWritesAllCameras) {
  TempDir d("gen_views");
  write_file(d / "views.txt", geometry::format_view_grid(geometry::default_grid()));
  GenDataOptions o;
  o.views_file = (d / "views.txt").string();
  o.out = (d / "out").string();
  ASSERT_EQ(cmd_gen_data(o, quiet_log), kOk);
  const std::string cams = read_file(d / "out" / "cameras.csv");
  EXPECT_EQ(std::count(cams.begin(), cams.end(), '\n'), 34);
  const auto meta = json::parse(read_file(d / "out" / "data.json"));
  EXPECT_EQ(meta["views"].get<int>(), 33);
}

TEST(GenData, NoiselessWeightsAreOne) {
  TempDir d("gen_noise");
  GenDataOptions o;
  o.scenes = 2;
  o.out = (d / "out").string();
  cmd_gen_data(o, quiet_log);
  for (int i = 0; i < 2; ++i) {
    std::istringstream in(read_file(d / "out" / scene_dir_name(i) / "correspondences.csv"));
    const auto set = correspondence::parse_correspondences_csv(in);
    ASSERT_GT(set.size(), 0u);
    for (const auto& p : set.pairs) EXPECT_EQ(p.weight, 1.0);
  }
  o.noise_px = 1.0;
  o.out = (d / "noisy").string();
  cmd_gen_data(o, quiet_log);
  std::istringstream in(read_file(d / "noisy" / scene_dir_name(0) / "correspondences.csv"));
  const auto noisy = correspondence::parse_correspondences_csv(in);
  EXPECT_LT(noisy.pairs.front().weight, 1.0);
}

TEST(GenData, CamerasCsvMatchesPoses) {
  const auto g = geometry::ring_grid(2);
  const std::string s = format_cameras_csv(g);
  std::istringstream in(s);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  std::getline(in, row);
  std::vector<double> v;
  std::istringstream rs(row);
  for (std::string cell; std::getline(rs, cell, ',');) v.push_back(std::stod(cell));
  ASSERT_EQ(v.size(), 16u);
  const auto pose = g.poses()[1];
  EXPECT_EQ(v[1], 180.0);
  EXPECT_EQ(v[13], pose.translation.x());
  EXPECT_EQ(v[8], pose.rotation(1, 1));
}

TEST(GenData, UsageErrorsExitTwoWithoutOutput) {
  TempDir d("gen_errors");
  write_file(d / "bad_views.txt", "0 0\nfortyfive 10\n");
  EXPECT_EQ(run_cli("gen-data --views-file " + (d / "bad_views.txt").string() + " --out " + (d / "x").string()), 2);
  EXPECT_FALSE(fs::exists(d / "x"));
  write_file(d / "empty_views.txt", "# nothing\n");
  EXPECT_EQ(run_cli("gen-data --views-file " + (d / "empty_views.txt").string() + " --out " + (d / "x").string()), 2);
  EXPECT_EQ(run_cli("gen-data --views-file " + (d / "missing.txt").string() + " --out " + (d / "x").string()), 2);
  write_file(d / "file", "occupied");
  EXPECT_EQ(run_cli("gen-data --out " + (d / "file" / "sub").string()), 2);
  EXPECT_EQ(run_cli("gen-data --scenes 0 --out " + (d / "x").string()), 2);
  EXPECT_EQ(run_cli("gen-data"), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_FALSE(fs::exists(d / "x"));
}

TEST(GenData, BlobHashMatchesGit) {
  // Values from `git hash-object`.
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

// ---------------------------------------------------------------------------
// train / eval / attn-viz

TEST(Train, NoCslManifestAndResume) {
  TempDir d("train");
  const auto cfg_path = micro_config_file(d);
  TrainOptions o;
  o.config_path = cfg_path;
  o.ablation = "no_csl";
  o.out = (d / "run").string();
  o.quiet = true;
  ASSERT_EQ(cmd_train(o, quiet_log), kOk);
  const auto manifest = json::parse(read_file(d / "run" / "manifest.json"));
  ASSERT_EQ(manifest["arms"].size(), 1u);
  EXPECT_EQ(manifest["arms"][0]["arm"], "no_csl");
  EXPECT_EQ(manifest["arms"][0]["lambda_pinned_zero"], true);
  EXPECT_EQ(manifest["config_hash"], git_blob_hash(read_file(d / "run" / "config.json")));
  EXPECT_TRUE(manifest.contains("finished_utc"));
  const std::string trace = read_file(d / "run" / "no_csl" / "trace.csv");
  EXPECT_EQ(trace.rfind("step,l_flow,l_corr,lambda,l_total,grad_norm_adapter,grad_norm_lora\n", 0), 0u);
  std::istringstream in(trace);
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    EXPECT_EQ(std::stod(cells.at(3)), 0.0);
  }
  EXPECT_EQ(rows, 6);

  // Interrupted run: a checkpoint written at step 4 of the same 6-step run, then --resume.
  {
    training::Trainer tr(training::apply_arm(config::load_config(cfg_path), training::Arm::NoCsl));
    for (int i = 0; i < 4; ++i) tr.train_step();
    fs::create_directories(d / "resumed" / "no_csl");
    tr.save((d / "resumed" / "no_csl" / "checkpoint.bin").string());
  }
  TrainOptions part = o;
  part.out = (d / "resumed").string();
  part.resume = true;
  ASSERT_EQ(cmd_train(part, quiet_log), kOk);
  EXPECT_EQ(read_file(d / "resumed" / "no_csl" / "trace.csv"), trace);
  EXPECT_EQ(read_file(d / "resumed" / "no_csl" / "checkpoint.bin"), read_file(d / "run" / "no_csl" / "checkpoint.bin"));
}

TEST(Train, RepeatRunsAreBitIdentical) {
  TempDir d("train_repeat");
  const auto cfg_path = micro_config_file(d);
  for (const char* name : {"a", "b"}) {
    TrainOptions o;
    o.config_path = cfg_path;
    o.out = (d / name).string();
    o.quiet = true;
    ASSERT_EQ(cmd_train(o, quiet_log), kOk);
  }
  for (const char* f : {"full/trace.csv", "full/checkpoint.bin", "config.json"}) {
    EXPECT_EQ(read_file(d / "a" / f), read_file(d / "b" / f)) << f;
  }
  // Reports agree except for wall-clock time.
  auto ra = json::parse(read_file(d / "a" / "full" / "report.json"));
  auto rb = json::parse(read_file(d / "b" / "full" / "report.json"));
  ra.erase("seconds");
  rb.erase("seconds");
  EXPECT_EQ(ra, rb);
}

TEST(Train, ConfigErrorsAreEnumeratedBeforeCompute) {
  TempDir d("train_bad");
  write_file(d / "bad.json", R"({"train": {"tau": -1, "grad_clip": 0, "bogus": 1}})");
  EXPECT_EQ(run_cli("train --config " + (d / "bad.json").string() + " --out " + (d / "run").string()), 2);
  EXPECT_FALSE(fs::exists(d / "run"));
  try {
    load_config_or_default((d / "bad.json").string());
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  EXPECT_EQ(run_cli("train --ablation no_such_arm --out " + (d / "run").string()), 2);
}

TEST(Eval, PredictionsFixture) {
  TempDir d("eval_pred");
  GenDataOptions g;
  g.scenes = 2;
  g.out = (d / "data").string();
  cmd_gen_data(g, quiet_log);
  const auto data = load_data_dir(d / "data", 2.0);
  std::string perfect = "scene,pair,u,v\n", off = perfect;
  for (std::size_t s = 0; s < data.pairs.size(); ++s) {
    for (std::size_t p = 0; p < data.pairs[s].size(); ++p) {
      const auto& pr = data.pairs[s].pairs[p];
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g\n", s, p, pr.u_k, pr.v_k);
      perfect += buf;
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g\n", s, p, pr.u_k + 0.25, pr.v_k);
      off += buf;
    }
  }
  write_file(d / "perfect.csv", perfect);
  write_file(d / "off.csv", off);
  EvalOptions e;
  e.data = (d / "data").string();
  e.predictions = (d / "perfect.csv").string();
  e.out = (d / "perfect.json").string();
  ASSERT_EQ(cmd_eval(e, quiet_log), kOk);
  EXPECT_EQ(json::parse(read_file(d / "perfect.json"))["median"].get<double>(), 1.0);
  e.predictions = (d / "off.csv").string();
  e.threshold_px = 0.0;
  e.out = (d / "zero.json").string();
  ASSERT_EQ(cmd_eval(e, quiet_log), kOk);
  EXPECT_EQ(json::parse(read_file(d / "zero.json"))["median"].get<double>(), 0.0);
  e.threshold_px = 5.0;
  e.out = (d / "five.json").string();
  ASSERT_EQ(cmd_eval(e, quiet_log), kOk);
  EXPECT_EQ(json::parse(read_file(d / "five.json"))["median"].get<double>(), 1.0);
}

TEST(Eval, MissingCheckpointExitsTwo) {
  TempDir d("eval_missing");
  EXPECT_EQ(run_cli("eval --ckpt " + (d / "nope.bin").string()), 2);
  write_file(d / "garbage.bin", "not a checkpoint");
  write_file(d / "config.json", config::dump_config(mvattn::testing::micro_experiment()));
  EXPECT_EQ(run_cli("eval --ckpt " + (d / "garbage.bin").string()), 2);
  EXPECT_EQ(run_cli("eval --ckpt " + (d / "garbage.bin").string() + " --metric fid"), 2);
}

TEST(EvalAndViz, TrainedCheckpoint) {
  TempDir d("viz");
  const auto cfg_path = micro_config_file(d, 4);
  TrainOptions t;
  t.config_path = cfg_path;
  t.out = (d / "run").string();
  t.quiet = true;
  ASSERT_EQ(cmd_train(t, quiet_log), kOk);
  const std::string ckpt = (d / "run" / "full" / "checkpoint.bin").string();

  EvalOptions e;
  e.ckpt = ckpt;
  ASSERT_EQ(cmd_eval(e, quiet_log), kOk);
  const auto ev = json::parse(read_file(d / "run" / "full" / "eval.json"));
  const auto report = json::parse(read_file(d / "run" / "full" / "report.json"));
  EXPECT_EQ(ev["median"].get<double>(), report["corr_acc_median"].get<double>());
  EXPECT_EQ(ev["per_scene"].size(), 3u);

  AttnVizOptions v;
  v.ckpt = ckpt;
  v.query_view = 1;
  v.query_patch = 3;
  v.out = (d / "viz").string();
  ASSERT_EQ(cmd_attn_viz(v, quiet_log), kOk);
  std::istringstream in(read_file(d / "viz" / "attention.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "token,frame,patch,row,col,weight");
  double sum = 0.0;
  int rows = 0;
  while (std::getline(in, line)) {
    sum += std::stod(line.substr(line.rfind(',') + 1));
    ++rows;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_EQ(rows, 3 * 4);  // anchor + two views, 2x2 patches
  const std::string pgm = read_file(d / "viz" / "view_00.pgm");
  EXPECT_EQ(pgm.rfind("P5\n2 2\n255\n", 0), 0u);
  EXPECT_EQ(pgm.size(), std::string("P5\n2 2\n255\n").size() + 4);
  EXPECT_FALSE(fs::exists(d / "viz" / "view_01.pgm"));

  const std::string base = "attn-viz --ckpt " + ckpt + " --out " + (d / "bad").string();
  EXPECT_EQ(run_cli(base + " --query-view 2"), 2);
  EXPECT_EQ(run_cli(base + " --query-patch 4"), 2);
  EXPECT_EQ(run_cli(base + " --layer 2"), 2);
  EXPECT_EQ(run_cli(base + " --scene 3"), 2);
  EXPECT_FALSE(fs::exists(d / "bad"));
  EXPECT_EQ(run_cli(base + " --query-view 0 --layer 0"), 0);
}

TEST(Viz, PgmNormalization) {
  const std::string s = format_pgm({0.1, 0.3, 0.2, 0.1}, 2, 2);
  const std::string body = s.substr(s.size() - 4);
  EXPECT_EQ(static_cast<unsigned char>(body[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(body[1]), 255);
  EXPECT_EQ(static_cast<unsigned char>(body[2]), 128);
  const std::string flat = format_pgm({0.5, 0.5}, 1, 2);
  EXPECT_EQ(flat, std::string("P5\n2 1\n255\n") + std::string(2, '\0'));
}

// ---------------------------------------------------------------------------
// grad-check

TEST(GradCheck, MicroConfigPasses) {
  const auto r = run_grad_check(micro_config(), 1e-5);
  EXPECT_LT(r.l_flow, 1e-4);
  EXPECT_LT(r.l_corr, 1e-4);
  EXPECT_LT(r.l_total, 1e-4);
}

TEST(GradCheck, LargerStepErrorGrowsQuadratically) {
  // Central differences carry an O(eps^2) truncation error, so a 10x larger
  // step costs about 100x in the worst coordinate. Flow-loss coordinates with
  // a gradient much smaller than their curvature reach a few percent at 1e-3.
  const auto a = run_grad_check(micro_config(), 1e-4);
  const auto b = run_grad_check(micro_config(), 1e-3);
  for (auto [lo, hi] : {std::pair{a.l_flow, b.l_flow}, std::pair{a.l_corr, b.l_corr}, std::pair{a.l_total, b.l_total}}) {
    EXPECT_GT(hi / lo, 50.0);
    EXPECT_LT(hi / lo, 200.0);
  }
  EXPECT_LT(b.l_corr, 1e-2);
  EXPECT_LT(b.l_total, 1e-2);
}

TEST(GradCheck, ExitCodes) {
  EXPECT_EQ(run_cli("grad-check"), 0);
  // An impossible threshold turns the same errors into a failure.
  EXPECT_EQ(run_cli("grad-check --threshold 1e-30"), 1);
  EXPECT_EQ(run_cli("grad-check --config /nonexistent.json"), 2);
}
