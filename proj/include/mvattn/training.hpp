// Flow-matching training with correspondence supervision, the AdamW
// optimizer, held-out correspondence accuracy, and the ablation harness.
#pragma once

#include "mvattn/autodiff.hpp"
#include "mvattn/checkpoint.hpp"
#include "mvattn/correspondence.hpp"
#include "mvattn/geometry.hpp"
#include "mvattn/model.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mvattn::training {

using ad::NDArray;
using ad::Shape;
using ad::Tensor;
using correspondence::mix_seed;
using model::Model;
using model::ModelConfig;
using model::ParamGroup;

enum class Arm { Full, NoCsl, NoCa3, NoLora, NoFrameReplication };

inline const std::vector<Arm>& all_arms() {
  static const std::vector<Arm> arms{Arm::Full, Arm::NoCsl, Arm::NoCa3, Arm::NoLora, Arm::NoFrameReplication};
  return arms;
}

inline std::string arm_name(Arm a) {
  switch (a) {
    case Arm::Full: return "full";
    case Arm::NoCsl: return "no_csl";
    case Arm::NoCa3: return "no_ca3";
    case Arm::NoLora: return "no_lora";
    case Arm::NoFrameReplication: return "no_frame_replication";
  }
  return "?";
}

inline Arm parse_arm(const std::string& s) {
  for (Arm a : all_arms()) {
    if (arm_name(a) == s) return a;
  }
  throw std::invalid_argument("unknown ablation arm '" + s + "'");
}

struct TrainConfig {
  long steps = 1000;
  double lr_adapter = 1e-3;
  double lr_lora = 1e-4;
  long lr_warmup_steps = 60;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  double lambda_target = 0.01;
  long curriculum_warmup = 50;
  long curriculum_ramp = 100;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double tau = 0.07;
  std::size_t n_neg = 128;
  std::size_t pair_budget = correspondence::kDefaultPairBudget;
  long checkpoint_every = 500;
  bool no_csl = false;
  bool no_ca3 = false;
  bool no_lora = false;
  bool no_frame_replication = false;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    auto need = [&](bool ok, const std::string& m) {
      if (!ok) p.push_back(m);
    };
    need(steps >= 0, "steps must be >= 0");
    need(lr_adapter > 0.0, "lr_adapter must be > 0");
    need(lr_lora > 0.0, "lr_lora must be > 0");
    need(lr_warmup_steps >= 0, "lr_warmup_steps must be >= 0");
    need(grad_clip > 0.0, "grad_clip must be > 0");
    need(weight_decay >= 0.0, "weight_decay must be >= 0");
    need(lambda_target >= 0.0, "lambda_target must be >= 0");
    need(curriculum_warmup >= 0 && curriculum_ramp >= 0, "curriculum lengths must be >= 0");
    need(batch_size == 1, "batch_size must be 1");
    need(tau > 0.0, "tau must be > 0");
    need(n_neg >= 1, "n_neg must be >= 1");
    need(pair_budget >= 1, "pair_budget must be >= 1");
    need(checkpoint_every >= 0, "checkpoint_every must be >= 0");
    return p;
  }
};

/// Synthetic data stream: scenes, cameras and the held-out evaluation set.
struct DataConfig {
  int points = 12;
  double image_size = 64.0;  // square images, pixels
  double fov_deg = 60.0;
  double radius = 2.0;
  std::vector<double> elevations{-30.0, 0.0, 30.0, 60.0};
  double splat_sigma = 0.5;  // patches
  double noise_px = 0.0;
  double sigma_c = 2.0;
  int eval_scenes = 20;
  std::uint64_t eval_seed = 90210;
  double eval_t = 0.2;
  int eval_layer = 5;
  double threshold_px = 5.0;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    auto need = [&](bool ok, const std::string& m) {
      if (!ok) p.push_back(m);
    };
    need(points >= 1, "points must be >= 1");
    need(image_size > 0.0, "image_size must be > 0");
    need(fov_deg > 0.0 && fov_deg < 180.0, "fov_deg must lie in (0, 180)");
    need(radius > 0.0, "radius must be > 0");
    need(!elevations.empty(), "elevations must be non-empty");
    for (double e : elevations) need(e >= -90.0 && e <= 90.0, "elevations must lie in [-90, 90]");
    need(splat_sigma > 0.0, "splat_sigma must be > 0");
    need(noise_px >= 0.0, "noise_px must be >= 0");
    need(sigma_c > 0.0, "sigma_c must be > 0");
    need(eval_scenes >= 1, "eval_scenes must be >= 1");
    need(eval_t >= 0.0 && eval_t <= 1.0, "eval_t must lie in [0, 1]");
    need(threshold_px >= 0.0, "threshold_px must be >= 0");
    return p;
  }
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    for (auto& s : model.problems()) p.push_back("model: " + s);
    for (auto& s : train.problems()) p.push_back("train: " + s);
    for (auto& s : data.problems()) p.push_back("data: " + s);
    if (data.eval_layer < 0 || data.eval_layer >= model.depth) p.push_back("data: eval_layer outside [0, depth)");
    if (train.no_ca3 == model.use_ca3) p.push_back("train.no_ca3 contradicts model.use_ca3");
    if (train.no_lora == model.use_lora) p.push_back("train.no_lora contradicts model.use_lora");
    return p;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw model::ConfigError(msg);
  }
};

/// Configuration of one ablation arm: identical to `base` except the arm's flag.
inline ExperimentConfig apply_arm(ExperimentConfig base, Arm arm) {
  auto& t = base.train;
  t.no_csl = t.no_ca3 = t.no_lora = t.no_frame_replication = false;
  base.model.use_ca3 = base.model.use_lora = true;
  switch (arm) {
    case Arm::Full: break;
    case Arm::NoCsl: t.no_csl = true; break;
    case Arm::NoCa3: t.no_ca3 = true; base.model.use_ca3 = false; break;
    case Arm::NoLora: t.no_lora = true; base.model.use_lora = false; break;
    case Arm::NoFrameReplication: t.no_frame_replication = true; break;
  }
  return base;
}

inline Arm arm_of(const TrainConfig& t) {
  if (t.no_csl) return Arm::NoCsl;
  if (t.no_ca3) return Arm::NoCa3;
  if (t.no_lora) return Arm::NoLora;
  if (t.no_frame_replication) return Arm::NoFrameReplication;
  return Arm::Full;
}

// ---------------------------------------------------------------------------
// Flow matching

struct FlowSample {
  NDArray z_t;
  NDArray v_target;
};

/// z_t = (1 - t) z0 + t eps, target z0 - eps.
inline FlowSample flow_sample(const NDArray& z0, const NDArray& eps, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("flow time must lie in [0, 1], got " + std::to_string(t));
  if (z0.shape != eps.shape) throw ad::ShapeError("flow_sample", z0.shape, eps.shape);
  FlowSample s{NDArray(z0.shape), NDArray(z0.shape)};
  for (std::size_t i = 0; i < z0.size(); ++i) {
    s.z_t[i] = (1.0 - t) * z0[i] + t * eps[i];
    s.v_target[i] = z0[i] - eps[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Warmup factor step / warmup, then cosine decay to zero at `total`.
inline double lr_factor(long step, long warmup, long total) {
  if (step < warmup) return static_cast<double>(step) / static_cast<double>(warmup);
  const long span = total - warmup;
  if (span <= 0) return 1.0;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW over a list of parameters; `lr` gives the learning rate of each.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  void update(std::vector<Tensor>& params, const std::vector<double>& lr, const std::vector<bool>& decay) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("optimizer state does not match parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      NDArray& w = params[i].mutable_value();
      const NDArray g = params[i].grad();
      NDArray& m = m_[i];
      NDArray& v = v_[i];
      const double wd = decay[i] ? opt_.weight_decay : 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] -= lr[i] * (mh / (std::sqrt(vh) + opt_.eps) + wd * w[j]);
      }
    }
  }

  long steps() const { return t_; }
  std::vector<NDArray>& first_moments() { return m_; }
  std::vector<NDArray>& second_moments() { return v_; }
  void restore(long t, std::vector<NDArray> m, std::vector<NDArray> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamWOptions opt_;
  long t_ = 0;
  std::vector<NDArray> m_, v_;
};

/// L2 norm of the gradients of the given parameters.
inline double grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    const NDArray g = p.grad();
    for (double v : g.data) s += v * v;
  }
  return std::sqrt(s);
}

/// Rescales gradients so their joint norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  const double n = grad_norm(params);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (auto& p : params) {
      auto& g = p.node()->grad;
      for (auto& v : g.data) v *= s;
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// Batches

/// One scene prepared for the model: clean latents per input frame, cameras,
/// conditioning frame, and correspondence targets.
struct Batch {
  correspondence::SyntheticScene scene;
  std::vector<geometry::CameraPose> poses;  // one per view
  NDArray view_latents;                     // [views * patches, latent_dim]
  NDArray z0;                               // [frames * patches, latent_dim]
  NDArray cond;                             // [patches, latent_dim]
  std::vector<geometry::ProjectiveMatrix> cameras;  // one per input frame
  std::vector<int> frame_of_view;           // view -> sequence frame (anchor is frame 0)
  correspondence::CorrespondenceSet pairs;
};

inline geometry::Intrinsics pixel_intrinsics(const DataConfig& d) {
  return geometry::build_intrinsics(d.image_size, d.image_size, d.fov_deg);
}

inline correspondence::PatchGrid patch_grid(const ModelConfig& m) { return {m.patch_rows, m.patch_cols}; }

/// Views evenly spaced in azimuth from a random offset, elevations drawn from the configured set.
inline std::vector<geometry::CameraPose> sample_views(int n, const DataConfig& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> off(0.0, 360.0);
  std::uniform_int_distribution<std::size_t> pick(0, d.elevations.size() - 1);
  const double a0 = off(rng);
  std::vector<geometry::CameraPose> poses;
  for (int i = 0; i < n; ++i) {
    const auto spec = geometry::ViewSpec::make(a0 + 360.0 * i / n, d.elevations[pick(rng)], d.radius);
    poses.push_back(geometry::build_virtual_camera(spec));
  }
  return poses;
}

/// Assembles model inputs from a scene and its views. Without frame
/// replication, consecutive groups of four views share one latent (their
/// mean) and the first view's camera.
inline Batch assemble_batch(correspondence::SyntheticScene scene, std::vector<geometry::CameraPose> poses,
                            const ExperimentConfig& cfg, std::uint64_t sfm_seed, std::size_t pair_budget) {
  const auto intr = pixel_intrinsics(cfg.data);
  const auto grid = patch_grid(cfg.model);
  const std::size_t p = static_cast<std::size_t>(grid.patches());
  const std::size_t ld = scene.features.cols();
  const int n = static_cast<int>(poses.size());
  Batch b;
  b.view_latents = correspondence::render_latents(scene, poses, intr, grid, cfg.data.splat_sigma);
  b.cond = NDArray(Shape{p, ld});
  std::copy(b.view_latents.data.begin(), b.view_latents.data.begin() + static_cast<std::ptrdiff_t>(p * ld),
            b.cond.data.begin());
  const auto layout = cfg.train.no_frame_replication ? model::merged_latent_map(n) : model::frame_replication_map(n);
  b.frame_of_view = layout.latent_of;
  const std::size_t frames = static_cast<std::size_t>(layout.total_latents - 1);
  b.z0 = NDArray(Shape{frames * p, ld});
  std::vector<int> members(frames, 0);
  const auto model_intr = intr.normalized();
  b.cameras.resize(frames);
  for (int v = 0; v < n; ++v) {
    const std::size_t f = static_cast<std::size_t>(b.frame_of_view[static_cast<std::size_t>(v)] - 1);
    if (members[f]++ == 0) b.cameras[f] = geometry::projective_matrix(poses[static_cast<std::size_t>(v)], model_intr);
    for (std::size_t i = 0; i < p * ld; ++i) b.z0[f * p * ld + i] += b.view_latents[static_cast<std::size_t>(v) * p * ld + i];
  }
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t i = 0; i < p * ld; ++i) b.z0[f * p * ld + i] /= static_cast<double>(members[f]);
  }
  correspondence::SfmOptions so;
  so.noise_px = cfg.data.noise_px;
  so.sigma_c = cfg.data.sigma_c;
  so.budget = pair_budget;
  so.grid = grid;
  so.seed = sfm_seed;
  b.pairs = correspondence::synthetic_sfm(scene, poses, intr, so);
  b.scene = std::move(scene);
  b.poses = std::move(poses);
  return b;
}

/// Training scene for `step`: every random choice derives from (seed, step).
inline Batch make_batch(const ExperimentConfig& cfg, std::uint64_t stream_seed) {
  std::mt19937_64 rng(stream_seed);
  auto scene = correspondence::generate_scene(mix_seed(stream_seed, 1), cfg.data.points, cfg.model.latent_dim);
  auto poses = sample_views(cfg.model.views, cfg.data, rng);
  return assemble_batch(std::move(scene), std::move(poses), cfg, mix_seed(stream_seed, 2), cfg.train.pair_budget);
}

inline std::uint64_t train_stream_seed(std::uint64_t seed, long step) {
  return mix_seed(mix_seed(seed, 0x7A1Full), static_cast<std::uint64_t>(step));
}

inline std::uint64_t eval_stream_seed(std::uint64_t eval_seed, int scene) {
  return mix_seed(mix_seed(eval_seed, 0xE7A1ull), static_cast<std::uint64_t>(scene));
}

inline NDArray gaussian_like(const Shape& s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  NDArray a(s);
  for (auto& v : a.data) v = nd(rng);
  return a;
}

// ---------------------------------------------------------------------------
// Training step

struct LossBreakdown {
  long step = 0;
  double l_flow = 0.0;
  double l_corr = 0.0;
  double lambda_corr = 0.0;
  double l_total = 0.0;
  double grad_norm_adapter = 0.0;  // before clipping
  double grad_norm_lora = 0.0;
  double clipped_norm_adapter = 0.0;  // after clipping
  double clipped_norm_lora = 0.0;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepTensors {
  Tensor l_flow;
  Tensor l_corr;  // undefined when the correspondence loss is not evaluated
  Tensor l_total;
  double lambda = 0.0;
};

/// Token targets and negatives for a batch. Anchor tokens are never negatives.
inline correspondence::CslTargets batch_targets(const Batch& b, const ModelConfig& mc, std::size_t n_neg,
                                                std::mt19937_64& rng) {
  const std::size_t p = static_cast<std::size_t>(mc.patches());
  const std::size_t total = (b.cameras.size() + 1) * p;
  const auto pairs = correspondence::to_token_pairs(b.pairs, b.frame_of_view, static_cast<int>(p));
  const auto observers = correspondence::point_tokens(pairs);
  std::size_t available = n_neg;
  for (const auto& [id, toks] : observers) available = std::min(available, total - p - toks.size());
  correspondence::CslTargets t;
  t.pairs = pairs;
  for (const auto& pr : pairs) {
    std::set<std::size_t> excluded = observers.at(pr.point_id);
    for (std::size_t i = 0; i < p; ++i) excluded.insert(i);
    t.negatives.push_back(correspondence::sample_negatives(excluded, total, available, rng));
  }
  return t;
}

/// Correspondence loss averaged over the supervised layers, from cached block inputs.
inline Tensor correspondence_loss(const Model& m, const model::HiddenCache& cache, const Batch& b,
                                  const correspondence::CslTargets& targets, double tau) {
  const auto cams = Model::sequence_cameras(b.cameras);
  const auto map = m.token_map(static_cast<int>(b.cameras.size()) + 1);
  std::vector<Tensor> per_layer;
  for (int l : m.config().supervised_layers) {
    const auto qk = m.adapter_query_key(l, cache.states.at(l), cams, map);
    per_layer.push_back(correspondence::csl_loss(qk.q, qk.k, targets, tau));
  }
  Tensor s = per_layer.front();
  for (std::size_t i = 1; i < per_layer.size(); ++i) s = ad::add(s, per_layer[i]);
  return ad::scalar_mul(s, 1.0 / static_cast<double>(per_layer.size()));
}

/// Forward pass and loss assembly for one step (no parameter update).
inline StepTensors compute_losses(const Model& m, const ExperimentConfig& cfg, const Batch& b, double t,
                                  const NDArray& eps, double lambda, std::mt19937_64& rng) {
  const auto fs = flow_sample(b.z0, eps, t);
  model::HiddenCache cache;
  model::ForwardInputs in{Tensor::constant(fs.z_t), t, Tensor::constant(b.cond), b.cameras};
  Tensor v = m.forward(in, &cache);
  StepTensors st;
  st.l_flow = ad::mean(ad::mul(ad::sub(v, Tensor::constant(fs.v_target)), ad::sub(v, Tensor::constant(fs.v_target))));
  st.lambda = lambda;
  st.l_total = st.l_flow;
  const bool have_csl_path = m.config().use_ca3 && !m.config().supervised_layers.empty() && !b.pairs.empty();
  if (have_csl_path) {
    const auto targets = batch_targets(b, m.config(), cfg.train.n_neg, rng);
    if (lambda > 0.0) {
      st.l_corr = correspondence_loss(m, cache, b, targets, cfg.train.tau);
      st.l_total = ad::add(st.l_flow, ad::scalar_mul(st.l_corr, lambda));
    } else {
      ad::NoGradGuard ng;
      st.l_corr = correspondence_loss(m, cache, b, targets, cfg.train.tau);
    }
  }
  return st;
}

struct RunReport {
  Arm arm = Arm::Full;
  std::uint64_t seed = 0;
  std::vector<LossBreakdown> trace;
  std::vector<double> scene_corr_acc;
  double corr_acc_median = 0.0;
  double final_l_flow = 0.0;
  double final_l_corr = 0.0;
  double seconds = 0.0;
};

/// Owns one training run: model, optimizer, step counter and loss trace.
class Trainer {
 public:
  explicit Trainer(ExperimentConfig cfg) : cfg_(std::move(cfg)), model_((cfg_.validate(), cfg_.model)) {
    for (auto& p : model_.parameters()) {
      if (p.group == ParamGroup::Frozen) continue;
      params_.push_back(p.tensor);
      names_.push_back(p.name);
      groups_.push_back(p.group);
      decay_.push_back(p.decay);
    }
    opt_ = AdamW(AdamWOptions{0.9, 0.999, 1e-8, cfg_.train.weight_decay});
  }

  const ExperimentConfig& config() const { return cfg_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  long step() const { return step_; }
  const std::vector<LossBreakdown>& trace() const { return trace_; }
  bool done() const { return step_ >= cfg_.train.steps; }

  double lambda_at(long step) const {
    if (cfg_.train.no_csl || cfg_.train.no_ca3) return 0.0;
    return correspondence::lambda_schedule(step, cfg_.train.curriculum_warmup, cfg_.train.curriculum_ramp,
                                           cfg_.train.lambda_target);
  }

  /// One optimization step: forward (caching supervised block inputs), flow
  /// and correspondence losses, a single backward through the total, per-group
  /// clipping, and the AdamW update.
  LossBreakdown train_step() {
    const std::uint64_t ss = train_stream_seed(cfg_.train.seed, step_);
    Batch b = make_batch(cfg_, ss);
    std::mt19937_64 rng(mix_seed(ss, 3));
    std::uniform_real_distribution<double> ut(0.0, 1.0);
    const double t = ut(rng);
    const NDArray eps = gaussian_like(b.z0.shape, rng);

    LossBreakdown lb;
    lb.step = step_;
    const StepTensors st = compute_losses(model_, cfg_, b, t, eps, lambda_at(step_), rng);
    lb.l_flow = st.l_flow.item();
    lb.l_corr = st.l_corr.defined() ? st.l_corr.item() : 0.0;
    lb.lambda_corr = st.lambda;
    lb.l_total = st.l_total.item();
    ad::backward(st.l_total);

    auto adapter = group(ParamGroup::Adapter), lora = group(ParamGroup::Lora);
    lb.grad_norm_adapter = clip_grad_norm(adapter, cfg_.train.grad_clip);
    lb.grad_norm_lora = clip_grad_norm(lora, cfg_.train.grad_clip);
    lb.clipped_norm_adapter = grad_norm(adapter);
    lb.clipped_norm_lora = grad_norm(lora);
    if (!std::isfinite(lb.l_total) || !std::isfinite(lb.grad_norm_adapter) || !std::isfinite(lb.grad_norm_lora)) {
      model_.zero_grad();
      throw NonFiniteError("non-finite loss at step " + std::to_string(step_) + ": l_flow=" + std::to_string(lb.l_flow) +
                           " l_corr=" + std::to_string(lb.l_corr) + " grad_norm_adapter=" +
                           std::to_string(lb.grad_norm_adapter) + " grad_norm_lora=" + std::to_string(lb.grad_norm_lora));
    }

    const double f = lr_factor(step_, cfg_.train.lr_warmup_steps, cfg_.train.steps);
    std::vector<double> lr;
    for (auto g : groups_) lr.push_back(f * (g == ParamGroup::Lora ? cfg_.train.lr_lora : cfg_.train.lr_adapter));
    opt_.update(params_, lr, decay_);
    model_.zero_grad();
    trace_.push_back(lb);
    ++step_;
    return lb;
  }

  /// Trainable parameters of one group.
  std::vector<Tensor> group(ParamGroup g) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (groups_[i] == g) out.push_back(params_[i]);
    }
    return out;
  }

  /// Model state, optimizer moments, step and trace as named arrays.
  ad::NamedArrays snapshot() const {
    ad::NamedArrays s = model_.state();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (opt_.steps() == 0) break;
      s.emplace_back("adam.m." + names_[i], const_cast<AdamW&>(opt_).first_moments()[i]);
      s.emplace_back("adam.v." + names_[i], const_cast<AdamW&>(opt_).second_moments()[i]);
    }
    s.emplace_back("trainer.step", NDArray::scalar(static_cast<double>(step_)));
    s.emplace_back("trainer.adam_steps", NDArray::scalar(static_cast<double>(opt_.steps())));
    NDArray tr(Shape{trace_.size(), 9});
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      const auto& l = trace_[i];
      const double row[9] = {static_cast<double>(l.step), l.l_flow, l.l_corr, l.lambda_corr, l.l_total,
                             l.grad_norm_adapter, l.grad_norm_lora, l.clipped_norm_adapter, l.clipped_norm_lora};
      std::copy(row, row + 9, tr.data.begin() + static_cast<std::ptrdiff_t>(i * 9));
    }
    s.emplace_back("trainer.trace", std::move(tr));
    return s;
  }

  void restore(const ad::NamedArrays& s) {
    std::map<std::string, const NDArray*> by;
    for (const auto& [n, a] : s) by[n] = &a;
    auto get = [&](const std::string& n) -> const NDArray& {
      auto it = by.find(n);
      if (it == by.end()) throw ad::CheckpointError("checkpoint lacks " + n);
      return *it->second;
    };
    model_.load_state(s);
    step_ = static_cast<long>(get("trainer.step")[0]);
    const long adam_steps = static_cast<long>(get("trainer.adam_steps")[0]);
    if (adam_steps > 0) {
      std::vector<NDArray> m, v;
      for (const auto& n : names_) {
        m.push_back(get("adam.m." + n));
        v.push_back(get("adam.v." + n));
      }
      opt_.restore(adam_steps, std::move(m), std::move(v));
    } else {
      opt_ = AdamW(AdamWOptions{0.9, 0.999, 1e-8, cfg_.train.weight_decay});
    }
    trace_.clear();
    const NDArray& tr = get("trainer.trace");
    for (std::size_t i = 0; i < tr.rows() && tr.size() > 0; ++i) {
      LossBreakdown l;
      l.step = static_cast<long>(tr.at(i, 0));
      l.l_flow = tr.at(i, 1);
      l.l_corr = tr.at(i, 2);
      l.lambda_corr = tr.at(i, 3);
      l.l_total = tr.at(i, 4);
      l.grad_norm_adapter = tr.at(i, 5);
      l.grad_norm_lora = tr.at(i, 6);
      l.clipped_norm_adapter = tr.at(i, 7);
      l.clipped_norm_lora = tr.at(i, 8);
      trace_.push_back(l);
    }
  }

  void save(const std::string& path) const { ad::save_checkpoint(path, snapshot()); }
  void load(const std::string& path) { restore(ad::load_checkpoint(path)); }

 private:
  ExperimentConfig cfg_;
  Model model_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
  std::vector<bool> decay_;
  AdamW opt_;
  long step_ = 0;
  std::vector<LossBreakdown> trace_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct ProbeResult {
  std::vector<geometry::Vec2> predicted;
  std::vector<geometry::Vec2> oracle;
};

/// Head-averaged attention of the probe layer for a batch at flow time t.
inline ad::RowMat batch_attention(const Model& m, const Batch& b, double t, const NDArray& eps, int layer) {
  const auto fs = flow_sample(b.z0, eps, t);
  model::AttentionProbe probe;
  probe.layer = layer;
  {
    ad::NoGradGuard ng;
    model::ForwardInputs in{Tensor::constant(fs.z_t), t, Tensor::constant(b.cond), b.cameras};
    (void)m.forward(in, nullptr, &probe);
  }
  ad::RowMat avg = probe.weights.front();
  for (std::size_t h = 1; h < probe.weights.size(); ++h) avg += probe.weights[h];
  avg /= static_cast<double>(probe.weights.size());
  return avg;
}

/// Predicted target pixel for every pair in both directions: the centre of
/// the highest-attention patch of the target frame for the query token.
inline ProbeResult probe_pairs(const ad::RowMat& attn, const Batch& b, const ModelConfig& mc,
                               const geometry::Intrinsics& intr) {
  const auto grid = patch_grid(mc);
  const int p = grid.patches();
  ProbeResult r;
  for (const auto& pr : b.pairs.pairs) {
    const int fq = b.frame_of_view[static_cast<std::size_t>(pr.view_q)];
    const int fk = b.frame_of_view[static_cast<std::size_t>(pr.view_k)];
    if (fq == fk) continue;
    r.predicted.push_back(correspondence::predict_from_attention(attn.row(fq * p + pr.patch_q).data(), fk, intr, grid));
    r.oracle.emplace_back(pr.u_k, pr.v_k);
    r.predicted.push_back(correspondence::predict_from_attention(attn.row(fk * p + pr.patch_k).data(), fq, intr, grid));
    r.oracle.emplace_back(pr.u_q, pr.v_q);
  }
  return r;
}

inline Batch eval_batch(const ExperimentConfig& cfg, int scene) {
  return make_batch(cfg, eval_stream_seed(cfg.data.eval_seed, scene));
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Correspondence accuracy of the attention proxy on each held-out scene.
inline std::vector<double> evaluate_corr_acc(const Model& m, const ExperimentConfig& cfg) {
  const auto intr = pixel_intrinsics(cfg.data);
  std::vector<double> acc;
  for (int s = 0; s < cfg.data.eval_scenes; ++s) {
    const Batch b = eval_batch(cfg, s);
    std::mt19937_64 rng(mix_seed(eval_stream_seed(cfg.data.eval_seed, s), 3));
    const NDArray eps = gaussian_like(b.z0.shape, rng);
    const auto attn = batch_attention(m, b, cfg.data.eval_t, eps, cfg.data.eval_layer);
    const auto pr = probe_pairs(attn, b, m.config(), intr);
    acc.push_back(correspondence::corr_acc(pr.predicted, pr.oracle, cfg.data.threshold_px));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Runs and ablations

using StepCallback = std::function<void(Trainer&, const LossBreakdown&)>;

inline RunReport finish_report(const Trainer& tr, double seconds) {
  RunReport r;
  r.arm = arm_of(tr.config().train);
  r.seed = tr.config().train.seed;
  r.trace = tr.trace();
  r.scene_corr_acc = evaluate_corr_acc(tr.model(), tr.config());
  r.corr_acc_median = median(r.scene_corr_acc);
  const std::size_t n = std::min<std::size_t>(50, r.trace.size());
  for (std::size_t i = r.trace.size() - n; i < r.trace.size(); ++i) {
    r.final_l_flow += r.trace[i].l_flow / static_cast<double>(n);
    r.final_l_corr += r.trace[i].l_corr / static_cast<double>(n);
  }
  r.seconds = seconds;
  return r;
}

/// Trains one arm to completion (resuming from `trainer`'s state) and evaluates it.
inline RunReport run_training(Trainer& tr, const StepCallback& on_step = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  while (!tr.done()) {
    const auto lb = tr.train_step();
    if (on_step) on_step(tr, lb);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return finish_report(tr, secs);
}

inline RunReport run_ablation(Arm arm, const ExperimentConfig& base, const StepCallback& on_step = {}) {
  Trainer tr(apply_arm(base, arm));
  return run_training(tr, on_step);
}

/// Parallel worker count: MVATTN_THREADS if set (>= 1), else hardware concurrency.
inline unsigned worker_threads(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MVATTN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

struct ArmJob {
  Arm arm = Arm::Full;
  std::uint64_t seed = 0;
};

/// Runs independent arms on up to worker_threads() threads; reports keep job order.
inline std::vector<RunReport> run_ablations(const std::vector<ArmJob>& jobs, const ExperimentConfig& base,
                                            const std::function<void(std::size_t, const RunReport&)>& on_done = {}) {
  std::vector<RunReport> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        ExperimentConfig c = base;
        c.train.seed = jobs[i].seed;
        out[i] = run_ablation(jobs[i].arm, c);
        if (on_done) {
          std::lock_guard<std::mutex> lock(mu);
          on_done(i, out[i]);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = worker_threads(jobs.size());
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

/// Reports sorted by median correspondence accuracy, best first.
inline std::vector<RunReport> rank_by_corr_acc(std::vector<RunReport> r) {
  std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.corr_acc_median > b.corr_acc_median; });
  return r;
}

// ---------------------------------------------------------------------------
// Trace files

inline std::string trace_csv_header() { return "step,l_flow,l_corr,lambda,l_total,grad_norm_adapter,grad_norm_lora\n"; }

inline std::string format_trace_row(const LossBreakdown& l) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", l.step, l.l_flow, l.l_corr,
                l.lambda_corr, l.l_total, l.grad_norm_adapter, l.grad_norm_lora);
  return buf;
}

inline std::string format_trace_csv(const std::vector<LossBreakdown>& trace) {
  std::string s = trace_csv_header();
  for (const auto& l : trace) s += format_trace_row(l);
  return s;
}

}  // namespace mvattn::training
