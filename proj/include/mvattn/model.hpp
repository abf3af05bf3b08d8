// Toy multi-view diffusion transformer.
//
// The backbone (patch embedding, self-attention, cross-attention stub, FFN,
// output head) is randomly initialized and frozen; it stands in for a
// pretrained video transformer and has no real prior. Trainable parameters
// are the LoRA factors on the self-attention q/k/v/o projections and the
// camera-aware adapter (CA3) that runs in parallel with self-attention:
//
//   h' = h + SelfAttn_lora(LN h) + CA3(LN h, cameras)
//   h  = h' + CrossStub(LN h')
//   h  = h  + FFN(LN h)
//
// Both trainable paths are zero at initialization (LoRA B = 0, CA3 output
// projection = 0), so a fresh model computes exactly the frozen backbone.
#pragma once

#include "mvattn/autodiff.hpp"
#include "mvattn/geometry.hpp"
#include "mvattn/prope.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvattn::model {

using ad::NDArray;
using ad::Shape;
using ad::Tensor;
using geometry::ProjectiveMatrix;
using prope::PropeLayout;
using prope::TokenViewMap;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int depth = 8;
  int model_dim = 64;
  int heads = 4;
  int ffn_mult = 4;
  int adapter_bottleneck_ratio = 4;
  int adapter_heads = 2;
  int lora_rank = 16;
  std::vector<int> supervised_layers{3, 4, 5, 6};
  int patch_rows = 8;
  int patch_cols = 8;
  int views = 8;
  int latent_dim = 8;
  int projective_dim = -1;  // -1: default split
  double rope_base = 100.0;
  bool use_ca3 = true;
  bool use_lora = true;
  std::uint64_t init_seed = 20240601;

  int bottleneck_dim() const { return model_dim / adapter_bottleneck_ratio; }
  int adapter_head_dim() const { return bottleneck_dim() / adapter_heads; }
  int patches() const { return patch_rows * patch_cols; }
  PropeLayout adapter_layout() const { return PropeLayout::make(adapter_head_dim(), projective_dim); }

  /// Every violated constraint, empty when valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    auto need = [&](bool ok, const std::string& msg) {
      if (!ok) p.push_back(msg);
    };
    need(depth >= 1, "depth must be >= 1");
    need(model_dim >= 1, "model_dim must be >= 1");
    need(heads >= 1 && model_dim % std::max(heads, 1) == 0, "model_dim must be divisible by heads");
    need(ffn_mult >= 1, "ffn_mult must be >= 1");
    need(adapter_bottleneck_ratio >= 1 && model_dim % std::max(adapter_bottleneck_ratio, 1) == 0,
         "model_dim must be divisible by adapter_bottleneck_ratio");
    need(adapter_heads >= 1 && adapter_bottleneck_ratio >= 1 &&
             bottleneck_dim() % std::max(adapter_heads, 1) == 0,
         "bottleneck dim must be divisible by adapter_heads");
    need(lora_rank >= 0, "lora_rank must be >= 0");
    need(patch_rows >= 1 && patch_cols >= 1, "patch grid must be non-empty");
    need(views >= 1, "views must be >= 1");
    need(latent_dim >= 1, "latent_dim must be >= 1");
    need(rope_base > 0.0, "rope_base must be positive");
    for (int l : supervised_layers) {
      need(l >= 0 && l < depth, "supervised layer " + std::to_string(l) + " outside [0, depth)");
    }
    if (use_ca3 && p.empty()) {
      try {
        (void)adapter_layout();
      } catch (const std::exception& e) {
        p.push_back(std::string("adapter head layout: ") + e.what());
      }
    }
    return p;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
};

enum class ParamGroup { Frozen, Lora, Adapter };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::Frozen;
  bool decay = false;  // weight decay applies (matrices only)
};

/// Block-input activations at supervised layers, kept on the live graph.
struct HiddenCache {
  std::map<int, Tensor> states;
  void clear() { states.clear(); }
};

/// Requests the camera-adapter attention matrix (per head) of one layer.
/// Falls back to backbone self-attention when the adapter is disabled.
struct AttentionProbe {
  int layer = 0;
  bool from_adapter = false;
  std::vector<ad::RowMat> weights;
};

struct ForwardInputs {
  Tensor z_t;                                 // [frames * patches, latent_dim]
  double t = 0.0;                             // flow time in [0, 1]
  Tensor cond;                                // [patches, latent_dim] conditioning (anchor) frame
  std::vector<ProjectiveMatrix> cameras;      // one per frame of z_t
};

// ---------------------------------------------------------------------------
// Frame replication

struct FrameLayout {
  std::vector<std::vector<int>> frames_of;  // view -> input frame indices
  std::vector<int> latent_of;               // view -> latent index (latent 0 is the anchor)
  int total_frames = 0;
  int total_latents = 0;
};

/// Each view repeated `compression` times behind one leading copy of view 0,
/// so a temporally compressing encoder yields one anchor latent plus one latent
/// per view.
inline FrameLayout frame_replication_map(int n_views, int compression = 4) {
  if (n_views < 1) throw std::domain_error("frame replication needs at least one view");
  if (compression != 4) throw std::domain_error("only 4x temporal compression is supported");
  FrameLayout f;
  f.total_frames = compression * n_views + 1;
  f.total_latents = n_views + 1;
  f.frames_of.resize(static_cast<std::size_t>(n_views));
  f.frames_of[0].push_back(0);
  for (int v = 0; v < n_views; ++v) {
    for (int r = 0; r < compression; ++r) f.frames_of[static_cast<std::size_t>(v)].push_back(1 + compression * v + r);
    f.latent_of.push_back(v + 1);
  }
  return f;
}

/// Without replication: the N views (after the leading anchor frame) are
/// compressed in groups of `compression`, so neighbouring views share a latent.
inline FrameLayout merged_latent_map(int n_views, int compression = 4) {
  if (n_views < 1) throw std::domain_error("latent map needs at least one view");
  if (compression < 1) throw std::domain_error("compression must be >= 1");
  FrameLayout f;
  f.total_frames = n_views + 1;
  f.total_latents = 1 + (n_views + compression - 1) / compression;
  f.frames_of.resize(static_cast<std::size_t>(n_views));
  f.frames_of[0].push_back(0);
  for (int v = 0; v < n_views; ++v) {
    f.frames_of[static_cast<std::size_t>(v)].push_back(1 + v);
    f.latent_of.push_back(1 + v / compression);
  }
  return f;
}

// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined

  Tensor operator()(const Tensor& x) const { return ad::linear(x, weight, bias); }
};

struct LoraFactors {
  Tensor a;  // [rank, in]
  Tensor b;  // [out, rank]
};

/// (W + B A) x + b. With B = 0 this is exactly the frozen projection.
inline Tensor lora_linear(const Tensor& x, const Linear& frozen, const LoraFactors* lora) {
  Tensor y = frozen(x);
  if (lora == nullptr || !lora->a.defined()) return y;
  if (lora->a.shape().size() != 2 || lora->b.shape().size() != 2 || lora->a.shape()[0] != lora->b.shape()[1] ||
      lora->a.shape()[1] != frozen.weight.shape()[1] || lora->b.shape()[0] != frozen.weight.shape()[0]) {
    throw ad::ShapeError("lora_linear", "factors " + ad::shape_str(lora->a.shape()) + " / " +
                                            ad::shape_str(lora->b.shape()) + " do not fit weight " +
                                            ad::shape_str(frozen.weight.shape()));
  }
  return ad::add(y, ad::linear(ad::linear(x, lora->a), lora->b));
}

struct CameraAdapter {
  Linear down;  // [r, D]
  Linear q, k, v;  // [r, r]
  Linear out;   // [D, r], zero-initialized
};

struct Block {
  Linear sa_q, sa_k, sa_v, sa_o;
  LoraFactors lora_q, lora_k, lora_v, lora_o;
  CameraAdapter ca3;
  Linear x_q, x_k, x_v, x_o;  // cross-attention stub over a constant token
  Linear ffn_in, ffn_out;
};

namespace detail {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  NDArray gaussian(Shape s, double stddev) {
    std::normal_distribution<double> nd(0.0, stddev);
    NDArray a(std::move(s));
    for (auto& v : a.data) v = nd(rng_);
    return a;
  }

  /// [out, in] with orthonormal rows or columns, scaled by `gain`.
  NDArray orthogonal(std::size_t out, std::size_t in, double gain) {
    const std::size_t big = std::max(out, in), small = std::min(out, in);
    NDArray g = gaussian(Shape{big, small}, 1.0);
    ad::RowMat m = g.mat();
    Eigen::HouseholderQR<ad::RowMat> qr(m);
    ad::RowMat q = qr.householderQ() * ad::RowMat::Identity(static_cast<Eigen::Index>(big), static_cast<Eigen::Index>(small));
    NDArray w(Shape{out, in});
    if (out >= in) {
      w.mat() = gain * q;
    } else {
      w.mat() = gain * q.transpose();
    }
    return w;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace detail

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (p.group == g) n += p.tensor.size();
    }
    return n;
  }

  TokenViewMap token_map(int frames) const { return TokenViewMap{frames, cfg_.patch_rows, cfg_.patch_cols}; }

  /// Velocity prediction for the frames of z_t (anchor rows removed).
  Tensor forward(const ForwardInputs& in, HiddenCache* cache = nullptr, AttentionProbe* probe = nullptr) const {
    return run(in, cache, probe, /*backbone_only=*/false);
  }

  /// The frozen backbone alone: no LoRA, no camera adapter.
  Tensor forward_backbone(const ForwardInputs& in) const { return run(in, nullptr, nullptr, /*backbone_only=*/true); }

  /// One transformer block on the full token sequence (anchor frame first).
  Tensor block_forward(int layer, const Tensor& h, const std::vector<ProjectiveMatrix>& frame_cameras,
                       const TokenViewMap& map, HiddenCache* cache = nullptr, AttentionProbe* probe = nullptr,
                       bool backbone_only = false) const {
    if (layer < 0 || layer >= cfg_.depth) throw std::domain_error("layer " + std::to_string(layer) + " out of range");
    if (h.shape().size() != 2 || h.cols() != static_cast<std::size_t>(cfg_.model_dim) ||
        h.rows() != static_cast<std::size_t>(map.tokens())) {
      throw ad::ShapeError("block_forward", "hidden state " + ad::shape_str(h.shape()) + " does not match " +
                                                std::to_string(map.tokens()) + " tokens of width " +
                                                std::to_string(cfg_.model_dim));
    }
    const Block& b = blocks_[static_cast<std::size_t>(layer)];
    if (cache != nullptr && is_supervised(layer)) cache->states[layer] = h;
    const bool want_probe = probe != nullptr && probe->layer == layer;

    Tensor a = ad::layer_norm(h);
    const bool lora = cfg_.use_lora && !backbone_only;
    Tensor q = lora_linear(a, b.sa_q, lora ? &b.lora_q : nullptr);
    Tensor k = lora_linear(a, b.sa_k, lora ? &b.lora_k : nullptr);
    Tensor v = lora_linear(a, b.sa_v, lora ? &b.lora_v : nullptr);
    const std::size_t hd = static_cast<std::size_t>(cfg_.model_dim / cfg_.heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (want_probe && !(cfg_.use_ca3 && !backbone_only)) {
      probe->from_adapter = false;
      probe->weights = ad::attention_weights(q.value(), k.value(), static_cast<std::size_t>(cfg_.heads), scale);
    }
    Tensor sa = ad::attention(q, k, v, static_cast<std::size_t>(cfg_.heads), scale);
    sa = lora_linear(sa, b.sa_o, lora ? &b.lora_o : nullptr);

    Tensor out = ad::add(h, sa);
    if (cfg_.use_ca3 && !backbone_only) {
      out = ad::add(out, ca3_branch(layer, h, frame_cameras, map, want_probe ? probe : nullptr));
    }

    Tensor c = ad::layer_norm(out);
    Tensor xq = b.x_q(c);
    Tensor xk = b.x_k(cond_token_);
    Tensor xv = b.x_v(cond_token_);
    Tensor x = ad::attention(xq, xk, xv, static_cast<std::size_t>(cfg_.heads), scale);
    out = ad::add(out, b.x_o(x));

    Tensor f = b.ffn_out(ad::gelu(b.ffn_in(ad::layer_norm(out))));
    return ad::add(out, f);
  }

  struct AdapterQK {
    Tensor q;
    Tensor k;
  };

  /// Camera-modulated adapter queries and keys for block input h. The
  /// adapter forward pass and the correspondence loss both use this.
  AdapterQK adapter_query_key(int layer, const Tensor& h, const std::vector<ProjectiveMatrix>& frame_cameras,
                              const TokenViewMap& map) const {
    require_adapter(layer);
    const CameraAdapter& ca = blocks_[static_cast<std::size_t>(layer)].ca3;
    const PropeLayout layout = cfg_.adapter_layout();
    Tensor z = ca.down(ad::layer_norm(h));
    Tensor q = ca.q(z), k = ca.k(z);
    const auto ct = prope::camera_transforms(frame_cameras);
    q = prope::transform_projective_blocks(q, ct.query, map, layout, cfg_.adapter_heads);
    k = prope::transform_projective_blocks(k, ct.key, map, layout, cfg_.adapter_heads);
    auto rot = prope::spatial_rope(q, k, map, layout, cfg_.adapter_heads, cfg_.rope_base);
    return {rot.q, rot.k};
  }

  /// down-project -> PRoPE attention over all tokens -> zero-initialized up-projection.
  Tensor ca3_branch(int layer, const Tensor& h, const std::vector<ProjectiveMatrix>& frame_cameras,
                    const TokenViewMap& map, AttentionProbe* probe = nullptr) const {
    require_adapter(layer);
    const CameraAdapter& ca = blocks_[static_cast<std::size_t>(layer)].ca3;
    const PropeLayout layout = cfg_.adapter_layout();
    Tensor z = ca.down(ad::layer_norm(h));
    Tensor q = ca.q(z), k = ca.k(z), v = ca.v(z);
    auto mod = prope::modulate_qkv(q, k, v, frame_cameras, map, layout, cfg_.adapter_heads);
    auto rot = prope::spatial_rope(mod.q, mod.k, map, layout, cfg_.adapter_heads, cfg_.rope_base);
    const double scale = 1.0 / std::sqrt(static_cast<double>(layout.head_dim));
    if (probe != nullptr) {
      probe->from_adapter = true;
      probe->weights = ad::attention_weights(rot.q.value(), rot.k.value(), static_cast<std::size_t>(cfg_.adapter_heads), scale);
    }
    Tensor o = ad::attention(rot.q, rot.k, mod.v, static_cast<std::size_t>(cfg_.adapter_heads), scale);
    o = prope::unmodulate_output(o, frame_cameras, map, layout, cfg_.adapter_heads);
    return ca.out(o);
  }

  bool is_supervised(int layer) const {
    for (int l : cfg_.supervised_layers) {
      if (l == layer) return true;
    }
    return false;
  }

  /// Cameras for the full sequence: the anchor frame reuses the first camera.
  static std::vector<ProjectiveMatrix> sequence_cameras(const std::vector<ProjectiveMatrix>& cameras) {
    std::vector<ProjectiveMatrix> out;
    out.reserve(cameras.size() + 1);
    out.push_back(cameras.front());
    out.insert(out.end(), cameras.begin(), cameras.end());
    return out;
  }

  /// Snapshot of every parameter by name (frozen ones included).
  std::vector<std::pair<std::string, NDArray>> state() const {
    std::vector<std::pair<std::string, NDArray>> s;
    for (const auto& p : params_) s.emplace_back(p.name, p.tensor.value());
    return s;
  }

  /// Loads values by name; every parameter must be present with its shape.
  void load_state(const std::vector<std::pair<std::string, NDArray>>& s) {
    std::map<std::string, const NDArray*> by_name;
    for (const auto& [n, a] : s) by_name[n] = &a;
    for (auto& p : params_) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw std::runtime_error("state is missing parameter " + p.name);
      if (it->second->shape != p.tensor.shape()) {
        throw ad::ShapeError("load_state " + p.name, p.tensor.shape(), it->second->shape);
      }
      p.tensor.mutable_value() = *it->second;
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  void require_adapter(int layer) const {
    if (!cfg_.use_ca3) throw std::domain_error("model has no camera adapter");
    if (layer < 0 || layer >= cfg_.depth) throw std::domain_error("layer " + std::to_string(layer) + " out of range");
  }

  Tensor run(const ForwardInputs& in, HiddenCache* cache, AttentionProbe* probe, bool backbone_only) const {
    if (!(in.t >= 0.0 && in.t <= 1.0)) throw std::domain_error("flow time must lie in [0, 1], got " + std::to_string(in.t));
    const std::size_t p = static_cast<std::size_t>(cfg_.patches());
    const std::size_t ld = static_cast<std::size_t>(cfg_.latent_dim);
    if (in.z_t.shape().size() != 2 || in.z_t.cols() != ld || in.z_t.rows() == 0 || in.z_t.rows() % p != 0) {
      throw ad::ShapeError("model_forward", "latents " + ad::shape_str(in.z_t.shape()) + " are not frames of " +
                                                std::to_string(p) + " patches x " + std::to_string(ld));
    }
    if (in.cond.shape() != Shape{p, ld}) throw ad::ShapeError("model_forward", in.z_t.shape(), in.cond.shape());
    const int frames = static_cast<int>(in.z_t.rows() / p);
    const bool cams_needed = cfg_.use_ca3 && !backbone_only;
    if (cams_needed && in.cameras.size() != static_cast<std::size_t>(frames)) {
      throw std::invalid_argument("expected " + std::to_string(frames) + " cameras, got " + std::to_string(in.cameras.size()));
    }
    if (probe != nullptr && (probe->layer < 0 || probe->layer >= cfg_.depth)) {
      throw std::domain_error("probe layer " + std::to_string(probe->layer) + " out of range");
    }
    const TokenViewMap map = token_map(frames + 1);
    const auto cams = cams_needed ? sequence_cameras(in.cameras) : std::vector<ProjectiveMatrix>{};

    Tensor tokens = ad::concat({in.cond, in.z_t}, 0);
    Tensor h = ad::add(embed_(tokens), Tensor::constant(position_table(frames + 1, in.t)));
    for (int l = 0; l < cfg_.depth; ++l) h = block_forward(l, h, cams, map, cache, probe, backbone_only);
    Tensor y = head_(ad::layer_norm(h));
    return ad::slice_rows(y, p, static_cast<std::size_t>(frames) * p);
  }

  /// Frozen additive table: patch position + frame type (anchor / view) + time.
  NDArray position_table(int frames, double t) const {
    const std::size_t d = static_cast<std::size_t>(cfg_.model_dim);
    const std::size_t p = static_cast<std::size_t>(cfg_.patches());
    Eigen::VectorXd feat(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(1000.0, -static_cast<double>(i / 2) / static_cast<double>(d / 2 + 1));
      feat[static_cast<Eigen::Index>(i)] = (i % 2 == 0) ? std::sin(2.0 * std::numbers::pi * t * freq * 10.0)
                                                         : std::cos(2.0 * std::numbers::pi * t * freq * 10.0);
    }
    const Eigen::VectorXd temb = time_proj_.value().mat() * feat;
    NDArray out(Shape{static_cast<std::size_t>(frames) * p, d});
    for (int f = 0; f < frames; ++f) {
      const NDArray& type = (f == 0) ? anchor_type_.value() : view_type_.value();
      for (std::size_t s = 0; s < p; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
          out.at(static_cast<std::size_t>(f) * p + s, j) =
              pos_table_.value().at(s, j) + type[j] + temb[static_cast<Eigen::Index>(j)];
        }
      }
    }
    return out;
  }

  Tensor add_param(const std::string& name, NDArray value, ParamGroup group, bool decay) {
    Tensor t = group == ParamGroup::Frozen ? Tensor::constant(std::move(value)) : Tensor::parameter(std::move(value));
    params_.push_back(NamedParam{name, t, group, decay});
    return t;
  }

  Linear frozen_linear(detail::Init& init, const std::string& name, std::size_t out, std::size_t in, double gain) {
    Linear l;
    l.weight = add_param(name + ".weight", init.orthogonal(out, in, gain), ParamGroup::Frozen, false);
    l.bias = add_param(name + ".bias", init.gaussian(Shape{out}, 0.02), ParamGroup::Frozen, false);
    return l;
  }

  Linear adapter_linear(detail::Init& init, const std::string& name, std::size_t out, std::size_t in, bool zero) {
    Linear l;
    NDArray w = zero ? NDArray(Shape{out, in}) : init.gaussian(Shape{out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
    l.weight = add_param(name + ".weight", std::move(w), ParamGroup::Adapter, true);
    l.bias = add_param(name + ".bias", NDArray(Shape{out}), ParamGroup::Adapter, false);
    return l;
  }

  LoraFactors lora(detail::Init& init, const std::string& name, std::size_t out, std::size_t in) {
    if (!cfg_.use_lora || cfg_.lora_rank == 0) return {};
    const std::size_t r = static_cast<std::size_t>(cfg_.lora_rank);
    LoraFactors f;
    f.a = add_param(name + ".lora_a", init.gaussian(Shape{r, in}, 1.0 / std::sqrt(static_cast<double>(in))), ParamGroup::Lora, true);
    f.b = add_param(name + ".lora_b", NDArray(Shape{out, r}), ParamGroup::Lora, true);
    return f;
  }

  void build() {
    detail::Init init(cfg_.init_seed);
    const std::size_t d = static_cast<std::size_t>(cfg_.model_dim);
    const std::size_t ld = static_cast<std::size_t>(cfg_.latent_dim);
    const std::size_t p = static_cast<std::size_t>(cfg_.patches());
    const std::size_t r = static_cast<std::size_t>(cfg_.bottleneck_dim());
    const std::size_t ff = d * static_cast<std::size_t>(cfg_.ffn_mult);

    embed_ = frozen_linear(init, "embed", d, ld, 2.0);
    pos_table_ = add_param("pos_table", init.gaussian(Shape{p, d}, 0.2), ParamGroup::Frozen, false);
    anchor_type_ = add_param("frame_type.anchor", init.gaussian(Shape{d}, 0.2), ParamGroup::Frozen, false);
    view_type_ = add_param("frame_type.view", init.gaussian(Shape{d}, 0.2), ParamGroup::Frozen, false);
    time_proj_ = add_param("time_proj", init.orthogonal(d, d, 0.25), ParamGroup::Frozen, false);
    cond_token_ = add_param("cond_token", init.gaussian(Shape{1, d}, 1.0), ParamGroup::Frozen, false);

    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string pre = "blocks." + std::to_string(l) + ".";
      Block b;
      b.sa_q = frozen_linear(init, pre + "attn.q", d, d, 1.0);
      b.sa_k = frozen_linear(init, pre + "attn.k", d, d, 1.0);
      b.sa_v = frozen_linear(init, pre + "attn.v", d, d, 1.0);
      b.sa_o = frozen_linear(init, pre + "attn.o", d, d, 0.25);
      b.lora_q = lora(init, pre + "attn.q", d, d);
      b.lora_k = lora(init, pre + "attn.k", d, d);
      b.lora_v = lora(init, pre + "attn.v", d, d);
      b.lora_o = lora(init, pre + "attn.o", d, d);
      if (cfg_.use_ca3) {
        b.ca3.down = adapter_linear(init, pre + "ca3.down", r, d, false);
        b.ca3.q = adapter_linear(init, pre + "ca3.q", r, r, false);
        b.ca3.k = adapter_linear(init, pre + "ca3.k", r, r, false);
        b.ca3.v = adapter_linear(init, pre + "ca3.v", r, r, false);
        b.ca3.out = adapter_linear(init, pre + "ca3.out", d, r, true);
      }
      b.x_q = frozen_linear(init, pre + "cross.q", d, d, 1.0);
      b.x_k = frozen_linear(init, pre + "cross.k", d, d, 1.0);
      b.x_v = frozen_linear(init, pre + "cross.v", d, d, 1.0);
      b.x_o = frozen_linear(init, pre + "cross.o", d, d, 0.1);
      b.ffn_in = frozen_linear(init, pre + "ffn.in", ff, d, 1.0);
      b.ffn_out = frozen_linear(init, pre + "ffn.out", d, ff, 0.25);
      blocks_.push_back(std::move(b));
    }
    head_ = frozen_linear(init, "head", ld, d, 1.0);
  }

  ModelConfig cfg_;
  std::vector<NamedParam> params_;
  std::vector<Block> blocks_;
  Linear embed_;
  Linear head_;
  Tensor pos_table_, anchor_type_, view_type_, time_proj_, cond_token_;
};

/// Adapter parameter count per block: down, q/k/v, out weights plus biases.
inline std::size_t adapter_parameter_count(const ModelConfig& cfg, bool with_biases = true) {
  const std::size_t d = static_cast<std::size_t>(cfg.model_dim);
  const std::size_t r = static_cast<std::size_t>(cfg.bottleneck_dim());
  std::size_t n = d * r + 3 * r * r + r * d;
  if (with_biases) n += r + 3 * r + d;
  return n;
}

/// Row of the probed attention matrix for one query token, averaged over heads.
inline std::vector<double> extract_attention(const Model& model, const ForwardInputs& in, int layer, int query_token) {
  if (layer < 0 || layer >= model.config().depth) throw std::domain_error("invalid layer " + std::to_string(layer));
  AttentionProbe probe;
  probe.layer = layer;
  {
    ad::NoGradGuard guard;
    (void)model.forward(in, nullptr, &probe);
  }
  const auto& w = probe.weights;
  if (query_token < 0 || query_token >= w.front().rows()) throw std::domain_error("query token out of range");
  std::vector<double> row(static_cast<std::size_t>(w.front().cols()), 0.0);
  for (const auto& m : w) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] += m(query_token, j);
  }
  for (auto& v : row) v /= static_cast<double>(w.size());
  return row;
}

}  // namespace mvattn::model
