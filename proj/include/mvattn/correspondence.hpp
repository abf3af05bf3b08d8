// Synthetic multi-view scenes, an exact structure-from-motion oracle, the
// sparse contrastive correspondence loss and the correspondence accuracy
// metric.
#pragma once

#include "mvattn/autodiff.hpp"
#include "mvattn/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace mvattn::correspondence {

using ad::NDArray;
using ad::Shape;
using ad::Tensor;
using geometry::CameraPose;
using geometry::Intrinsics;
using geometry::Vec2;
using geometry::Vec3;

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// splitmix64 finalizer; derives independent stream seeds from (seed, salt).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct SyntheticScene {
  std::vector<Vec3> points;
  std::vector<int> labels;
  NDArray features;  // [points, latent_dim]

  std::size_t size() const { return points.size(); }
};

inline constexpr double kSceneRadius = 0.8;

/// Deterministic unit-Gaussian feature vector for a point label.
inline std::vector<double> label_feature(std::uint64_t seed, int label, int latent_dim) {
  std::mt19937_64 rng(mix_seed(seed, 0x5EED0000ULL + static_cast<std::uint64_t>(label)));
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> f(static_cast<std::size_t>(latent_dim));
  for (auto& v : f) v = nd(rng);
  return f;
}

/// Points i.i.d. uniform in the radius-0.8 ball with unique labels 0..n-1.
inline SyntheticScene generate_scene(std::uint64_t seed, int num_points, int latent_dim = 8) {
  if (num_points < 1) throw DomainError("scene needs at least one point");
  if (latent_dim < 1) throw DomainError("latent_dim must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-kSceneRadius, kSceneRadius);
  SyntheticScene s;
  s.features = NDArray(Shape{static_cast<std::size_t>(num_points), static_cast<std::size_t>(latent_dim)});
  for (int i = 0; i < num_points; ++i) {
    Vec3 p;
    do {
      p = Vec3(uni(rng), uni(rng), uni(rng));
    } while (p.norm() >= kSceneRadius);
    s.points.push_back(p);
    s.labels.push_back(i);
    const auto f = label_feature(seed, i, latent_dim);
    std::copy(f.begin(), f.end(), s.features.data.begin() + static_cast<std::ptrdiff_t>(i * latent_dim));
  }
  return s;
}

struct PatchGrid {
  int rows = 8;
  int cols = 8;
  int patches() const { return rows * cols; }
};

/// Row-major patch containing the pixel; floor semantics, so a pixel on a
/// patch boundary belongs to the patch that starts there.
inline int pixel_to_patch(double u, double v, const Intrinsics& intr, const PatchGrid& grid) {
  if (!intr.contains(u, v)) {
    throw DomainError("pixel (" + std::to_string(u) + ", " + std::to_string(v) + ") outside the image");
  }
  const int col = std::min(grid.cols - 1, static_cast<int>(std::floor(u * grid.cols / intr.width)));
  const int row = std::min(grid.rows - 1, static_cast<int>(std::floor(v * grid.rows / intr.height)));
  return row * grid.cols + col;
}

inline Vec2 patch_center(int patch, const Intrinsics& intr, const PatchGrid& grid) {
  const int row = patch / grid.cols, col = patch % grid.cols;
  return Vec2((col + 0.5) * intr.width / grid.cols, (row + 0.5) * intr.height / grid.rows);
}

/// Per-view patch latents: each visible point splats its feature onto patch
/// centres with a Gaussian of `sigma_patches` patch widths. [views * patches, latent_dim].
inline NDArray render_latents(const SyntheticScene& scene, const std::vector<CameraPose>& poses,
                              const Intrinsics& intr, const PatchGrid& grid, double sigma_patches = 0.5) {
  const std::size_t ld = scene.features.cols();
  const std::size_t p = static_cast<std::size_t>(grid.patches());
  NDArray out(Shape{poses.size() * p, ld});
  const double sigma = sigma_patches * intr.width / grid.cols;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t v = 0; v < poses.size(); ++v) {
    for (std::size_t j = 0; j < scene.size(); ++j) {
      geometry::Projection pr;
      try {
        pr = geometry::project_point(poses[v], intr, scene.points[j]);
      } catch (const geometry::BehindCameraError&) {
        continue;
      }
      if (!intr.contains(pr.u, pr.v)) continue;
      for (std::size_t s = 0; s < p; ++s) {
        const Vec2 c = patch_center(static_cast<int>(s), intr, grid);
        const double d2 = (c.x() - pr.u) * (c.x() - pr.u) + (c.y() - pr.v) * (c.y() - pr.v);
        const double w = std::exp(-d2 * inv2s2);
        if (w < 1e-12) continue;
        for (std::size_t k = 0; k < ld; ++k) out.at(v * p + s, k) += w * scene.features.at(j, k);
      }
    }
  }
  return out;
}

struct CorrespondencePair {
  int point_id = 0;
  int view_q = 0;
  double u_q = 0.0, v_q = 0.0;
  int patch_q = 0;
  int view_k = 0;
  double u_k = 0.0, v_k = 0.0;
  int patch_k = 0;
  double weight = 1.0;
};

struct CorrespondenceSet {
  std::vector<CorrespondencePair> pairs;
  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  void sort() {
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
      return std::tie(a.point_id, a.view_q, a.view_k) < std::tie(b.point_id, b.view_q, b.view_k);
    });
  }
};

inline constexpr std::size_t kDefaultPairBudget = 10000;

struct SfmOptions {
  double noise_px = 0.0;
  double sigma_c = 2.0;  // confidence falloff, pixels
  std::size_t budget = kDefaultPairBudget;
  PatchGrid grid;
  std::uint64_t seed = 0;
};

/// Confidence of an observation displaced by `e` pixels from the true projection.
inline double confidence(double e, double sigma_c) { return std::exp(-(e * e) / (2.0 * sigma_c * sigma_c)); }

/// Uniform subsample without replacement down to `budget` pairs; ordering restored.
inline void subsample(CorrespondenceSet& set, std::size_t budget, std::mt19937_64& rng) {
  if (set.size() <= budget) return;
  std::vector<std::size_t> idx(set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(budget);
  std::sort(idx.begin(), idx.end());
  std::vector<CorrespondencePair> kept;
  kept.reserve(budget);
  for (auto i : idx) kept.push_back(set.pairs[i]);
  set.pairs = std::move(kept);
  set.sort();
}

/// Exact stand-in for an SfM reconstruction: every scene point observed (in
/// front, inside the frame) by two or more views yields one pair per view pair
/// with view_q < view_k. Observations may be displaced by Gaussian pixel
/// noise; the pair weight is the smaller of the two observation confidences.
inline CorrespondenceSet synthetic_sfm(const SyntheticScene& scene, const std::vector<CameraPose>& poses,
                                       const Intrinsics& intr, const SfmOptions& opt) {
  if (opt.noise_px < 0.0) throw DomainError("pixel noise must be non-negative");
  if (!(opt.sigma_c > 0.0)) throw DomainError("confidence scale must be positive");
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> noise(0.0, opt.noise_px > 0.0 ? opt.noise_px : 1.0);
  struct Obs {
    int view;
    double u, v, conf;
    int patch;
  };
  CorrespondenceSet set;
  for (std::size_t j = 0; j < scene.size(); ++j) {
    std::vector<Obs> obs;
    for (std::size_t n = 0; n < poses.size(); ++n) {
      double dx = 0.0, dy = 0.0;
      if (opt.noise_px > 0.0) {
        dx = noise(rng);
        dy = noise(rng);
      }
      geometry::Projection pr;
      try {
        pr = geometry::project_point(poses[n], intr, scene.points[j]);
      } catch (const geometry::BehindCameraError&) {
        continue;
      }
      const double u = pr.u + dx, v = pr.v + dy;
      if (!intr.contains(pr.u, pr.v) || !intr.contains(u, v)) continue;
      obs.push_back(Obs{static_cast<int>(n), u, v, confidence(std::hypot(dx, dy), opt.sigma_c),
                        pixel_to_patch(u, v, intr, opt.grid)});
    }
    for (std::size_t a = 0; a < obs.size(); ++a) {
      for (std::size_t b = a + 1; b < obs.size(); ++b) {
        set.pairs.push_back(CorrespondencePair{scene.labels[j], obs[a].view, obs[a].u, obs[a].v, obs[a].patch,
                                               obs[b].view, obs[b].u, obs[b].v, obs[b].patch,
                                               std::min(obs[a].conf, obs[b].conf)});
      }
    }
  }
  set.sort();
  subsample(set, opt.budget, rng);
  return set;
}

// ---------------------------------------------------------------------------
// Token-level targets

/// A correspondence pair resolved to token rows of the embedding matrices.
struct TokenPair {
  std::size_t query = 0;
  std::size_t key = 0;
  double weight = 1.0;
  int point_id = 0;
};

/// Maps pairs onto token rows: token = frame_of_view[view] * patches + patch.
/// Pairs whose views share a frame are dropped.
inline std::vector<TokenPair> to_token_pairs(const CorrespondenceSet& set, const std::vector<int>& frame_of_view,
                                             int patches) {
  std::vector<TokenPair> out;
  out.reserve(set.size());
  for (const auto& p : set.pairs) {
    const int fq = frame_of_view.at(static_cast<std::size_t>(p.view_q));
    const int fk = frame_of_view.at(static_cast<std::size_t>(p.view_k));
    if (fq == fk) continue;
    out.push_back(TokenPair{static_cast<std::size_t>(fq * patches + p.patch_q),
                            static_cast<std::size_t>(fk * patches + p.patch_k), p.weight, p.point_id});
  }
  return out;
}

/// Identity frame assignment (one frame per view).
inline std::vector<int> identity_frames(int views) {
  std::vector<int> f(static_cast<std::size_t>(views));
  for (int i = 0; i < views; ++i) f[static_cast<std::size_t>(i)] = i;
  return f;
}

/// Tokens observing each point (all views), used to exclude true correspondents from negatives.
inline std::map<int, std::set<std::size_t>> point_tokens(const std::vector<TokenPair>& pairs) {
  std::map<int, std::set<std::size_t>> m;
  for (const auto& p : pairs) {
    m[p.point_id].insert(p.query);
    m[p.point_id].insert(p.key);
  }
  return m;
}

/// Draws n_neg distinct tokens uniformly from [0, total_tokens) minus `excluded`.
inline std::vector<std::size_t> sample_negatives(const std::set<std::size_t>& excluded, std::size_t total_tokens,
                                                 std::size_t n_neg, std::mt19937_64& rng) {
  std::vector<std::size_t> cand;
  cand.reserve(total_tokens);
  for (std::size_t t = 0; t < total_tokens; ++t) {
    if (!excluded.contains(t)) cand.push_back(t);
  }
  if (cand.size() < n_neg) {
    throw DomainError("only " + std::to_string(cand.size()) + " negative candidates for " + std::to_string(n_neg) +
                      " requested");
  }
  for (std::size_t i = 0; i < n_neg; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, cand.size() - 1);
    std::swap(cand[i], cand[pick(rng)]);
  }
  cand.resize(n_neg);
  return cand;
}

/// Negatives for one pair: every token observing the pair's point (its own
/// query token and the positive key included) is excluded.
inline std::vector<std::size_t> sample_negatives(const std::map<int, std::set<std::size_t>>& observers,
                                                 const TokenPair& pair, std::size_t total_tokens, std::size_t n_neg,
                                                 std::mt19937_64& rng) {
  std::set<std::size_t> excluded{pair.query, pair.key};
  if (auto it = observers.find(pair.point_id); it != observers.end()) excluded.insert(it->second.begin(), it->second.end());
  return sample_negatives(excluded, total_tokens, n_neg, rng);
}

struct CslTargets {
  std::vector<TokenPair> pairs;
  std::vector<std::vector<std::size_t>> negatives;  // per pair
};

inline CslTargets build_targets(const std::vector<TokenPair>& pairs, std::size_t total_tokens, std::size_t n_neg,
                                std::mt19937_64& rng) {
  CslTargets t;
  t.pairs = pairs;
  const auto observers = point_tokens(pairs);
  for (const auto& p : pairs) t.negatives.push_back(sample_negatives(observers, p, total_tokens, n_neg, rng));
  return t;
}

/// Query-key dot products evaluated by csl_loss on this thread.
inline std::uint64_t& csl_dot_products() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

/// Confidence-weighted sparse InfoNCE:
///   -(1/M) sum_i w_i log( exp(q_i.k_i+/tau) / (exp(q_i.k_i+/tau) + sum_j exp(q_i.k_ij-/tau)) )
/// q_emb, k_emb: [tokens, d]. Costs exactly M * (n_neg + 1) dot products.
inline Tensor csl_loss(const Tensor& q_emb, const Tensor& k_emb, const CslTargets& targets, double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive, got " + std::to_string(tau));
  if (q_emb.shape() != k_emb.shape()) throw ad::ShapeError("csl_loss", q_emb.shape(), k_emb.shape());
  const std::size_t m = targets.pairs.size();
  if (m == 0) {
    std::cerr << "warning: empty correspondence set, correspondence loss is 0\n";
    return Tensor::scalar(0.0);
  }
  const std::size_t width = targets.negatives.front().size() + 1;
  std::vector<std::size_t> qi, ki;
  qi.reserve(m * width);
  ki.reserve(m * width);
  NDArray w(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    if (targets.negatives[i].size() + 1 != width) throw DomainError("ragged negative sets");
    qi.insert(qi.end(), width, targets.pairs[i].query);
    ki.push_back(targets.pairs[i].key);
    ki.insert(ki.end(), targets.negatives[i].begin(), targets.negatives[i].end());
    w[i] = targets.pairs[i].weight;
  }
  Tensor dots = ad::sum_last(ad::mul(ad::gather_rows(q_emb, std::move(qi)), ad::gather_rows(k_emb, std::move(ki))));
  csl_dot_products() += m * width;
  Tensor logits = ad::scalar_mul(ad::reshape(dots, Shape{m, width}), 1.0 / tau);
  Tensor log_pos = ad::slice_cols(ad::log_softmax(logits), 0, 1);
  return ad::scalar_mul(ad::sum(ad::mul(log_pos, Tensor::constant(std::move(w)))), -1.0 / static_cast<double>(m));
}

/// Convenience form: resolves pairs to tokens (one frame per view) and draws negatives.
inline Tensor csl_loss(const Tensor& q_emb, const Tensor& k_emb, const CorrespondenceSet& set, int patches,
                       std::size_t n_neg, double tau, std::mt19937_64& rng) {
  const int views = static_cast<int>(q_emb.rows()) / patches;
  const auto pairs = to_token_pairs(set, identity_frames(views), patches);
  return csl_loss(q_emb, k_emb, build_targets(pairs, q_emb.rows(), n_neg, rng), tau);
}

// ---------------------------------------------------------------------------
// Metrics and schedule

/// Fraction of predictions strictly closer than threshold_px to their oracle pixel.
inline double corr_acc(const std::vector<Vec2>& predicted, const std::vector<Vec2>& oracle, double threshold_px = 5.0) {
  if (predicted.size() != oracle.size()) throw std::invalid_argument("prediction and oracle counts differ");
  if (predicted.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if ((predicted[i] - oracle[i]).norm() < threshold_px) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// Centre pixel of the highest-weight patch of `target_frame` in an attention row.
inline Vec2 predict_from_attention(const double* row, int target_frame, const Intrinsics& intr, const PatchGrid& grid) {
  const int p = grid.patches();
  int best = 0;
  for (int s = 1; s < p; ++s) {
    if (row[target_frame * p + s] > row[target_frame * p + best]) best = s;
  }
  return patch_center(best, intr, grid);
}

/// Zero through `warmup`, linear up to `target` over `ramp` steps, then constant.
inline double lambda_schedule(long step, long warmup, long ramp, double target = 0.01) {
  if (warmup < 0 || ramp < 0) throw DomainError("curriculum lengths must be non-negative");
  if (step < warmup) return 0.0;
  if (step >= warmup + ramp) return target;
  return target * static_cast<double>(step - warmup) / static_cast<double>(ramp);
}

// ---------------------------------------------------------------------------
// Files

inline std::string format_correspondences_csv(const CorrespondenceSet& set) {
  std::string out = "point_id,view_q,u_q,v_q,patch_q,view_k,u_k,v_k,patch_k,weight\n";
  char line[256];
  for (const auto& p : set.pairs) {
    std::snprintf(line, sizeof(line), "%d,%d,%.9f,%.9f,%d,%d,%.9f,%.9f,%d,%.9f\n", p.point_id, p.view_q, p.u_q, p.v_q,
                  p.patch_q, p.view_k, p.u_k, p.v_k, p.patch_k, p.weight);
    out += line;
  }
  return out;
}

inline CorrespondenceSet parse_correspondences_csv(std::istream& in) {
  CorrespondenceSet set;
  std::string line;
  if (!std::getline(in, line) || line.rfind("point_id,", 0) != 0) throw std::runtime_error("missing correspondence header");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    CorrespondencePair p;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%d,%d,%lf,%lf,%d,%lf", &p.point_id, &p.view_q, &p.u_q, &p.v_q,
                    &p.patch_q, &p.view_k, &p.u_k, &p.v_k, &p.patch_k, &p.weight) != 10) {
      throw std::runtime_error("malformed correspondence on line " + std::to_string(lineno));
    }
    set.pairs.push_back(p);
  }
  return set;
}

inline std::string format_scene_csv(const SyntheticScene& s) {
  std::ostringstream os;
  os << "point_id,label,x,y,z";
  for (std::size_t k = 0; k < s.features.cols(); ++k) os << ",f" << k;
  os << '\n';
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), ",%.17g", v);
    os << buf;
  };
  for (std::size_t j = 0; j < s.size(); ++j) {
    os << j << ',' << s.labels[j];
    put(s.points[j].x());
    put(s.points[j].y());
    put(s.points[j].z());
    for (std::size_t k = 0; k < s.features.cols(); ++k) put(s.features.at(j, k));
    os << '\n';
  }
  return os.str();
}

inline SyntheticScene parse_scene_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("point_id,label,x,y,z", 0) != 0) throw std::runtime_error("missing scene header");
  const auto ld = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') - 4);
  SyntheticScene s;
  std::vector<double> feats;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != 5 + ld) throw std::runtime_error("malformed scene row");
    s.labels.push_back(static_cast<int>(vals[1]));
    s.points.emplace_back(vals[2], vals[3], vals[4]);
    feats.insert(feats.end(), vals.begin() + 5, vals.end());
  }
  s.features = NDArray(Shape{s.points.size(), ld}, std::move(feats));
  return s;
}

}  // namespace mvattn::correspondence
