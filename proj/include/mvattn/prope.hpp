// Projective position encoding for multi-view attention.
//
// Each attention head of width head_dim is split into a projective subspace
// (contiguous 4-blocks) followed by a spatial subspace (rotary pairs). For a
// token in frame f with camera matrix P_f:
//
//   query 4-blocks  <- P_f^T  q        key 4-blocks   <- P_f^-1 k
//   value 4-blocks  <- P_f^-1 v        output 4-blocks <- P_f   o
//
// so the projective part of a logit is q^T (P_q P_k^-1) k and an attended
// output is mixed by P_q P_k^-1 as well: both depend on cameras only through
// the relative transform. Spatial pairs use 2-D rotary encoding of the patch
// position inside its frame.
#pragma once

#include "mvattn/autodiff.hpp"
#include "mvattn/geometry.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvattn::prope {

using ad::NDArray;
using ad::Tensor;
using geometry::Mat4;
using geometry::ProjectiveMatrix;

class LayoutError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PropeLayout {
  int head_dim = 0;
  int projective_dim = 0;
  int spatial_dim = 0;

  /// Validated layout. projective_dim < 0 selects the default split: the
  /// largest multiple of 4 not exceeding head_dim / 2, raised to 4 when that
  /// would leave no projective block.
  static PropeLayout make(int head_dim, int projective_dim = -1) {
    if (projective_dim < 0) {
      projective_dim = std::max(4, (head_dim / 2) / 4 * 4);
    }
    PropeLayout l{head_dim, projective_dim, head_dim - projective_dim};
    l.validate();
    return l;
  }

  /// Layout with no projective part (modulation disabled).
  static PropeLayout spatial_only(int head_dim) {
    if (head_dim % 2 != 0) throw LayoutError("spatial-only layout needs an even head_dim");
    return PropeLayout{head_dim, 0, head_dim};
  }

  void validate() const {
    const std::string where = " (head_dim " + std::to_string(head_dim) + ", projective " +
                              std::to_string(projective_dim) + ", spatial " + std::to_string(spatial_dim) + ")";
    if (projective_dim < 0 || projective_dim % 4 != 0) throw LayoutError("projective_dim must be a multiple of 4" + where);
    if (spatial_dim < 0 || spatial_dim % 2 != 0) throw LayoutError("spatial_dim must be even and non-negative" + where);
    if (projective_dim + spatial_dim != head_dim) throw LayoutError("subspaces do not sum to head_dim" + where);
  }

  int blocks() const { return projective_dim / 4; }
  int pairs() const { return spatial_dim / 2; }
};

/// Token t belongs to frame t / (rows * cols) at patch (row, col) in row-major order.
struct TokenViewMap {
  int frames = 0;
  int patch_rows = 0;
  int patch_cols = 0;

  int patches() const { return patch_rows * patch_cols; }
  int tokens() const { return frames * patches(); }
  int frame_of(int t) const { return t / patches(); }
  int row_of(int t) const { return (t % patches()) / patch_cols; }
  int col_of(int t) const { return t % patch_cols; }
  int token(int frame, int row, int col) const { return frame * patches() + row * patch_cols + col; }
};

/// Per-frame matrices derived from the (unit-determinant normalized) cameras.
struct CameraTransforms {
  std::vector<Mat4> query;    // P^T
  std::vector<Mat4> key;      // P^-1
  std::vector<Mat4> output;   // P
};

inline CameraTransforms camera_transforms(const std::vector<ProjectiveMatrix>& projectives) {
  CameraTransforms ct;
  for (const auto& p : projectives) {
    if (!(std::abs(p.m.determinant()) > 1e-12)) throw std::invalid_argument("projective matrix is singular");
    const Mat4 m = p.unit_determinant().m;
    ct.query.push_back(m.transpose());
    ct.key.push_back(m.inverse());
    ct.output.push_back(m);
  }
  return ct;
}

namespace detail {

inline void check_shapes(const Tensor& x, int heads, const TokenViewMap& map, const PropeLayout& layout,
                         std::size_t n_frames) {
  layout.validate();
  if (x.shape().size() != 2 || x.cols() != static_cast<std::size_t>(heads * layout.head_dim)) {
    throw LayoutError("tensor " + ad::shape_str(x.shape()) + " does not match " + std::to_string(heads) +
                      " heads of width " + std::to_string(layout.head_dim));
  }
  if (x.rows() != static_cast<std::size_t>(map.tokens())) {
    throw LayoutError("tensor has " + std::to_string(x.rows()) + " tokens, map expects " + std::to_string(map.tokens()));
  }
  if (n_frames != static_cast<std::size_t>(map.frames)) {
    throw LayoutError("got " + std::to_string(n_frames) + " cameras for " + std::to_string(map.frames) + " frames");
  }
}

}  // namespace detail

/// Left-multiplies every projective 4-block of token t by mats[frame(t)].
inline Tensor transform_projective_blocks(const Tensor& x, const std::vector<Mat4>& mats, const TokenViewMap& map,
                                          const PropeLayout& layout, int heads) {
  detail::check_shapes(x, heads, map, layout, mats.size());
  if (layout.projective_dim == 0) return x;
  const std::size_t c = x.cols();
  const int hd = layout.head_dim, nb = layout.blocks();
  NDArray out = x.value();
  for (int t = 0; t < map.tokens(); ++t) {
    const Mat4& m = mats[static_cast<std::size_t>(map.frame_of(t))];
    for (int h = 0; h < heads; ++h) {
      for (int b = 0; b < nb; ++b) {
        const std::size_t off = static_cast<std::size_t>(t) * c + static_cast<std::size_t>(h * hd + 4 * b);
        Eigen::Map<Eigen::Vector4d> dst(out.data.data() + off);
        dst = m * Eigen::Map<const Eigen::Vector4d>(x.value().data.data() + off);
      }
    }
  }
  auto mats_copy = std::make_shared<std::vector<Mat4>>(mats);
  return ad::make_op(std::move(out), "projective_blocks", {x}, [mats_copy, map, hd, nb, heads, c](ad::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    g.mat() += n.grad.mat();  // identity on the spatial columns; block terms corrected below
    for (int t = 0; t < map.tokens(); ++t) {
      const Mat4 m = (*mats_copy)[static_cast<std::size_t>(map.frame_of(t))] - Mat4::Identity();
      for (int h = 0; h < heads; ++h) {
        for (int b = 0; b < nb; ++b) {
          const std::size_t off = static_cast<std::size_t>(t) * c + static_cast<std::size_t>(h * hd + 4 * b);
          Eigen::Map<Eigen::Vector4d> dst(g.data.data() + off);
          dst += m.transpose() * Eigen::Map<const Eigen::Vector4d>(n.grad.data.data() + off);
        }
      }
    }
  });
}

struct ModulatedQKV {
  Tensor q;
  Tensor k;
  Tensor v;
};

inline ModulatedQKV modulate_qkv(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const std::vector<ProjectiveMatrix>& projectives, const TokenViewMap& map,
                                 const PropeLayout& layout, int heads) {
  if (layout.projective_dim == 0) {
    detail::check_shapes(q, heads, map, layout, projectives.size());
    return {q, k, v};
  }
  const CameraTransforms ct = camera_transforms(projectives);
  return {transform_projective_blocks(q, ct.query, map, layout, heads),
          transform_projective_blocks(k, ct.key, map, layout, heads),
          transform_projective_blocks(v, ct.key, map, layout, heads)};
}

/// Maps attended values back into each query token's own camera frame.
inline Tensor unmodulate_output(const Tensor& attn_out, const std::vector<ProjectiveMatrix>& projectives,
                                const TokenViewMap& map, const PropeLayout& layout, int heads) {
  if (layout.projective_dim == 0) {
    detail::check_shapes(attn_out, heads, map, layout, projectives.size());
    return attn_out;
  }
  return transform_projective_blocks(attn_out, camera_transforms(projectives).output, map, layout, heads);
}

/// Rotation angle of spatial pair `pair` for token t. Pairs alternate between
/// the column and row axis; frequencies fall geometrically with the pair's
/// rank on its axis. Positions are normalized by the grid size.
inline double rope_angle(int pair, int t, const TokenViewMap& map, const PropeLayout& layout, double base) {
  const int per_axis = (layout.pairs() + 1) / 2;
  const int f = pair / 2;
  const double freq = std::pow(base, -static_cast<double>(f) / static_cast<double>(per_axis));
  const double pos = (pair % 2 == 0) ? static_cast<double>(map.col_of(t)) / map.patch_cols
                                     : static_cast<double>(map.row_of(t)) / map.patch_rows;
  return freq * pos;
}

/// Rotary encoding of the spatial pairs of one tensor.
inline Tensor rotate_spatial(const Tensor& x, const TokenViewMap& map, const PropeLayout& layout, int heads,
                             double base = 100.0) {
  layout.validate();
  if (layout.spatial_dim == 0) return x;
  if (x.cols() != static_cast<std::size_t>(heads * layout.head_dim) || x.rows() != static_cast<std::size_t>(map.tokens())) {
    throw LayoutError("spatial rotary: tensor " + ad::shape_str(x.shape()) + " does not match layout");
  }
  const std::size_t c = x.cols();
  const int hd = layout.head_dim, p0 = layout.projective_dim, np = layout.pairs();
  auto cs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(map.tokens() * np * 2));
  for (int t = 0; t < map.tokens(); ++t) {
    for (int p = 0; p < np; ++p) {
      const double a = rope_angle(p, t, map, layout, base);
      (*cs)[static_cast<std::size_t>((t * np + p) * 2)] = std::cos(a);
      (*cs)[static_cast<std::size_t>((t * np + p) * 2 + 1)] = std::sin(a);
    }
  }
  NDArray out = x.value();
  for (int t = 0; t < map.tokens(); ++t) {
    for (int h = 0; h < heads; ++h) {
      for (int p = 0; p < np; ++p) {
        const std::size_t off = static_cast<std::size_t>(t) * c + static_cast<std::size_t>(h * hd + p0 + 2 * p);
        const double co = (*cs)[static_cast<std::size_t>((t * np + p) * 2)];
        const double si = (*cs)[static_cast<std::size_t>((t * np + p) * 2 + 1)];
        const double a = x.value()[off], b = x.value()[off + 1];
        out[off] = co * a - si * b;
        out[off + 1] = si * a + co * b;
      }
    }
  }
  return ad::make_op(std::move(out), "rotate_spatial", {x}, [cs, map, hd, p0, np, heads, c](ad::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    g.mat() += n.grad.mat();  // identity on the projective columns; rotations corrected below
    for (int t = 0; t < map.tokens(); ++t) {
      for (int h = 0; h < heads; ++h) {
        for (int p = 0; p < np; ++p) {
          const std::size_t off = static_cast<std::size_t>(t) * c + static_cast<std::size_t>(h * hd + p0 + 2 * p);
          const double co = (*cs)[static_cast<std::size_t>((t * np + p) * 2)];
          const double si = (*cs)[static_cast<std::size_t>((t * np + p) * 2 + 1)];
          const double ga = n.grad[off], gb = n.grad[off + 1];
          g[off] += (co - 1.0) * ga + si * gb;
          g[off + 1] += -si * ga + (co - 1.0) * gb;
        }
      }
    }
  });
}

struct RotatedQK {
  Tensor q;
  Tensor k;
};

inline RotatedQK spatial_rope(const Tensor& q, const Tensor& k, const TokenViewMap& map, const PropeLayout& layout,
                              int heads, double base = 100.0) {
  return {rotate_spatial(q, map, layout, heads, base), rotate_spatial(k, map, layout, heads, base)};
}

/// Pre-softmax logits of one head, q_h k_h^T (unscaled), for inspection and tests.
inline ad::RowMat head_logits(const NDArray& q, const NDArray& k, int head, int head_dim) {
  const auto off = static_cast<Eigen::Index>(head * head_dim);
  return q.mat().middleCols(off, head_dim) * k.mat().middleCols(off, head_dim).transpose();
}

}  // namespace mvattn::prope
