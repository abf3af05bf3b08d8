#include "mvattn/prope.hpp"

#include "generators.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace mvattn;
using namespace mvattn::prope;
using mvattn::testing::Rng;

namespace {

NDArray random_array(Rng& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  NDArray a(ad::Shape{r, c});
  for (auto& v : a.data) v = nd(rng);
  return a;
}

std::vector<ProjectiveMatrix> random_cameras(Rng& rng, int n) {
  std::vector<ProjectiveMatrix> out;
  const auto k = geometry::build_intrinsics(64, 64, 60).normalized();
  for (int i = 0; i < n; ++i) {
    out.push_back(geometry::projective_matrix(geometry::build_virtual_camera(mvattn::testing::random_spec(rng)), k));
  }
  return out;
}

std::vector<ProjectiveMatrix> right_compose(const std::vector<ProjectiveMatrix>& ps, const Mat4& g) {
  std::vector<ProjectiveMatrix> out;
  for (const auto& p : ps) out.push_back(ProjectiveMatrix{p.m * g});
  return out;
}

// Logits of every head after projective modulation and spatial rotation.
std::vector<ad::RowMat> logits(const NDArray& q, const NDArray& k, const std::vector<ProjectiveMatrix>& cams,
                               const TokenViewMap& map, const PropeLayout& layout, int heads) {
  const auto z = Tensor::constant(NDArray(q.shape));
  const auto m = modulate_qkv(Tensor::constant(q), Tensor::constant(k), z, cams, map, layout, heads);
  const auto r = spatial_rope(m.q, m.k, map, layout, heads);
  std::vector<ad::RowMat> out;
  for (int h = 0; h < heads; ++h) out.push_back(head_logits(r.q.value(), r.k.value(), h, layout.head_dim));
  return out;
}

double rel_diff(const std::vector<ad::RowMat>& a, const std::vector<ad::RowMat>& b) {
  double worst = 0.0;
  for (std::size_t h = 0; h < a.size(); ++h) worst = std::max(worst, mvattn::testing::max_rel_diff(a[h], b[h]));
  return worst;
}

// Unit-|det| normalization written out independently.
Mat4 normalized(const Mat4& p) { return p / std::pow(std::abs(p.determinant()), 0.25); }

}  // namespace

TEST(PropeLayout, DefaultSplit) {
  EXPECT_EQ(PropeLayout::make(16).projective_dim, 8);
  EXPECT_EQ(PropeLayout::make(16).spatial_dim, 8);
  EXPECT_EQ(PropeLayout::make(12).projective_dim, 4);
  EXPECT_EQ(PropeLayout::make(8).projective_dim, 4);
  // Too narrow for a half split: one projective block, nothing spatial.
  EXPECT_EQ(PropeLayout::make(4).projective_dim, 4);
  EXPECT_EQ(PropeLayout::make(4).spatial_dim, 0);
}

TEST(PropeLayout, RejectsInvalidSplits) {
  EXPECT_THROW(PropeLayout::make(8, 6), LayoutError);
  EXPECT_THROW(PropeLayout::make(10, 4 + 4 + 4), LayoutError);
  EXPECT_THROW(PropeLayout::make(9, 4), LayoutError);
  EXPECT_THROW(PropeLayout::spatial_only(5), LayoutError);
}

TEST(TokenViewMap, Bijective) {
  const TokenViewMap map{5, 3, 4};
  std::set<std::tuple<int, int, int>> seen;
  for (int t = 0; t < map.tokens(); ++t) {
    const auto key = std::make_tuple(map.frame_of(t), map.row_of(t), map.col_of(t));
    EXPECT_TRUE(seen.insert(key).second);
    EXPECT_EQ(map.token(map.frame_of(t), map.row_of(t), map.col_of(t)), t);
  }
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(5 * 3 * 4));
}

TEST(Modulation, SharedCameraEqualsIdentityCamera) {
  Rng rng(1);
  const TokenViewMap map{3, 2, 2};
  const auto layout = PropeLayout::make(8);
  const auto q = random_array(rng, 12, 16), k = random_array(rng, 12, 16);
  const auto p = random_cameras(rng, 1).front();
  const std::vector<ProjectiveMatrix> shared(3, p), ident(3, ProjectiveMatrix{Mat4::Identity()});
  EXPECT_LT(rel_diff(logits(q, k, shared, map, layout, 2), logits(q, k, ident, map, layout, 2)), 1e-9);
}

TEST(Modulation, GaugeInvarianceOverRandomG) {
  Rng rng(2);
  const TokenViewMap map{4, 3, 3};
  const auto layout = PropeLayout::make(16);
  const auto q = random_array(rng, 36, 32), k = random_array(rng, 36, 32);
  const auto cams = random_cameras(rng, 4);
  const auto base = logits(q, k, cams, map, layout, 2);
  for (int i = 0; i < 100; ++i) {
    const Mat4 g = mvattn::testing::random_invertible(rng);
    EXPECT_LT(rel_diff(logits(q, k, right_compose(cams, g), map, layout, 2), base), 1e-9);
  }
}

TEST(Modulation, LogitsDependOnlyOnRelativeTransform) {
  // Oracle: projective contribution of one block is q^T (Pq Pk^-1) k with unit-determinant matrices.
  Rng rng(3);
  const TokenViewMap map{2, 1, 1};
  const auto layout = PropeLayout::make(4);
  const auto q = random_array(rng, 2, 4), k = random_array(rng, 2, 4);
  const auto cams = random_cameras(rng, 2);
  const auto l = logits(q, k, cams, map, layout, 1).front();
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const Mat4 rel = normalized(cams[i].m) * normalized(cams[j].m).inverse();
      const Eigen::Vector4d qi(q.at(i, 0), q.at(i, 1), q.at(i, 2), q.at(i, 3));
      const Eigen::Vector4d kj(k.at(j, 0), k.at(j, 1), k.at(j, 2), k.at(j, 3));
      EXPECT_NEAR(l(i, j), qi.dot(rel * kj), 1e-9 * std::max(1.0, std::abs(l(i, j))));
    }
  }
}

TEST(Modulation, DisabledIsIdentity) {
  Rng rng(4);
  const TokenViewMap map{2, 2, 2};
  const auto layout = PropeLayout::spatial_only(8);
  const auto q = Tensor::constant(random_array(rng, 8, 16));
  const auto cams = random_cameras(rng, 2);
  const auto m = modulate_qkv(q, q, q, cams, map, layout, 2);
  EXPECT_EQ(m.q.value().data, q.value().data);
  EXPECT_EQ(m.k.value().data, q.value().data);
  EXPECT_EQ(m.v.value().data, q.value().data);
  EXPECT_EQ(unmodulate_output(q, cams, map, layout, 2).value().data, q.value().data);
}

TEST(Modulation, ZeroedProjectiveSubspaceIgnoresCameras) {
  Rng rng(5);
  const TokenViewMap map{3, 2, 2};
  const auto layout = PropeLayout::make(8);
  auto q = random_array(rng, 12, 16), k = random_array(rng, 12, 16);
  for (std::size_t r = 0; r < 12; ++r) {
    for (int h = 0; h < 2; ++h) {
      for (int c = 0; c < 4; ++c) q.at(r, h * 8 + c) = k.at(r, h * 8 + c) = 0.0;
    }
  }
  const auto a = logits(q, k, random_cameras(rng, 3), map, layout, 2);
  const auto b = logits(q, k, random_cameras(rng, 3), map, layout, 2);
  for (int h = 0; h < 2; ++h) EXPECT_TRUE((a[h].array() == b[h].array()).all());
}

TEST(Modulation, LinearInEachInput) {
  Rng rng(6);
  const TokenViewMap map{2, 2, 1};
  const auto layout = PropeLayout::make(8);
  const auto cams = random_cameras(rng, 2);
  const auto a = random_array(rng, 4, 8), b = random_array(rng, 4, 8);
  NDArray ab(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) ab[i] = 2.0 * a[i] - 0.5 * b[i];
  auto mod = [&](const NDArray& x) {
    const auto t = Tensor::constant(x);
    const auto m = modulate_qkv(t, t, t, cams, map, layout, 1);
    return std::array<NDArray, 3>{m.q.value(), m.k.value(), m.v.value()};
  };
  const auto ma = mod(a), mb = mod(b), mab = mod(ab);
  for (int j = 0; j < 3; ++j) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(mab[j][i], 2.0 * ma[j][i] - 0.5 * mb[j][i], 1e-12 * std::max(1.0, std::abs(mab[j][i])));
    }
  }
}

TEST(Modulation, ShapeMismatchIsStructuredError) {
  const TokenViewMap map{2, 2, 2};
  const auto layout = PropeLayout::make(8);
  const auto x = Tensor::constant(NDArray(ad::Shape{8, 12}));
  const std::vector<ProjectiveMatrix> cams(2, ProjectiveMatrix{Mat4::Identity()});
  EXPECT_THROW(modulate_qkv(x, x, x, cams, map, layout, 2), LayoutError);
  const auto y = Tensor::constant(NDArray(ad::Shape{8, 16}));
  EXPECT_THROW(modulate_qkv(y, y, y, {cams[0]}, map, layout, 2), LayoutError);
}

TEST(SpatialRope, EqualPositionsCancel) {
  Rng rng(7);
  const TokenViewMap map{2, 3, 3};
  const auto layout = PropeLayout::spatial_only(8);
  const auto q = random_array(rng, 18, 8), k = random_array(rng, 18, 8);
  const auto r = spatial_rope(Tensor::constant(q), Tensor::constant(k), map, layout, 1);
  const auto rotated = head_logits(r.q.value(), r.k.value(), 0, 8);
  const auto plain = head_logits(q, k, 0, 8);
  for (int t = 0; t < 9; ++t) {
    // Same patch in the two frames shares a position.
    EXPECT_NEAR(rotated(t, t), plain(t, t), 1e-12);
    EXPECT_NEAR(rotated(t, t + 9), plain(t, t + 9), 1e-12);
  }
}

TEST(SpatialRope, ShiftInvariance) {
  Rng rng(8);
  const TokenViewMap map{1, 5, 5};
  const auto layout = PropeLayout::spatial_only(12);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> u(12), w(12);
  for (auto& x : u) x = nd(rng);
  for (auto& x : w) x = nd(rng);
  NDArray q(ad::Shape{25, 12}), k(ad::Shape{25, 12});
  for (std::size_t t = 0; t < 25; ++t) {
    for (std::size_t c = 0; c < 12; ++c) {
      q.at(t, c) = u[c];
      k.at(t, c) = w[c];
    }
  }
  const auto r = spatial_rope(Tensor::constant(q), Tensor::constant(k), map, layout, 1);
  const auto l = head_logits(r.q.value(), r.k.value(), 0, 12);
  for (int r1 = 0; r1 < 3; ++r1) {
    for (int c1 = 0; c1 < 3; ++c1) {
      for (int r2 = 0; r2 < 3; ++r2) {
        for (int c2 = 0; c2 < 3; ++c2) {
          const double base = l(map.token(0, r1, c1), map.token(0, r2, c2));
          const double shifted = l(map.token(0, r1 + 2, c1 + 1), map.token(0, r2 + 2, c2 + 1));
          EXPECT_NEAR(base, shifted, 1e-9);
        }
      }
    }
  }
}

TEST(SpatialRope, EmptySubspaceIsIdentity) {
  Rng rng(9);
  const TokenViewMap map{1, 2, 2};
  const auto layout = PropeLayout::make(4);
  const auto q = Tensor::constant(random_array(rng, 4, 4));
  EXPECT_EQ(rotate_spatial(q, map, layout, 1).value().data, q.value().data);
}

TEST(Unmodulate, UniformAttentionEqualCamerasGivesMeanOfV) {
  Rng rng(10);
  const TokenViewMap map{3, 2, 2};
  const auto layout = PropeLayout::make(8);
  const auto cam = random_cameras(rng, 1).front();
  const std::vector<ProjectiveMatrix> cams(3, cam);
  const auto v = random_array(rng, 12, 16);
  const auto zeros = Tensor::constant(NDArray(ad::Shape{12, 16}));
  const auto m = modulate_qkv(zeros, zeros, Tensor::constant(v), cams, map, layout, 2);
  const auto attended = ad::attention(m.q, m.k, m.v, 2, 1.0);  // zero logits: uniform weights
  const auto out = unmodulate_output(attended, cams, map, layout, 2);
  const Eigen::RowVectorXd mean = v.mat().colwise().mean();
  for (Eigen::Index r = 0; r < 12; ++r) {
    EXPECT_LT((out.value().mat().row(r) - mean).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Unmodulate, IdentityAttentionRoundTrip) {
  Rng rng(11);
  const TokenViewMap map{4, 1, 1};
  const auto layout = PropeLayout::make(8);
  const auto cams = random_cameras(rng, 4);
  const auto v = random_array(rng, 4, 8);
  const auto m = modulate_qkv(Tensor::constant(v), Tensor::constant(v), Tensor::constant(v), cams, map, layout, 1);
  // Identity attention passes each modulated value straight through.
  const auto out = unmodulate_output(m.v, cams, map, layout, 1);
  EXPECT_LT((out.value().mat() - v.mat()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Unmodulate, MatchesExplicitComposition) {
  Rng rng(12);
  const TokenViewMap map{3, 1, 2};
  const int heads = 1;
  const auto layout = PropeLayout::make(4);
  const auto cams = random_cameras(rng, 3);
  const auto q = random_array(rng, 6, 4), k = random_array(rng, 6, 4), v = random_array(rng, 6, 4);
  const auto m = modulate_qkv(Tensor::constant(q), Tensor::constant(k), Tensor::constant(v), cams, map, layout, heads);
  const auto out = unmodulate_output(ad::attention(m.q, m.k, m.v, heads, 0.5), cams, map, layout, heads);

  for (int i = 0; i < 6; ++i) {
    const Mat4 pi = normalized(cams[static_cast<std::size_t>(map.frame_of(i))].m);
    const Eigen::Vector4d qi = Eigen::Map<const Eigen::Vector4d>(&q.data[static_cast<std::size_t>(4 * i)]);
    Eigen::VectorXd s(6);
    for (int j = 0; j < 6; ++j) {
      const Mat4 pj = normalized(cams[static_cast<std::size_t>(map.frame_of(j))].m);
      const Eigen::Vector4d kj = Eigen::Map<const Eigen::Vector4d>(&k.data[static_cast<std::size_t>(4 * j)]);
      s(j) = 0.5 * qi.dot(pi * pj.inverse() * kj);
    }
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    Eigen::Vector4d o = Eigen::Vector4d::Zero();
    for (int j = 0; j < 6; ++j) {
      const Mat4 pj = normalized(cams[static_cast<std::size_t>(map.frame_of(j))].m);
      o += s(j) * pi * pj.inverse() * Eigen::Map<const Eigen::Vector4d>(&v.data[static_cast<std::size_t>(4 * j)]);
    }
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.value().at(static_cast<std::size_t>(i), static_cast<std::size_t>(c)), o(c), 1e-9);
  }
}

TEST(PropeGradients, ChainedOpsPassFiniteDifferences) {
  Rng rng(13);
  const TokenViewMap map{2, 2, 2};
  const auto layout = PropeLayout::make(8);
  const auto cams = random_cameras(rng, 2);
  auto q = Tensor::parameter(random_array(rng, 8, 16));
  auto k = Tensor::parameter(random_array(rng, 8, 16));
  auto v = Tensor::parameter(random_array(rng, 8, 16));
  const auto w = Tensor::constant(random_array(rng, 8, 16));
  auto f = [&](const Tensor&) {
    const auto m = modulate_qkv(q, k, v, cams, map, layout, 2);
    const auto r = spatial_rope(m.q, m.k, map, layout, 2);
    const auto o = unmodulate_output(ad::attention(r.q, r.k, m.v, 2, 0.3), cams, map, layout, 2);
    return ad::sum(ad::mul(o, w));
  };
  // Three chained 4x4 transforms amplify cancellation in the difference quotient; a
  // step of 1e-4 sits at the truncation/roundoff balance point for this graph.
  for (Tensor* x : {&q, &k, &v}) EXPECT_LT(ad::grad_check(f, *x, 1e-4), 1e-6);
}
