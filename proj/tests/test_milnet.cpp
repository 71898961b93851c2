#include <gtest/gtest.h>

#include <numeric>

#include "mcti/milnet.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcti;

namespace {

void set_linear(Linear& l, Matrix w, Matrix b) {
  l.weight.value = std::move(w);
  l.bias.value = std::move(b);
}

Matrix m11(double v) { return Matrix::Constant(1, 1, v); }

}  // namespace

TEST(Dsmil, HandComputedTwoInstances) {
  Rng rng(1);
  DsmilParams p(1, 1, 2, rng);
  set_linear(p.input_proj, m11(2.0), m11(0.5));
  Matrix wi(1, 2);
  wi << 1.0, -1.0;
  set_linear(p.instance_classifier, wi, Matrix::Zero(1, 2));
  set_linear(p.query_proj, m11(1.0), m11(0.0));
  set_linear(p.value_proj, m11(3.0), m11(1.0));
  Matrix wb(1, 2);
  wb << 0.5, 2.0;
  Matrix bb(1, 2);
  bb << 0.1, -0.2;
  set_linear(p.bag_classifier, wb, bb);

  Matrix x(2, 1);
  x << 1.0, -2.0;
  const BagOutput out = dsmil_forward(x, p);
  // h = 2x + 0.5 = (2.5, -3.5); instance logits (h, -h); largest entry 3.5 at column 1, row 1.
  EXPECT_EQ(out.critical_index, 1);
  EXPECT_DOUBLE_EQ(out.instance_logits(0, 0), 2.5);
  EXPECT_DOUBLE_EQ(out.instance_logits(1, 1), 3.5);
  // q = h; similarities to q_crit = -3.5: (-8.75, 12.25).
  const double e0 = std::exp(-8.75 - 12.25);
  const double a0 = e0 / (1 + e0), a1 = 1 / (1 + e0);
  EXPECT_NEAR(out.attention_weights(0), a0, 1e-15);
  EXPECT_NEAR(out.attention_weights(1), a1, 1e-15);
  // v = 3h + 1 = (8.5, -9.5); embedding = a·v.
  const double emb = a0 * 8.5 + a1 * -9.5;
  EXPECT_NEAR(out.bag_logits(0), 0.5 * emb + 0.1, 1e-12);
  EXPECT_NEAR(out.bag_logits(1), 2.0 * emb - 0.2, 1e-12);
}

TEST(Dsmil, SingletonBag) {
  Rng rng(3);
  DsmilParams p(4, 6, 3, rng);
  const BagOutput out = dsmil_forward(Matrix::Random(1, 4), p);
  EXPECT_EQ(out.critical_index, 0);
  EXPECT_DOUBLE_EQ(out.attention_weights(0), 1.0);
}

TEST(Dsmil, EmptyBagRejected) {
  Rng rng(3);
  DsmilParams p(4, 6, 3, rng);
  EXPECT_MCTI_ERROR(dsmil_forward(Matrix(0, 4), p), Errc::EmptyBag);
}

TEST(Dsmil, PermutationInvariance) {
  Rng rng(8);
  DsmilParams p(5, 8, 2, rng);
  p.instance_classifier.weight.value = gaussian_matrix(8, 2, 1.0, rng);
  std::mt19937 perm_rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = gaussian_matrix(12, 5, 1.0, rng);
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), perm_rng);
    Matrix xp(12, 5);
    for (int i = 0; i < 12; ++i) xp.row(i) = x.row(perm[i]);
    const BagOutput a = dsmil_forward(x, p), b = dsmil_forward(xp, p);
    EXPECT_LT((a.bag_logits - b.bag_logits).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_EQ(perm[b.critical_index], a.critical_index);
    EXPECT_NEAR(a.attention_weights.sum(), 1.0, 1e-6);
    EXPECT_GE(a.attention_weights.minCoeff(), 0.0);
  }
}

TEST(Dsmil, LossUniformIsTwoLn2) {
  BagOutput out;
  out.bag_logits = RowVector::Zero(2);
  out.instance_logits = Matrix::Zero(3, 2);
  out.critical_index = 1;
  EXPECT_NEAR(dsmil_loss(out, 0), 2 * std::log(2.0), 1e-15);
}

TEST(Dsmil, LossMatchesIndependentCrossEntropy) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0, 3);
  for (int t = 0; t < 20; ++t) {
    BagOutput out;
    out.bag_logits = RowVector(3);
    out.instance_logits = Matrix(4, 3);
    for (int c = 0; c < 3; ++c) out.bag_logits(c) = nd(rng);
    for (int i = 0; i < 4; ++i)
      for (int c = 0; c < 3; ++c) out.instance_logits(i, c) = nd(rng);
    out.critical_index = static_cast<int>(rng() % 4);
    const int y = static_cast<int>(rng() % 3);
    std::vector<double> zb(3), zi(3);
    for (int c = 0; c < 3; ++c) {
      zb[c] = out.bag_logits(c);
      zi[c] = out.instance_logits(out.critical_index, c);
    }
    const double expect = oracle::cross_entropy(zb, y) + oracle::cross_entropy(zi, y);
    EXPECT_NEAR(dsmil_loss(out, y), expect, 1e-12);
    EXPECT_GE(dsmil_loss(out, y), 0.0);
  }
  BagOutput sharp;
  sharp.bag_logits = RowVector(2);
  sharp.bag_logits << 60, -60;
  sharp.instance_logits = Matrix(1, 2);
  sharp.instance_logits << 60, -60;
  EXPECT_LT(dsmil_loss(sharp, 0), 1e-40);
}

TEST(TopK, Examples) {
  Vector inc(5);
  inc << 0.1, 0.2, 0.3, 0.4, 0.5;
  EXPECT_EQ(rank_top_k(inc, 2), (std::vector<int>{4, 3}));
  EXPECT_EQ(rank_top_k(inc, 5), (std::vector<int>{4, 3, 2, 1, 0}));
  Vector ties(3);
  ties << 0.5, 0.5, 0.1;
  EXPECT_EQ(rank_top_k(ties, 2), (std::vector<int>{0, 1}));
  // n < k: cycle through the ranked list.
  EXPECT_EQ(rank_top_k(ties, 7), (std::vector<int>{0, 1, 2, 0, 1, 2, 0}));
  EXPECT_MCTI_ERROR(rank_top_k(ties, 0), Errc::InvalidConfig);
}

TEST(TopK, SelectGathersFeaturesAndPermutes) {
  Rng rng(6);
  DsmilParams p(3, 4, 2, rng);
  p.instance_classifier.weight.value = gaussian_matrix(4, 2, 1.0, rng);
  const Matrix x = gaussian_matrix(9, 3, 1.0, rng);
  const BagOutput out = dsmil_forward(x, p);
  const Matrix proj = p.input_proj.apply(x);
  const CriticalBag bag = select_top_k(out, proj, 4, 1);
  ASSERT_EQ(bag.source_indices.size(), 4u);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(bag.features.row(r), proj.row(bag.source_indices[r]));
    if (r > 0) EXPECT_GE(out.instance_logits(bag.source_indices[r - 1], 1), out.instance_logits(bag.source_indices[r], 1));
  }
  // Reversing the bag maps indices through the permutation.
  Matrix xr = x.colwise().reverse();
  const BagOutput outr = dsmil_forward(xr, p);
  const CriticalBag bagr = select_top_k(outr, p.input_proj.apply(xr), 4, 1);
  std::multiset<int> a(bag.source_indices.begin(), bag.source_indices.end()), b;
  for (int i : bagr.source_indices) b.insert(8 - i);
  EXPECT_EQ(a, b);
}
