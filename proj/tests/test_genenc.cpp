#include <gtest/gtest.h>

#include "mcti/genenc.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcti;

TEST(GeneEnc, TokenCountAndPadding) {
  Rng rng(1);
  GeneEncoderParams p(4, 8, 2, rng);
  EXPECT_EQ(tokenize_genes(RowVector::Ones(4), p).rows(), 1);
  const Matrix chunks = chunk_genes(RowVector::Ones(5), 4);
  ASSERT_EQ(chunks.rows(), 2);
  EXPECT_EQ(chunks(1, 0), 1.0);
  EXPECT_EQ(chunks.row(1).tail(3).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(tokenize_genes(RowVector::Ones(5), p).rows(), 2);
}

TEST(GeneEnc, ZeroVectorGivesBiasTokens) {
  Rng rng(2);
  GeneEncoderParams p(3, 4, 2, rng);
  p.chunk_proj.bias.value = gaussian_matrix(1, 4, 1.0, rng);
  const Matrix t = tokenize_genes(RowVector::Zero(7), p);
  for (int i = 0; i < t.rows(); ++i) EXPECT_EQ(t.row(i), p.chunk_proj.bias.value.row(0));
}

TEST(GeneEnc, DivisibilityRequired) {
  Rng rng(2);
  EXPECT_MCTI_ERROR(GeneEncoderParams(3, 6, 4, rng), Errc::InvalidConfig);
}

TEST(GeneEnc, SingleTokenAttentionIsIdentity) {
  Rng rng(3);
  GeneEncoderParams p(2, 4, 2, rng);
  const Matrix tok = gaussian_matrix(1, 4, 1.0, rng);
  Matrix heads(1, 4);
  heads << p.value[0].apply(tok), p.value[1].apply(tok);
  const Matrix expect = p.output_proj.apply(heads);
  EXPECT_LT((msa(tok, p) - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GeneEnc, TwoTokenHandOracle) {
  Rng rng(4);
  GeneEncoderParams p(2, 2, 1, rng);
  const Matrix eye = Matrix::Identity(2, 2);
  p.query[0].weight.value = eye;
  p.key[0].weight.value = eye;
  p.value[0].weight.value = eye;
  p.output_proj.weight.value = eye;
  p.output_proj.bias.value.setZero();
  Matrix x(2, 2);
  x << 1, 0, 1, 1;
  // Scores: x x^T / sqrt(2) = [[1,1],[1,2]]/sqrt2.
  const double s = 1 / std::sqrt(2.0);
  const double a01 = 0.5;                                     // row 0: equal scores
  const double a11 = std::exp(2 * s) / (std::exp(s) + std::exp(2 * s));  // row 1
  Matrix expect(2, 2);
  expect << a01 * 1 + a01 * 1, a01 * 0 + a01 * 1, (1 - a11) * 1 + a11 * 1, (1 - a11) * 0 + a11 * 1;
  EXPECT_LT((msa(x, p) - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GeneEnc, MsaPermutationEquivariant) {
  Rng rng(5);
  GeneEncoderParams p(3, 8, 4, rng);
  const Matrix x = gaussian_matrix(5, 8, 1.0, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix xp(5, 8);
  for (int i = 0; i < 5; ++i) xp.row(i) = x.row(perm[i]);
  const Matrix y = msa(x, p), yp = msa(xp, p);
  for (int i = 0; i < 5; ++i) EXPECT_LT((yp.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GeneEnc, ReplicationAndShape) {
  Rng rng(6);
  GeneEncoderParams p(4, 8, 2, rng);
  for (int g : {1, 4, 9, 17}) {
    const RowVector v = gaussian_matrix(1, g, 1.0, rng).row(0);
    for (int k : {1, 3}) {
      const GeneBag bag = encode_genes(v, p, k);
      ASSERT_EQ(bag.features.rows(), k);
      ASSERT_EQ(bag.features.cols(), 8);
      for (int r = 1; r < k; ++r) EXPECT_EQ(bag.features.row(r), bag.features.row(0));
    }
  }
}

TEST(GeneEnc, IdenticalChunkPermutationInvariant) {
  Rng rng(7);
  GeneEncoderParams p(3, 4, 2, rng);
  RowVector v(9);
  v << 1, 2, 3, 1, 2, 3, 1, 2, 3;
  const Matrix a = encode_genes(v, p, 1).features;
  // Rotating whole chunks leaves identical chunks in place.
  RowVector w(9);
  w << v.segment(3, 6), v.segment(0, 3);
  EXPECT_EQ(encode_genes(w, p, 1).features, a);
}

TEST(GeneEnc, DifferenceInsideOneChunkChangesEmbedding) {
  Rng rng(8);
  GeneEncoderParams p(3, 4, 2, rng);
  RowVector v = gaussian_matrix(1, 9, 1.0, rng).row(0);
  RowVector w = v;
  w(4) += 0.5;
  const Matrix a = encode_genes(v, p, 1).features, b = encode_genes(w, p, 1).features;
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GeneEnc, MeanPoolMatchesManualAverage) {
  Rng rng(9);
  GeneEncoderParams p(2, 4, 2, rng);
  const RowVector v = gaussian_matrix(1, 7, 1.0, rng).row(0);
  const Matrix tokens = p.chunk_proj.apply(chunk_genes(v, 2));
  const Matrix y = msa(tokens, p);
  const RowVector mean = y.colwise().mean();
  EXPECT_LT((encode_genes(v, p, 2).features.row(1) - mean).cwiseAbs().maxCoeff(), 1e-14);
}
