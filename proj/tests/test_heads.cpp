#include <gtest/gtest.h>

#include "mcti/heads.hpp"
#include "mcti/milnet.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcti;

namespace {

RowVector row(std::initializer_list<double> v) {
  RowVector r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

std::vector<double> vec(const RowVector& r) { return {r.data(), r.data() + r.size()}; }

}  // namespace

TEST(Survival, Examples) {
  EXPECT_EQ(hazards_to_survival(row({0.5, 0.5})), row({0.5, 0.25}));
  EXPECT_EQ(hazards_to_survival(RowVector::Zero(4)), RowVector::Ones(4));
  const SurvivalOutput s = survival_from_hazards(RowVector::Zero(4));
  EXPECT_EQ(s.risk, -4.0);
  EXPECT_MCTI_ERROR(hazards_to_survival(row({0.5, 1.0})), Errc::HazardOutOfRange);
  EXPECT_MCTI_ERROR(hazards_to_survival(row({-0.1})), Errc::HazardOutOfRange);
}

TEST(Survival, FoldOracle) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (int t = 0; t < 50; ++t) {
    RowVector h(7);
    for (int j = 0; j < 7; ++j) h(j) = u(rng);
    const auto expect = oracle::survival(vec(h));
    const RowVector s = hazards_to_survival(h);
    for (int j = 0; j < 7; ++j) EXPECT_NEAR(s(j), expect[j], 1e-15);
    for (int j = 1; j < 7; ++j) EXPECT_LE(s(j), s(j - 1));
    EXPECT_GT(s(6), 0.0);
  }
}

TEST(Survival, RiskIncreasesWithAnyHazard) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 0.9);
  for (int t = 0; t < 30; ++t) {
    RowVector h(4);
    for (int j = 0; j < 4; ++j) h(j) = u(rng);
    const double base = survival_from_hazards(h).risk;
    for (int j = 0; j < 4; ++j) {
      RowVector g = h;
      g(j) += 0.05;
      EXPECT_GT(survival_from_hazards(g).risk, base);
    }
  }
}

TEST(Nll, ClosedFormFixture) {
  const SurvivalOutput s = survival_from_hazards(row({0.2, 0.3, 0.4, 0.1}));
  EXPECT_NEAR(nll_survival_loss(s, 2, 0), -(std::log(0.8 * 0.7) + std::log(0.4)), 1e-12);
  EXPECT_NEAR(nll_survival_loss(s, 2, 1), -std::log(0.8 * 0.7 * 0.6), 1e-12);
  EXPECT_NEAR(nll_survival_loss(s, 0, 0), -std::log(0.2), 1e-12);
  EXPECT_NEAR(nll_survival_loss(s, 3, 1), -std::log(0.8 * 0.7 * 0.6 * 0.9), 1e-12);
}

TEST(Nll, LimitsAndOracle) {
  const double d = 1e-9;
  EXPECT_LT(nll_survival_loss(survival_from_hazards(row({d, d, 1 - 1e-6})), 2, 0), 2e-6);
  EXPECT_LT(nll_survival_loss(survival_from_hazards(row({0.0, 0.0, 0.0})), 2, 1), 1e-6);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.99);
  for (int t = 0; t < 100; ++t) {
    RowVector h(5);
    for (int j = 0; j < 5; ++j) h(j) = u(rng);
    const int bin = static_cast<int>(rng() % 5), c = static_cast<int>(rng() % 2);
    const double loss = nll_survival_loss(survival_from_hazards(h), bin, c);
    EXPECT_NEAR(loss, oracle::nll(vec(h), bin, c), 1e-12);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(Nll, FusedTapeFormMatchesValueForm) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0, 2);
  for (int t = 0; t < 40; ++t) {
    Matrix z(1, 4);
    for (int j = 0; j < 4; ++j) z(0, j) = nd(rng);
    const RowVector h = (1.0 / (1.0 + (-z.row(0).array()).exp())).matrix();
    const int bin = static_cast<int>(rng() % 4), c = static_cast<int>(rng() % 2);
    ag::Tape tape;
    const double fused = ag::nll_survival_from_logits(tape.constant(z), bin, c, kProbabilityClamp).scalar();
    EXPECT_NEAR(fused, oracle::nll(vec(h), bin, c), 1e-12);
  }
}

TEST(TotalLoss, Composition) {
  const RowVector z = row({0.3, -1.2, 2.0});
  const double ce = oracle::cross_entropy({0.3, -1.2, 2.0}, 1);
  EXPECT_DOUBLE_EQ(total_loss(z, 0.7, 5.0, 1, {0.0}), ce + 0.7);
  EXPECT_NEAR(total_loss(z, 0.7, 5.0, 1, {0.5}), ce + 0.7 + 2.5, 1e-15);
  RowVector sharp = row({80, -80});
  EXPECT_LT(total_loss(sharp, 0.0, 0.0, 0, {1.0}), 1e-30);
}

TEST(Predict, ZeroInputZeroBiasGivesHalfHazards) {
  Rng rng(5);
  HeadParams p(3, 2, 4, rng);
  for (Linear* l : {&p.cls_head.first, &p.cls_head.second, &p.surv_head.first, &p.surv_head.second})
    l->bias.value.setZero();
  const Prediction out = predict(Matrix::Zero(6, 3), Matrix::Zero(6, 3), 2, p);
  EXPECT_EQ(out.survival.hazards, RowVector::Constant(4, 0.5));
  EXPECT_EQ(out.survival.survival, row({0.5, 0.25, 0.125, 0.0625}));
  EXPECT_EQ(out.class_logits, RowVector::Zero(2));
}

TEST(Predict, PoolsOnlyTaskTokensAndRiskMatchesProducts) {
  Rng rng(6);
  HeadParams p(3, 2, 4, rng);
  const Matrix d_cls = gaussian_matrix(6, 3, 1.0, rng), d_surv = gaussian_matrix(6, 3, 1.0, rng);
  const Prediction base = predict(d_cls, d_surv, 2, p);
  Matrix perturbed = d_surv;
  perturbed.topRows(4).setRandom();
  EXPECT_EQ(predict(d_cls, perturbed, 2, p).survival.risk, base.survival.risk);
  // Independent evaluation of the surv MLP.
  const RowVector pooled = d_surv.bottomRows(2).colwise().mean();
  const Matrix hid = ((pooled * p.surv_head.first.weight.value + p.surv_head.first.bias.value).array().max(0.0)).matrix();
  const RowVector z = hid * p.surv_head.second.weight.value + p.surv_head.second.bias.value;
  double prod = 1.0, risk = 0.0;
  for (int j = 0; j < 4; ++j) {
    prod *= 1.0 - 1.0 / (1.0 + std::exp(-z(j)));
    risk -= prod;
  }
  EXPECT_NEAR(base.survival.risk, risk, 1e-12);
  EXPECT_MCTI_ERROR(predict(Matrix::Zero(5, 3), Matrix::Zero(5, 3), 2, p), Errc::ShapeMismatch);
}

TEST(Predict, ArgmaxShiftInvariance) {
  RowVector z = row({0.1, 2.0, -1.0});
  RowVector shifted = z.array() + 100.0;
  Eigen::Index a, b;
  z.maxCoeff(&a);
  shifted.maxCoeff(&b);
  EXPECT_EQ(a, b);
  EXPECT_NEAR(softmax_cross_entropy(z, 1), softmax_cross_entropy(shifted, 1), 1e-12);
}
