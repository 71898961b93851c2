#include <gtest/gtest.h>

#include <functional>

#include "mcti/autograd.hpp"
#include "mcti/nn.hpp"
#include "test_util.hpp"

using namespace mcti;

namespace {

using Builder = std::function<ag::Var(ag::Tape&, const std::vector<ag::Var>&)>;

// Reduces any output to a scalar with a fixed random projection, then compares
// tape gradients of every input against central differences.
double worst_rel_error(const std::vector<Matrix>& inputs, const Builder& build, std::uint64_t seed = 1) {
  Rng rng(seed);
  Matrix proj;
  auto scalar = [&](const std::vector<Matrix>& xs, std::vector<Matrix>* grads) {
    ag::Tape tape;
    std::vector<Parameter> ps;
    ps.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ps.emplace_back("x" + std::to_string(i), xs[i]);
    std::vector<ag::Var> vars;
    for (auto& p : ps) vars.push_back(tape.param(p));
    const ag::Var out = build(tape, vars);
    if (proj.size() == 0) proj = gaussian_matrix(out.rows(), out.cols(), 1.0, rng);
    const double v = out.value().cwiseProduct(proj).sum();
    if (grads) {
      std::vector<ag::Var> terms;
      std::vector<double> weights;
      for (Eigen::Index r = 0; r < out.rows(); ++r)
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
          terms.push_back(ag::slice_cols(ag::slice_rows(out, r, 1), c, 1));
          weights.push_back(proj(r, c));
        }
      tape.backward(ag::weighted_sum(terms, weights));
      grads->clear();
      for (auto& p : ps) grads->push_back(p.grad);
    }
    return v;
  };
  std::vector<Matrix> analytic;
  scalar(inputs, &analytic);
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Matrix numeric(inputs[i].rows(), inputs[i].cols());
    for (Eigen::Index r = 0; r < numeric.rows(); ++r)
      for (Eigen::Index c = 0; c < numeric.cols(); ++c) {
        auto up = inputs, down = inputs;
        up[i](r, c) += h;
        down[i](r, c) -= h;
        numeric(r, c) = (scalar(up, nullptr) - scalar(down, nullptr)) / (2 * h);
      }
    const double scale = std::max({analytic[i].norm(), numeric.norm(), 1e-8});
    worst = std::max(worst, (analytic[i] - numeric).norm() / scale);
  }
  return worst;
}

Matrix rnd(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  return gaussian_matrix(r, c, 1.0, rng);
}

}  // namespace

TEST(Autograd, ElementaryOps) {
  const double tol = 1e-7;
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1), rnd(4, 2, 2)}, [](auto&, auto& v) { return ag::matmul(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1), rnd(5, 4, 2)}, [](auto&, auto& v) { return ag::matmul_nt(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 3)}, [](auto&, auto& v) { return ag::left_mul_const(rnd(2, 3, 9), v[0]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1), rnd(3, 4, 2)}, [](auto&, auto& v) { return ag::add(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1), rnd(1, 4, 2)}, [](auto&, auto& v) { return ag::add_row(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1)}, [](auto&, auto& v) { return ag::scale(v[0], -2.5); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 4)}, [](auto&, auto& v) { return ag::relu(v[0]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 4, 1)}, [](auto&, auto& v) { return ag::sigmoid(v[0]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 5, 1)}, [](auto&, auto& v) { return ag::softmax_rows(v[0]); }), tol);
}

TEST(Autograd, StructuralOps) {
  const double tol = 1e-7;
  EXPECT_LT(worst_rel_error({rnd(2, 3, 1), rnd(4, 3, 2)}, [](auto&, auto& v) { return ag::concat_rows(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(2, 3, 1), rnd(2, 1, 2)}, [](auto&, auto& v) { return ag::concat_cols(v[0], v[1]); }), tol);
  EXPECT_LT(worst_rel_error({rnd(5, 3, 1)}, [](auto&, auto& v) { return ag::slice_rows(v[0], 1, 3); }), tol);
  EXPECT_LT(worst_rel_error({rnd(3, 5, 1)}, [](auto&, auto& v) { return ag::slice_cols(v[0], 2, 2); }), tol);
  EXPECT_LT(worst_rel_error({rnd(4, 3, 1)},
                            [](auto&, auto& v) {
                              static const int idx[] = {2, 0, 2, 3};
                              return ag::gather_rows(v[0], idx);
                            }),
            tol);
  EXPECT_LT(worst_rel_error({rnd(1, 3, 1)}, [](auto&, auto& v) { return ag::replicate_rows(v[0], 4); }), tol);
  EXPECT_LT(worst_rel_error({rnd(4, 3, 1)}, [](auto&, auto& v) { return ag::mean_rows(v[0]); }), tol);
}

TEST(Autograd, Losses) {
  const double tol = 1e-7;
  for (int label = 0; label < 3; ++label)
    EXPECT_LT(worst_rel_error({rnd(1, 3, 5)}, [label](auto&, auto& v) { return ag::cross_entropy(v[0], label); }), tol);
  for (int bin = 0; bin < 4; ++bin)
    for (int censor = 0; censor < 2; ++censor)
      EXPECT_LT(worst_rel_error({rnd(1, 4, 6)},
                                [=](auto&, auto& v) { return ag::nll_survival_from_logits(v[0], bin, censor, 1e-7); }),
                tol);
  EXPECT_LT(worst_rel_error({rnd(1, 1, 1), rnd(1, 1, 2)},
                            [](auto&, auto& v) {
                              const double w[] = {0.5, -2.0};
                              return ag::weighted_sum(v, w);
                            }),
            tol);
}

TEST(Autograd, ClampedHazardsPassNoGradient) {
  // A logit of 40 saturates the sigmoid past 1 - 1e-7.
  Matrix z(1, 2);
  z << 40.0, 0.3;
  Parameter p("z", z);
  ag::Tape tape;
  tape.backward(ag::nll_survival_from_logits(tape.param(p), 1, 1, 1e-7));
  EXPECT_EQ(p.grad(0, 0), 0.0);
  EXPECT_NE(p.grad(0, 1), 0.0);
}

TEST(Autograd, SharedNodesAccumulate) {
  Parameter p("x", Matrix::Constant(1, 1, 3.0));
  ag::Tape tape;
  const ag::Var x = tape.param(p);
  const ag::Var y = ag::matmul(x, x);  // x²
  const ag::Var z = ag::add(y, x);     // x² + x
  tape.backward(z);
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 7.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter p("w", Matrix::Constant(2, 2, 1.0));
  Adam adam({&p}, AdamOptions{0.1, 0.9, 0.999, 1e-8});
  p.grad << 1, -2, 3, 0;
  adam.step();
  EXPECT_NEAR(p.value(0, 0), 0.9, 1e-8);
  EXPECT_NEAR(p.value(0, 1), 1.1, 1e-8);
  EXPECT_NEAR(p.value(1, 0), 0.9, 1e-8);
  EXPECT_EQ(p.value(1, 1), 1.0);
  EXPECT_EQ(adam.steps(), 1);
}
