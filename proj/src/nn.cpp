#include "mcti/nn.hpp"

#include <cmath>
#include <numbers>

#include "mcti/error.hpp"

namespace mcti {

// Box-Muller on raw engine output; std::normal_distribution caches a spare
// draw, which would make engine state alone insufficient to resume a run.
double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = Rng::max() - Rng::max() % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * standard_normal(rng);
  return m;
}

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng, bool with_bias)
    : weight(name + ".weight", gaussian_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(name + ".bias", Matrix::Zero(1, out)),
      has_bias(with_bias) {}

ag::Var Linear::operator()(ag::Tape& tape, const ag::Var& x) {
  ag::Var y = ag::matmul(x, tape.param(weight));
  return has_bias ? ag::add_row(y, tape.param(bias)) : y;
}

Matrix Linear::apply(const Matrix& x) const {
  Matrix y = x * weight.value;
  if (has_bias) y.rowwise() += bias.value.row(0);
  return y;
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

Mlp::Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng)
    : first(name + ".0", in, hidden, rng), second(name + ".1", hidden, out, rng) {}

ag::Var Mlp::operator()(ag::Tape& tape, const ag::Var& x) { return second(tape, ag::relu(first(tape, x))); }

void Mlp::collect(ParamList& out) {
  first.collect(out);
  second.collect(out);
}

Adam::Adam(ParamList params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    const Matrix g = p.grad * grad_scale;
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    const auto mhat = m_[i].array() / bc1;
    const auto vhat = v_[i].array() / bc2;
    p.value.array() -= opt_.learning_rate * mhat / (vhat.sqrt() + opt_.eps);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::restore(long long steps, std::vector<Matrix> m, std::vector<Matrix> v) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw Error(Errc::ShapeMismatch, "optimizer state does not match parameter list");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace mcti
