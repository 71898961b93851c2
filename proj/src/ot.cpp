#include "mcti/ot.hpp"

#include <cmath>
#include <limits>

#include "mcti/error.hpp"

namespace mcti {

namespace {

Matrix normalize_rows(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

void check_marginal(const Vector& w, Eigen::Index n, const char* which) {
  if (w.size() != n) throw Error(Errc::InvalidMarginals, std::string(which) + " marginal has the wrong length");
  if ((w.array() <= 0.0).any() || !w.allFinite())
    throw Error(Errc::InvalidMarginals, std::string(which) + " marginal must be strictly positive");
  if (std::abs(w.sum() - 1.0) > 1e-9) throw Error(Errc::InvalidMarginals, std::string(which) + " marginal must sum to 1");
}

}  // namespace

CostMatrix cost_matrix(const Matrix& source, const Matrix& objective) {
  if (source.cols() != objective.cols() || source.cols() < 1)
    throw Error(Errc::ShapeMismatch, "cost matrix operands differ in width");
  const Matrix s = normalize_rows(source);
  const Matrix o = normalize_rows(objective);
  const Vector sn = s.rowwise().squaredNorm();
  const Vector on = o.rowwise().squaredNorm();
  Matrix c = -2.0 * s * o.transpose();
  c.colwise() += sn;
  c.rowwise() += on.transpose();
  return CostMatrix{c.cwiseMax(0.0)};
}

Vector uniform_marginal(Eigen::Index n) { return Vector::Constant(n, 1.0 / static_cast<double>(n)); }

TransportPlan sinkhorn(const CostMatrix& cost, const Vector& a, const Vector& b, const SinkhornOptions& opt) {
  const Matrix& C = cost.values;
  const Eigen::Index m = C.rows(), mp = C.cols();
  if (m < 1 || mp < 1) throw Error(Errc::ShapeMismatch, "empty cost matrix");
  check_marginal(a, m, "row");
  check_marginal(b, mp, "column");
  if (!(opt.epsilon > 0.0)) throw Error(Errc::InvalidConfig, "epsilon must be positive");
  const double eps = opt.epsilon;

  // Start the duals at the c-transform so every kernel row and column holds a 1.
  Vector f = C.rowwise().minCoeff();
  Vector g = (C.colwise() - f).colwise().minCoeff().transpose();
  auto kernel = [&]() -> Matrix {
    Matrix k = C;
    k.colwise() -= f;
    k.rowwise() -= g.transpose();
    return (-k.array() / eps).exp().matrix();
  };
  Matrix K = kernel();
  Vector u = Vector::Ones(m), v = Vector::Ones(mp);
  constexpr double kAbsorbAbove = 1e30;

  TransportPlan plan;
  plan.row_marginal = a;
  plan.col_marginal = b;
  plan.epsilon = eps;
  double violation = std::numeric_limits<double>::infinity();
  int it = 0;
  while (it < opt.max_iter) {
    ++it;
    v = b.array() / (K.transpose() * u).array();
    const Vector kv = K * v;
    u = a.array() / kv.array();
    // Rows hold to rounding after the u update, so only columns can lag.
    const Vector col = v.array() * (K.transpose() * u).array();
    violation = (col - b).cwiseAbs().maxCoeff();
    const bool unsafe = !u.allFinite() || !v.allFinite() || u.maxCoeff() > kAbsorbAbove ||
                        v.maxCoeff() > kAbsorbAbove || u.minCoeff() < 1.0 / kAbsorbAbove ||
                        v.minCoeff() < 1.0 / kAbsorbAbove;
    if (unsafe) {
      f += eps * u.array().log().matrix();
      g += eps * v.array().log().matrix();
      K = kernel();
      u.setOnes();
      v.setOnes();
    }
    if (violation < opt.tol) break;
  }
  f += eps * u.array().log().matrix();
  g += eps * v.array().log().matrix();
  plan.flow = kernel();
  plan.iterations_used = it;
  violation = std::max((plan.flow.rowwise().sum() - a).cwiseAbs().maxCoeff(),
                       (plan.flow.colwise().sum().transpose() - b).cwiseAbs().maxCoeff());
  plan.violation = violation;
  plan.converged = violation < opt.tol;
  plan.cost = plan.flow.cwiseProduct(C).sum();
  return plan;
}

double transport_cost(const TransportPlan& plan, const CostMatrix& cost) {
  if (plan.flow.rows() != cost.values.rows() || plan.flow.cols() != cost.values.cols())
    throw Error(Errc::ShapeMismatch, "plan and cost shapes differ");
  return plan.flow.cwiseProduct(cost.values).sum();
}

}  // namespace mcti
