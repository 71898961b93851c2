#pragma once

// Balanced entropic optimal transport between two token sets.

#include "mcti/autograd.hpp"

namespace mcti {

struct CostMatrix {
  Matrix values;  // m × m', squared Euclidean distance between L2-normalized rows
};

struct SinkhornOptions {
  double epsilon = 0.1;
  int max_iter = 200;
  double tol = 1e-6;
};

struct TransportPlan {
  Matrix flow;
  Vector row_marginal;
  Vector col_marginal;
  double epsilon = 0.0;
  int iterations_used = 0;
  double violation = 0.0;  // max(|F1 - a|_inf, |F^T 1 - b|_inf) at exit
  bool converged = false;  // false means NonConvergence: violation >= tol at max_iter
  double cost = 0.0;       // <F, C>
};

CostMatrix cost_matrix(const Matrix& source, const Matrix& objective);

Vector uniform_marginal(Eigen::Index n);

// Log-stabilized Sinkhorn scaling. The duals live in the log domain and are
// refreshed from the scaling vectors whenever those leave a safe range, so
// small epsilon never under- or overflows the kernel.
TransportPlan sinkhorn(const CostMatrix& cost, const Vector& a, const Vector& b, const SinkhornOptions& options = {});

double transport_cost(const TransportPlan& plan, const CostMatrix& cost);

}  // namespace mcti
