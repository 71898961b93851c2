#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass; Var is a cheap handle
// into it. backward() walks the records in reverse creation order, which is a
// valid topological order because an operation can only consume earlier Vars.

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mcti {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Var constant(Matrix value);
  // The leaf reads param.value now; backward() adds into param.grad.
  Var param(Parameter& param);

  // Accumulates d(loss)/d(every node), then flushes into bound parameters.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

  // Internal: used by the op implementations.
  Var push(Matrix value, std::function<void(Tape&, int)> backprop);
  const Matrix& value(int id) const { return nodes_[id].value; }
  Matrix& grad(int id);
  const Matrix& grad_or_empty(int id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, int)> backprop;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
// Constant matrix applied on the left: lhs * a. No gradient flows to lhs.
Var left_mul_const(const Matrix& lhs, const Var& a);
Var add(const Var& a, const Var& b);
// Adds a 1×c row to every row of a.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softmax_rows(const Var& a);
Var concat_rows(const Var& top, const Var& bottom);
Var concat_cols(const Var& left, const Var& right);
Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const int> indices);
Var replicate_rows(const Var& row, Eigen::Index times);
// 1×c mean over all rows.
Var mean_rows(const Var& a);
// Sum of a list of 1×1 values with per-term weights.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);
// 1×1 cross-entropy between a 1×C logit row and an integer label.
Var cross_entropy(const Var& logits, int label);
// 1×1 discrete-time survival NLL from a 1×n_bins row of hazard logits.
// Hazards are clamped to [eps, 1 - eps] before the logs; clamped entries pass
// no gradient.
Var nll_survival_from_logits(const Var& hazard_logits, int bin, int censor, double eps);

}  // namespace ag
}  // namespace mcti
