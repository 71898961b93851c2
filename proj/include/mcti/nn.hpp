#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mcti/autograd.hpp"

namespace mcti {

using Rng = std::mt19937_64;

// Non-owning view over every trainable tensor of a model, in a stable order.
using ParamList = std::vector<Parameter*>;

double standard_normal(Rng& rng);
double uniform01(Rng& rng);
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);
Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

// y = x W + b, with W stored in×out so that rows stay instances.
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng, bool with_bias = true);

  Eigen::Index in_dim() const { return weight.value.rows(); }
  Eigen::Index out_dim() const { return weight.value.cols(); }

  ag::Var operator()(ag::Tape& tape, const ag::Var& x);
  Matrix apply(const Matrix& x) const;
  void collect(ParamList& out);
};

// Two-layer perceptron in -> hidden -> out with a ReLU between.
struct Mlp {
  Linear first;
  Linear second;

  Mlp() = default;
  Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng);

  ag::Var operator()(ag::Tape& tape, const ag::Var& x);
  void collect(ParamList& out);
};

struct AdamOptions {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(ParamList params, AdamOptions options);

  // Applies one update from the accumulated grads, scaled by grad_scale.
  void step(double grad_scale = 1.0);
  void zero_grad();

  long long steps() const { return t_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void restore(long long steps, std::vector<Matrix> m, std::vector<Matrix> v);

 private:
  ParamList params_;
  AdamOptions opt_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long long t_ = 0;
};

}  // namespace mcti
