#include "mcti/milnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcti/error.hpp"

namespace mcti {

DsmilParams::DsmilParams(int d_in, int d_model, int n_classes, Rng& rng)
    : input_proj("dsmil.input_proj", d_in, d_model, rng),
      instance_classifier("dsmil.instance_classifier", d_model, n_classes, rng),
      query_proj("dsmil.query_proj", d_model, d_model, rng),
      value_proj("dsmil.value_proj", d_model, d_model, rng),
      bag_classifier("dsmil.bag_classifier", d_model, n_classes, rng) {
  // Class columns start (and stay) summing to zero.
  instance_classifier.weight.value.setZero();
}

void DsmilParams::collect(ParamList& out) {
  input_proj.collect(out);
  instance_classifier.collect(out);
  query_proj.collect(out);
  value_proj.collect(out);
  bag_classifier.collect(out);
}

int critical_instance(const Matrix& instance_logits) {
  const RowVector class_max = instance_logits.colwise().maxCoeff();
  Eigen::Index cstar = 0;
  for (Eigen::Index c = 1; c < class_max.size(); ++c)
    if (class_max(c) > class_max(cstar)) cstar = c;
  Eigen::Index crit = 0;
  for (Eigen::Index i = 1; i < instance_logits.rows(); ++i)
    if (instance_logits(i, cstar) > instance_logits(crit, cstar)) crit = i;
  return static_cast<int>(crit);
}

BagGraph dsmil_graph(ag::Tape& tape, const Matrix& features, DsmilParams& params, int forced_critical) {
  if (features.rows() < 1) throw Error(Errc::EmptyBag, "bag has no instances");
  if (features.cols() != params.input_proj.in_dim())
    throw Error(Errc::ShapeMismatch, "bag feature width does not match input projection");
  BagGraph g;
  g.projected = params.input_proj(tape, tape.constant(features));
  g.instance_logits = params.instance_classifier(tape, g.projected);
  g.critical_index = forced_critical >= 0 ? forced_critical : critical_instance(g.instance_logits.value());

  const ag::Var q = params.query_proj(tape, g.projected);
  const int crit[] = {g.critical_index};
  const ag::Var q_crit = ag::gather_rows(q, crit);
  // 1 × n similarities to the critical query, softmax over instances.
  g.attention = ag::softmax_rows(ag::matmul_nt(q_crit, q));
  const ag::Var v = params.value_proj(tape, g.projected);
  const ag::Var embedding = ag::matmul(g.attention, v);  // 1 × d_model
  g.bag_logits = params.bag_classifier(tape, embedding);
  return g;
}

BagOutput dsmil_forward(const Matrix& features, DsmilParams& params) {
  ag::Tape tape;
  const BagGraph g = dsmil_graph(tape, features, params);
  BagOutput out;
  out.bag_logits = g.bag_logits.value().row(0);
  out.instance_logits = g.instance_logits.value();
  out.critical_index = g.critical_index;
  out.attention_weights = g.attention.value().row(0).transpose();
  return out;
}

double softmax_cross_entropy(const RowVector& logits, int label) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits(label);
}

double dsmil_loss(const BagOutput& output, int label) {
  if (label < 0 || label >= output.bag_logits.size()) throw Error(Errc::ShapeMismatch, "label out of range");
  return softmax_cross_entropy(output.bag_logits, label) +
         softmax_cross_entropy(output.instance_logits.row(output.critical_index), label);
}

ag::Var dsmil_loss(ag::Tape& /*tape*/, const BagGraph& graph, int label) {
  const int crit[] = {graph.critical_index};
  const ag::Var terms[] = {ag::cross_entropy(graph.bag_logits, label),
                           ag::cross_entropy(ag::gather_rows(graph.instance_logits, crit), label)};
  const double w[] = {1.0, 1.0};
  return ag::weighted_sum(terms, w);
}

std::vector<int> rank_top_k(const Vector& scores, int k) {
  if (k < 1) throw Error(Errc::InvalidConfig, "k must be at least 1");
  const int n = static_cast<int>(scores.size());
  if (n < 1) throw Error(Errc::EmptyBag, "no scores to rank");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  std::vector<int> out(k);
  for (int r = 0; r < k; ++r) out[r] = order[r % n];
  return out;
}

CriticalBag select_top_k(const BagOutput& output, const Matrix& features, int k, int score_class) {
  if (features.rows() != output.instance_logits.rows())
    throw Error(Errc::ShapeMismatch, "features and instance logits disagree on n");
  CriticalBag bag;
  bag.source_indices = rank_top_k(output.instance_logits.col(score_class), k);
  bag.features.resize(k, features.cols());
  for (int r = 0; r < k; ++r) bag.features.row(r) = features.row(bag.source_indices[r]);
  return bag;
}

}  // namespace mcti
