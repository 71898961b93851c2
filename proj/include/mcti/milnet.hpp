#pragma once

// Dual-stream multiple-instance aggregator used to score patches by subtype
// evidence and pick the critical ones.

#include <vector>

#include "mcti/nn.hpp"

namespace mcti {

struct DsmilParams {
  Linear input_proj;           // d_in -> d_model
  Linear instance_classifier;  // d_model -> C
  Linear query_proj;           // d_model -> d_model
  Linear value_proj;           // d_model -> d_model
  Linear bag_classifier;       // d_model -> C

  DsmilParams() = default;
  DsmilParams(int d_in, int d_model, int n_classes, Rng& rng);
  void collect(ParamList& out);
  int n_classes() const { return static_cast<int>(instance_classifier.out_dim()); }
};

struct BagOutput {
  RowVector bag_logits;       // 1 × C
  Matrix instance_logits;     // n × C
  int critical_index = 0;
  Vector attention_weights;   // n, sums to 1
};

// Tape-level outputs; `projected` are the d_model instance embeddings that
// top-k selection gathers from.
struct BagGraph {
  ag::Var projected;
  ag::Var instance_logits;
  ag::Var bag_logits;
  ag::Var attention;  // 1 × n
  int critical_index = 0;
};

// When `forced_critical` is non-negative it replaces the argmax choice; used
// to replay a recorded forward pass.
BagGraph dsmil_graph(ag::Tape& tape, const Matrix& features, DsmilParams& params, int forced_critical = -1);
BagOutput dsmil_forward(const Matrix& features, DsmilParams& params);

// Critical instance of a logit matrix: argmax over rows of the column holding
// the largest single entry. First occurrence wins.
int critical_instance(const Matrix& instance_logits);

double softmax_cross_entropy(const RowVector& logits, int label);
double dsmil_loss(const BagOutput& output, int label);
ag::Var dsmil_loss(ag::Tape& tape, const BagGraph& graph, int label);

struct CriticalBag {
  Matrix features;                // k × d_model
  std::vector<int> source_indices;
};

// Ranks instances by `scores` (descending, ties by smaller index) and takes k,
// cycling through the ranked list when fewer than k instances exist.
std::vector<int> rank_top_k(const Vector& scores, int k);
CriticalBag select_top_k(const BagOutput& output, const Matrix& features, int k, int score_class);

}  // namespace mcti
