#pragma once

#include "mcti/nn.hpp"

namespace mcti {

inline constexpr double kProbabilityClamp = 1e-7;

struct SurvivalOutput {
  RowVector hazards;   // h(j) in (0,1)
  RowVector survival;  // S(j) = prod_{u<=j} (1 - h(u))
  double risk = 0.0;   // -sum_j S(j)
};

struct HeadParams {
  Mlp cls_head;   // d_model -> d_model -> C
  Mlp surv_head;  // d_model -> d_model -> n_bins

  HeadParams() = default;
  HeadParams(int d_model, int n_classes, int n_bins, Rng& rng);
  void collect(ParamList& out);
};

struct LossWeights {
  double alpha = 1.0;
};

RowVector hazards_to_survival(const RowVector& hazards);
SurvivalOutput survival_from_hazards(const RowVector& hazards);
double nll_survival_loss(const SurvivalOutput& output, int bin, int censor);
double total_loss(const RowVector& cls_logits, double dsmil_loss_value, double surv_loss_value, int label,
                  const LossWeights& weights);

// Mean of the final k rows (task-token positions) of a 3k-row stream.
ag::Var pool_task_tokens(const ag::Var& stream, int k);

struct HeadGraph {
  ag::Var class_logits;   // 1 × C
  ag::Var hazard_logits;  // 1 × n_bins
};

HeadGraph predict_graph(ag::Tape& tape, const ag::Var& d_cls, const ag::Var& d_surv, int k, HeadParams& params);

struct Prediction {
  RowVector class_logits;
  SurvivalOutput survival;
};

Prediction predict(const Matrix& d_cls, const Matrix& d_surv, int k, HeadParams& params);

}  // namespace mcti
