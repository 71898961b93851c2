#include "mcti/heads.hpp"

#include <algorithm>
#include <cmath>

#include "mcti/error.hpp"
#include "mcti/milnet.hpp"

namespace mcti {

HeadParams::HeadParams(int d_model, int n_classes, int n_bins, Rng& rng)
    : cls_head("heads.cls", d_model, d_model, n_classes, rng), surv_head("heads.surv", d_model, d_model, n_bins, rng) {}

void HeadParams::collect(ParamList& out) {
  cls_head.collect(out);
  surv_head.collect(out);
}

RowVector hazards_to_survival(const RowVector& hazards) {
  RowVector s(hazards.size());
  double acc = 1.0;
  for (Eigen::Index j = 0; j < hazards.size(); ++j) {
    if (!(hazards(j) >= 0.0 && hazards(j) < 1.0))
      throw Error(Errc::HazardOutOfRange, "hazard " + std::to_string(hazards(j)) + " outside [0,1)");
    acc *= 1.0 - hazards(j);
    s(j) = acc;
  }
  return s;
}

SurvivalOutput survival_from_hazards(const RowVector& hazards) {
  SurvivalOutput out;
  out.hazards = hazards;
  out.survival = hazards_to_survival(hazards);
  out.risk = -out.survival.sum();
  return out;
}

double nll_survival_loss(const SurvivalOutput& output, int bin, int censor) {
  const RowVector& h = output.hazards;
  if (bin < 0 || bin >= h.size()) throw Error(Errc::ShapeMismatch, "bin outside [0, n_bins)");
  auto clamped = [&](Eigen::Index j) { return std::clamp(h(j), kProbabilityClamp, 1.0 - kProbabilityClamp); };
  // log S(j) is accumulated from the clamped hazards; S(-1) = 1.
  auto log_survival = [&](int upto) {
    double acc = 0.0;
    for (int u = 0; u <= upto; ++u) acc += std::log(1.0 - clamped(u));
    return acc;
  };
  if (censor) return -log_survival(bin);
  return -(log_survival(bin - 1) + std::log(clamped(bin)));
}

double total_loss(const RowVector& cls_logits, double dsmil_loss_value, double surv_loss_value, int label,
                  const LossWeights& weights) {
  return softmax_cross_entropy(cls_logits, label) + dsmil_loss_value + weights.alpha * surv_loss_value;
}

ag::Var pool_task_tokens(const ag::Var& stream, int k) {
  if (stream.rows() != 3 * k) throw Error(Errc::ShapeMismatch, "decoder stream must have 3k rows");
  return ag::mean_rows(ag::slice_rows(stream, 2 * k, k));
}

HeadGraph predict_graph(ag::Tape& tape, const ag::Var& d_cls, const ag::Var& d_surv, int k, HeadParams& params) {
  if (d_cls.rows() != d_surv.rows() || d_cls.cols() != d_surv.cols())
    throw Error(Errc::ShapeMismatch, "decoder streams differ in shape");
  return HeadGraph{params.cls_head(tape, pool_task_tokens(d_cls, k)),
                   params.surv_head(tape, pool_task_tokens(d_surv, k))};
}

Prediction predict(const Matrix& d_cls, const Matrix& d_surv, int k, HeadParams& params) {
  ag::Tape tape;
  const HeadGraph g = predict_graph(tape, tape.constant(d_cls), tape.constant(d_surv), k, params);
  const RowVector z = g.hazard_logits.value().row(0);
  const RowVector h = (1.0 / (1.0 + (-z.array()).exp())).matrix();
  Prediction p;
  p.class_logits = g.class_logits.value().row(0);
  // Saturated sigmoids can round to exactly 1; keep S strictly positive.
  p.survival = survival_from_hazards(h.cwiseMin(1.0 - kProbabilityClamp));
  return p;
}

}  // namespace mcti
