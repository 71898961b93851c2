#pragma once

// Transport-guided attention and the task-token encoder-decoder built on it.
//
// tga(S, O) = A · R · (S W_V) with
//   A = softmax_rows((S W_Q)(S W_K)^T / sqrt(d))   source self-attention
//   R = row-normalized entropic OT plan between the rows of S and O
// The plan is a constant of the backward pass.

#include <vector>

#include "mcti/nn.hpp"
#include "mcti/ot.hpp"

namespace mcti {

struct TgaParams {
  Linear query, key, value;  // d_model -> d_model, no bias

  TgaParams() = default;
  TgaParams(const std::string& name, int d_model, Rng& rng);
  void collect(ParamList& out);
};

// Supplies transport plans to successive tga calls. In Record mode plans are
// solved from the current token values and kept; Replay hands the kept plans
// back in the same order, which lets finite differences hold F fixed.
class PlanContext {
 public:
  enum class Mode { Record, Replay };

  explicit PlanContext(SinkhornOptions options = {}) : options_(options) {}

  const Matrix& next(const Matrix& source, const Matrix& objective);
  void replay() {
    mode_ = Mode::Replay;
    cursor_ = 0;
  }
  void clear() {
    plans_.clear();
    cursor_ = 0;
    mode_ = Mode::Record;
  }
  const std::vector<Matrix>& plans() const { return plans_; }
  int unconverged() const { return unconverged_; }
  const SinkhornOptions& options() const { return options_; }

 private:
  SinkhornOptions options_;
  Mode mode_ = Mode::Record;
  std::vector<Matrix> plans_;
  std::size_t cursor_ = 0;
  int unconverged_ = 0;
};

Matrix row_normalize(const Matrix& m);

ag::Var tga_graph(ag::Tape& tape, const ag::Var& source, const ag::Var& objective, TgaParams& params,
                  PlanContext& plans);
// Value-level form with an explicit plan over (source, objective).
Matrix tga_forward(const Matrix& source, const Matrix& objective, TgaParams& params, const TransportPlan& plan);
// Attention factor alone, exposed for row-stochasticity checks.
Matrix tga_attention(const Matrix& source, TgaParams& params);

struct EncDecParams {
  int k = 0;
  int d_model = 0;
  int n_layers = 0;
  Parameter x_cls, x_surv, x_share;  // k × d_model task tokens
  std::vector<TgaParams> enc_cls, enc_surv, dec_cls, dec_surv;
  std::vector<Linear> enc_fuse, dec_fuse;  // pointwise 2·d_model -> d_model

  EncDecParams() = default;
  EncDecParams(int k, int d_model, int n_layers, Rng& rng, double token_std = 0.02);
  void collect(ParamList& out);
};

struct StreamVars {
  ag::Var cls, surv, share;
};

struct StreamState {
  Matrix cls, surv, share;
};

// Returns E^1..E^n (E^0 is the concatenation of X with each token block).
std::vector<StreamVars> encoder_graph(ag::Tape& tape, const ag::Var& x, EncDecParams& params, PlanContext& plans);
// Returns D^n.
StreamVars decoder_graph(ag::Tape& tape, const std::vector<StreamVars>& encoder_states, EncDecParams& params,
                         PlanContext& plans);

std::vector<StreamState> encoder_forward(const Matrix& x, EncDecParams& params, PlanContext& plans);
StreamState decoder_forward(const std::vector<StreamState>& encoder_states, EncDecParams& params, PlanContext& plans);

}  // namespace mcti
