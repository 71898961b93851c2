#pragma once

// The full pipeline for one case: patch scoring and selection, gene bag,
// transport-guided encoder-decoder, task heads and the combined loss.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcti/config.hpp"
#include "mcti/databag.hpp"
#include "mcti/genenc.hpp"
#include "mcti/heads.hpp"
#include "mcti/milnet.hpp"
#include "mcti/tga.hpp"

namespace mcti {

enum class PatchSelection { Critical, Random };

struct TrainConfig {
  double learning_rate = 5e-5;
  int k = 256;
  int d_in = 1024;
  int d_model = 256;
  int n_layers = 4;
  int n_bins = 4;
  int n_classes = 2;
  double alpha = 1.0;
  double epsilon_ot = 0.1;
  int ot_max_iter = 200;
  double ot_tol = 1e-6;
  int epochs = 20;
  int patience = 10;
  int folds = 4;
  std::uint64_t seed = 1;
  int chunk_size = 64;
  int heads = 4;
  int accum_steps = 8;
  double token_std = 0.02;
  PatchSelection patch_selection = PatchSelection::Critical;
  // false: both task streams are supervised by survival only, with no subtype
  // or MIL loss (the no-TGA ablation).
  bool cross_task = true;

  void validate() const;
  KeyValues to_key_values() const;
  // Applies known keys on top of *this; unknown keys are rejected.
  void apply(const KeyValues& kv);
  std::string describe() const;  // resolved key=value listing
  SinkhornOptions sinkhorn() const { return SinkhornOptions{epsilon_ot, ot_max_iter, ot_tol}; }
};

// Everything a forward pass decided discretely, so that a replay evaluates the
// same piecewise-smooth function (used by finite differences).
struct ForwardTrace {
  explicit ForwardTrace(SinkhornOptions options = {}) : plans(options) {}

  bool replay = false;
  int critical_index = -1;
  std::vector<int> selected;
  PlanContext plans;
};

struct CaseGraph {
  BagGraph bag;
  HeadGraph head;
  ag::Var loss;
  ag::Var cls_loss;
  ag::Var dsmil_loss;
  ag::Var surv_loss;
  std::vector<int> selected;
  int score_class = 0;
};

class MctiModel {
 public:
  explicit MctiModel(const TrainConfig& config);
  MctiModel(const MctiModel&) = delete;
  MctiModel& operator=(const MctiModel&) = delete;

  const TrainConfig& config() const { return config_; }
  ParamList parameters();

  // training = true ranks patches by the ground-truth subtype, otherwise by
  // the predicted bag class. A trace in Replay mode is consumed, one in Record
  // mode is filled.
  CaseGraph forward(ag::Tape& tape, const CaseRecord& c, int bin, bool training, ForwardTrace& trace);

  struct Inference {
    double risk = 0.0;
    int predicted_class = 0;
    SurvivalOutput survival;
    BagOutput bag;
    std::vector<int> selected;
    int score_class = 0;
  };
  Inference infer(const CaseRecord& c);

  std::vector<int> random_selection(const CaseRecord& c) const;

  DsmilParams dsmil;
  GeneEncoderParams genes;
  EncDecParams encdec;
  HeadParams heads;

 private:
  TrainConfig config_;
};

}  // namespace mcti
