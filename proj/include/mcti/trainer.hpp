#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcti/model.hpp"
#include "mcti/survstats.hpp"

namespace mcti {

struct FoldSplit {
  std::vector<std::string> train, val, test;
};

// One test quarter per fold (so every case is tested once with four folds);
// the rest splits 80/20 into train/val, giving 60/15/25 overall. Shuffling is
// stratified by subtype.
std::vector<FoldSplit> make_folds(std::span<const CaseRecord> cases, int folds, std::uint64_t seed);

// Named tensors and strings in one versioned binary file:
//   "MCTA" | u16 version | u32 count | entries
//   entry  = u8 kind (0 matrix, 1 text) | u32 name length | name | payload
//   matrix = u32 rows | u32 cols | f64 LE row-major;  text = u32 length | bytes
class Archive {
 public:
  static constexpr std::uint16_t kVersion = 1;

  void put(const std::string& name, const Matrix& m) { matrices_[name] = m; }
  void put_text(const std::string& name, const std::string& s) { texts_[name] = s; }
  const Matrix& matrix(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  bool has_matrix(const std::string& name) const { return matrices_.count(name) > 0; }
  bool has_text(const std::string& name) const { return texts_.count(name) > 0; }

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Matrix> matrices_;
  std::map<std::string, std::string> texts_;
};

struct Checkpoint {
  TrainConfig config;
  TimeBins bins;
  std::vector<std::pair<std::string, Matrix>> params;
  int epoch = 0;
  double val_c_index = 0.0;

  static Checkpoint capture(MctiModel& model, const TimeBins& bins, int epoch, double val_c_index);
  // Builds a model with this checkpoint's config and parameter values.
  std::unique_ptr<MctiModel> restore() const;
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

void load_parameters(MctiModel& model, const std::vector<std::pair<std::string, Matrix>>& params);

// Batch-of-one optimisation over a fixed training set; each accum_steps cases
// trigger one Adam update with the averaged gradient.
class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<const CaseRecord*> train, TimeBins bins);

  // One pass in a freshly shuffled order; returns the mean per-case loss.
  double train_epoch();
  // Runs cases in shuffled epochs until `updates` further Adam steps are made.
  void train_updates(long long updates);
  double mean_loss(std::span<const CaseRecord* const> cases);

  MctiModel& model() { return *model_; }
  const TimeBins& bins() const { return bins_; }
  long long updates() const { return adam_.steps(); }

  void save_state(Archive& ar) const;
  void load_state(const Archive& ar);

 private:
  double accumulate(const CaseRecord& c);
  void flush();

  TrainConfig config_;
  std::vector<const CaseRecord*> train_;
  TimeBins bins_;
  std::unique_ptr<MctiModel> model_;
  ParamList params_;
  Adam adam_;
  Rng rng_;
  int pending_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct Metrics {
  double c_index = 0.5;
  double accuracy = 0.0;
  std::vector<std::string> case_ids;
  std::vector<double> risks;
  std::vector<int> predicted;
};

Metrics evaluate(MctiModel& model, std::span<const CaseRecord* const> cases);
Metrics evaluate(const Checkpoint& checkpoint, std::span<const CaseRecord* const> cases);

struct FoldOptions {
  // Training state is written here after every epoch and resumed from if present.
  std::optional<std::filesystem::path> state_path;
  // Stop (without finishing) after this many epochs in this call; for tests of resume.
  std::optional<int> halt_after_epochs;
  std::function<void(int epoch, double train_loss, double val_c_index)> on_epoch;
};

struct FoldResult {
  Checkpoint best;
  bool finished = true;
};

FoldResult train_fold(std::span<const CaseRecord> cases, const FoldSplit& split, const TrainConfig& config,
                      const FoldOptions& options = {});

struct GradGroupError {
  std::string name;
  double rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradcheckReport {
  std::vector<GradGroupError> groups;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  bool throw_on_mismatch = true;
  // Test hook: runs after analytic gradients are computed.
  std::function<void(ParamList&)> corrupt;
};

TrainConfig tiny_gradcheck_config();
// Two small synthetic cases (one censored) sized for `config`.
std::vector<CaseRecord> gradcheck_cases(const TrainConfig& config, std::uint64_t seed);
// Summed total loss over `cases`, analytic gradients left in every Parameter.grad.
double analytic_gradients(MctiModel& model, std::span<const CaseRecord> cases, const TimeBins& bins,
                          std::vector<ForwardTrace>* traces = nullptr);
GradcheckReport gradcheck(const TrainConfig& config, const GradcheckOptions& options = {});

}  // namespace mcti
