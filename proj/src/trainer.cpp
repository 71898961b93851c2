#include "mcti/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "mcti/error.hpp"

namespace mcti {

namespace fs = std::filesystem;

namespace {

template <typename T>
void put_raw(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <typename T>
T get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error(Errc::TruncatedPayload, "archive ends early");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Folds

std::vector<FoldSplit> make_folds(std::span<const CaseRecord> cases, int folds, std::uint64_t seed) {
  if (folds < 2) throw Error(Errc::InvalidConfig, "folds must be at least 2");
  if (cases.size() < static_cast<std::size_t>(folds) * 4)
    throw Error(Errc::TooFewCases, std::to_string(cases.size()) + " cases for " + std::to_string(folds) + " folds");
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < cases.size(); ++i) by_class[cases[i].subtype].push_back(i);
  std::vector<std::size_t> order;
  for (auto& [cls, members] : by_class) {
    for (std::size_t j = members.size(); j > 1; --j) std::swap(members[j - 1], members[uniform_index(rng, j)]);
    order.insert(order.end(), members.begin(), members.end());
  }
  // Consecutive positions cycle through folds, which spreads every class evenly.
  std::vector<FoldSplit> out(folds);
  for (int f = 0; f < folds; ++f) {
    std::size_t rest = 0;
    for (std::size_t p = 0; p < order.size(); ++p) {
      const std::string& id = cases[order[p]].case_id;
      if (static_cast<int>(p % folds) == f) {
        out[f].test.push_back(id);
      } else {
        (rest % 5 == static_cast<std::size_t>(f % 5) ? out[f].val : out[f].train).push_back(id);
        ++rest;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Archive / checkpoint

const Matrix& Archive::matrix(const std::string& name) const {
  const auto it = matrices_.find(name);
  if (it == matrices_.end()) throw Error(Errc::MissingColumn, "archive lacks tensor " + name);
  return it->second;
}

const std::string& Archive::text(const std::string& name) const {
  const auto it = texts_.find(name);
  if (it == texts_.end()) throw Error(Errc::MissingColumn, "archive lacks entry " + name);
  return it->second;
}

void Archive::save(const fs::path& path) const {
  std::string out = "MCTA";
  put_raw<std::uint16_t>(out, kVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(matrices_.size() + texts_.size()));
  for (const auto& [name, m] : matrices_) {
    put_raw<std::uint8_t>(out, 0);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_raw<double>(out, m(r, c));
  }
  for (const auto& [name, s] : texts_) {
    put_raw<std::uint8_t>(out, 1);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
  }
  // Write-then-rename so an interrupted save never leaves a torn file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::Io, "cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
  fs::rename(tmp, path);
}

Archive Archive::load(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::UnresolvablePath, "cannot open " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 4 || in.compare(0, 4, "MCTA") != 0) throw Error(Errc::BadMagic, path.string());
  std::size_t pos = 4;
  const auto version = get_raw<std::uint16_t>(in, pos);
  if (version != kVersion) throw Error(Errc::VersionUnsupported, "archive version " + std::to_string(version));
  const auto count = get_raw<std::uint32_t>(in, pos);
  Archive ar;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto kind = get_raw<std::uint8_t>(in, pos);
    const auto len = get_raw<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw Error(Errc::TruncatedPayload, "archive name");
    std::string name = in.substr(pos, len);
    pos += len;
    if (kind == 0) {
      const auto rows = get_raw<std::uint32_t>(in, pos);
      const auto cols = get_raw<std::uint32_t>(in, pos);
      Matrix m(rows, cols);
      for (std::uint32_t r = 0; r < rows; ++r)
        for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = get_raw<double>(in, pos);
      ar.matrices_[name] = std::move(m);
    } else if (kind == 1) {
      const auto sl = get_raw<std::uint32_t>(in, pos);
      if (pos + sl > in.size()) throw Error(Errc::TruncatedPayload, "archive text");
      ar.texts_[name] = in.substr(pos, sl);
      pos += sl;
    } else {
      throw Error(Errc::BadMagic, "unknown archive entry kind");
    }
  }
  if (pos != in.size()) throw Error(Errc::TruncatedPayload, "trailing bytes in archive");
  return ar;
}

namespace {

void put_params(Archive& ar, const std::string& prefix, const std::vector<std::pair<std::string, Matrix>>& params) {
  for (const auto& [name, m] : params) ar.put(prefix + name, m);
}

std::vector<std::pair<std::string, Matrix>> snapshot(MctiModel& model) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (const Parameter* p : model.parameters()) out.emplace_back(p->name, p->value);
  return out;
}

std::vector<std::pair<std::string, Matrix>> get_params(const Archive& ar, const std::string& prefix,
                                                       MctiModel& shape) {
  std::vector<std::pair<std::string, Matrix>> out;
  for (const Parameter* p : shape.parameters()) out.emplace_back(p->name, ar.matrix(prefix + p->name));
  return out;
}

Matrix bins_matrix(const TimeBins& bins) {
  Matrix m(1, static_cast<Eigen::Index>(bins.edges.size()));
  for (std::size_t j = 0; j < bins.edges.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = bins.edges[j];
  return m;
}

TimeBins bins_from(const Matrix& m) {
  TimeBins b;
  for (Eigen::Index j = 0; j < m.cols(); ++j) b.edges.push_back(m(0, j));
  b.n_bins = static_cast<int>(b.edges.size()) + 1;
  return b;
}

TrainConfig config_from_text(const std::string& text) {
  TrainConfig c;
  c.apply(parse_key_values(text));
  c.validate();
  return c;
}

}  // namespace

void load_parameters(MctiModel& model, const std::vector<std::pair<std::string, Matrix>>& params) {
  std::unordered_map<std::string, const Matrix*> byname;
  for (const auto& [n, m] : params) byname[n] = &m;
  for (Parameter* p : model.parameters()) {
    const auto it = byname.find(p->name);
    if (it == byname.end()) throw Error(Errc::MissingColumn, "checkpoint lacks " + p->name);
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols())
      throw Error(Errc::ShapeMismatch, "checkpoint tensor " + p->name + " has the wrong shape");
    p->value = *it->second;
  }
}

Checkpoint Checkpoint::capture(MctiModel& model, const TimeBins& bins, int epoch, double val_c_index) {
  return Checkpoint{model.config(), bins, snapshot(model), epoch, val_c_index};
}

std::unique_ptr<MctiModel> Checkpoint::restore() const {
  auto model = std::make_unique<MctiModel>(config);
  load_parameters(*model, params);
  return model;
}

void Checkpoint::save(const fs::path& path) const {
  Archive ar;
  ar.put_text("kind", "checkpoint");
  ar.put_text("config", config.describe());
  ar.put("bins", bins_matrix(bins));
  ar.put_text("epoch", std::to_string(epoch));
  ar.put_text("val_c_index", format_double(val_c_index));
  put_params(ar, "param/", params);
  ar.save(path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  const Archive ar = Archive::load(path);
  Checkpoint c;
  c.config = config_from_text(ar.text("config"));
  c.bins = bins_from(ar.matrix("bins"));
  c.epoch = static_cast<int>(parse_int("epoch", ar.text("epoch")));
  c.val_c_index = parse_double("val_c_index", ar.text("val_c_index"));
  MctiModel shape(c.config);
  c.params = get_params(ar, "param/", shape);
  return c;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& config, std::vector<const CaseRecord*> train, TimeBins bins)
    : config_(config),
      train_(std::move(train)),
      bins_(std::move(bins)),
      model_(std::make_unique<MctiModel>(config)),
      params_(model_->parameters()),
      adam_(params_, AdamOptions{config.learning_rate}),
      rng_(config.seed * 0x2545F4914F6CDD1Dull + 7) {
  if (train_.empty()) throw Error(Errc::TooFewCases, "no training cases");
  if (bins_.n_bins != config_.n_bins) throw Error(Errc::InvalidConfig, "time bins disagree with n_bins");
  adam_.zero_grad();
}

double Trainer::accumulate(const CaseRecord& c) {
  ag::Tape tape;
  ForwardTrace trace(config_.sinkhorn());
  const CaseGraph g = model_->forward(tape, c, assign_bin(c.time, bins_), true, trace);
  const double loss = g.loss.scalar();
  if (!std::isfinite(loss)) {
    std::ostringstream why;
    why << "case " << c.case_id << ": cls=" << g.cls_loss.scalar() << " surv=" << g.surv_loss.scalar();
    if (config_.cross_task) why << " dsmil=" << g.dsmil_loss.scalar();
    why << " after " << adam_.steps() << " updates";
    throw Error(Errc::NonFiniteLoss, why.str());
  }
  tape.backward(g.loss);
  ++pending_;
  return loss;
}

void Trainer::flush() {
  if (pending_ == 0) return;
  adam_.step(1.0 / pending_);
  adam_.zero_grad();
  pending_ = 0;
}

double Trainer::train_epoch() {
  order_.resize(train_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  for (std::size_t j = order_.size(); j > 1; --j) std::swap(order_[j - 1], order_[uniform_index(rng_, j)]);
  double total = 0.0;
  for (std::size_t idx : order_) {
    total += accumulate(*train_[idx]);
    if (pending_ >= config_.accum_steps) flush();
  }
  flush();
  cursor_ = order_.size();
  return total / static_cast<double>(order_.size());
}

void Trainer::train_updates(long long updates) {
  const long long target = adam_.steps() + updates;
  while (adam_.steps() < target) {
    if (cursor_ >= order_.size()) {
      order_.resize(train_.size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      for (std::size_t j = order_.size(); j > 1; --j) std::swap(order_[j - 1], order_[uniform_index(rng_, j)]);
      cursor_ = 0;
    }
    accumulate(*train_[order_[cursor_++]]);
    if (pending_ >= config_.accum_steps) flush();
  }
}

double Trainer::mean_loss(std::span<const CaseRecord* const> cases) {
  double total = 0.0;
  for (const CaseRecord* c : cases) {
    ag::Tape tape;
    ForwardTrace trace(config_.sinkhorn());
    total += model_->forward(tape, *c, assign_bin(c->time, bins_), true, trace).loss.scalar();
  }
  return total / static_cast<double>(cases.size());
}

void Trainer::save_state(Archive& ar) const {
  const auto& m = adam_.first_moments();
  const auto& v = adam_.second_moments();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ar.put("param/" + params_[i]->name, params_[i]->value);
    ar.put("adam_m/" + params_[i]->name, m[i]);
    ar.put("adam_v/" + params_[i]->name, v[i]);
  }
  ar.put_text("adam_steps", std::to_string(adam_.steps()));
  std::ostringstream rs;
  rs << rng_;
  ar.put_text("rng", rs.str());
  ar.put_text("config", config_.describe());
  ar.put("bins", bins_matrix(bins_));
  // Position inside the current epoch.
  Matrix order(1, static_cast<Eigen::Index>(order_.size()));
  for (std::size_t i = 0; i < order_.size(); ++i) order(0, static_cast<Eigen::Index>(i)) = static_cast<double>(order_[i]);
  ar.put("order", order);
  ar.put_text("cursor", std::to_string(cursor_));
}

void Trainer::load_state(const Archive& ar) {
  std::vector<Matrix> m, v;
  for (Parameter* p : params_) {
    p->value = ar.matrix("param/" + p->name);
    m.push_back(ar.matrix("adam_m/" + p->name));
    v.push_back(ar.matrix("adam_v/" + p->name));
  }
  adam_.restore(parse_int("adam_steps", ar.text("adam_steps")), std::move(m), std::move(v));
  std::istringstream rs(ar.text("rng"));
  rs >> rng_;
  adam_.zero_grad();
  pending_ = 0;
  cursor_ = order_.size();
  if (ar.has_matrix("order")) {
    const Matrix& order = ar.matrix("order");
    order_.assign(static_cast<std::size_t>(order.cols()), 0);
    for (std::size_t i = 0; i < order_.size(); ++i)
      order_[i] = static_cast<std::size_t>(order(0, static_cast<Eigen::Index>(i)));
    cursor_ = static_cast<std::size_t>(parse_int("cursor", ar.text("cursor")));
  }
}

// ---------------------------------------------------------------------------
// Evaluation

Metrics evaluate(MctiModel& model, std::span<const CaseRecord* const> cases) {
  Metrics out;
  RiskDataset data;
  int correct = 0;
  for (const CaseRecord* c : cases) {
    const auto inf = model.infer(*c);
    out.case_ids.push_back(c->case_id);
    out.risks.push_back(inf.risk);
    out.predicted.push_back(inf.predicted_class);
    correct += inf.predicted_class == c->subtype;
    data.times.push_back(c->time);
    data.censors.push_back(c->censor);
    data.risks.push_back(inf.risk);
  }
  out.accuracy = cases.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(cases.size());
  try {
    out.c_index = c_index(data);
  } catch (const Error& e) {
    if (e.code() != Errc::NoComparablePairs) throw;
    out.c_index = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

Metrics evaluate(const Checkpoint& checkpoint, std::span<const CaseRecord* const> cases) {
  auto model = checkpoint.restore();
  return evaluate(*model, cases);
}

// ---------------------------------------------------------------------------
// Fold training

namespace {

std::vector<const CaseRecord*> lookup(std::span<const CaseRecord> cases, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const CaseRecord*> byid;
  for (const auto& c : cases) byid[c.case_id] = &c;
  std::vector<const CaseRecord*> out;
  for (const auto& id : ids) {
    const auto it = byid.find(id);
    if (it == byid.end()) throw Error(Errc::MissingColumn, "split names unknown case " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

FoldResult train_fold(std::span<const CaseRecord> cases, const FoldSplit& split, const TrainConfig& config,
                      const FoldOptions& options) {
  config.validate();
  const auto train = lookup(cases, split.train);
  const auto val = lookup(cases, split.val);
  std::vector<CaseRecord> train_copy;
  for (const CaseRecord* c : train) train_copy.push_back(*c);
  const TimeBins bins = compute_time_bins(train_copy, config.n_bins);

  Trainer trainer(config, train, bins);
  FoldResult result;
  result.best = Checkpoint::capture(trainer.model(), bins, 0, -std::numeric_limits<double>::infinity());
  int epoch = 0, since_best = 0;
  bool done = false;

  if (options.state_path && fs::exists(*options.state_path)) {
    const Archive ar = Archive::load(*options.state_path);
    if (ar.text("config") != config.describe())
      throw Error(Errc::InvalidConfig, "resume state was written with a different configuration");
    trainer.load_state(ar);
    epoch = static_cast<int>(parse_int("epoch", ar.text("epoch")));
    since_best = static_cast<int>(parse_int("since_best", ar.text("since_best")));
    done = parse_bool("done", ar.text("done"));
    result.best.epoch = static_cast<int>(parse_int("best_epoch", ar.text("best_epoch")));
    result.best.val_c_index = parse_double("best_val", ar.text("best_val"));
    result.best.params = get_params(ar, "best/", trainer.model());
  }

  auto save = [&] {
    if (!options.state_path) return;
    Archive ar;
    ar.put_text("kind", "train_state");
    trainer.save_state(ar);
    ar.put_text("epoch", std::to_string(epoch));
    ar.put_text("since_best", std::to_string(since_best));
    ar.put_text("done", done ? "true" : "false");
    ar.put_text("best_epoch", std::to_string(result.best.epoch));
    ar.put_text("best_val", format_double(result.best.val_c_index));
    put_params(ar, "best/", result.best.params);
    ar.save(*options.state_path);
  };

  int ran = 0;
  while (!done && epoch < config.epochs) {
    if (options.halt_after_epochs && ran >= *options.halt_after_epochs) {
      result.finished = false;
      return result;
    }
    const double loss = trainer.train_epoch();
    ++epoch;
    ++ran;
    double vc = evaluate(trainer.model(), val).c_index;
    if (!std::isfinite(vc)) vc = 0.5;
    if (vc > result.best.val_c_index) {
      result.best = Checkpoint::capture(trainer.model(), bins, epoch, vc);
      since_best = 0;
    } else {
      ++since_best;
    }
    if (options.on_epoch) options.on_epoch(epoch, loss, vc);
    if (since_best >= config.patience || epoch >= config.epochs) done = true;
    save();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

TrainConfig tiny_gradcheck_config() {
  TrainConfig c;
  c.k = 2;
  c.d_in = 3;
  c.d_model = 4;
  c.n_layers = 2;
  c.n_bins = 2;
  c.n_classes = 2;
  c.chunk_size = 3;
  c.heads = 2;
  c.alpha = 1.0;
  c.token_std = 0.5;
  c.seed = 7;
  return c;
}

std::vector<CaseRecord> gradcheck_cases(const TrainConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CaseRecord> out;
  for (int i = 0; i < 2; ++i) {
    CaseRecord c;
    c.case_id = "grad_" + std::to_string(i);
    c.wsi_features = gaussian_matrix(config.k + 3, config.d_in, 1.0, rng);
    c.gene_vector = gaussian_matrix(1, 2 * config.chunk_size - 1, 1.0, rng).row(0);
    c.subtype = i % config.n_classes;
    c.censor = i % 2;
    c.time = 1.0 + 2.0 * i;
    out.push_back(std::move(c));
  }
  return out;
}

double analytic_gradients(MctiModel& model, std::span<const CaseRecord> cases, const TimeBins& bins,
                          std::vector<ForwardTrace>* traces) {
  for (Parameter* p : model.parameters()) p->zero_grad();
  double total = 0.0;
  if (traces) traces->clear();
  for (const CaseRecord& c : cases) {
    ag::Tape tape;
    ForwardTrace trace(model.config().sinkhorn());
    const CaseGraph g = model.forward(tape, c, assign_bin(c.time, bins), true, trace);
    tape.backward(g.loss);
    total += g.loss.scalar();
    if (traces) traces->push_back(std::move(trace));
  }
  return total;
}

namespace {
constexpr double kGradNormFloor = 1e-5;
}  // namespace

GradcheckReport gradcheck(const TrainConfig& config, const GradcheckOptions& options) {
  MctiModel model(config);
  const auto cases = gradcheck_cases(config, config.seed + 1);
  TimeBins bins;
  bins.n_bins = config.n_bins;
  for (int j = 1; j < config.n_bins; ++j) bins.edges.push_back(1.0 + 2.0 * j / config.n_bins);

  std::vector<ForwardTrace> traces;
  analytic_gradients(model, cases, bins, &traces);
  ParamList params = model.parameters();
  if (options.corrupt) options.corrupt(params);
  for (auto& t : traces) t.replay = true;

  auto loss_at = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      ag::Tape tape;
      total += model.forward(tape, cases[i], assign_bin(cases[i].time, bins), true, traces[i]).loss.scalar();
    }
    return total;
  };

  GradcheckReport report;
  for (Parameter* p : params) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        const double orig = p->value(r, c);
        p->value(r, c) = orig + options.step;
        const double up = loss_at();
        p->value(r, c) = orig - options.step;
        const double down = loss_at();
        p->value(r, c) = orig;
        numeric(r, c) = (up - down) / (2.0 * options.step);
      }
    }
    GradGroupError ge;
    ge.name = p->name;
    ge.max_abs_grad = p->grad.cwiseAbs().maxCoeff();
    // Near-zero groups fall back to absolute error.
    const double scale = std::max({p->grad.norm(), numeric.norm(), kGradNormFloor});
    ge.rel_error = (p->grad - numeric).norm() / scale;
    report.max_rel_error = std::max(report.max_rel_error, ge.rel_error);
    report.groups.push_back(ge);
  }
  report.passed = report.max_rel_error < options.threshold;
  if (!report.passed && options.throw_on_mismatch) {
    std::string worst;
    double w = -1.0;
    for (const auto& g : report.groups)
      if (g.rel_error > w) {
        w = g.rel_error;
        worst = g.name;
      }
    throw Error(Errc::GradMismatch, worst + " relative error " + format_double(w));
  }
  return report;
}

}  // namespace mcti
