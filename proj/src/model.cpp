#include "mcti/model.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "mcti/error.hpp"

namespace mcti {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(Errc::InvalidConfig, why); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (k < 1 || d_in < 1 || d_model < 1 || n_layers < 1) fail("k, d_in, d_model and n_layers must be positive");
  if (n_bins < 2) fail("n_bins must be at least 2");
  if (n_classes < 1) fail("n_classes must be positive");
  if (alpha < 0.0) fail("alpha must be non-negative");
  if (!(epsilon_ot > 0.0) || ot_max_iter < 1 || !(ot_tol > 0.0)) fail("invalid OT solver settings");
  if (epochs < 1 || patience < 1) fail("epochs and patience must be positive");
  if (folds < 2) fail("folds must be at least 2");
  if (chunk_size < 1 || heads < 1) fail("chunk_size and heads must be positive");
  if (d_model % heads != 0) fail("d_model must be divisible by heads");
  if (accum_steps < 1) fail("accum_steps must be positive");
  if (!(token_std >= 0.0)) fail("token_std must be non-negative");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv["learning_rate"] = format_double(learning_rate);
  kv["k"] = std::to_string(k);
  kv["d_in"] = std::to_string(d_in);
  kv["d_model"] = std::to_string(d_model);
  kv["n_layers"] = std::to_string(n_layers);
  kv["n_bins"] = std::to_string(n_bins);
  kv["n_classes"] = std::to_string(n_classes);
  kv["alpha"] = format_double(alpha);
  kv["epsilon_ot"] = format_double(epsilon_ot);
  kv["ot_max_iter"] = std::to_string(ot_max_iter);
  kv["ot_tol"] = format_double(ot_tol);
  kv["epochs"] = std::to_string(epochs);
  kv["patience"] = std::to_string(patience);
  kv["folds"] = std::to_string(folds);
  kv["seed"] = std::to_string(seed);
  kv["chunk_size"] = std::to_string(chunk_size);
  kv["heads"] = std::to_string(heads);
  kv["accum_steps"] = std::to_string(accum_steps);
  kv["token_std"] = format_double(token_std);
  kv["patch_selection"] = patch_selection == PatchSelection::Critical ? "critical" : "random";
  kv["cross_task"] = cross_task ? "true" : "false";
  return kv;
}

void TrainConfig::apply(const KeyValues& kv) {
  auto as_int = [](const std::string& k, const std::string& v) {
    const long long x = parse_int(k, v);
    if (x < INT32_MIN || x > INT32_MAX) throw Error(Errc::InvalidConfig, k + ": out of range");
    return static_cast<int>(x);
  };
  for (const auto& [k, v] : kv) {
    if (k == "learning_rate") learning_rate = parse_double(k, v);
    else if (k == "k") this->k = as_int(k, v);
    else if (k == "d_in") d_in = as_int(k, v);
    else if (k == "d_model") d_model = as_int(k, v);
    else if (k == "n_layers") n_layers = as_int(k, v);
    else if (k == "n_bins") n_bins = as_int(k, v);
    else if (k == "n_classes") n_classes = as_int(k, v);
    else if (k == "alpha") alpha = parse_double(k, v);
    else if (k == "epsilon_ot") epsilon_ot = parse_double(k, v);
    else if (k == "ot_max_iter") ot_max_iter = as_int(k, v);
    else if (k == "ot_tol") ot_tol = parse_double(k, v);
    else if (k == "epochs") epochs = as_int(k, v);
    else if (k == "patience") patience = as_int(k, v);
    else if (k == "folds") folds = as_int(k, v);
    else if (k == "seed") seed = static_cast<std::uint64_t>(parse_int(k, v));
    else if (k == "chunk_size") chunk_size = as_int(k, v);
    else if (k == "heads") heads = as_int(k, v);
    else if (k == "accum_steps") accum_steps = as_int(k, v);
    else if (k == "token_std") token_std = parse_double(k, v);
    else if (k == "patch_selection") {
      if (v == "critical") patch_selection = PatchSelection::Critical;
      else if (v == "random") patch_selection = PatchSelection::Random;
      else throw Error(Errc::InvalidConfig, "patch_selection must be critical or random");
    } else if (k == "cross_task") cross_task = parse_bool(k, v);
    else throw Error(Errc::InvalidConfig, "unknown config key '" + k + "'");
  }
}

std::string TrainConfig::describe() const {
  std::ostringstream out;
  for (const auto& [k, v] : to_key_values()) out << k << '=' << v << '\n';
  return out.str();
}

MctiModel::MctiModel(const TrainConfig& config) : config_(config) {
  config_.validate();
  Rng rng(mix64(config_.seed));
  const int head_out = config_.cross_task ? config_.n_classes : config_.n_bins;
  dsmil = DsmilParams(config_.d_in, config_.d_model, config_.n_classes, rng);
  genes = GeneEncoderParams(config_.chunk_size, config_.d_model, config_.heads, rng);
  encdec = EncDecParams(config_.k, config_.d_model, config_.n_layers, rng, config_.token_std);
  heads = HeadParams(config_.d_model, head_out, config_.n_bins, rng);
}

ParamList MctiModel::parameters() {
  ParamList out;
  dsmil.collect(out);
  genes.collect(out);
  encdec.collect(out);
  heads.collect(out);
  return out;
}

std::vector<int> MctiModel::random_selection(const CaseRecord& c) const {
  // Fixed per case, so training and evaluation see the same random patches.
  Rng rng(mix64(config_.seed ^ hash_string(c.case_id)));
  const int n = static_cast<int>(c.wsi_features.rows());
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
  std::vector<int> out(config_.k);
  for (int r = 0; r < config_.k; ++r) out[r] = perm[r % n];
  return out;
}

CaseGraph MctiModel::forward(ag::Tape& tape, const CaseRecord& c, int bin, bool training, ForwardTrace& trace) {
  const bool replay = trace.replay;
  if (c.subtype < 0 || c.subtype >= config_.n_classes)
    throw Error(Errc::InvalidConfig, c.case_id + ": subtype outside [0, n_classes)");
  CaseGraph g;
  g.bag = dsmil_graph(tape, c.wsi_features, dsmil, replay ? trace.critical_index : -1);

  const RowVector bag_logits = g.bag.bag_logits.value().row(0);
  Eigen::Index predicted = 0;
  bag_logits.maxCoeff(&predicted);
  g.score_class = training ? c.subtype : static_cast<int>(predicted);

  if (replay) {
    g.selected = trace.selected;
    trace.plans.replay();
  } else if (config_.patch_selection == PatchSelection::Random) {
    g.selected = random_selection(c);
  } else {
    g.selected = rank_top_k(g.bag.instance_logits.value().col(g.score_class), config_.k);
  }
  if (!replay) {
    trace.critical_index = g.bag.critical_index;
    trace.selected = g.selected;
    trace.plans.clear();
  }

  const ag::Var patches = ag::gather_rows(g.bag.projected, g.selected);
  const ag::Var gene_bag = encode_genes(tape, c.gene_vector, genes, config_.k);
  const ag::Var x = ag::concat_rows(patches, gene_bag);
  const auto enc = encoder_graph(tape, x, encdec, trace.plans);
  const StreamVars dec = decoder_graph(tape, enc, encdec, trace.plans);
  g.head = predict_graph(tape, dec.cls, dec.surv, config_.k, heads);

  g.surv_loss = ag::nll_survival_from_logits(g.head.hazard_logits, bin, c.censor, kProbabilityClamp);
  if (config_.cross_task) {
    g.cls_loss = ag::cross_entropy(g.head.class_logits, c.subtype);
    g.dsmil_loss = mcti::dsmil_loss(tape, g.bag, c.subtype);
    const ag::Var terms[] = {g.cls_loss, g.dsmil_loss, g.surv_loss};
    const double w[] = {1.0, 1.0, config_.alpha};
    g.loss = ag::weighted_sum(terms, w);
  } else {
    // The classification stream's head predicts hazards as well.
    g.cls_loss = ag::nll_survival_from_logits(g.head.class_logits, bin, c.censor, kProbabilityClamp);
    const ag::Var terms[] = {g.cls_loss, g.surv_loss};
    const double w[] = {1.0, config_.alpha};
    g.loss = ag::weighted_sum(terms, w);
  }
  return g;
}

MctiModel::Inference MctiModel::infer(const CaseRecord& c) {
  ag::Tape tape;
  ForwardTrace trace(config_.sinkhorn());
  // Bin and label do not influence the outputs used here.
  CaseRecord probe = c;
  probe.subtype = std::clamp(c.subtype, 0, config_.n_classes - 1);
  const CaseGraph g = forward(tape, probe, 0, false, trace);
  Inference out;
  const RowVector z = g.head.hazard_logits.value().row(0);
  RowVector h = (1.0 / (1.0 + (-z.array()).exp())).matrix();
  out.survival = survival_from_hazards(h.cwiseMin(1.0 - kProbabilityClamp));
  out.risk = out.survival.risk;
  Eigen::Index cls = 0;
  if (config_.cross_task) g.head.class_logits.value().row(0).maxCoeff(&cls);
  else g.bag.bag_logits.value().row(0).maxCoeff(&cls);
  out.predicted_class = static_cast<int>(cls);
  out.bag.bag_logits = g.bag.bag_logits.value().row(0);
  out.bag.instance_logits = g.bag.instance_logits.value();
  out.bag.critical_index = g.bag.critical_index;
  out.bag.attention_weights = g.bag.attention.value().row(0).transpose();
  out.selected = g.selected;
  out.score_class = g.score_class;
  return out;
}

}  // namespace mcti
