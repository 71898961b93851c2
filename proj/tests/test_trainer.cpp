#include <gtest/gtest.h>

#include <cmath>

#include "mcti/databag.hpp"
#include "mcti/trainer.hpp"
#include "test_util.hpp"

using namespace mcti;
using testutil::TempDir;

namespace {

SynthConfig small_synth(int n = 24, std::uint64_t seed = 2) {
  SynthConfig s;
  s.n_cases = n;
  s.min_instances = 6;
  s.max_instances = 10;
  s.d_in = 8;
  s.gene_length = 8;
  s.seed = seed;
  return s;
}

TrainConfig small_config() {
  TrainConfig c;
  c.k = 4;
  c.d_in = 8;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_bins = 2;
  c.chunk_size = 4;
  c.heads = 2;
  c.epochs = 2;
  c.accum_steps = 2;
  c.learning_rate = 1e-3;
  return c;
}

std::vector<const CaseRecord*> pointers(const std::vector<CaseRecord>& v) {
  std::vector<const CaseRecord*> out;
  for (const auto& c : v) out.push_back(&c);
  return out;
}

std::map<std::string, Matrix> snapshot(MctiModel& m) {
  std::map<std::string, Matrix> out;
  for (Parameter* p : m.parameters()) out[p->name] = p->value;
  return out;
}

}  // namespace

TEST(Config, ValidationAndKeys) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.folds = 1;
  EXPECT_MCTI_ERROR(c.validate(), Errc::InvalidConfig);
  TrainConfig d;
  EXPECT_MCTI_ERROR(d.apply({{"not_a_key", "1"}}), Errc::InvalidConfig);
  d.apply({{"alpha", "0"}, {"patch_selection", "random"}, {"cross_task", "false"}});
  EXPECT_EQ(d.alpha, 0.0);
  EXPECT_EQ(d.patch_selection, PatchSelection::Random);
  EXPECT_FALSE(d.cross_task);
  TrainConfig e;
  e.apply(d.to_key_values());
  EXPECT_EQ(e.describe(), d.describe());
  EXPECT_NE(d.describe().find("alpha=0"), std::string::npos);
  // Defaults.
  const TrainConfig p;
  EXPECT_EQ(p.learning_rate, 5e-5);
  EXPECT_EQ(p.k, 256);
  EXPECT_EQ(p.d_in, 1024);
  EXPECT_EQ(p.n_layers, 4);
  EXPECT_EQ(p.folds, 4);
}

TEST(Gradcheck, TinyConfigPasses) {
  const GradcheckReport r = gradcheck(tiny_gradcheck_config());
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.groups.size(), 40u);
}

TEST(Gradcheck, NoTgaAndRandomVariantsPass) {
  TrainConfig c = tiny_gradcheck_config();
  c.cross_task = false;
  EXPECT_LT(gradcheck(c).max_rel_error, 1e-4);
  c.cross_task = true;
  c.patch_selection = PatchSelection::Random;
  c.alpha = 0.5;
  EXPECT_LT(gradcheck(c).max_rel_error, 1e-4);
}

TEST(Gradcheck, CorruptedGradientDetected) {
  GradcheckOptions opt;
  opt.corrupt = [](ParamList& ps) {
    for (Parameter* p : ps)
      if (p->name == "encdec.enc0.cls.value.weight") p->grad(0, 0) += 0.5;
  };
  try {
    gradcheck(tiny_gradcheck_config(), opt);
    ADD_FAILURE() << "expected GradMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::GradMismatch);
    EXPECT_NE(std::string(e.what()).find("encdec.enc0.cls.value.weight"), std::string::npos);
  }
  opt.throw_on_mismatch = false;
  EXPECT_FALSE(gradcheck(tiny_gradcheck_config(), opt).passed);
}

TEST(Gradcheck, ZeroLossConstructionHasVanishingGradients) {
  TrainConfig c = tiny_gradcheck_config();
  c.alpha = 0.0;
  MctiModel model(c);
  auto cases = gradcheck_cases(c, 3);
  for (auto& x : cases) x.subtype = 0;
  RowVector margin(2);
  margin << 40.0, -40.0;
  model.dsmil.instance_classifier.bias.value = margin;
  model.dsmil.bag_classifier.bias.value = margin;
  model.heads.cls_head.second.bias.value = margin;
  const TimeBins bins{{2.0}, 2};
  const double loss = analytic_gradients(model, cases, bins);
  EXPECT_LT(loss, 1e-12);
  for (Parameter* p : model.parameters()) EXPECT_LT(p->grad.cwiseAbs().maxCoeff(), 1e-8) << p->name;
}

TEST(Training, AlphaZeroLeavesSurvivalHeadUntouched) {
  const auto data = synthesize(small_synth());
  TrainConfig c = small_config();
  c.alpha = 0.0;
  const auto bins = compute_time_bins(data.cases, c.n_bins);
  Trainer t(c, pointers(data.cases), bins);
  const auto before = snapshot(t.model());
  t.train_updates(5);
  const auto after = snapshot(t.model());
  int changed_elsewhere = 0;
  for (const auto& [name, value] : before) {
    if (name.rfind("heads.surv", 0) == 0) EXPECT_EQ(after.at(name), value) << name;
    else changed_elsewhere += after.at(name) != value;
  }
  EXPECT_GT(changed_elsewhere, 0);
}

TEST(Training, DeterministicUnderSeed) {
  const auto data = synthesize(small_synth());
  const TrainConfig c = small_config();
  const auto bins = compute_time_bins(data.cases, c.n_bins);
  Trainer a(c, pointers(data.cases), bins), b(c, pointers(data.cases), bins);
  const double la = a.train_epoch(), lb = b.train_epoch();
  EXPECT_EQ(la, lb);
  EXPECT_EQ(snapshot(a.model()), snapshot(b.model()));
  TrainConfig other = c;
  other.seed = 99;
  Trainer d(other, pointers(data.cases), bins);
  EXPECT_NE(d.train_epoch(), la);
}

TEST(Training, NonFiniteLossAborts) {
  const auto data = synthesize(small_synth());
  const TrainConfig c = small_config();
  Trainer t(c, pointers(data.cases), compute_time_bins(data.cases, c.n_bins));
  t.model().heads.surv_head.second.bias.value(0, 0) = std::nan("");
  EXPECT_MCTI_ERROR(t.train_epoch(), Errc::NonFiniteLoss);
}

TEST(Training, StateRoundtripContinuesIdentically) {
  const auto data = synthesize(small_synth());
  const TrainConfig c = small_config();
  const auto bins = compute_time_bins(data.cases, c.n_bins);
  Trainer a(c, pointers(data.cases), bins);
  a.train_updates(3);
  Archive ar;
  a.save_state(ar);
  TempDir dir;
  ar.save(dir / "s");
  Trainer b(c, pointers(data.cases), bins);
  b.load_state(Archive::load(dir / "s"));
  a.train_updates(4);
  b.train_updates(4);
  EXPECT_EQ(snapshot(a.model()), snapshot(b.model()));
}

TEST(Checkpoint, RoundtripPreservesForwardOutputs) {
  const auto data = synthesize(small_synth());
  const TrainConfig c = small_config();
  const auto bins = compute_time_bins(data.cases, c.n_bins);
  Trainer t(c, pointers(data.cases), bins);
  t.train_updates(2);
  TempDir dir;
  Checkpoint::capture(t.model(), bins, 3, 0.625).save(dir / "c.ckpt");
  const Checkpoint back = Checkpoint::load(dir / "c.ckpt");
  EXPECT_EQ(back.epoch, 3);
  EXPECT_EQ(back.val_c_index, 0.625);
  EXPECT_EQ(back.bins.edges, bins.edges);
  EXPECT_EQ(back.config.describe(), c.describe());
  auto restored = back.restore();
  for (const auto& x : data.cases) {
    const auto a = t.model().infer(x), b = restored->infer(x);
    EXPECT_EQ(a.risk, b.risk);
    EXPECT_EQ(a.selected, b.selected);
    EXPECT_EQ(a.bag.bag_logits, b.bag.bag_logits);
  }
  testutil::spit(dir / "bad", "MCTX");
  EXPECT_MCTI_ERROR(Checkpoint::load(dir / "bad"), Errc::BadMagic);
}

TEST(Evaluate, UntrainedModelOnNoSignalIsNearHalf) {
  SynthConfig s = small_synth(200, 5);
  s.beta_tumor = 0.0;
  s.beta_gene = 0.0;
  const auto data = synthesize(s);
  MctiModel model(small_config());
  const auto ptrs = pointers(data.cases);
  const Metrics m = evaluate(model, ptrs);
  EXPECT_GE(m.c_index, 0.4);
  EXPECT_LE(m.c_index, 0.6);
  const Metrics again = evaluate(model, ptrs);
  EXPECT_EQ(again.risks, m.risks);
  EXPECT_EQ(again.c_index, m.c_index);
  EXPECT_EQ(m.case_ids.size(), 200u);
}

TEST(TrainFold, ResumeMatchesUninterrupted) {
  const auto data = synthesize(small_synth(32, 4));
  TrainConfig c = small_config();
  c.epochs = 3;
  const auto folds = make_folds(data.cases, 4, c.seed);
  const FoldResult whole = train_fold(data.cases, folds[0], c);
  TempDir dir;
  FoldOptions first;
  first.state_path = dir / "f.state";
  first.halt_after_epochs = 1;
  const FoldResult part = train_fold(data.cases, folds[0], c, first);
  EXPECT_FALSE(part.finished);
  FoldOptions second;
  second.state_path = dir / "f.state";
  const FoldResult rest = train_fold(data.cases, folds[0], c, second);
  EXPECT_TRUE(rest.finished);
  EXPECT_EQ(rest.best.epoch, whole.best.epoch);
  EXPECT_EQ(rest.best.val_c_index, whole.best.val_c_index);
  ASSERT_EQ(rest.best.params.size(), whole.best.params.size());
  for (std::size_t i = 0; i < rest.best.params.size(); ++i) EXPECT_EQ(rest.best.params[i].second, whole.best.params[i].second);
  TrainConfig changed = c;
  changed.learning_rate = 2e-3;
  FoldOptions third;
  third.state_path = dir / "f.state";
  EXPECT_MCTI_ERROR(train_fold(data.cases, folds[0], changed, third), Errc::InvalidConfig);
}

TEST(Model, RandomSelectionFixedPerCaseAndSeed) {
  const auto data = synthesize(small_synth());
  TrainConfig c = small_config();
  c.patch_selection = PatchSelection::Random;
  MctiModel a(c), b(c);
  EXPECT_EQ(a.random_selection(data.cases[0]), b.random_selection(data.cases[0]));
  EXPECT_NE(a.random_selection(data.cases[0]), a.random_selection(data.cases[1]));
  for (int i : a.random_selection(data.cases[0])) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, data.cases[0].wsi_features.rows());
  }
}
