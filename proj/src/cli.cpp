#include "mcti/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mcti/databag.hpp"
#include "mcti/error.hpp"
#include "mcti/trainer.hpp"

namespace mcti {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot write " + path.string());
  f << text;
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("MCTI_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  return static_cast<std::uint64_t>(parse_int("MCTI_SEED", s));
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (char& c : f)
    if (c == '_') c = '-';
  return f;
}

// Config file first, then explicit flags, then MCTI_SEED.
struct TrainFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "key=value configuration file")->check(CLI::ExistingFile);
    for (const auto& [key, def] : TrainConfig{}.to_key_values()) {
      app->add_option_function<std::string>(
          flag_name(key), [this, key = key](const std::string& v) { values[key] = v; },
          "config key " + key + " (default " + def + ")");
    }
  }

  // Returns the resolved config and the set of keys the user supplied.
  std::pair<TrainConfig, std::set<std::string>> resolve(const TrainConfig& base = {}) const {
    TrainConfig c = base;
    std::set<std::string> explicit_keys;
    if (!config_path.empty()) {
      const KeyValues kv = read_key_values(config_path);
      c.apply(kv);
      for (const auto& [k, v] : kv) explicit_keys.insert(k);
    }
    KeyValues kv(values.begin(), values.end());
    c.apply(kv);
    for (const auto& [k, v] : kv) explicit_keys.insert(k);
    if (const auto s = env_seed()) {
      c.seed = *s;
      explicit_keys.insert("seed");
    }
    return {c, explicit_keys};
  }
};

std::vector<const CaseRecord*> select_split(const std::vector<CaseRecord>& cases, const std::string& split) {
  std::vector<const CaseRecord*> out;
  for (const auto& c : cases)
    if (split == "all" || split_name(c.split) == split) out.push_back(&c);
  return out;
}

void adopt_data_shape(TrainConfig& config, const std::set<std::string>& explicit_keys,
                      const std::vector<CaseRecord>& cases) {
  if (cases.empty()) throw Error(Errc::TooFewCases, "manifest has no cases");
  const int d_in = static_cast<int>(cases.front().wsi_features.cols());
  int n_classes = 0;
  for (const auto& c : cases) {
    if (c.wsi_features.cols() != d_in) throw Error(Errc::ShapeMismatch, c.case_id + ": inconsistent feature width");
    n_classes = std::max(n_classes, c.subtype + 1);
  }
  if (!explicit_keys.count("d_in")) config.d_in = d_in;
  if (!explicit_keys.count("n_classes")) config.n_classes = n_classes;
  if (config.d_in != d_in)
    throw Error(Errc::InvalidConfig, "d_in=" + std::to_string(config.d_in) + " but features have width " +
                                         std::to_string(d_in));
}

int do_synth(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
  SynthConfig cfg;
  if (!config_path.empty()) cfg = SynthConfig::from_key_values(read_key_values(config_path));
  if (const auto s = env_seed()) cfg.seed = *s;
  cfg.validate();
  for (const auto& [k, v] : cfg.to_key_values()) out << k << '=' << v << '\n';
  generate_synthetic(cfg, out_dir);
  out << "wrote " << cfg.n_cases << " cases to " << out_dir << '\n';
  return kExitOk;
}

int do_train(const TrainFlags& flags, const std::string& manifest, const std::string& out_dir, bool resume,
             std::optional<int> halt_after, std::ostream& out) {
  auto [config, explicit_keys] = flags.resolve();
  const auto cases = load_manifest(manifest);
  adopt_data_shape(config, explicit_keys, cases);
  config.validate();
  out << config.describe();
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.txt", config.describe());

  const auto folds = make_folds(cases, config.folds, config.seed);
  std::ostringstream metrics, risks;
  metrics << "fold,c_index\n";
  risks << "case_id,fold,time,censor,risk\n";
  std::vector<double> scores;
  std::optional<int> budget = halt_after;
  for (int f = 0; f < config.folds; ++f) {
    const fs::path state = fs::path(out_dir) / ("fold" + std::to_string(f) + ".state");
    const fs::path ckpt = fs::path(out_dir) / ("fold" + std::to_string(f) + ".ckpt");
    if (!resume) {
      fs::remove(state);
      fs::remove(ckpt);
    }
    Checkpoint best;
    if (resume && fs::exists(ckpt)) {
      best = Checkpoint::load(ckpt);
    } else {
      FoldOptions opts;
      opts.state_path = state;
      opts.halt_after_epochs = budget;
      int ran = 0;
      opts.on_epoch = [&](int epoch, double loss, double vc) {
        ++ran;
        out << "fold " << f << " epoch " << epoch << " loss " << fixed(loss) << " val_c_index " << fixed(vc) << '\n';
      };
      FoldResult r = train_fold(cases, folds[f], config, opts);
      if (budget) *budget -= ran;
      if (!r.finished) {
        out << "halted during fold " << f << "; rerun with --resume to continue\n";
        return kExitOk;
      }
      best = std::move(r.best);
      best.save(ckpt);
    }
    std::vector<const CaseRecord*> test;
    for (const auto& id : folds[f].test)
      for (const auto& c : cases)
        if (c.case_id == id) test.push_back(&c);
    const Metrics m = evaluate(best, test);
    scores.push_back(m.c_index);
    metrics << f << ',' << fixed(m.c_index) << '\n';
    for (std::size_t i = 0; i < test.size(); ++i)
      risks << test[i]->case_id << ',' << f << ',' << test[i]->time << ',' << test[i]->censor << ','
            << fixed(m.risks[i], 10) << '\n';
    out << "fold " << f << " test c_index " << fixed(m.c_index) << " (best epoch " << best.epoch << ")\n";
  }
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  const double sd = scores.size() > 1 ? std::sqrt(ss / static_cast<double>(scores.size() - 1)) : 0.0;
  metrics << "mean±std," << fixed(mean) << "±" << fixed(sd) << '\n';
  write_text(fs::path(out_dir) / "metrics.csv", metrics.str());
  write_text(fs::path(out_dir) / "risks.csv", risks.str());
  out << "c_index " << fixed(mean, 4) << " ± " << fixed(sd, 4) << '\n';
  return kExitOk;
}

int do_eval(const std::string& checkpoint, const std::string& manifest, const std::string& split,
            const std::string& out_dir, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  out << ckpt.config.describe();
  const auto cases = load_manifest(manifest);
  const auto chosen = select_split(cases, split);
  const Metrics m = evaluate(ckpt, chosen);
  std::ostringstream risks;
  risks << "case_id,time,censor,risk,predicted_class\n";
  for (std::size_t i = 0; i < chosen.size(); ++i)
    risks << chosen[i]->case_id << ',' << chosen[i]->time << ',' << chosen[i]->censor << ',' << fixed(m.risks[i], 10)
          << ',' << m.predicted[i] << '\n';
  const std::string summary = "c_index,accuracy,n\n" + fixed(m.c_index) + "," + fixed(m.accuracy) + "," +
                              std::to_string(chosen.size()) + "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "eval_metrics.csv", summary);
    write_text(fs::path(out_dir) / "eval_risks.csv", risks.str());
  }
  out << summary;
  return kExitOk;
}

int do_select(const std::string& checkpoint, const std::string& manifest, const std::string& case_id,
              const std::string& out_path, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  out << ckpt.config.describe();
  const auto cases = load_manifest(manifest);
  const CaseRecord* found = nullptr;
  for (const auto& c : cases)
    if (c.case_id == case_id) found = &c;
  if (!found) throw Error(Errc::InvalidConfig, "case " + case_id + " not in manifest");
  auto model = ckpt.restore();
  const auto inf = model->infer(*found);
  std::ostringstream csv;
  csv << "case_id,rank,source_index,score\n";
  for (std::size_t r = 0; r < inf.selected.size(); ++r) {
    const int idx = inf.selected[r];
    csv << found->case_id << ',' << r << ',' << idx << ',' << fixed(inf.bag.instance_logits(idx, inf.score_class), 8)
        << '\n';
  }
  if (out_path.empty()) out << csv.str();
  else write_text(out_path, csv.str());
  return kExitOk;
}

int do_km(const std::string& risks_csv, const std::string& out_dir, std::ostream& out) {
  std::ifstream in(risks_csv);
  if (!in) throw Error(Errc::UnresolvablePath, "cannot open " + risks_csv);
  std::string line;
  std::getline(in, line);
  const auto header = split_cells(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"time", "censor", "risk"})
    if (!col.count(need)) throw Error(Errc::MissingColumn, std::string("risks csv lacks column ") + need);
  std::vector<double> times, risks;
  std::vector<int> censors;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_cells(line);
    times.push_back(parse_double("time", cells.at(col["time"])));
    censors.push_back(static_cast<int>(parse_int("censor", cells.at(col["censor"]))));
    risks.push_back(parse_double("risk", cells.at(col["risk"])));
  }
  out << "risks_csv=" << risks_csv << "\nout=" << out_dir << '\n';
  const KmComparison cmp = compare_risk_groups(times, censors, risks);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "km.csv", km_csv(cmp));
  write_text(fs::path(out_dir) / "km.svg", km_svg(cmp, "Kaplan-Meier by median risk, log-rank p = " +
                                                           format_p_value(cmp.test.p_value)));
  out << "chi_square " << fixed(cmp.test.chi_square) << " p_value " << format_p_value(cmp.test.p_value) << '\n';
  return kExitOk;
}

int do_gradcheck(const TrainFlags& flags, std::ostream& out) {
  auto [config, keys] = flags.resolve(tiny_gradcheck_config());
  out << config.describe();
  GradcheckOptions opts;
  opts.throw_on_mismatch = false;
  const GradcheckReport rep = gradcheck(config, opts);
  for (const auto& g : rep.groups) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-40s rel_error %.3e max|grad| %.3e\n", g.name.c_str(), g.rel_error,
                  g.max_abs_grad);
    out << buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "max_rel_error %.3e %s\n", rep.max_rel_error, rep.passed ? "PASS" : "FAIL");
  out << buf;
  return rep.passed ? kExitOk : kExitRuntime;
}

}  // namespace

std::string format_p_value(double p) {
  char buf[32];
  if (p >= 1e-3) std::snprintf(buf, sizeof buf, "%.4f", p);
  else std::snprintf(buf, sizeof buf, "%.3e", p);
  return buf;
}

KmComparison compare_risk_groups(const std::vector<double>& times, const std::vector<int>& censors,
                                 const std::vector<double>& risks) {
  if (times.size() != censors.size() || times.size() != risks.size())
    throw Error(Errc::ShapeMismatch, "risk table columns differ in length");
  const auto groups = stratify(risks);
  SurvivalGroup low, high;
  for (std::size_t i = 0; i < times.size(); ++i) {
    SurvivalGroup& g = groups[i] == RiskGroup::High ? high : low;
    g.times.push_back(times[i]);
    g.events.push_back(censors[i] == 0);
  }
  KmComparison cmp;
  cmp.low = km_curve(low.times, low.events);
  cmp.high = km_curve(high.times, high.events);
  if (low.times.empty() || high.times.empty()) {
    // Everything tied at the median: one group, nothing to compare.
    cmp.test = LogRankResult{0.0, 1.0};
  } else {
    cmp.test = log_rank(low, high);
  }
  std::set<double> grid{0.0};
  grid.insert(cmp.low.event_times.begin(), cmp.low.event_times.end());
  grid.insert(cmp.high.event_times.begin(), cmp.high.event_times.end());
  for (double t : grid) {
    KmRow row;
    row.time = t;
    row.survival_low = cmp.low.survival_at(t);
    row.survival_high = cmp.high.survival_at(t);
    for (double x : low.times) row.at_risk_low += x >= t;
    for (double x : high.times) row.at_risk_high += x >= t;
    cmp.rows.push_back(row);
  }
  return cmp;
}

std::string km_csv(const KmComparison& cmp) {
  std::ostringstream csv;
  csv << "time,survival_low,survival_high,at_risk_low,at_risk_high\n";
  for (const auto& r : cmp.rows)
    csv << fixed(r.time) << ',' << fixed(r.survival_low) << ',' << fixed(r.survival_high) << ',' << r.at_risk_low
        << ',' << r.at_risk_high << '\n';
  return csv.str();
}

std::string km_svg(const KmComparison& cmp, const std::string& title) {
  constexpr double W = 640, H = 420, left = 60, right = 20, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double tmax = 1.0;
  for (const auto& r : cmp.rows) tmax = std::max(tmax, r.time);
  auto x = [&](double t) { return left + pw * t / tmax; };
  auto y = [&](double s) { return top + ph * (1.0 - s); };
  auto path = [&](const KmCurve& c) {
    std::ostringstream d;
    d << "M " << fixed(x(0), 2) << ' ' << fixed(y(1), 2);
    double s = 1.0;
    for (std::size_t i = 0; i < c.event_times.size(); ++i) {
      d << " H " << fixed(x(c.event_times[i]), 2) << " V " << fixed(y(c.survival[i]), 2);
      s = c.survival[i];
    }
    d << " H " << fixed(x(tmax), 2);
    (void)s;
    return d.str();
  };
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n"
      << "  <title>" << title << "</title>\n"
      << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "  <text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << "</text>\n"
      << "  <line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n"
      << "  <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double s = i / 4.0;
    svg << "  <text x=\"" << left - 8 << "\" y=\"" << fixed(y(s) + 4, 2)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fixed(s, 2) << "</text>\n";
    const double t = tmax * i / 4.0;
    svg << "  <text x=\"" << fixed(x(t), 2) << "\" y=\"" << top + ph + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fixed(t, 1) << "</text>\n";
  }
  svg << "  <text x=\"" << left + pw / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">time (months)</text>\n"
      << "  <path d=\"" << path(cmp.low) << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
      << "  <path d=\"" << path(cmp.high) << "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n"
      << "  <text x=\"" << left + pw - 4 << "\" y=\"" << top + 14
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f77b4\">low risk (n="
      << (cmp.rows.empty() ? 0 : cmp.rows.front().at_risk_low) << ")</text>\n"
      << "  <text x=\"" << left + pw - 4 << "\" y=\"" << top + 30
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#d62728\">high risk (n="
      << (cmp.rows.empty() ? 0 : cmp.rows.front().at_risk_high) << ")</text>\n"
      << "</svg>\n";
  return svg.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal cross-task survival model: data synthesis, training and analysis"};
  app.require_subcommand(1);

  std::string synth_config, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a planted-signal synthetic dataset");
  synth->add_option("--config", synth_config, "synthetic-data key=value file")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "output directory")->required();

  TrainFlags train_flags;
  std::string train_manifest, train_out;
  bool resume = false;
  std::optional<int> halt_after;
  auto* train = app.add_subcommand("train", "Cross-validated training and evaluation");
  train->add_option("--manifest", train_manifest, "dataset manifest CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "output directory")->required();
  train->add_flag("--resume", resume, "continue from the training state files in --out");
  train->add_option("--halt-after-epochs", halt_after, "stop after this many epochs in this invocation");
  train_flags.add_to(train);

  std::string eval_ckpt, eval_manifest, eval_split = "all", eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on manifest cases");
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "all, train, val or test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  eval->add_option("--out", eval_out, "directory for eval_metrics.csv and eval_risks.csv");

  std::string sel_ckpt, sel_manifest, sel_case, sel_out;
  auto* sel = app.add_subcommand("select-patches", "Export the critical patches chosen for one case");
  sel->add_option("--checkpoint", sel_ckpt)->required()->check(CLI::ExistingFile);
  sel->add_option("--manifest", sel_manifest)->required()->check(CLI::ExistingFile);
  sel->add_option("--case", sel_case)->required();
  sel->add_option("--out", sel_out, "CSV path (stdout when omitted)");

  std::string km_risks, km_out;
  auto* km = app.add_subcommand("km-plot", "Median-risk Kaplan-Meier curves with a log-rank test");
  km->add_option("--risks-csv", km_risks, "CSV with time, censor and risk columns")->required()->check(CLI::ExistingFile);
  km->add_option("--out", km_out, "output directory")->required();

  TrainFlags grad_flags;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  grad_flags.add_to(grad);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << e.what() << '\n' << sub->help();
    return kExitUsage;
  }

  try {
    if (*synth) return do_synth(synth_config, synth_out, out);
    if (*train) return do_train(train_flags, train_manifest, train_out, resume, halt_after, out);
    if (*eval) return do_eval(eval_ckpt, eval_manifest, eval_split, eval_out, out);
    if (*sel) return do_select(sel_ckpt, sel_manifest, sel_case, sel_out, out);
    if (*km) return do_km(km_risks, km_out, out);
    if (*grad) return do_gradcheck(grad_flags, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == Errc::InvalidConfig ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mcti
