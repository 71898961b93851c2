#include "mcti/tga.hpp"

#include <cmath>

#include "mcti/error.hpp"

namespace mcti {

TgaParams::TgaParams(const std::string& name, int d_model, Rng& rng)
    : query(name + ".query", d_model, d_model, rng, false),
      key(name + ".key", d_model, d_model, rng, false),
      value(name + ".value", d_model, d_model, rng, false) {}

void TgaParams::collect(ParamList& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
}

Matrix row_normalize(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).sum();
  return out;
}

const Matrix& PlanContext::next(const Matrix& source, const Matrix& objective) {
  if (mode_ == Mode::Replay) {
    if (cursor_ >= plans_.size()) throw Error(Errc::ShapeMismatch, "replay requested more plans than recorded");
    return plans_[cursor_++];
  }
  const TransportPlan plan = sinkhorn(cost_matrix(source, objective), uniform_marginal(source.rows()),
                                      uniform_marginal(objective.rows()), options_);
  if (!plan.converged) ++unconverged_;
  plans_.push_back(row_normalize(plan.flow));
  cursor_ = plans_.size();
  return plans_.back();
}

namespace {

void check_tga_shapes(const Matrix& s, const Matrix& o, const TgaParams& p) {
  if (s.cols() != p.query.in_dim() || o.cols() != s.cols())
    throw Error(Errc::ShapeMismatch, "tga operands must have width d_model");
  if (s.rows() != o.rows()) throw Error(Errc::ShapeMismatch, "tga requires equal source and objective token counts");
}

ag::Var tga_with_plan(ag::Tape& tape, const ag::Var& source, TgaParams& params, const Matrix& r) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(source.cols()));
  const ag::Var q = params.query(tape, source);
  const ag::Var k = params.key(tape, source);
  const ag::Var v = params.value(tape, source);
  const ag::Var a = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv_sqrt));
  return ag::matmul(a, ag::left_mul_const(r, v));
}

}  // namespace

ag::Var tga_graph(ag::Tape& tape, const ag::Var& source, const ag::Var& objective, TgaParams& params,
                  PlanContext& plans) {
  check_tga_shapes(source.value(), objective.value(), params);
  const Matrix& r = plans.next(source.value(), objective.value());
  if (r.rows() != source.rows() || r.cols() != objective.rows())
    throw Error(Errc::ShapeMismatch, "replayed plan does not match tga operands");
  return tga_with_plan(tape, source, params, r);
}

Matrix tga_forward(const Matrix& source, const Matrix& objective, TgaParams& params, const TransportPlan& plan) {
  check_tga_shapes(source, objective, params);
  if (plan.flow.rows() != source.rows() || plan.flow.cols() != objective.rows())
    throw Error(Errc::ShapeMismatch, "plan is not shaped source × objective");
  ag::Tape tape;
  return tga_with_plan(tape, tape.constant(source), params, row_normalize(plan.flow)).value();
}

Matrix tga_attention(const Matrix& source, TgaParams& params) {
  ag::Tape tape;
  const ag::Var s = tape.constant(source);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(source.cols()));
  return ag::softmax_rows(ag::scale(ag::matmul_nt(params.query(tape, s), params.key(tape, s)), inv_sqrt)).value();
}

EncDecParams::EncDecParams(int k_, int d_model_, int n_layers_, Rng& rng, double token_std)
    : k(k_), d_model(d_model_), n_layers(n_layers_) {
  if (k < 1 || d_model < 1 || n_layers < 1) throw Error(Errc::InvalidConfig, "encoder-decoder sizes must be positive");
  x_cls = Parameter("encdec.x_cls", gaussian_matrix(k, d_model, token_std, rng));
  x_surv = Parameter("encdec.x_surv", gaussian_matrix(k, d_model, token_std, rng));
  x_share = Parameter("encdec.x_share", gaussian_matrix(k, d_model, token_std, rng));
  for (int i = 0; i < n_layers; ++i) {
    const std::string l = std::to_string(i);
    enc_cls.emplace_back("encdec.enc" + l + ".cls", d_model, rng);
    enc_surv.emplace_back("encdec.enc" + l + ".surv", d_model, rng);
    enc_fuse.emplace_back("encdec.enc" + l + ".fuse", 2 * d_model, d_model, rng);
  }
  for (int i = 0; i < n_layers; ++i) {
    const std::string l = std::to_string(i);
    dec_cls.emplace_back("encdec.dec" + l + ".cls", d_model, rng);
    dec_surv.emplace_back("encdec.dec" + l + ".surv", d_model, rng);
    dec_fuse.emplace_back("encdec.dec" + l + ".fuse", 2 * d_model, d_model, rng);
  }
}

void EncDecParams::collect(ParamList& out) {
  out.push_back(&x_cls);
  out.push_back(&x_surv);
  out.push_back(&x_share);
  for (int i = 0; i < n_layers; ++i) {
    enc_cls[i].collect(out);
    enc_surv[i].collect(out);
    enc_fuse[i].collect(out);
  }
  for (int i = 0; i < n_layers; ++i) {
    dec_cls[i].collect(out);
    dec_surv[i].collect(out);
    dec_fuse[i].collect(out);
  }
}

std::vector<StreamVars> encoder_graph(ag::Tape& tape, const ag::Var& x, EncDecParams& p, PlanContext& plans) {
  if (x.rows() != 2 * p.k || x.cols() != p.d_model)
    throw Error(Errc::ShapeMismatch, "encoder input must be 2k × d_model");
  StreamVars e{ag::concat_rows(x, tape.param(p.x_cls)), ag::concat_rows(x, tape.param(p.x_surv)),
               ag::concat_rows(x, tape.param(p.x_share))};
  std::vector<StreamVars> states;
  for (int i = 0; i < p.n_layers; ++i) {
    StreamVars next;
    next.cls = tga_graph(tape, e.cls, e.share, p.enc_cls[i], plans);
    next.surv = tga_graph(tape, e.surv, e.share, p.enc_surv[i], plans);
    next.share = p.enc_fuse[i](tape, ag::concat_cols(next.cls, next.surv));
    states.push_back(next);
    e = next;
  }
  return states;
}

StreamVars decoder_graph(ag::Tape& tape, const std::vector<StreamVars>& enc, EncDecParams& p, PlanContext& plans) {
  const int n = p.n_layers;
  if (static_cast<int>(enc.size()) != n) throw Error(Errc::ShapeMismatch, "decoder needs one encoder state per layer");
  StreamVars d = enc.back();
  for (int i = 1; i <= n; ++i) {
    // Layer i pairs with encoder output E^{n-i+1}.
    const ag::Var source = ag::add(d.share, enc[n - i].share);
    StreamVars next;
    next.cls = tga_graph(tape, source, d.cls, p.dec_cls[i - 1], plans);
    next.surv = tga_graph(tape, source, d.surv, p.dec_surv[i - 1], plans);
    next.share = p.dec_fuse[i - 1](tape, ag::concat_cols(next.cls, next.surv));
    d = next;
  }
  return d;
}

namespace {

StreamState values_of(const StreamVars& s) { return StreamState{s.cls.value(), s.surv.value(), s.share.value()}; }

}  // namespace

std::vector<StreamState> encoder_forward(const Matrix& x, EncDecParams& params, PlanContext& plans) {
  ag::Tape tape;
  std::vector<StreamState> out;
  for (const auto& s : encoder_graph(tape, tape.constant(x), params, plans)) out.push_back(values_of(s));
  return out;
}

StreamState decoder_forward(const std::vector<StreamState>& encoder_states, EncDecParams& params, PlanContext& plans) {
  ag::Tape tape;
  std::vector<StreamVars> enc;
  for (const auto& s : encoder_states)
    enc.push_back(StreamVars{tape.constant(s.cls), tape.constant(s.surv), tape.constant(s.share)});
  return values_of(decoder_graph(tape, enc, params, plans));
}

}  // namespace mcti
