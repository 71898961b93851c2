#include "mcti/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "mcti/error.hpp"

namespace mcti {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedPayload: return "TruncatedPayload";
    case Errc::VersionUnsupported: return "VersionUnsupported";
    case Errc::MissingColumn: return "MissingColumn";
    case Errc::DuplicateCaseId: return "DuplicateCaseId";
    case Errc::UnresolvablePath: return "UnresolvablePath";
    case Errc::NonPositiveTime: return "NonPositiveTime";
    case Errc::NoUncensoredCases: return "NoUncensoredCases";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::EmptyBag: return "EmptyBag";
    case Errc::InvalidMarginals: return "InvalidMarginals";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::HazardOutOfRange: return "HazardOutOfRange";
    case Errc::NoComparablePairs: return "NoComparablePairs";
    case Errc::NoEvents: return "NoEvents";
    case Errc::TooFewCases: return "TooFewCases";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::GradMismatch: return "GradMismatch";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

namespace ag {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad_or_empty(id_); }

Var Tape::constant(Matrix value) { return push(std::move(value), nullptr); }

Var Tape::param(Parameter& param) {
  Var v = push(param.value, nullptr);
  nodes_[v.id()].param = &param;
  return v;
}

Var Tape::push(Matrix value, std::function<void(Tape&, int)> backprop) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backprop), nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  assert(loss.tape() == this);
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad(loss.id()).setOnes();
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    if (n.backprop) n.backprop(*this, id);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw Error(Errc::ShapeMismatch, what);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia).noalias() += g * t.value(ib).transpose();
    t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  check(a.cols() == b.cols(), "matmul_nt");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value().transpose(), [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(ia).noalias() += g * t.value(ib);
    t.grad(ib).noalias() += g.transpose() * t.value(ia);
  });
}

Var left_mul_const(const Matrix& lhs, const Var& a) {
  check(lhs.cols() == a.rows(), "left_mul_const");
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(lhs * a.value(), [ia, lhs](Tape& t, int self) {
    t.grad(ia).noalias() += lhs.transpose() * t.grad(self);
  });
}

Var add(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), [ia, ib](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(ia) += g;
    t.grad(ib) += g;
  });
}

Var add_row(const Var& a, const Var& row) {
  check(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  Tape& t = *a.tape();
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), [ia, ir](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(ia) += g;
    t.grad(ir) += g.colwise().sum();
  });
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value() * s, [ia, s](Tape& t, int self) {
    t.grad(ia) += s * t.grad(self);
  });
}

Var relu(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value().cwiseMax(0.0), [ia](Tape& t, int self) {
    const Matrix mask = (t.value(ia).array() > 0.0).cast<double>().matrix();
    t.grad(ia) += t.grad(self).cwiseProduct(mask);
  });
}

Var sigmoid(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return t.push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.grad(ia) += (t.grad(self).array() * y.array() * (1.0 - y.array())).matrix();
  });
}

Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return t.push(std::move(out), [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    // dx = y ⊙ (g − rowsum(g ⊙ y))
    const Vector dots = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = g;
    dx.colwise() -= dots;
    t.grad(ia) += dx.cwiseProduct(y);
  });
}

Var concat_rows(const Var& top, const Var& bottom) {
  check(top.cols() == bottom.cols(), "concat_rows");
  Tape& t = *top.tape();
  const int it = top.id(), ib = bottom.id();
  const Eigen::Index nt = top.rows(), nb = bottom.rows();
  Matrix out(nt + nb, top.cols());
  out << top.value(), bottom.value();
  return t.push(std::move(out), [it, ib, nt, nb](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(it) += g.topRows(nt);
    t.grad(ib) += g.bottomRows(nb);
  });
}

Var concat_cols(const Var& left, const Var& right) {
  check(left.rows() == right.rows(), "concat_cols");
  Tape& t = *left.tape();
  const int il = left.id(), ir = right.id();
  const Eigen::Index nl = left.cols(), nr = right.cols();
  Matrix out(left.rows(), nl + nr);
  out << left.value(), right.value();
  return t.push(std::move(out), [il, ir, nl, nr](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(il) += g.leftCols(nl);
    t.grad(ir) += g.rightCols(nr);
  });
}

Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  check(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows");
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value().middleRows(begin, count), [ia, begin, count](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(ia).middleRows(begin, count) += g;
  });
}

Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count) {
  check(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols");
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.push(a.value().middleCols(begin, count), [ia, begin, count](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(ia).middleCols(begin, count) += g;
  });
}

Var gather_rows(const Var& a, std::span<const int> indices) {
  Tape& t = *a.tape();
  const int ia = a.id();
  std::vector<int> idx(indices.begin(), indices.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    check(idx[r] >= 0 && idx[r] < a.rows(), "gather_rows");
    out.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
  }
  return t.push(std::move(out), [ia, idx = std::move(idx)](Tape& t, int self) {
    const Matrix g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var replicate_rows(const Var& row, Eigen::Index times) {
  check(row.rows() == 1, "replicate_rows");
  Tape& t = *row.tape();
  const int ir = row.id();
  return t.push(row.value().replicate(times, 1), [ir](Tape& t, int self) {
    const Matrix g = t.grad(self);
    t.grad(ir) += g.colwise().sum();
  });
}

Var mean_rows(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const double n = static_cast<double>(a.rows());
  return t.push(a.value().colwise().mean(), [ia, n](Tape& t, int self) {
    const RowVector g = t.grad(self).row(0) / n;
    t.grad(ia).rowwise() += g;
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  check(!terms.empty() && terms.size() == weights.size(), "weighted_sum");
  Tape& t = *terms.front().tape();
  std::vector<int> ids;
  std::vector<double> w(weights.begin(), weights.end());
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    check(terms[i].rows() == 1 && terms[i].cols() == 1, "weighted_sum");
    ids.push_back(terms[i].id());
    total += w[i] * terms[i].scalar();
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), [ids = std::move(ids), w = std::move(w)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) t.grad(ids[i])(0, 0) += w[i] * g;
  });
}

Var cross_entropy(const Var& logits, int label) {
  check(logits.rows() == 1 && label >= 0 && label < logits.cols(), "cross_entropy");
  Tape& t = *logits.tape();
  const int il = logits.id();
  const RowVector z = logits.value().row(0);
  const double mx = z.maxCoeff();
  const RowVector e = (z.array() - mx).exp().matrix();
  const double lse = mx + std::log(e.sum());
  const RowVector p = e / e.sum();
  Matrix out(1, 1);
  out(0, 0) = lse - z(label);
  return t.push(std::move(out), [il, p, label](Tape& t, int self) {
    RowVector d = p;
    d(label) -= 1.0;
    t.grad(il).row(0) += t.grad(self)(0, 0) * d;
  });
}

Var nll_survival_from_logits(const Var& hazard_logits, int bin, int censor, double eps) {
  check(hazard_logits.rows() == 1 && bin >= 0 && bin < hazard_logits.cols(), "nll_survival");
  Tape& t = *hazard_logits.tape();
  const int iz = hazard_logits.id();
  const Eigen::Index nb = hazard_logits.cols();
  RowVector h(nb), hc(nb);
  for (Eigen::Index j = 0; j < nb; ++j) {
    h(j) = 1.0 / (1.0 + std::exp(-hazard_logits.value()(0, j)));
    hc(j) = std::clamp(h(j), eps, 1.0 - eps);
  }
  // loss = -sum_{u<last} log(1 - h_u) - [uncensored] log h_bin, where the
  // survival terms run over u < bin (uncensored) or u <= bin (censored).
  const Eigen::Index surv_end = censor ? bin + 1 : bin;
  double loss = 0.0;
  RowVector dh = RowVector::Zero(nb);
  for (Eigen::Index u = 0; u < surv_end; ++u) {
    loss -= std::log(1.0 - hc(u));
    dh(u) = 1.0 / (1.0 - hc(u));
  }
  if (!censor) {
    loss -= std::log(hc(bin));
    dh(bin) = -1.0 / hc(bin);
  }
  RowVector dz(nb);
  for (Eigen::Index j = 0; j < nb; ++j) {
    const bool clamped = h(j) < eps || h(j) > 1.0 - eps;
    dz(j) = clamped ? 0.0 : dh(j) * h(j) * (1.0 - h(j));
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), [iz, dz](Tape& t, int self) {
    t.grad(iz).row(0) += t.grad(self)(0, 0) * dz;
  });
}

}  // namespace ag
}  // namespace mcti
