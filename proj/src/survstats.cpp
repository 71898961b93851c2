#include "mcti/survstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>

#include "mcti/error.hpp"

namespace mcti {

namespace {

// Fenwick tree of counts over compressed risk ranks.
class CountTree {
 public:
  explicit CountTree(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Number of inserted ranks < rank.
  long long below(std::size_t rank) const {
    long long s = 0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long long> tree_;
};

}  // namespace

double c_index(const RiskDataset& data) {
  const std::size_t n = data.times.size();
  if (data.censors.size() != n || data.risks.size() != n)
    throw Error(Errc::ShapeMismatch, "c_index inputs differ in length");

  std::vector<double> sorted_risks = data.risks;
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) - sorted_risks.begin());
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return data.times[a] > data.times[b]; });

  // Sweep from the longest time down; the tree holds every case whose time is
  // strictly greater than the current group's.
  CountTree tree(sorted_risks.size());
  long long inserted = 0;
  long long comparable = 0, twice_concordant = 0;
  std::size_t g = 0;
  while (g < n) {
    std::size_t end = g;
    while (end < n && data.times[order[end]] == data.times[order[g]]) ++end;
    for (std::size_t p = g; p < end; ++p) {
      const std::size_t i = order[p];
      if (data.censors[i] != 0) continue;
      const std::size_t r = rank_of(data.risks[i]);
      const long long lower = tree.below(r);
      const long long not_higher = tree.below(r + 1);
      comparable += inserted;
      twice_concordant += 2 * lower + (not_higher - lower);
    }
    for (std::size_t p = g; p < end; ++p) {
      tree.add(rank_of(data.risks[order[p]]));
      ++inserted;
    }
    g = end;
  }
  if (comparable == 0) throw Error(Errc::NoComparablePairs, "no comparable pair");
  return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(comparable));
}

double KmCurve::survival_at(double t) const {
  const auto it = std::upper_bound(event_times.begin(), event_times.end(), t);
  if (it == event_times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - event_times.begin()) - 1];
}

KmCurve km_curve(std::span<const double> times, std::span<const int> event_flags) {
  if (times.size() != event_flags.size()) throw Error(Errc::ShapeMismatch, "km_curve inputs differ in length");
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  KmCurve curve;
  double s = 1.0;
  int at_risk = static_cast<int>(times.size());
  std::size_t g = 0;
  while (g < order.size()) {
    std::size_t end = g;
    int deaths = 0;
    while (end < order.size() && times[order[end]] == times[order[g]]) {
      deaths += event_flags[order[end]] != 0;
      ++end;
    }
    if (deaths > 0) {
      s *= static_cast<double>(at_risk - deaths) / at_risk;
      curve.event_times.push_back(times[order[g]]);
      curve.survival.push_back(s);
      curve.at_risk.push_back(at_risk);
      curve.events.push_back(deaths);
    }
    // Censored cases at t stay in the risk set for events at t.
    at_risk -= static_cast<int>(end - g);
    g = end;
  }
  return curve;
}

double chi_square_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(dof / 2.0, x / 2.0);
}

LogRankResult log_rank(const SurvivalGroup& a, const SurvivalGroup& b) {
  if (a.times.empty() || b.times.empty()) throw Error(Errc::ShapeMismatch, "log_rank needs two non-empty groups");
  struct Obs {
    double t;
    int event;
    int group;
  };
  std::vector<Obs> all;
  for (std::size_t i = 0; i < a.times.size(); ++i) all.push_back({a.times[i], a.events[i] != 0, 0});
  for (std::size_t i = 0; i < b.times.size(); ++i) all.push_back({b.times[i], b.events[i] != 0, 1});
  std::sort(all.begin(), all.end(), [](const Obs& x, const Obs& y) { return x.t < y.t; });

  double n_a = static_cast<double>(a.times.size()), n_b = static_cast<double>(b.times.size());
  double observed_minus_expected = 0.0, variance = 0.0;
  int total_events = 0;
  std::size_t g = 0;
  while (g < all.size()) {
    std::size_t end = g;
    double d_a = 0.0, d = 0.0, leave_a = 0.0, leave_b = 0.0;
    while (end < all.size() && all[end].t == all[g].t) {
      d += all[end].event;
      if (all[end].group == 0) {
        d_a += all[end].event;
        leave_a += 1.0;
      } else {
        leave_b += 1.0;
      }
      ++end;
    }
    const double n = n_a + n_b;
    if (d > 0.0) {
      observed_minus_expected += d_a - d * n_a / n;
      if (n > 1.0) variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
      total_events += static_cast<int>(d);
    }
    n_a -= leave_a;
    n_b -= leave_b;
    g = end;
  }
  if (total_events == 0) throw Error(Errc::NoEvents, "log_rank needs at least one event");
  LogRankResult r;
  r.chi_square = variance > 0.0 ? observed_minus_expected * observed_minus_expected / variance : 0.0;
  r.p_value = chi_square_sf(r.chi_square, 1.0);
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error(Errc::ShapeMismatch, "median of empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<RiskGroup> stratify(std::span<const double> risks) {
  if (risks.size() < 2) throw Error(Errc::ShapeMismatch, "stratify needs at least two risks");
  const double m = median(std::vector<double>(risks.begin(), risks.end()));
  std::vector<RiskGroup> out;
  out.reserve(risks.size());
  for (double r : risks) out.push_back(r > m ? RiskGroup::High : RiskGroup::Low);
  return out;
}

}  // namespace mcti
