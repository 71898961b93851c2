#pragma once

#include <span>
#include <string>
#include <vector>

namespace mcti {

struct RiskDataset {
  std::vector<double> times;
  std::vector<int> censors;  // 1 = censored
  std::vector<double> risks;
};

// Harrell's C: comparable pairs are t_i < t_j with case i observed; higher
// risk for i is concordant, tied risks count one half.
double c_index(const RiskDataset& data);

struct KmCurve {
  std::vector<double> event_times;
  std::vector<double> survival;
  std::vector<int> at_risk;
  std::vector<int> events;

  // Step value at time t (1 before the first event).
  double survival_at(double t) const;
};

// event_flags: 1 = event observed.
KmCurve km_curve(std::span<const double> times, std::span<const int> event_flags);

struct LogRankResult {
  double chi_square = 0.0;
  double p_value = 1.0;
};

struct SurvivalGroup {
  std::vector<double> times;
  std::vector<int> events;  // 1 = event observed
};

LogRankResult log_rank(const SurvivalGroup& a, const SurvivalGroup& b);

// Upper tail of the chi-square distribution.
double chi_square_sf(double x, double dof);

enum class RiskGroup { Low, High };

// High iff risk > median; ties at the median go low.
std::vector<RiskGroup> stratify(std::span<const double> risks);

double median(std::vector<double> values);

}  // namespace mcti
