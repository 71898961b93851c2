#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mcti/survstats.hpp"

namespace mcti {

// Stable exit codes for scripting.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct KmRow {
  double time = 0.0;
  double survival_low = 1.0, survival_high = 1.0;
  int at_risk_low = 0, at_risk_high = 0;
};

struct KmComparison {
  KmCurve low, high;
  LogRankResult test;
  std::vector<KmRow> rows;
};

// Median split of risks, a KM curve per group and the log-rank comparison.
KmComparison compare_risk_groups(const std::vector<double>& times, const std::vector<int>& censors,
                                 const std::vector<double>& risks);
std::string km_csv(const KmComparison& cmp);
std::string km_svg(const KmComparison& cmp, const std::string& title);
std::string format_p_value(double p);

}  // namespace mcti
