#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mcti/autograd.hpp"
#include "mcti/config.hpp"

namespace mcti {

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split parse_split(const std::string& s);

struct CaseRecord {
  std::string case_id;
  Matrix wsi_features;  // n × d_in
  RowVector gene_vector;  // 1 × g
  double time = 0.0;    // months
  int censor = 0;       // 1 = right-censored, event not observed
  int subtype = 0;
  Split split = Split::Train;
};

// MCTI feature container: "MCTI" | u16 version | u32 rows | u32 cols | f32 row-major, all LE.
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 14;

Matrix read_feature_container(const std::filesystem::path& path);
void write_feature_container(const std::filesystem::path& path, const Matrix& m);
std::vector<char> encode_feature_container(const Matrix& m);
Matrix decode_feature_container(std::span<const char> bytes);

inline constexpr const char* kManifestHeader = "case_id,split,subtype,time,censor,wsi_path,gene_path";

// Relative feature paths resolve against the manifest's directory.
std::vector<CaseRecord> load_manifest(const std::filesystem::path& path);

struct TimeBins {
  std::vector<double> edges;  // n_bins - 1 ascending cut points
  int n_bins = 0;
};

// Linear-interpolation quantile of an already sorted sample.
double sorted_quantile(std::span<const double> sorted, double p);

TimeBins compute_time_bins(std::span<const CaseRecord> training, int n_bins);
int assign_bin(double time, const TimeBins& bins);

struct SynthConfig {
  int n_cases = 200;
  int n_classes = 2;
  int min_instances = 64;
  int max_instances = 96;
  double min_tumor_fraction = 0.02;
  double max_tumor_fraction = 0.25;
  int d_in = 16;
  int gene_length = 32;
  double class_mean_separation = 5.0;
  double gene_class_scale = 1.0;
  double gene_signal_scale = 1.0;
  double gene_noise = 0.5;
  double base_hazard = 0.05;
  double beta_tumor = 10.0;
  double beta_gene = 0.5;
  double censor_horizon = 120.0;
  double censor_rate = 0.0;  // extra exponential censoring on top of the horizon
  std::uint64_t seed = 1;

  void validate() const;
  KeyValues to_key_values() const;
  static SynthConfig from_key_values(const KeyValues& kv);
};

// Ground truth kept beside each synthetic case for oracle checks.
struct CaseTruth {
  std::string case_id;
  double tumor_fraction = 0.0;  // realized count / n
  double signal = 0.0;
  double hazard = 0.0;
  double event_time = 0.0;
  double censor_time = 0.0;
  std::vector<int> tumor_indices;
};

struct SyntheticDataset {
  std::vector<CaseRecord> cases;
  std::vector<CaseTruth> truth;
};

SyntheticDataset synthesize(const SynthConfig& config);

// Writes manifest.csv, truth.csv, features/<id>.mcti and genes/<id>.mcti.
void write_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);
void generate_synthetic(const SynthConfig& config, const std::filesystem::path& dir);

std::vector<CaseTruth> read_truth(const std::filesystem::path& path);

}  // namespace mcti
