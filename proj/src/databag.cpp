#include "mcti/databag.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unordered_map>

#include "mcti/error.hpp"
#include "mcti/nn.hpp"

namespace mcti {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw Error(Errc::InvalidConfig, "unknown split tag '" + s + "'");
}

// ---------------------------------------------------------------------------
// Feature container

std::vector<char> encode_feature_container(const Matrix& m) {
  const auto rows = static_cast<std::uint32_t>(m.rows());
  const auto cols = static_cast<std::uint32_t>(m.cols());
  std::vector<char> out(kContainerHeaderBytes + 4ull * rows * cols);
  std::memcpy(out.data(), "MCTI", 4);
  std::memcpy(out.data() + 4, &kContainerVersion, 2);
  std::memcpy(out.data() + 6, &rows, 4);
  std::memcpy(out.data() + 10, &cols, 4);
  char* p = out.data() + kContainerHeaderBytes;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      const float f = static_cast<float>(m(r, c));
      std::memcpy(p, &f, 4);
      p += 4;
    }
  }
  return out;
}

Matrix decode_feature_container(std::span<const char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MCTI", 4) != 0)
    throw Error(Errc::BadMagic, "feature container does not start with MCTI");
  if (bytes.size() < kContainerHeaderBytes) throw Error(Errc::TruncatedPayload, "header shorter than 14 bytes");
  std::uint16_t version = 0;
  std::uint32_t rows = 0, cols = 0;
  std::memcpy(&version, bytes.data() + 4, 2);
  std::memcpy(&rows, bytes.data() + 6, 4);
  std::memcpy(&cols, bytes.data() + 10, 4);
  if (version != kContainerVersion)
    throw Error(Errc::VersionUnsupported, "container version " + std::to_string(version));
  const std::uint64_t expected = kContainerHeaderBytes + 4ull * rows * cols;
  if (bytes.size() != expected)
    throw Error(Errc::TruncatedPayload,
                "expected " + std::to_string(expected) + " bytes, found " + std::to_string(bytes.size()));
  Matrix m(rows, cols);
  const char* p = bytes.data() + kContainerHeaderBytes;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      float f;
      std::memcpy(&f, p, 4);
      m(r, c) = f;
      p += 4;
    }
  }
  return m;
}

Matrix read_feature_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnresolvablePath, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_feature_container(bytes);
}

void write_feature_container(const fs::path& path, const Matrix& m) {
  const auto bytes = encode_feature_container(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::vector<CaseRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnresolvablePath, "cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::MissingColumn, "manifest has no header line");
  const auto header = split_csv_line(line);
  static const char* required[] = {"case_id", "split", "subtype", "time", "censor", "wsi_path", "gene_path"};
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : required)
    if (!col.count(name)) throw Error(Errc::MissingColumn, std::string("manifest lacks column ") + name);

  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path fp(p);
    if (fp.is_relative()) fp = base / fp;
    if (!fs::exists(fp)) throw Error(Errc::UnresolvablePath, fp.string());
    return fp;
  };

  std::vector<CaseRecord> records;
  std::set<std::string> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < header.size())
      throw Error(Errc::MissingColumn, "line " + std::to_string(lineno) + " has too few cells");
    CaseRecord r;
    r.case_id = cells[col["case_id"]];
    if (!seen.insert(r.case_id).second) throw Error(Errc::DuplicateCaseId, r.case_id);
    r.split = parse_split(cells[col["split"]]);
    r.subtype = static_cast<int>(parse_int("subtype", cells[col["subtype"]]));
    r.time = parse_double("time", cells[col["time"]]);
    if (!(r.time > 0.0)) throw Error(Errc::NonPositiveTime, r.case_id);
    r.censor = static_cast<int>(parse_int("censor", cells[col["censor"]]));
    if (r.censor != 0 && r.censor != 1) throw Error(Errc::InvalidConfig, r.case_id + ": censor must be 0 or 1");
    if (r.subtype < 0) throw Error(Errc::InvalidConfig, r.case_id + ": negative subtype");
    r.wsi_features = read_feature_container(resolve(cells[col["wsi_path"]]));
    const Matrix gene = read_feature_container(resolve(cells[col["gene_path"]]));
    if (r.wsi_features.rows() < 1) throw Error(Errc::ShapeMismatch, r.case_id + ": empty WSI bag");
    if (gene.rows() != 1 || gene.cols() < 1) throw Error(Errc::ShapeMismatch, r.case_id + ": gene container must be 1×g");
    r.gene_vector = gene.row(0);
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Time bins

double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(Errc::NoUncensoredCases, "quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

TimeBins compute_time_bins(std::span<const CaseRecord> training, int n_bins) {
  if (n_bins < 2) throw Error(Errc::InvalidConfig, "n_bins must be at least 2");
  std::vector<double> times;
  for (const auto& r : training)
    if (r.censor == 0) times.push_back(r.time);
  if (times.empty()) throw Error(Errc::NoUncensoredCases, "no uncensored training case");
  std::sort(times.begin(), times.end());
  TimeBins bins;
  bins.n_bins = n_bins;
  for (int j = 1; j < n_bins; ++j) bins.edges.push_back(sorted_quantile(times, static_cast<double>(j) / n_bins));
  return bins;
}

int assign_bin(double time, const TimeBins& bins) {
  const auto it = std::lower_bound(bins.edges.begin(), bins.edges.end(), time);
  return static_cast<int>(it - bins.edges.begin());
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(Errc::InvalidConfig, why); };
  if (n_cases <= 0 || n_classes <= 0 || d_in <= 0 || gene_length <= 0) fail("counts must be positive");
  if (min_instances < 1 || max_instances < min_instances) fail("instances_per_bag range invalid");
  if (!(min_tumor_fraction > 0.0 && max_tumor_fraction < 1.0 && min_tumor_fraction <= max_tumor_fraction))
    fail("tumor_fraction range must lie within (0,1)");
  if (d_in < n_classes) fail("d_in must be at least n_classes (one mean direction per class)");
  if (!(base_hazard > 0.0)) fail("base_hazard must be positive");
  if (!(censor_horizon > 0.0)) fail("censor_horizon must be positive");
  if (censor_rate < 0.0) fail("censor_rate must be non-negative");
  if (class_mean_separation < 0.0 || gene_noise < 0.0) fail("scales must be non-negative");
}

KeyValues SynthConfig::to_key_values() const {
  KeyValues kv;
  kv["n_cases"] = std::to_string(n_cases);
  kv["n_classes"] = std::to_string(n_classes);
  kv["min_instances"] = std::to_string(min_instances);
  kv["max_instances"] = std::to_string(max_instances);
  kv["min_tumor_fraction"] = format_double(min_tumor_fraction);
  kv["max_tumor_fraction"] = format_double(max_tumor_fraction);
  kv["d_in"] = std::to_string(d_in);
  kv["gene_length"] = std::to_string(gene_length);
  kv["class_mean_separation"] = format_double(class_mean_separation);
  kv["gene_class_scale"] = format_double(gene_class_scale);
  kv["gene_signal_scale"] = format_double(gene_signal_scale);
  kv["gene_noise"] = format_double(gene_noise);
  kv["base_hazard"] = format_double(base_hazard);
  kv["beta_tumor"] = format_double(beta_tumor);
  kv["beta_gene"] = format_double(beta_gene);
  kv["censor_horizon"] = format_double(censor_horizon);
  kv["censor_rate"] = format_double(censor_rate);
  kv["seed"] = std::to_string(seed);
  return kv;
}

SynthConfig SynthConfig::from_key_values(const KeyValues& kv) {
  SynthConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "n_cases") c.n_cases = static_cast<int>(parse_int(k, v));
    else if (k == "n_classes") c.n_classes = static_cast<int>(parse_int(k, v));
    else if (k == "min_instances") c.min_instances = static_cast<int>(parse_int(k, v));
    else if (k == "max_instances") c.max_instances = static_cast<int>(parse_int(k, v));
    else if (k == "min_tumor_fraction") c.min_tumor_fraction = parse_double(k, v);
    else if (k == "max_tumor_fraction") c.max_tumor_fraction = parse_double(k, v);
    else if (k == "d_in") c.d_in = static_cast<int>(parse_int(k, v));
    else if (k == "gene_length") c.gene_length = static_cast<int>(parse_int(k, v));
    else if (k == "class_mean_separation") c.class_mean_separation = parse_double(k, v);
    else if (k == "gene_class_scale") c.gene_class_scale = parse_double(k, v);
    else if (k == "gene_signal_scale") c.gene_signal_scale = parse_double(k, v);
    else if (k == "gene_noise") c.gene_noise = parse_double(k, v);
    else if (k == "base_hazard") c.base_hazard = parse_double(k, v);
    else if (k == "beta_tumor") c.beta_tumor = parse_double(k, v);
    else if (k == "beta_gene") c.beta_gene = parse_double(k, v);
    else if (k == "censor_horizon") c.censor_horizon = parse_double(k, v);
    else if (k == "censor_rate") c.censor_rate = parse_double(k, v);
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_int(k, v));
    else throw Error(Errc::InvalidConfig, "unknown synth key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace {

double exponential(Rng& rng, double rate) {
  double u = uniform01(rng);
  while (u <= 0.0) u = uniform01(rng);
  return -std::log(u) / rate;
}

}  // namespace

SyntheticDataset synthesize(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int d = cfg.d_in, g = cfg.gene_length, C = cfg.n_classes;

  // Fixed per-dataset structure: gene loading of the survival signal.
  RowVector loading(g);
  for (int j = 0; j < g; ++j) loading(j) = cfg.gene_signal_scale * standard_normal(rng);

  SyntheticDataset out;
  for (int i = 0; i < cfg.n_cases; ++i) {
    CaseRecord rec;
    CaseTruth truth;
    char id[32];
    std::snprintf(id, sizeof id, "case_%04d", i);
    rec.case_id = truth.case_id = id;
    rec.subtype = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(C)));

    const int n = cfg.min_instances +
                  static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.max_instances - cfg.min_instances + 1)));
    const double rho = cfg.min_tumor_fraction + (cfg.max_tumor_fraction - cfg.min_tumor_fraction) * uniform01(rng);
    const int n_tumor = std::clamp(static_cast<int>(std::lround(rho * n)), 1, n);

    // Tumor positions: first n_tumor entries of a random permutation.
    std::vector<int> perm(n);
    for (int j = 0; j < n; ++j) perm[j] = j;
    for (int j = n - 1; j > 0; --j) std::swap(perm[j], perm[uniform_index(rng, static_cast<std::uint64_t>(j + 1))]);
    std::vector<char> is_tumor(n, 0);
    for (int j = 0; j < n_tumor; ++j) is_tumor[perm[j]] = 1;

    rec.wsi_features.resize(n, d);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < d; ++c) rec.wsi_features(r, c) = standard_normal(rng);
      if (is_tumor[r]) {
        rec.wsi_features(r, rec.subtype) += cfg.class_mean_separation;
        truth.tumor_indices.push_back(r);
      }
    }

    const double signal = standard_normal(rng);
    rec.gene_vector.resize(g);
    for (int j = 0; j < g; ++j) {
      const double sig = (j % C == rec.subtype) ? cfg.gene_class_scale : 0.0;
      rec.gene_vector(j) = sig + signal * loading(j) + cfg.gene_noise * standard_normal(rng);
    }

    truth.tumor_fraction = static_cast<double>(n_tumor) / n;
    truth.signal = signal;
    truth.hazard = cfg.base_hazard * std::exp(cfg.beta_tumor * truth.tumor_fraction + cfg.beta_gene * signal);
    truth.event_time = exponential(rng, truth.hazard);
    truth.censor_time = cfg.censor_horizon;
    if (cfg.censor_rate > 0.0) truth.censor_time = std::min(truth.censor_time, exponential(rng, cfg.censor_rate));
    if (truth.event_time > truth.censor_time) {
      rec.time = truth.censor_time;
      rec.censor = 1;
    } else {
      rec.time = truth.event_time;
      rec.censor = 0;
    }
    // Containers hold float32; keep in-memory features identical to what a reload yields.
    rec.wsi_features = rec.wsi_features.cast<float>().cast<double>();
    rec.gene_vector = rec.gene_vector.cast<float>().cast<double>();
    const int slot = i % 20;
    rec.split = slot < 12 ? Split::Train : (slot < 15 ? Split::Val : Split::Test);
    out.cases.push_back(std::move(rec));
    out.truth.push_back(std::move(truth));
  }
  return out;
}

void write_dataset(const SyntheticDataset& data, const fs::path& dir) {
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "genes");
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  std::ofstream truth(dir / "truth.csv", std::ios::trunc);
  if (!manifest || !truth) throw Error(Errc::Io, "cannot write dataset under " + dir.string());
  manifest << kManifestHeader << '\n';
  truth << "case_id,tumor_fraction,signal,hazard,event_time,censor_time,tumor_indices\n";
  for (std::size_t i = 0; i < data.cases.size(); ++i) {
    const CaseRecord& r = data.cases[i];
    const std::string wsi = "features/" + r.case_id + ".mcti";
    const std::string gene = "genes/" + r.case_id + ".mcti";
    write_feature_container(dir / wsi, r.wsi_features);
    write_feature_container(dir / gene, Matrix(r.gene_vector));
    manifest << r.case_id << ',' << split_name(r.split) << ',' << r.subtype << ',' << format_double(r.time) << ','
             << r.censor << ',' << wsi << ',' << gene << '\n';
    if (i < data.truth.size()) {
      const CaseTruth& t = data.truth[i];
      truth << t.case_id << ',' << format_double(t.tumor_fraction) << ',' << format_double(t.signal) << ','
            << format_double(t.hazard) << ',' << format_double(t.event_time) << ',' << format_double(t.censor_time)
            << ',';
      for (std::size_t j = 0; j < t.tumor_indices.size(); ++j) truth << (j ? ";" : "") << t.tumor_indices[j];
      truth << '\n';
    }
  }
}

void generate_synthetic(const SynthConfig& config, const fs::path& dir) { write_dataset(synthesize(config), dir); }

std::vector<CaseTruth> read_truth(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnresolvablePath, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<CaseTruth> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 7) throw Error(Errc::MissingColumn, "truth row too short");
    CaseTruth t;
    t.case_id = cells[0];
    t.tumor_fraction = parse_double("tumor_fraction", cells[1]);
    t.signal = parse_double("signal", cells[2]);
    t.hazard = parse_double("hazard", cells[3]);
    t.event_time = parse_double("event_time", cells[4]);
    t.censor_time = parse_double("censor_time", cells[5]);
    std::istringstream idx(cells[6]);
    std::string tok;
    while (std::getline(idx, tok, ';'))
      if (!tok.empty()) t.tumor_indices.push_back(static_cast<int>(parse_int("tumor_indices", tok)));
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace mcti
