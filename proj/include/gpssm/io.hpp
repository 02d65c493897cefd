#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpssm/training.hpp"

namespace gpssm {

using Json = nlohmann::json;

// --- primitive encodings ---

// Exact round-trip float encoding (C hexadecimal literals).
std::string hex_double(double v);
double parse_hex_double(const std::string& s);

std::string fnv1a_hex(const std::string& bytes);

// --- CSV ---

struct CsvTable {
  std::vector<std::string> headers;
  Mat values;
};

// Strict headered CSV: ragged rows and non-finite values are rejected with
// 1-based line numbers (DataError).
CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& headers, const Mat& values);

// --- configuration ---

struct CliConfig {
  // model
  Index latent_dim = 0;  // 0: inferred from data / structure
  LatentStructure structure = LatentStructure::Free;
  double dt = 1.0;
  KernelFamily kernel_family = KernelFamily::Matern32;
  std::optional<Vec> lengthscales;
  std::optional<double> signal_variance;
  std::optional<Vec> process_noise;
  LikelihoodFamily likelihood = LikelihoodFamily::GaussianDiag;
  std::optional<Vec> r_diag;
  std::optional<double> alpha;
  std::optional<double> beta;
  Index observed_state_index = 1;
  std::optional<Vec> x0_mean;
  std::optional<Vec> x0_var;
  Index num_inducing = 15;
  std::optional<Mat> inducing_inputs;

  // training
  TrainingConfig training;

  // simulate
  std::string simulate_system = "prior";  // "prior" | "kink"
  Index simulate_T = 200;
  std::vector<std::uint64_t> simulate_seeds = {0, 1, 2, 3};

  // predict
  std::optional<Vec> predict_grid_lo;
  std::optional<Vec> predict_grid_hi;
  Index predict_grid_n = 200;
  Index rollout_horizon = 0;
  RolloutMode rollout_mode = RolloutMode::MeanOnly;
  std::optional<Vec> rollout_x0;
  std::uint64_t rollout_seed = 0;

  // eval
  Index baseline_order = 1;
  std::optional<double> eval_max_rmse;
  std::optional<double> eval_min_loglik;

  // online
  Index online_segment_length = 100;

  std::string fingerprint;  // canonical-JSON hash, set by parse_config
};

Json default_config_json();
CliConfig parse_config(const Json& merged);
CliConfig load_config_file(const std::string& path);  // merges over defaults
Json dump_config(const CliConfig& config);

// Data-driven initialization of unset model fields (scale-matched starts).
GpssmModel init_model_from_data(const CliConfig& config, const Mat& observations);

// --- model archive ---

struct ArchiveProvenance {
  std::string config_fingerprint;
  std::string data_hash;
  std::vector<std::uint64_t> seeds;
  Index iteration = 0;
  std::vector<double> elbo_trace_tail;
  std::optional<DiagGaussian> filter_carry;
};

struct ModelArchive {
  int format_version = 1;
  GpssmModel model;
  InducingPosterior posterior;
  ArchiveProvenance provenance;
};

// Versioned structured text with hexadecimal float encoding: numeric fields
// round-trip bit-exactly. A version mismatch is rejected.
void save_archive(const std::string& path, const ModelArchive& archive);
ModelArchive load_archive(const std::string& path);

// Atomic write: serialize to <path>.tmp then rename over path.
void save_archive_atomic(const std::string& path, const ModelArchive& archive);

}  // namespace gpssm
