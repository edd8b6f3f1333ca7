#pragma once

#include "sigma/estimators.hpp"
#include "sigma/models.hpp"
#include "sigma/pathsim.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sigma::harness {

// ---------------------------------------------------------------------------
// Metrics

/// (1/p) sqrt((1/m) sum_i ||pred_i - target_i||^2).
double average_rmse(ConstMatRef preds, ConstMatRef targets);

/// Root mean squared error of each column.
std::vector<double> per_parameter_rmse(ConstMatRef preds, ConstMatRef targets);

struct RseStats {
  double max = 0.0;
  double q75 = 0.0;
  double q25 = 0.0;
};

/// Nearest-rank quantiles of the per-sample (1/p) ||pred_i - target_i||.
RseStats average_rse_stats(ConstMatRef preds, ConstMatRef targets);

struct Evaluation {
  std::vector<double> rmse;  // per parameter, raw scale
  double average_rmse = 0.0;
  RseStats rse;
};

Evaluation evaluate(const models::Model& model, const pathsim::LabeledDataset& data);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  std::string name = "experiment";
  pathsim::Process process = pathsim::Process::fbm;
  int n = 100;
  double horizon = 1.0;
  int train_size = 3000;
  int test_size = 1000;
  std::vector<pathsim::LabelRule> labels;
  pathsim::ProcessParams fixed;
  models::ArchitectureConfig architecture;
  models::TrainConfig training;
  int replicates = 3;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& file);

struct ReplicateResult {
  int index = 0;
  std::uint64_t seed = 0;
  Evaluation test;
  double final_train_rmse = 0.0;
  double final_val_rmse = 0.0;
};

struct EstimateReport {
  std::string name;
  std::vector<std::string> parameters;
  std::vector<double> rmse;  // per parameter, averaged over replicates
  double average_rmse = 0.0;
  RseStats rse;              // averaged over replicates
  std::size_t param_count = 0;
  std::uint64_t master_seed = 0;
  std::uint64_t train_data_seed = 0;
  std::uint64_t test_data_seed = 0;
  std::vector<ReplicateResult> replicates;
  double wall_clock_seconds = 0.0;
};

/// Versioned report document. Wall-clock time is left out so that repeated
/// runs produce identical bytes; it goes to timing.json instead.
nlohmann::ordered_json report_to_json(const EstimateReport& report);

struct ExperimentHooks {
  models::EpochCallback on_epoch;  // called with every replicate's epochs
  std::function<void(int replicate)> on_replicate;
};

/// Generates the datasets, trains the replicates, evaluates on the shared test
/// set and writes report.json, timing.json and replicate_<r>/{model.json,
/// history.csv} under cfg.output_dir. On failure a FAILED file holding the
/// error is written before rethrowing.
EstimateReport run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {});

// ---------------------------------------------------------------------------
// Series helpers

/// One numeric column, selected by header name, from a CSV file.
std::vector<double> read_series_column(const std::string& file, const std::string& column);

/// Window estimator backed by a trained Hurst model. Windows are z-scored
/// (std floored at 1e-12) before the forward pass. `model` must outlive the
/// returned callable.
estimators::WindowEstimator model_window_estimator(const models::Model& model);

void write_history_csv(const std::vector<models::EpochRecord>& history, const std::string& file);

/// Writes `text` to `file`, creating parent directories; throws IoError.
void write_text(const std::string& file, const std::string& text);

}  // namespace sigma::harness
