#include "sigma/harness.hpp"

#include "sigma/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sigma::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kReportVersion = 1;

void check_same_shape(ConstMatRef a, ConstMatRef b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() < 1 || a.cols() < 1) {
    throw ShapeMismatch(std::string(what) + ": predictions and targets must share a non-empty shape");
  }
}

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

double average_rmse(ConstMatRef preds, ConstMatRef targets) {
  check_same_shape(preds, targets, "average_rmse");
  const double m = static_cast<double>(preds.rows());
  const double p = static_cast<double>(preds.cols());
  return std::sqrt((preds - targets).squaredNorm() / m) / p;
}

std::vector<double> per_parameter_rmse(ConstMatRef preds, ConstMatRef targets) {
  check_same_shape(preds, targets, "per_parameter_rmse");
  std::vector<double> out;
  for (Eigen::Index j = 0; j < preds.cols(); ++j)
    out.push_back(std::sqrt((preds.col(j) - targets.col(j)).squaredNorm() / preds.rows()));
  return out;
}

RseStats average_rse_stats(ConstMatRef preds, ConstMatRef targets) {
  check_same_shape(preds, targets, "average_rse_stats");
  const auto m = static_cast<std::size_t>(preds.rows());
  std::vector<double> rse(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    rse[i] = (preds.row(r) - targets.row(r)).norm() / static_cast<double>(preds.cols());
  }
  std::sort(rse.begin(), rse.end());
  auto nearest_rank = [&](double q) {
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(m)));
    return rse[std::clamp<std::size_t>(rank, 1, m) - 1];
  };
  return {rse.back(), nearest_rank(0.75), nearest_rank(0.25)};
}

Evaluation evaluate(const models::Model& model, const pathsim::LabeledDataset& data) {
  if (data.size() < 1) throw ShapeMismatch("evaluate: empty dataset");
  if (data.n != model.input_length() || data.label_dim() != model.output_dim()) {
    throw ShapeMismatch("evaluate: dataset shape does not match the model");
  }
  const Mat preds = models::predict(model, data.paths);
  return {per_parameter_rmse(preds, data.labels), average_rmse(preds, data.labels),
          average_rse_stats(preds, data.labels)};
}

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (replicates < 1) throw ConfigError("replicates must be >= 1");
  if (n < 2) throw ConfigError("n must be >= 2");
  if (train_size < 1 || test_size < 1) throw ConfigError("train_size and test_size must be >= 1");
  if (labels.empty()) throw ConfigError("at least one label rule is required");
  if (architecture.outputs != static_cast<int>(labels.size())) {
    throw ConfigError("architecture has " + std::to_string(architecture.outputs) +
                      " outputs but " + std::to_string(labels.size()) + " labels are sampled");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg;
  try {
    cfg.name = j.value("name", cfg.name);
    cfg.process = pathsim::parse_process(j.value("process", std::string("fbm")));
    cfg.n = j.value("n", cfg.n);
    cfg.horizon = j.value("horizon", cfg.horizon);
    cfg.train_size = j.value("train_size", cfg.train_size);
    cfg.test_size = j.value("test_size", cfg.test_size);
    for (const auto& l : j.at("labels")) {
      cfg.labels.push_back(
          {l.at("name").get<std::string>(), pathsim::SamplingRule::parse(l.at("rule").get<std::string>())});
    }
    if (j.contains("fixed_params")) {
      for (const auto& [k, v] : j["fixed_params"].items()) cfg.fixed.set(k, v.get<double>());
    }
    json arch = j.value("architecture", json::object());
    if (!arch.contains("outputs")) arch["outputs"] = cfg.labels.size();
    cfg.architecture = models::architecture_from_json(arch);
    if (cfg.architecture.ranges.empty()) cfg.architecture.ranges = models::ranges_for(cfg.labels);
    const json tr = j.value("training", json::object());
    cfg.training.epochs = tr.value("epochs", cfg.training.epochs);
    cfg.training.batch_size = tr.value("batch_size", cfg.training.batch_size);
    cfg.training.lr = tr.value("lr", cfg.training.lr);
    cfg.training.shuffle = tr.value("shuffle", cfg.training.shuffle);
    cfg.replicates = j.value("replicates", cfg.replicates);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(file + ": " + e.what());
  }
  return experiment_from_json(j);
}

ordered_json report_to_json(const EstimateReport& r) {
  ordered_json j;
  j["format_version"] = kReportVersion;
  j["name"] = r.name;
  j["parameters"] = r.parameters;
  j["rmse"] = r.rmse;
  j["average_rmse"] = r.average_rmse;
  j["average_rse"] = {{"max", r.rse.max}, {"q75", r.rse.q75}, {"q25", r.rse.q25}};
  j["param_count"] = r.param_count;
  j["seeds"] = {{"master", r.master_seed}, {"train_data", r.train_data_seed}, {"test_data", r.test_data_seed}};
  auto& reps = j["replicates"] = ordered_json::array();
  for (const auto& rep : r.replicates) {
    reps.push_back({{"index", rep.index},
                    {"seed", rep.seed},
                    {"rmse", rep.test.rmse},
                    {"average_rmse", rep.test.average_rmse},
                    {"average_rse", {{"max", rep.test.rse.max}, {"q75", rep.test.rse.q75}, {"q25", rep.test.rse.q25}}},
                    {"final_train_rmse", rep.final_train_rmse},
                    {"final_val_rmse", rep.final_val_rmse}});
  }
  return j;
}

void write_text(const std::string& file, const std::string& text) {
  const fs::path p(file);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file);
  out << text;
  if (!out) throw IoError("write failed: " + file);
}

void write_history_csv(const std::vector<models::EpochRecord>& history, const std::string& file) {
  std::string text = "epoch,train_rmse,val_rmse\n";
  for (const auto& h : history)
    text += std::to_string(h.epoch) + "," + fmt17(h.train_rmse) + "," + fmt17(h.val_rmse) + "\n";
  write_text(file, text);
}

EstimateReport run_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks) {
  cfg.validate();
  const fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  fs::remove(dir / "FAILED", ec);
  const auto started = std::chrono::steady_clock::now();

  try {
    EstimateReport report;
    report.name = cfg.name;
    report.master_seed = cfg.seed;
    report.train_data_seed = numerics::Rng::derive(cfg.seed, 0).next_u64();
    report.test_data_seed = numerics::Rng::derive(cfg.seed, 1).next_u64();

    pathsim::DatasetSpec spec;
    spec.process = cfg.process;
    spec.n = cfg.n;
    spec.horizon = cfg.horizon;
    spec.labels = cfg.labels;
    spec.base = cfg.fixed;
    spec.count = cfg.train_size;
    const auto train_set = pathsim::generate_dataset(report.train_data_seed, spec);
    spec.count = cfg.test_size;
    const auto test_set = pathsim::generate_dataset(report.test_data_seed, spec);
    report.parameters = train_set.label_names();

    const auto p = report.parameters.size();
    report.rmse.assign(p, 0.0);
    for (int r = 0; r < cfg.replicates; ++r) {
      if (hooks.on_replicate) hooks.on_replicate(r);
      ReplicateResult rep;
      rep.index = r;
      rep.seed = numerics::Rng::derive(cfg.seed, 100 + static_cast<std::uint64_t>(r)).next_u64();

      models::Model model(cfg.architecture, cfg.n, train_set.d,
                          numerics::Rng::derive(rep.seed, 0).next_u64());
      model.label_names = report.parameters;
      auto tc = cfg.training;
      tc.seed = numerics::Rng::derive(rep.seed, 1).next_u64();
      const auto history = models::train(model, train_set, &test_set, tc, hooks.on_epoch);
      report.param_count = models::param_count(model);
      rep.final_train_rmse = history.back().train_rmse;
      rep.final_val_rmse = history.back().val_rmse;
      rep.test = evaluate(model, test_set);

      model.training_metadata = {{"epochs", tc.epochs}, {"batch_size", tc.batch_size},
                                 {"lr", tc.lr},         {"seed", tc.seed},
                                 {"shuffle", tc.shuffle}, {"experiment", cfg.name}};
      const fs::path rep_dir = dir / ("replicate_" + std::to_string(r));
      fs::create_directories(rep_dir, ec);
      models::save_model(model, (rep_dir / "model.json").string());
      write_history_csv(history, (rep_dir / "history.csv").string());

      for (std::size_t k = 0; k < p; ++k) report.rmse[k] += rep.test.rmse[k] / cfg.replicates;
      report.average_rmse += rep.test.average_rmse / cfg.replicates;
      report.rse.max += rep.test.rse.max / cfg.replicates;
      report.rse.q75 += rep.test.rse.q75 / cfg.replicates;
      report.rse.q25 += rep.test.rse.q25 / cfg.replicates;
      report.replicates.push_back(std::move(rep));
    }

    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_text((dir / "report.json").string(), report_to_json(report).dump(2) + "\n");
    write_text((dir / "timing.json").string(),
               ordered_json{{"wall_clock_seconds", report.wall_clock_seconds}}.dump(2) + "\n");
    return report;
  } catch (const std::exception& e) {
    const auto* err = dynamic_cast<const Error*>(&e);
    try {
      write_text((dir / "FAILED").string(), (err ? err->kind() + ": " : std::string()) + e.what() + "\n");
    } catch (...) {
    }
    throw;
  }
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\"");
    const auto e = cell.find_last_not_of(" \t\"\r");
    cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

std::vector<double> read_series_column(const std::string& file, const std::string& column) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file);
  std::string line;
  if (!std::getline(in, line)) throw IoError(file + ": missing header row");
  const auto header = split_csv_line(line);
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw IoError(file + ": no column named '" + column + "'");
  const auto col = static_cast<std::size_t>(it - header.begin());

  std::vector<double> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (col >= cells.size() || cells[col].empty()) {
      throw IoError(file + ":" + std::to_string(line_no) + ": missing value in column '" + column + "'");
    }
    char* end = nullptr;
    const double v = std::strtod(cells[col].c_str(), &end);
    if (end == cells[col].c_str() || *end != '\0' || !std::isfinite(v)) {
      throw IoError(file + ":" + std::to_string(line_no) + ": not a finite number: '" + cells[col] + "'");
    }
    out.push_back(v);
  }
  return out;
}

estimators::WindowEstimator model_window_estimator(const models::Model& model) {
  if (model.input_channels() != 1 || model.output_dim() < 1) {
    throw ConfigError("window estimation needs a single-channel model");
  }
  return [&model](std::span<const double> window) {
    if (static_cast<int>(window.size()) != model.input_length()) {
      throw LengthMismatch("window length " + std::to_string(window.size()) +
                           " differs from the model input length " +
                           std::to_string(model.input_length()));
    }
    Mat x = Eigen::Map<const Mat>(window.data(), static_cast<Eigen::Index>(window.size()), 1);
    if (model.config().input_norm == models::InputNorm::none) {
      // raw-input models still get a unit-scale window
      const double mean = x.mean();
      const double sd = std::max(std::sqrt((x.array() - mean).square().mean()), 1e-12);
      x = (x.array() - mean) / sd;
    }
    const Vec est = models::scale_outputs(model.forward(x), model.config().ranges);
    return estimators::HurstEstimate{std::clamp(est(0), 0.0, 1.0), est(0)};
  };
}

}  // namespace sigma::harness
