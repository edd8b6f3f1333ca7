// sigma: simulate fBm-driven datasets, train and evaluate signature-attention
// estimators, and run classical Hurst estimators on series.

#include "sigma/error.hpp"
#include "sigma/estimators.hpp"
#include "sigma/harness.hpp"
#include "sigma/models.hpp"
#include "sigma/pathsim.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace sigma;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::pair<std::string, std::string> split_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected NAME=VALUE, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

json read_json(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(file + ": " + e.what());
  }
}

ordered_json summary_json(const std::vector<estimators::WindowEstimate>& rows) {
  ordered_json j;
  std::vector<double> est;
  int flat = 0;
  for (const auto& r : rows) {
    est.push_back(r.estimate);
    flat += r.flat ? 1 : 0;
  }
  j["windows"] = rows.size();
  j["flat_windows"] = flat;
  if (est.size() >= 2) {
    const auto ci = estimators::confidence_interval(est);
    j["mean"] = ci.mean;
    j["std"] = ci.stddev;
    j["ci95"] = {ci.lo, ci.hi};
  } else if (est.size() == 1) {
    j["mean"] = est[0];
  }
  return j;
}

void write_window_csv(const std::vector<estimators::WindowEstimate>& rows, const std::string& file) {
  std::string text = "start,estimate,raw,flat\n";
  for (const auto& r : rows)
    text += std::to_string(r.start) + "," + fmt17(r.estimate) + "," + fmt17(r.raw) + "," +
            (r.flat ? "1" : "0") + "\n";
  if (file.empty() || file == "-") std::cout << text;
  else harness::write_text(file, text);
}

void emit_json(const ordered_json& j, const std::string& file) {
  if (file.empty() || file == "-") std::cout << j.dump(2) << "\n";
  else harness::write_text(file, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hurst and parameter estimation for fBm-driven processes"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a labelled dataset of simulated paths");
  std::string sim_process = "fbm", sim_out;
  int sim_n = 100, sim_count = 100;
  std::uint64_t sim_seed = 0;
  double sim_horizon = 1.0;
  std::string sim_hurst = "uniform:0,1";
  std::vector<std::string> sim_params;
  sim->add_option("--process", sim_process, "fbm, fou or rheston")->capture_default_str();
  sim->add_option("--n", sim_n, "Samples per path")->capture_default_str();
  sim->add_option("--count", sim_count, "Number of paths")->capture_default_str();
  sim->add_option("--seed", sim_seed, "Master seed")->capture_default_str();
  sim->add_option("--horizon", sim_horizon, "Time horizon T")->capture_default_str();
  sim->add_option("--hurst-dist", sim_hurst, "uniform:a,b, beta:a,b or set:v1,v2,...")
      ->capture_default_str();
  sim->add_option("--param", sim_params,
                  "NAME=DIST samples another label; NAME=VALUE fixes a process parameter");
  sim->add_option("--out", sim_out, "Output prefix (writes PREFIX.csv and PREFIX.json)")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a dataset");
  std::string tr_train, tr_val, tr_arch, tr_variant, tr_model_out, tr_history;
  models::TrainConfig tc;
  std::uint64_t tr_init_seed = 0;
  bool tr_no_shuffle = false, tr_quiet = false;
  tr->add_option("--train", tr_train, "Training dataset prefix")->required();
  tr->add_option("--val", tr_val, "Validation dataset prefix");
  tr->add_option("--arch", tr_arch, "Architecture JSON file");
  tr->add_option("--variant", tr_variant, "Override the architecture variant");
  tr->add_option("--epochs", tc.epochs)->capture_default_str();
  tr->add_option("--batch-size", tc.batch_size)->capture_default_str();
  tr->add_option("--lr", tc.lr)->capture_default_str();
  tr->add_option("--seed", tc.seed, "Shuffle seed")->capture_default_str();
  tr->add_option("--init-seed", tr_init_seed, "Weight initialisation seed")->capture_default_str();
  tr->add_flag("--no-shuffle", tr_no_shuffle);
  tr->add_flag("--quiet", tr_quiet, "Do not print per-epoch progress");
  tr->add_option("--model-out", tr_model_out, "Model JSON output")->required();
  tr->add_option("--history", tr_history, "Loss history CSV output");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a model on a labelled dataset");
  std::string ev_model, ev_data, ev_out, ev_pred;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data, "Dataset prefix")->required();
  ev->add_option("--out", ev_out, "Metrics JSON (default stdout)");
  ev->add_option("--predictions", ev_pred, "Per-path predictions CSV");

  // estimate
  auto* es = app.add_subcommand("estimate", "Sliding-window Hurst estimates from a trained model");
  std::string es_model, es_series, es_column, es_out, es_summary, es_ref, es_ref_column;
  estimators::WindowSpec es_spec;
  es->add_option("--model", es_model)->required();
  es->add_option("--series", es_series, "Series CSV with a header row")->required();
  es->add_option("--column", es_column, "Column to read")->required();
  es->add_option("--window", es_spec.window, "Window length (must equal the model input length)")
      ->capture_default_str();
  es->add_option("--step", es_spec.step)->capture_default_str();
  es->add_option("--out", es_out, "Per-window CSV (default stdout)");
  es->add_option("--summary", es_summary, "Summary JSON");
  es->add_option("--reference", es_ref, "CSV with one reference value per window");
  es->add_option("--reference-column", es_ref_column, "Column of the reference CSV");

  // hurst
  auto* hu = app.add_subcommand("hurst", "Classical Hurst estimators (Higuchi, R/S)");
  std::string hu_method = "higuchi", hu_series, hu_column, hu_out, hu_summary;
  bool hu_increments = false, hu_detrend = false;
  int hu_kmax = 0;
  std::optional<int> hu_window;
  int hu_step = 10;
  hu->add_option("--method", hu_method, "higuchi or rs")->capture_default_str();
  hu->add_option("--series", hu_series)->required();
  hu->add_option("--column", hu_column)->required();
  hu->add_flag("--increments", hu_increments, "R/S: difference the level series first");
  hu->add_flag("--detrend", hu_detrend, "R/S: remove a linear trend first");
  hu->add_option("--kmax", hu_kmax, "Higuchi k_max (0: min(20, n/10))")->capture_default_str();
  hu->add_option("--window", hu_window, "Sliding window length");
  hu->add_option("--step", hu_step)->capture_default_str();
  hu->add_option("--out", hu_out, "Per-window CSV (default stdout)");
  hu->add_option("--summary", hu_summary, "Summary JSON");

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run a configured experiment end to end");
  std::string ex_config, ex_output;
  std::optional<std::uint64_t> ex_seed;
  bool ex_quiet = false;
  ex->add_option("--config", ex_config, "Experiment JSON")->required();
  ex->add_option("--seed", ex_seed, "Override the master seed");
  ex->add_option("--output-dir", ex_output, "Override the output directory");
  ex->add_flag("--quiet", ex_quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: UsageError: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*sim) {
      pathsim::DatasetSpec spec;
      spec.process = pathsim::parse_process(sim_process);
      spec.n = sim_n;
      spec.count = sim_count;
      spec.horizon = sim_horizon;
      spec.labels.push_back({"H", pathsim::SamplingRule::parse(sim_hurst)});
      for (const auto& p : sim_params) {
        const auto [name, value] = split_assignment(p);
        if (value.find(':') != std::string::npos) {
          spec.labels.push_back({name, pathsim::SamplingRule::parse(value)});
          continue;
        }
        char* end = nullptr;
        const double v = std::strtod(value.c_str(), &end);
        if (end == value.c_str() || *end != '\0') throw ConfigError("bad value in --param " + p);
        spec.base.set(name, v);
      }
      const auto data = pathsim::generate_dataset(sim_seed, spec);
      pathsim::write_dataset(data, sim_out);
      std::cerr << "wrote " << data.size() << " paths to " << sim_out << ".csv\n";
    } else if (*tr) {
      const auto train_set = pathsim::read_dataset(tr_train);
      std::optional<pathsim::LabeledDataset> val_set;
      if (!tr_val.empty()) val_set = pathsim::read_dataset(tr_val);
      json arch = tr_arch.empty() ? json::object() : read_json(tr_arch);
      if (!tr_variant.empty()) arch["variant"] = tr_variant;
      if (!arch.contains("outputs")) arch["outputs"] = train_set.label_dim();
      auto cfg = models::architecture_from_json(arch);
      if (cfg.ranges.empty()) cfg.ranges = models::ranges_for(train_set.rules);
      models::Model model(cfg, train_set.n, train_set.d, tr_init_seed);
      model.label_names = train_set.label_names();
      tc.shuffle = !tr_no_shuffle;
      const auto history = models::train(
          model, train_set, val_set ? &*val_set : nullptr, tc, [&](const models::EpochRecord& r) {
            if (!tr_quiet)
              std::cerr << "epoch " << r.epoch << " train_rmse " << r.train_rmse << " val_rmse "
                        << r.val_rmse << "\n";
          });
      model.training_metadata = {{"epochs", tc.epochs}, {"batch_size", tc.batch_size},
                                 {"lr", tc.lr},         {"seed", tc.seed},
                                 {"init_seed", tr_init_seed}, {"shuffle", tc.shuffle},
                                 {"train_data", tr_train}};
      models::save_model(model, tr_model_out);
      if (!tr_history.empty()) harness::write_history_csv(history, tr_history);
      std::cerr << "saved " << models::param_count(model) << "-parameter model to " << tr_model_out
                << "\n";
    } else if (*ev) {
      const auto model = models::load_model(ev_model);
      const auto data = pathsim::read_dataset(ev_data);
      const auto res = harness::evaluate(model, data);
      ordered_json j;
      j["parameters"] = data.label_names();
      j["rmse"] = res.rmse;
      j["average_rmse"] = res.average_rmse;
      j["average_rse"] = {{"max", res.rse.max}, {"q75", res.rse.q75}, {"q25", res.rse.q25}};
      j["param_count"] = models::param_count(model);
      j["paths"] = data.size();
      emit_json(j, ev_out);
      if (!ev_pred.empty()) {
        const Mat preds = models::predict(model, data.paths);
        std::string text;
        const auto names = data.label_names();
        for (std::size_t k = 0; k < names.size(); ++k)
          text += (k ? "," : "") + ("true:" + names[k]) + ",pred:" + names[k];
        text += "\n";
        for (Eigen::Index i = 0; i < preds.rows(); ++i) {
          for (Eigen::Index k = 0; k < preds.cols(); ++k)
            text += (k ? "," : "") + fmt17(data.labels(i, k)) + "," + fmt17(preds(i, k));
          text += "\n";
        }
        harness::write_text(ev_pred, text);
      }
    } else if (*es) {
      const auto model = models::load_model(es_model);
      const auto series = harness::read_series_column(es_series, es_column);
      if (es_spec.window != model.input_length()) {
        throw LengthMismatch("window " + std::to_string(es_spec.window) +
                             " differs from the model input length " +
                             std::to_string(model.input_length()));
      }
      es_spec.validate(static_cast<int>(series.size()));
      const auto rows =
          estimators::sliding_window_estimates(series, es_spec, harness::model_window_estimator(model));
      auto summary = summary_json(rows);
      if (!es_ref.empty()) {
        if (es_ref_column.empty()) throw ConfigError("--reference needs --reference-column");
        const auto ref = harness::read_series_column(es_ref, es_ref_column);
        if (ref.size() != rows.size()) {
          throw LengthMismatch("reference has " + std::to_string(ref.size()) + " rows for " +
                               std::to_string(rows.size()) + " windows");
        }
        std::vector<double> diff;
        for (std::size_t i = 0; i < rows.size(); ++i) diff.push_back(rows[i].estimate - ref[i]);
        if (diff.size() >= 2) summary["reference_diff_std"] = estimators::confidence_interval(diff).stddev;
      }
      write_window_csv(rows, es_out);
      if (!es_summary.empty()) emit_json(summary, es_summary);
    } else if (*hu) {
      const auto series = harness::read_series_column(hu_series, hu_column);
      estimators::WindowEstimator fn;
      if (hu_method == "higuchi") {
        fn = [&](std::span<const double> x) { return estimators::higuchi(x, hu_kmax); };
      } else if (hu_method == "rs") {
        fn = [&](std::span<const double> x) {
          return estimators::rescaled_range(x, {hu_increments, hu_detrend});
        };
      } else {
        throw ConfigError("unknown method '" + hu_method + "' (expected higuchi or rs)");
      }
      if (hu_window) {
        const estimators::WindowSpec spec{*hu_window, hu_step};
        spec.validate(static_cast<int>(series.size()));
        const auto rows = estimators::sliding_window_estimates(series, spec, fn);
        write_window_csv(rows, hu_out);
        if (!hu_summary.empty()) emit_json(summary_json(rows), hu_summary);
      } else {
        const auto est = fn(series);
        emit_json(ordered_json{{"method", hu_method}, {"estimate", est.value}, {"raw", est.raw},
                               {"samples", series.size()}},
                  hu_summary.empty() ? hu_out : hu_summary);
      }
    } else if (*ex) {
      auto cfg = harness::load_experiment(ex_config);
      if (ex_seed) cfg.seed = *ex_seed;
      if (!ex_output.empty()) cfg.output_dir = ex_output;
      harness::ExperimentHooks hooks;
      if (!ex_quiet) {
        hooks.on_replicate = [](int r) { std::cerr << "replicate " << r << "\n"; };
        hooks.on_epoch = [](const models::EpochRecord& r) {
          std::cerr << "  epoch " << r.epoch << " train_rmse " << r.train_rmse << " val_rmse "
                    << r.val_rmse << "\n";
        };
      }
      const auto report = harness::run_experiment(cfg, hooks);
      std::cout << harness::report_to_json(report).dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
