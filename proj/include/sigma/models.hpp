#pragma once

#include "sigma/nn.hpp"
#include "sigma/numerics.hpp"
#include "sigma/pathsim.hpp"
#include "sigma/signature.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sigma::models {

enum class Variant {
  sigma,
  sigsa,
  deepsignet,
  transformer,
  sigma_no_conv,
  sigma_no_mlp,
  sigma_no_conv_no_mlp,
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

/// none: raw paths. zscore: each path standardised on its own. dataset: every
/// path shifted and scaled per channel by statistics of the training set,
/// which keeps the relative scale of paths.
enum class InputNorm { none, zscore, dataset };

struct OutputRange {
  double lo = 0.0;
  double hi = 1.0;
};

/// Architecture hyper-parameters. Zero means "variant default" for the
/// fields documented as such.
struct ArchitectureConfig {
  Variant variant = Variant::sigma;
  int conv_channels = 0;  // 0: 3, or 153 for the transformer baseline
  int kernel = 3;
  int conv_stride = 1;
  int truncation = 3;
  int lift_stride = 0;  // 0: half of the augmented sequence length
  int heads = 0;        // 0: truncation for the sigma family, 1 for sigsa, 3 for transformer
  int head_dim = 0;     // 0: width of the attended block (level width, sig_dim, or 64)
  std::vector<int> mlp_widths{32, 32, 32, 32, 32};
  int outputs = 1;
  std::vector<OutputRange> ranges;  // one per output; empty means (0, 1) for all
  InputNorm input_norm = InputNorm::none;
  std::vector<double> input_shift;  // per channel, set when fitting `dataset`
  std::vector<double> input_scale;

  bool has_conv() const;
  bool has_mlp() const;
  bool per_level_heads() const;  // sigma family
  int resolved_conv_channels() const;
  int resolved_heads() const;
  OutputRange range(int i) const;
};

nlohmann::ordered_json to_json(const ArchitectureConfig& cfg);
ArchitectureConfig architecture_from_json(const nlohmann::json& j);

/// lo + raw (hi - lo), elementwise. Throws RangeError for non-finite or empty ranges.
Vec scale_outputs(const Vec& raw, const std::vector<OutputRange>& ranges);
/// Inverse map used to normalise training labels.
Vec normalize_labels(const Vec& theta, const std::vector<OutputRange>& ranges);

/// Forward state kept for the reverse pass of one sample.
struct ForwardCache;

class Model {
 public:
  /// Builds the variant for inputs of length n with d channels. Throws
  /// ConfigError naming the violated constraint.
  Model(const ArchitectureConfig& cfg, int n, int d, std::uint64_t init_seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  Model(const Model&);
  Model& operator=(const Model&);

  const ArchitectureConfig& config() const { return cfg_; }
  int input_length() const { return n_; }
  int input_channels() const { return d_; }
  int output_dim() const { return cfg_.outputs; }

  /// Sequence length after the front end and the number of lifted prefixes.
  int augmented_length() const { return aug_len_; }
  int augmented_channels() const { return aug_channels_; }
  int prefix_count() const { return static_cast<int>(prefix_rows_.size()); }
  int signature_width() const { return sig_width_; }

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// Sigmoid outputs in (0,1)^p for one input (n x d).
  Vec forward(ConstMatRef x) const;
  Vec forward(ConstMatRef x, ForwardCache& cache) const;
  /// Accumulates dL/dparams into `grad_buffer` (laid out like params().values())
  /// given dL/d(sigmoid output). Throws GraphError if `cache` holds no forward pass.
  void backward(const ForwardCache& cache, const Vec& grad_output,
                std::span<double> grad_buffer) const;

  /// Pre-projection head outputs from the last forward through `cache`
  /// (sigma family only), exposed for wiring checks.
  std::vector<Mat> head_outputs(const ForwardCache& cache) const;
  /// Lifted signature matrix computed during the last forward.
  const Mat& signature_matrix(const ForwardCache& cache) const;
  /// Forward from a given signature matrix (sigma family), for wiring checks.
  std::vector<Mat> head_outputs_for(const Mat& signature_matrix) const;

  /// Preprocessed input: the configured normalisation applied to x.
  Mat normalize_input(ConstMatRef x) const;
  /// Per-channel mean and population std over every sample of `data`, used
  /// by InputNorm::dataset. train() calls this when no statistics are set.
  void fit_input_statistics(const pathsim::LabeledDataset& data);
  bool input_statistics_ready() const;

  nlohmann::ordered_json to_json() const;
  static Model from_json(const nlohmann::json& j);

  std::vector<std::string> label_names;  // optional metadata
  nlohmann::ordered_json training_metadata = nlohmann::ordered_json::object();

 private:
  void build(std::uint64_t init_seed);
  Mat front_end(ConstMatRef x, ForwardCache* cache) const;

  ArchitectureConfig cfg_;
  int n_ = 0;
  int d_ = 0;
  int aug_len_ = 0;
  int aug_channels_ = 0;
  int sig_width_ = 0;
  std::vector<int> prefix_rows_;
  std::vector<int> level_offsets_;
  nn::ParamStore params_;

  // parameter indices
  std::size_t conv_w_ = 0, conv_b_ = 0;
  std::vector<std::size_t> wq_, wk_, wv_;
  std::size_t wo_ = 0, wo_b_ = 0;
  std::vector<std::size_t> dense_w_, dense_b_;
};

struct ForwardCache {
  ForwardCache();
  ~ForwardCache();
  ForwardCache(ForwardCache&&) noexcept;
  ForwardCache& operator=(ForwardCache&&) noexcept;

  struct Impl;
  std::unique_ptr<Impl> impl;
};

std::size_t param_count(const Model& model);
Model build_model(const ArchitectureConfig& cfg, int n, int d, std::uint64_t init_seed = 0);

// ---------------------------------------------------------------------------
// Training and inference

struct TrainConfig {
  int epochs = 150;
  int batch_size = 60;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct EpochRecord {
  int epoch = 0;
  double train_rmse = 0.0;  // on range-normalised labels
  double val_rmse = 0.0;    // NaN when no validation set is given
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on rmse_loss over range-normalised labels.
std::vector<EpochRecord> train(Model& model, const pathsim::LabeledDataset& train_set,
                               const pathsim::LabeledDataset* val_set, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {});

/// Loss (range-normalised) and gradient over one batch, written to
/// model.params().grads(). Returns the loss.
double batch_loss_and_grad(Model& model, std::span<const Mat* const> inputs,
                           ConstMatRef normalized_targets, bool want_grad = true);

/// Estimates on the raw parameter scale, one row per input.
Mat predict(const Model& model, std::span<const Mat* const> inputs);
Mat predict(const Model& model, const std::vector<pathsim::Path>& paths);

void save_model(const Model& model, const std::string& file);
Model load_model(const std::string& file);

/// Output ranges derived from dataset sampling rules: H always (0, 1); uniform
/// rules their interval; beta (0, 1); discrete sets [min, max] widened by 10%
/// of the span on each side.
std::vector<OutputRange> ranges_for(const std::vector<pathsim::LabelRule>& rules);

}  // namespace sigma::models
