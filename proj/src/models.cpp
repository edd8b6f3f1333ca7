#include "sigma/models.hpp"

#include "sigma/error.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

namespace sigma::models {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;
constexpr int kGradBlock = 4;  // samples per gradient accumulation block
constexpr int kTransformerConvChannels = 153;
constexpr int kTransformerHeadDim = 64;

struct VariantName {
  Variant variant;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::sigma, "sigma"},
    {Variant::sigsa, "sigsa"},
    {Variant::deepsignet, "deepsignet"},
    {Variant::transformer, "transformer-baseline"},
    {Variant::sigma_no_conv, "sigma-no-conv"},
    {Variant::sigma_no_mlp, "sigma-no-mlp"},
    {Variant::sigma_no_conv_no_mlp, "sigma-no-conv-no-mlp"},
};

}  // namespace

std::string to_string(Variant v) {
  for (const auto& vn : kVariantNames)
    if (vn.variant == v) return vn.name;
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (const auto& vn : kVariantNames)
    if (name == vn.name) return vn.variant;
  if (name == "transformer") return Variant::transformer;
  throw ConfigError("unknown variant '" + name + "'");
}

bool ArchitectureConfig::has_conv() const {
  return variant == Variant::sigma || variant == Variant::deepsignet ||
         variant == Variant::transformer || variant == Variant::sigma_no_mlp;
}

bool ArchitectureConfig::has_mlp() const {
  return variant == Variant::sigma || variant == Variant::deepsignet ||
         variant == Variant::transformer || variant == Variant::sigma_no_conv;
}

bool ArchitectureConfig::per_level_heads() const {
  return variant == Variant::sigma || variant == Variant::sigma_no_conv ||
         variant == Variant::sigma_no_mlp || variant == Variant::sigma_no_conv_no_mlp;
}

int ArchitectureConfig::resolved_conv_channels() const {
  if (conv_channels > 0) return conv_channels;
  return variant == Variant::transformer ? kTransformerConvChannels : 3;
}

int ArchitectureConfig::resolved_heads() const {
  if (heads > 0) return heads;
  if (per_level_heads()) return truncation;
  if (variant == Variant::transformer) return 3;
  return 1;
}

OutputRange ArchitectureConfig::range(int i) const {
  if (ranges.empty()) return {};
  return ranges.at(static_cast<std::size_t>(i));
}

ordered_json to_json(const ArchitectureConfig& cfg) {
  ordered_json j;
  j["variant"] = to_string(cfg.variant);
  j["conv_channels"] = cfg.conv_channels;
  j["kernel"] = cfg.kernel;
  j["conv_stride"] = cfg.conv_stride;
  j["truncation"] = cfg.truncation;
  j["lift_stride"] = cfg.lift_stride;
  j["heads"] = cfg.heads;
  j["head_dim"] = cfg.head_dim;
  j["mlp_widths"] = cfg.mlp_widths;
  j["outputs"] = cfg.outputs;
  auto& ranges = j["ranges"] = ordered_json::array();
  for (const auto& r : cfg.ranges) ranges.push_back({r.lo, r.hi});
  j["input_norm"] = cfg.input_norm == InputNorm::zscore    ? "zscore"
                    : cfg.input_norm == InputNorm::dataset ? "dataset"
                                                           : "none";
  if (!cfg.input_shift.empty()) {
    j["input_shift"] = cfg.input_shift;
    j["input_scale"] = cfg.input_scale;
  }
  return j;
}

ArchitectureConfig architecture_from_json(const json& j) {
  ArchitectureConfig cfg;
  cfg.variant = parse_variant(j.value("variant", std::string("sigma")));
  cfg.conv_channels = j.value("conv_channels", cfg.conv_channels);
  cfg.kernel = j.value("kernel", cfg.kernel);
  cfg.conv_stride = j.value("conv_stride", cfg.conv_stride);
  cfg.truncation = j.value("truncation", cfg.truncation);
  cfg.lift_stride = j.value("lift_stride", cfg.lift_stride);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.head_dim = j.value("head_dim", cfg.head_dim);
  if (j.contains("mlp_widths")) cfg.mlp_widths = j["mlp_widths"].get<std::vector<int>>();
  cfg.outputs = j.value("outputs", cfg.outputs);
  if (j.contains("ranges")) {
    for (const auto& r : j["ranges"]) cfg.ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
  }
  const std::string norm = j.value("input_norm", std::string("none"));
  if (norm == "zscore") cfg.input_norm = InputNorm::zscore;
  else if (norm == "dataset") cfg.input_norm = InputNorm::dataset;
  else if (norm == "none") cfg.input_norm = InputNorm::none;
  else throw ConfigError("input_norm must be none, zscore or dataset");
  if (j.contains("input_shift")) cfg.input_shift = j["input_shift"].get<std::vector<double>>();
  if (j.contains("input_scale")) cfg.input_scale = j["input_scale"].get<std::vector<double>>();
  return cfg;
}

namespace {

void check_ranges(const std::vector<OutputRange>& ranges, Eigen::Index size) {
  if (!ranges.empty() && static_cast<Eigen::Index>(ranges.size()) != size) {
    throw RangeError("expected " + std::to_string(size) + " output ranges, got " +
                     std::to_string(ranges.size()));
  }
  for (const auto& r : ranges) {
    if (!std::isfinite(r.lo) || !std::isfinite(r.hi) || !(r.lo < r.hi)) {
      throw RangeError("output range must be finite with lo < hi");
    }
  }
}

}  // namespace

Vec scale_outputs(const Vec& raw, const std::vector<OutputRange>& ranges) {
  check_ranges(ranges, raw.size());
  Vec out = raw;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto& r = ranges[i];
    out(static_cast<Eigen::Index>(i)) = r.lo + raw(static_cast<Eigen::Index>(i)) * (r.hi - r.lo);
  }
  return out;
}

Vec normalize_labels(const Vec& theta, const std::vector<OutputRange>& ranges) {
  check_ranges(ranges, theta.size());
  Vec out = theta;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto& r = ranges[i];
    out(static_cast<Eigen::Index>(i)) = (theta(static_cast<Eigen::Index>(i)) - r.lo) / (r.hi - r.lo);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ForwardCache::Impl {
  bool valid = false;
  Mat x;    // normalised input
  Mat aug;  // augmented stream
  signature::SignatureTape tape;
  Mat sig;  // lifted signature matrix
  nn::MultiHeadCache multihead;
  nn::AttentionCache single;
  Mat attended;
  Vec flat;
  nn::MlpCache mlp;
  Vec out;
};

ForwardCache::ForwardCache() : impl(std::make_unique<Impl>()) {}
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

Model::Model(const ArchitectureConfig& cfg, int n, int d, std::uint64_t init_seed)
    : cfg_(cfg), n_(n), d_(d) {
  build(init_seed);
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::Model(const Model&) = default;
Model& Model::operator=(const Model&) = default;

void Model::build(std::uint64_t init_seed) {
  const auto& c = cfg_;
  if (n_ < 2) throw ConfigError("input length n must be >= 2");
  if (d_ < 1) throw ConfigError("input channels d must be >= 1");
  if (c.outputs < 1) throw ConfigError("outputs must be >= 1");
  if (c.truncation < 1 || c.truncation > 6) throw ConfigError("truncation must lie in [1, 6]");
  if (c.heads < 0 || c.head_dim < 0 || c.lift_stride < 0 || c.conv_channels < 0) {
    throw ConfigError("heads, head_dim, lift_stride and conv_channels must be >= 0");
  }
  for (int w : c.mlp_widths)
    if (w < 1) throw ConfigError("mlp widths must be >= 1");
  if (c.input_shift.size() != c.input_scale.size() ||
      (!c.input_shift.empty() && static_cast<int>(c.input_shift.size()) != d_)) {
    throw ConfigError("input_shift and input_scale need one entry per channel");
  }
  for (double s : c.input_scale)
    if (!(s > 0.0)) throw ConfigError("input_scale entries must be positive");
  try {
    check_ranges(c.ranges, c.outputs);
  } catch (const RangeError& e) {
    throw ConfigError(e.what());
  }
  if (c.per_level_heads() && c.resolved_heads() != c.truncation) {
    throw ConfigError("per-level attention needs heads == truncation (" +
                      std::to_string(c.resolved_heads()) + " != " + std::to_string(c.truncation) +
                      ")");
  }

  numerics::Rng rng(init_seed);
  params_ = nn::ParamStore{};

  // Front end
  if (c.has_conv()) {
    if (c.kernel < 1 || c.conv_stride < 1) throw ConfigError("kernel and conv_stride must be >= 1");
    if (n_ < c.kernel) throw ConfigError("input length is shorter than the convolution kernel");
    const int ch = c.resolved_conv_channels();
    aug_len_ = (n_ - c.kernel) / c.conv_stride + 1;
    aug_channels_ = 1 + ch + d_;
    conv_w_ = params_.add("conv.weight", {ch, c.kernel, d_}, c.kernel * d_, &rng);
    conv_b_ = params_.add("conv.bias", {ch}, 0, &rng);
  } else {
    aug_len_ = n_;
    aug_channels_ = 1 + d_;
  }
  if (aug_len_ < 2) throw ConfigError("augmented sequence needs at least 2 samples");

  int flat_width = 0;
  if (c.variant == Variant::transformer) {
    const int h = c.resolved_heads();
    const int a = c.head_dim > 0 ? c.head_dim : kTransformerHeadDim;
    for (int i = 0; i < h; ++i) {
      const std::string p = "attn.head" + std::to_string(i + 1);
      wq_.push_back(params_.add(p + ".wq", {aug_channels_, a}, aug_channels_, &rng));
      wk_.push_back(params_.add(p + ".wk", {aug_channels_, a}, aug_channels_, &rng));
      wv_.push_back(params_.add(p + ".wv", {aug_channels_, a}, aug_channels_, &rng));
    }
    wo_ = params_.add("attn.out.weight", {h * a, aug_channels_}, h * a, &rng);
    wo_b_ = params_.add("attn.out.bias", {aug_channels_}, 0, &rng);
    flat_width = aug_channels_;
  } else {
    const long long width = [&] {
      long long total = 0, p = 1;
      for (int i = 1; i <= c.truncation; ++i) total += (p *= aug_channels_);
      return total;
    }();
    if (width > 2'000'000) throw ConfigError("signature width is too large for this configuration");
    sig_width_ = signature::sig_dim(aug_channels_, c.truncation);
    level_offsets_ = signature::level_offsets(aug_channels_, c.truncation);

    if (c.variant == Variant::deepsignet) {
      prefix_rows_ = {aug_len_ - 1};
    } else {
      int stride = c.lift_stride;
      if (stride == 0) {
        if (aug_len_ % 2 != 0) {
          throw ConfigError("half-length lifting needs an even augmented length, got " +
                            std::to_string(aug_len_));
        }
        stride = aug_len_ / 2;
      }
      if (2 * stride > aug_len_ || aug_len_ % stride != 0) {
        throw ConfigError("lift_stride " + std::to_string(stride) + " must divide the augmented length " +
                          std::to_string(aug_len_) + " and be at most half of it");
      }
      prefix_rows_ = signature::prefix_end_rows(aug_len_, stride);
    }
    const int m = static_cast<int>(prefix_rows_.size());

    if (c.per_level_heads()) {
      int concat = 0;
      for (int i = 1; i <= c.truncation; ++i) {
        const int w = level_offsets_[i + 1] - level_offsets_[i];
        const int a = c.head_dim > 0 ? c.head_dim : w;
        const std::string p = "attn.head" + std::to_string(i);
        wq_.push_back(params_.add(p + ".wq", {w, a}, w, &rng));
        wk_.push_back(params_.add(p + ".wk", {w, a}, w, &rng));
        wv_.push_back(params_.add(p + ".wv", {w, a}, w, &rng));
        concat += a;
      }
      wo_ = params_.add("attn.out.weight", {concat, sig_width_}, concat, &rng);
      wo_b_ = params_.add("attn.out.bias", {sig_width_}, 0, &rng);
      flat_width = m * sig_width_;
    } else if (c.variant == Variant::sigsa) {
      const int a = c.head_dim > 0 ? c.head_dim : sig_width_;
      const int h = c.resolved_heads();
      if (h != 1) throw ConfigError("sigsa uses a single attention head");
      wq_.push_back(params_.add("attn.head1.wq", {sig_width_, a}, sig_width_, &rng));
      wk_.push_back(params_.add("attn.head1.wk", {sig_width_, a}, sig_width_, &rng));
      wv_.push_back(params_.add("attn.head1.wv", {sig_width_, a}, sig_width_, &rng));
      flat_width = a;
    } else {  // deepsignet
      flat_width = sig_width_;
    }
  }

  // Read-out
  std::vector<int> widths;
  if (c.has_mlp()) widths = c.mlp_widths;
  widths.push_back(c.outputs);
  int in = flat_width;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::string p = c.has_mlp() ? "mlp." + std::to_string(l) : std::string("readout");
    dense_w_.push_back(params_.add(p + ".weight", {widths[l], in}, in, &rng));
    dense_b_.push_back(params_.add(p + ".bias", {widths[l]}, 0, &rng));
    in = widths[l];
  }
}

Mat Model::normalize_input(ConstMatRef x) const {
  if (cfg_.input_norm == InputNorm::none) return x;
  if (cfg_.input_norm == InputNorm::dataset) {
    if (!input_statistics_ready()) throw ConfigError("dataset input normalisation has not been fitted");
    Mat out(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      out.col(c) = (x.col(c).array() - cfg_.input_shift[c]) / cfg_.input_scale[c];
    return out;
  }
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double sd = std::max(std::sqrt(var), 1e-12);
  return (x.array() - mean) / sd;
}

bool Model::input_statistics_ready() const {
  return static_cast<int>(cfg_.input_shift.size()) == d_ && static_cast<int>(cfg_.input_scale.size()) == d_;
}

void Model::fit_input_statistics(const pathsim::LabeledDataset& data) {
  if (data.size() < 1 || data.d != d_) throw ShapeMismatch("input statistics need a non-empty dataset with d channels");
  std::vector<double> sum(d_, 0.0), sum_sq(d_, 0.0);
  double count = 0.0;
  for (const auto& p : data.paths) {
    for (int c = 0; c < d_; ++c) sum[c] += p.values.col(c).sum();
    count += static_cast<double>(p.values.rows());
  }
  cfg_.input_shift.assign(d_, 0.0);
  cfg_.input_scale.assign(d_, 1.0);
  for (int c = 0; c < d_; ++c) cfg_.input_shift[c] = sum[c] / count;
  // second pass about the mean for accuracy
  for (const auto& p : data.paths)
    for (int c = 0; c < d_; ++c) sum_sq[c] += (p.values.col(c).array() - cfg_.input_shift[c]).square().sum();
  for (int c = 0; c < d_; ++c) cfg_.input_scale[c] = std::max(std::sqrt(sum_sq[c] / count), 1e-12);
}

Mat Model::front_end(ConstMatRef x, ForwardCache* cache) const {
  if (!cfg_.has_conv()) return signature::time_augment(x);
  const int ch = cfg_.resolved_conv_channels();
  const auto w = params_.matrix(conv_w_);
  const Mat y = nn::conv1d_forward(x, w, params_.values(conv_b_), cfg_.kernel, cfg_.conv_stride);
  Mat aug(aug_len_, aug_channels_);
  const int centre = (cfg_.kernel + 1) / 2 - 1;
  for (int j = 0; j < aug_len_; ++j) {
    aug(j, 0) = static_cast<double>(j) / (aug_len_ - 1);
    aug.block(j, 1, 1, ch) = y.row(j);
    aug.block(j, 1 + ch, 1, d_) = x.row(j * cfg_.conv_stride + centre);
  }
  (void)cache;
  return aug;
}

Vec Model::forward(ConstMatRef x) const {
  ForwardCache cache;
  return forward(x, cache);
}

Vec Model::forward(ConstMatRef x, ForwardCache& cache) const {
  if (x.rows() != n_ || x.cols() != d_) {
    throw ShapeMismatch("model expects " + std::to_string(n_) + "x" + std::to_string(d_) +
                        " inputs, got " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }
  auto& c = *cache.impl;
  c.valid = false;
  c.x = normalize_input(x);
  c.aug = front_end(c.x, &cache);

  if (cfg_.variant == Variant::transformer) {
    std::vector<Mat> blocks(wq_.size(), c.aug);
    std::vector<nn::HeadWeights> heads;
    for (std::size_t h = 0; h < wq_.size(); ++h)
      heads.push_back({params_.matrix(wq_[h]), params_.matrix(wk_[h]), params_.matrix(wv_[h])});
    c.attended = nn::multihead_forward(blocks, heads, params_.matrix(wo_), params_.values(wo_b_),
                                       &c.multihead);
    c.flat = c.attended.colwise().mean().transpose();
  } else {
    signature::signature_stream(c.aug, cfg_.truncation, c.tape);
    const int m = static_cast<int>(prefix_rows_.size());
    c.sig.resize(m, sig_width_);
    for (int r = 0; r < m; ++r) c.sig.row(r) = c.tape.running.row(prefix_rows_[r]);

    if (cfg_.per_level_heads()) {
      std::vector<Mat> blocks;
      std::vector<nn::HeadWeights> heads;
      for (int i = 1; i <= cfg_.truncation; ++i) {
        blocks.emplace_back(c.sig.middleCols(level_offsets_[i], level_offsets_[i + 1] - level_offsets_[i]));
        const auto h = static_cast<std::size_t>(i - 1);
        heads.push_back({params_.matrix(wq_[h]), params_.matrix(wk_[h]), params_.matrix(wv_[h])});
      }
      c.attended = nn::multihead_forward(blocks, heads, params_.matrix(wo_),
                                         params_.values(wo_b_), &c.multihead);
      c.flat = Eigen::Map<const Vec>(c.attended.data(), c.attended.size());
    } else if (cfg_.variant == Variant::sigsa) {
      c.attended = nn::attention_forward(c.sig, params_.matrix(wq_[0]), params_.matrix(wk_[0]),
                                         params_.matrix(wv_[0]), &c.single);
      c.flat = c.attended.colwise().mean().transpose();
    } else {
      c.flat = c.sig.row(0).transpose();
    }
  }

  std::vector<nn::DenseLayer> layers;
  for (std::size_t l = 0; l < dense_w_.size(); ++l)
    layers.push_back({params_.matrix(dense_w_[l]), params_.values(dense_b_[l])});
  const Vec z = nn::mlp_forward(c.flat, layers, &c.mlp);
  c.out = nn::sigmoid_head(z);
  c.valid = true;
  return c.out;
}

void Model::backward(const ForwardCache& cache, const Vec& grad_output,
                     std::span<double> grad_buffer) const {
  const auto& c = *cache.impl;
  if (!c.valid) throw GraphError("backward called without a forward pass on this cache");
  if (grad_output.size() != cfg_.outputs) throw ShapeMismatch("backward: gradient has wrong width");
  if (grad_buffer.size() != params_.total_size()) {
    throw ShapeMismatch("backward: gradient buffer does not match the parameter count");
  }
  auto bias_grad = [&](std::size_t idx) {
    const auto& t = params_.tensors()[idx];
    return grad_buffer.subspan(t.offset, t.size);
  };

  const Vec grad_z = grad_output.array() * c.out.array() * (1.0 - c.out.array());

  std::vector<nn::DenseLayer> layers;
  std::vector<Eigen::Map<Mat>> dense_maps;
  dense_maps.reserve(dense_w_.size());
  for (std::size_t l = 0; l < dense_w_.size(); ++l) {
    layers.push_back({params_.matrix(dense_w_[l]), params_.values(dense_b_[l])});
    dense_maps.push_back(params_.grad_matrix(dense_w_[l], grad_buffer));
  }
  std::vector<nn::DenseGrads> dense_grads;
  for (std::size_t l = 0; l < dense_w_.size(); ++l)
    dense_grads.push_back({dense_maps[l], bias_grad(dense_b_[l])});
  const Vec grad_flat = nn::mlp_backward(c.mlp, layers, grad_z, dense_grads);

  // Attention stage
  std::vector<nn::HeadWeights> heads;
  std::vector<Eigen::Map<Mat>> head_maps;
  head_maps.reserve(3 * wq_.size());
  for (std::size_t h = 0; h < wq_.size(); ++h) {
    heads.push_back({params_.matrix(wq_[h]), params_.matrix(wk_[h]), params_.matrix(wv_[h])});
    head_maps.push_back(params_.grad_matrix(wq_[h], grad_buffer));
    head_maps.push_back(params_.grad_matrix(wk_[h], grad_buffer));
    head_maps.push_back(params_.grad_matrix(wv_[h], grad_buffer));
  }
  std::vector<nn::HeadGrads> head_grads;
  for (std::size_t h = 0; h < wq_.size(); ++h)
    head_grads.push_back({head_maps[3 * h], head_maps[3 * h + 1], head_maps[3 * h + 2]});

  const bool need_input_grad = cfg_.has_conv();
  Mat grad_aug;

  if (cfg_.variant == Variant::transformer) {
    const Eigen::Index len = c.attended.rows();
    Mat grad_att = grad_flat.transpose().replicate(len, 1) / static_cast<double>(len);
    auto grad_wo = params_.grad_matrix(wo_, grad_buffer);
    std::vector<Mat> grad_blocks;
    nn::multihead_backward(c.multihead, heads, params_.matrix(wo_), grad_att, head_grads, grad_wo,
                           bias_grad(wo_b_), need_input_grad ? &grad_blocks : nullptr);
    if (need_input_grad) {
      grad_aug = Mat::Zero(c.aug.rows(), c.aug.cols());
      for (const auto& g : grad_blocks) grad_aug += g;
    }
  } else {
    const int m = static_cast<int>(prefix_rows_.size());
    Mat grad_sig;
    if (cfg_.per_level_heads()) {
      const Eigen::Map<const Mat> grad_att(grad_flat.data(), m, sig_width_);
      auto grad_wo = params_.grad_matrix(wo_, grad_buffer);
      std::vector<Mat> grad_blocks;
      nn::multihead_backward(c.multihead, heads, params_.matrix(wo_), grad_att, head_grads,
                             grad_wo, bias_grad(wo_b_), need_input_grad ? &grad_blocks : nullptr);
      if (need_input_grad) {
        grad_sig.resize(m, sig_width_);
        for (int i = 1; i <= cfg_.truncation; ++i) {
          grad_sig.middleCols(level_offsets_[i], level_offsets_[i + 1] - level_offsets_[i]) =
              grad_blocks[static_cast<std::size_t>(i - 1)];
        }
      }
    } else if (cfg_.variant == Variant::sigsa) {
      const Mat grad_att = grad_flat.transpose().replicate(m, 1) / static_cast<double>(m);
      nn::attention_backward(c.single, heads[0].wq, heads[0].wk, heads[0].wv, grad_att,
                             head_grads[0].wq, head_grads[0].wk, head_grads[0].wv,
                             need_input_grad ? &grad_sig : nullptr);
    } else {
      grad_sig = grad_flat.transpose();
    }
    if (need_input_grad) {
      grad_aug = Mat::Zero(c.aug.rows(), c.aug.cols());
      signature::signature_stream_backward(c.tape, prefix_rows_, grad_sig, grad_aug);
    }
  }

  if (cfg_.has_conv()) {
    const int ch = cfg_.resolved_conv_channels();
    const Mat grad_y = grad_aug.middleCols(1, ch);
    auto grad_w = params_.grad_matrix(conv_w_, grad_buffer);
    nn::conv1d_backward(c.x, params_.matrix(conv_w_), cfg_.kernel, cfg_.conv_stride, grad_y, grad_w,
                        bias_grad(conv_b_), nullptr);
  }
}

std::vector<Mat> Model::head_outputs(const ForwardCache& cache) const {
  const auto& c = *cache.impl;
  if (!c.valid) throw GraphError("head_outputs: no forward pass on this cache");
  if (!cfg_.per_level_heads()) throw ConfigError("head_outputs: variant has no per-level heads");
  std::vector<Mat> out;
  for (const auto& h : c.multihead.heads) out.push_back(h.weights * h.v);
  return out;
}

const Mat& Model::signature_matrix(const ForwardCache& cache) const {
  if (!cache.impl->valid) throw GraphError("signature_matrix: no forward pass on this cache");
  return cache.impl->sig;
}

std::vector<Mat> Model::head_outputs_for(const Mat& sig) const {
  if (!cfg_.per_level_heads()) throw ConfigError("head_outputs_for: variant has no per-level heads");
  std::vector<Mat> out;
  for (int i = 1; i <= cfg_.truncation; ++i) {
    const auto h = static_cast<std::size_t>(i - 1);
    const Mat block = sig.middleCols(level_offsets_[i], level_offsets_[i + 1] - level_offsets_[i]);
    out.push_back(nn::attention_forward(block, params_.matrix(wq_[h]), params_.matrix(wk_[h]),
                                        params_.matrix(wv_[h])));
  }
  return out;
}

ordered_json Model::to_json() const {
  ordered_json j;
  j["format_version"] = kFormatVersion;
  j["architecture"] = models::to_json(cfg_);
  j["input"] = {{"n", n_}, {"d", d_}};
  j["label_names"] = label_names;
  auto& params = j["parameters"] = ordered_json::array();
  for (std::size_t i = 0; i < params_.tensors().size(); ++i) {
    const auto& t = params_.tensors()[i];
    const auto v = params_.values(i);
    params.push_back({{"name", t.name}, {"shape", t.shape}, {"values", std::vector<double>(v.begin(), v.end())}});
  }
  j["training"] = training_metadata;
  return j;
}

Model Model::from_json(const json& j) {
  const int version = j.value("format_version", 0);
  if (version != kFormatVersion) {
    throw IoError("unsupported model format version " + std::to_string(version));
  }
  const auto cfg = architecture_from_json(j.at("architecture"));
  Model model(cfg, j.at("input").at("n").get<int>(), j.at("input").at("d").get<int>(), 0);
  if (j.contains("label_names")) model.label_names = j["label_names"].get<std::vector<std::string>>();
  if (j.contains("training")) model.training_metadata = j["training"];
  const auto& params = j.at("parameters");
  if (params.size() != model.params_.tensors().size()) {
    throw IoError("model file lists " + std::to_string(params.size()) + " tensors, architecture has " +
                  std::to_string(model.params_.tensors().size()));
  }
  for (const auto& p : params) {
    const auto idx = model.params_.index(p.at("name").get<std::string>());
    const auto values = p.at("values").get<std::vector<double>>();
    auto dst = model.params_.values(idx);
    if (values.size() != dst.size() ||
        p.at("shape").get<std::vector<int>>() != model.params_.tensors()[idx].shape) {
      throw IoError("tensor '" + p.at("name").get<std::string>() + "' has the wrong shape");
    }
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return model;
}

std::size_t param_count(const Model& model) { return model.params().total_size(); }

Model build_model(const ArchitectureConfig& cfg, int n, int d, std::uint64_t init_seed) {
  return Model(cfg, n, d, init_seed);
}

// ---------------------------------------------------------------------------

namespace {

Mat batch_forward(const Model& model, std::span<const Mat* const> inputs,
                  std::vector<ForwardCache>* caches) {
  const int count = static_cast<int>(inputs.size());
  Mat preds(count, model.output_dim());
  if (caches && static_cast<int>(caches->size()) < count) caches->resize(count);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < count; ++i) {
    try {
      if (caches) preds.row(i) = model.forward(*inputs[i], (*caches)[i]).transpose();
      else preds.row(i) = model.forward(*inputs[i]).transpose();
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return preds;
}

double loss_and_grad_impl(Model& model, std::span<const Mat* const> inputs,
                          ConstMatRef targets, bool want_grad, std::vector<ForwardCache>& caches,
                          std::vector<std::vector<double>>& buffers, Mat* preds_out) {
  const int count = static_cast<int>(inputs.size());
  if (count == 0) throw ShapeMismatch("empty batch");
  if (targets.rows() != count || targets.cols() != model.output_dim()) {
    throw ShapeMismatch("targets do not match batch size and output width");
  }
  Mat preds = batch_forward(model, inputs, &caches);
  const double loss = nn::rmse_loss(preds, targets);
  if (want_grad) {
    const Mat grad = nn::rmse_loss_grad(preds, targets);
    const std::size_t total = model.params().total_size();
    const int blocks = (count + kGradBlock - 1) / kGradBlock;
    if (static_cast<int>(buffers.size()) < blocks) buffers.resize(blocks);
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (int b = 0; b < blocks; ++b) {
      try {
        auto& buf = buffers[b];
        buf.assign(total, 0.0);
        for (int i = b * kGradBlock; i < std::min(count, (b + 1) * kGradBlock); ++i)
          model.backward(caches[i], grad.row(i).transpose(), buf);
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
    auto g = model.params().grads();
    std::fill(g.begin(), g.end(), 0.0);
    for (int b = 0; b < blocks; ++b)
      for (std::size_t k = 0; k < total; ++k) g[k] += buffers[b][k];
  }
  if (preds_out) *preds_out = std::move(preds);
  return loss;
}

Mat normalized_labels(const pathsim::LabeledDataset& data, const std::vector<OutputRange>& ranges) {
  Mat out(data.size(), data.label_dim());
  for (int i = 0; i < data.size(); ++i)
    out.row(i) = normalize_labels(data.labels.row(i).transpose(), ranges).transpose();
  return out;
}

}  // namespace

double batch_loss_and_grad(Model& model, std::span<const Mat* const> inputs,
                           ConstMatRef normalized_targets, bool want_grad) {
  std::vector<ForwardCache> caches;
  std::vector<std::vector<double>> buffers;
  return loss_and_grad_impl(model, inputs, normalized_targets, want_grad, caches, buffers, nullptr);
}

std::vector<EpochRecord> train(Model& model, const pathsim::LabeledDataset& train_set,
                               const pathsim::LabeledDataset* val_set, const TrainConfig& cfg,
                               const EpochCallback& on_epoch) {
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("epochs and batch size must be >= 1");
  if (!(cfg.lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  auto check = [&](const pathsim::LabeledDataset& data, const char* what) {
    if (data.size() < 1) throw ShapeMismatch(std::string(what) + " set is empty");
    if (data.n != model.input_length() || data.d != model.input_channels() ||
        data.label_dim() != model.output_dim()) {
      throw ShapeMismatch(std::string(what) + " set shape (n, d, p) does not match the model");
    }
  };
  check(train_set, "training");
  if (val_set) check(*val_set, "validation");
  if (model.config().input_norm == InputNorm::dataset && !model.input_statistics_ready()) {
    model.fit_input_statistics(train_set);
  }

  const auto& ranges = model.config().ranges;
  const Mat targets = normalized_labels(train_set, ranges);
  Mat val_targets;
  std::vector<const Mat*> val_inputs;
  if (val_set) {
    val_targets = normalized_labels(*val_set, ranges);
    for (const auto& p : val_set->paths) val_inputs.push_back(&p.values);
  }

  const int count = train_set.size();
  const int p = model.output_dim();
  numerics::AdamState adam(model.params().total_size(), cfg.lr);
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> sq_err(count);
  std::vector<ForwardCache> caches;
  std::vector<std::vector<double>> buffers;
  std::vector<EpochRecord> history;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) {
      numerics::Rng rng = numerics::Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch));
      for (int i = count - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    }
    for (int start = 0; start < count; start += cfg.batch_size) {
      const int size = std::min(cfg.batch_size, count - start);
      std::vector<const Mat*> inputs(size);
      Mat batch_targets(size, p);
      for (int i = 0; i < size; ++i) {
        const int idx = order[start + i];
        inputs[i] = &train_set.paths[idx].values;
        batch_targets.row(i) = targets.row(idx);
      }
      Mat preds;
      const double loss =
          loss_and_grad_impl(model, inputs, batch_targets, true, caches, buffers, &preds);
      if (!std::isfinite(loss)) {
        throw NonFiniteLoss("non-finite training loss in epoch " + std::to_string(epoch));
      }
      for (int i = 0; i < size; ++i)
        sq_err[order[start + i]] = (preds.row(i) - batch_targets.row(i)).squaredNorm();
      numerics::adam_step(model.params().values(), model.params().grads(), adam);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    double total = 0.0;
    for (double e : sq_err) total += e;
    rec.train_rmse = std::sqrt(total / (static_cast<double>(count) * p));
    rec.val_rmse = std::numeric_limits<double>::quiet_NaN();
    if (val_set) {
      const Mat preds = batch_forward(model, val_inputs, nullptr);
      rec.val_rmse = nn::rmse_loss(preds, val_targets);
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

Mat predict(const Model& model, std::span<const Mat* const> inputs) {
  const Mat raw = batch_forward(model, inputs, nullptr);
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i)
    out.row(i) = scale_outputs(raw.row(i).transpose(), model.config().ranges).transpose();
  return out;
}

Mat predict(const Model& model, const std::vector<pathsim::Path>& paths) {
  std::vector<const Mat*> inputs;
  for (const auto& p : paths) inputs.push_back(&p.values);
  return predict(model, inputs);
}

void save_model(const Model& model, const std::string& file) {
  if (const auto parent = std::filesystem::path(file).parent_path(); !parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file);
  out << model.to_json().dump() << '\n';
}

Model load_model(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError(file + ": " + e.what());
  }
  return Model::from_json(j);
}

std::vector<OutputRange> ranges_for(const std::vector<pathsim::LabelRule>& rules) {
  std::vector<OutputRange> out;
  for (const auto& r : rules) {
    if (r.name == "H") {
      out.push_back({0.0, 1.0});
      continue;
    }
    double lo = r.rule.lower(), hi = r.rule.upper();
    if (r.rule.kind == pathsim::SamplingRule::Kind::set) {
      const double pad = hi > lo ? 0.1 * (hi - lo) : 0.5;
      lo -= pad;
      hi += pad;
    }
    out.push_back({lo, hi});
  }
  return out;
}

}  // namespace sigma::models
