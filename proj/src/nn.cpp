#include "sigma/nn.hpp"

#include "sigma/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sigma::nn {

std::size_t ParamStore::add(const std::string& name, std::vector<int> shape, int fan_in,
                            numerics::Rng* rng) {
  for (const auto& t : tensors_) {
    if (t.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
  }
  std::size_t size = 1;
  for (int s : shape) {
    if (s < 1) throw ConfigError("parameter '" + name + "' has an empty dimension");
    size *= static_cast<std::size_t>(s);
  }
  ParamTensor t{name, std::move(shape), values_.size(), size};
  values_.resize(values_.size() + size, 0.0);
  grads_.resize(values_.size(), 0.0);
  if (fan_in > 0 && rng != nullptr) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < size; ++i) values_[t.offset + i] = rng->uniform(-bound, bound);
  }
  tensors_.push_back(std::move(t));
  return tensors_.size() - 1;
}

std::size_t ParamStore::index(const std::string& name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].name == name) return i;
  }
  throw ConfigError("no parameter named '" + name + "'");
}

std::span<double> ParamStore::values(std::size_t i) {
  return std::span<double>(values_).subspan(tensors_[i].offset, tensors_[i].size);
}

std::span<const double> ParamStore::values(std::size_t i) const {
  return std::span<const double>(values_).subspan(tensors_[i].offset, tensors_[i].size);
}

std::span<double> ParamStore::grads(std::size_t i) {
  return std::span<double>(grads_).subspan(tensors_[i].offset, tensors_[i].size);
}

namespace {

std::pair<Eigen::Index, Eigen::Index> matrix_shape(const ParamTensor& t) {
  const Eigen::Index rows = t.shape.empty() ? 1 : t.shape[0];
  return {rows, static_cast<Eigen::Index>(t.size) / rows};
}

}  // namespace

Eigen::Map<const Mat> ParamStore::matrix(std::size_t i) const {
  const auto [r, c] = matrix_shape(tensors_[i]);
  return Eigen::Map<const Mat>(values_.data() + tensors_[i].offset, r, c);
}

Eigen::Map<Mat> ParamStore::matrix(std::size_t i) {
  const auto [r, c] = matrix_shape(tensors_[i]);
  return Eigen::Map<Mat>(values_.data() + tensors_[i].offset, r, c);
}

Eigen::Map<Mat> ParamStore::grad_matrix(std::size_t i, std::span<double> buffer) const {
  const auto [r, c] = matrix_shape(tensors_[i]);
  return Eigen::Map<Mat>(buffer.data() + tensors_[i].offset, r, c);
}

void ParamStore::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

// ---------------------------------------------------------------------------

Mat conv1d_forward(ConstMatRef input, ConstMatRef weight, std::span<const double> bias, int kernel,
                   int stride) {
  const Eigen::Index n = input.rows(), d = input.cols();
  if (kernel < 1 || stride < 1) throw ShapeMismatch("conv1d: kernel and stride must be >= 1");
  if (n < kernel) throw ShapeMismatch("conv1d: input shorter than the kernel");
  if (weight.cols() != kernel * d || static_cast<Eigen::Index>(bias.size()) != weight.rows()) {
    throw ShapeMismatch("conv1d: weight/bias shape does not match kernel and channels");
  }
  const Eigen::Index out_len = (n - kernel) / stride + 1;
  Mat out(out_len, weight.rows());
  const Eigen::Map<const Vec> b(bias.data(), static_cast<Eigen::Index>(bias.size()));
  for (Eigen::Index i = 0; i < out_len; ++i) {
    // Rows are contiguous in row-major storage, so the k x d window is one vector.
    Vec window(kernel * d);
    for (int r = 0; r < kernel; ++r) window.segment(r * d, d) = input.row(i * stride + r).transpose();
    out.row(i) = (weight * window + b).transpose();
  }
  return out;
}

void conv1d_backward(ConstMatRef input, ConstMatRef weight, int kernel, int stride,
                     ConstMatRef grad_out, MatRef grad_weight, std::span<double> grad_bias,
                     Mat* grad_input) {
  const Eigen::Index d = input.cols();
  const Eigen::Index out_len = grad_out.rows();
  if (grad_input) grad_input->setZero(input.rows(), d);
  Vec window(kernel * d);
  for (Eigen::Index i = 0; i < out_len; ++i) {
    for (int r = 0; r < kernel; ++r) window.segment(r * d, d) = input.row(i * stride + r).transpose();
    const auto g = grad_out.row(i);
    grad_weight.noalias() += g.transpose() * window.transpose();
    for (Eigen::Index j = 0; j < g.size(); ++j) grad_bias[j] += g(j);
    if (grad_input) {
      const Vec gw = weight.transpose() * g.transpose();
      for (int r = 0; r < kernel; ++r)
        grad_input->row(i * stride + r) += gw.segment(r * d, d).transpose();
    }
  }
}

// ---------------------------------------------------------------------------

Mat attention_forward(ConstMatRef x, ConstMatRef wq, ConstMatRef wk, ConstMatRef wv,
                      AttentionCache* cache) {
  if (wq.rows() != x.cols() || wk.rows() != x.cols() || wv.rows() != x.cols() ||
      wq.cols() != wk.cols() || wq.cols() < 1) {
    throw ShapeMismatch("attention: projection shapes do not match the input width");
  }
  Mat q = x * wq;
  Mat k = x * wk;
  Mat v = x * wv;
  const double scale = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Mat w = (q * k.transpose()) * scale;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    auto row = w.row(i);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  Mat out = w * v;
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(w);
  }
  return out;
}

void attention_backward(const AttentionCache& c, ConstMatRef wq, ConstMatRef wk, ConstMatRef wv,
                        ConstMatRef grad_out, MatRef grad_wq, MatRef grad_wk, MatRef grad_wv,
                        Mat* grad_x) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  const Mat grad_v = c.weights.transpose() * grad_out;
  const Mat grad_w = grad_out * c.v.transpose();
  // softmax Jacobian, row by row
  Mat grad_s(grad_w.rows(), grad_w.cols());
  for (Eigen::Index i = 0; i < grad_w.rows(); ++i) {
    const double dot = grad_w.row(i).dot(c.weights.row(i));
    grad_s.row(i) = c.weights.row(i).array() * (grad_w.row(i).array() - dot);
  }
  grad_s *= scale;
  const Mat grad_q = grad_s * c.k;
  const Mat grad_k = grad_s.transpose() * c.q;
  grad_wq.noalias() += c.x.transpose() * grad_q;
  grad_wk.noalias() += c.x.transpose() * grad_k;
  grad_wv.noalias() += c.x.transpose() * grad_v;
  if (grad_x) {
    *grad_x = grad_q * wq.transpose();
    grad_x->noalias() += grad_k * wk.transpose();
    grad_x->noalias() += grad_v * wv.transpose();
  }
}

Mat multihead_forward(const std::vector<Mat>& blocks, const std::vector<HeadWeights>& heads,
                      ConstMatRef w_out, std::span<const double> bias, MultiHeadCache* cache) {
  if (blocks.size() != heads.size() || blocks.empty()) {
    throw ShapeMismatch("multihead: need one input block per head");
  }
  const Eigen::Index n = blocks.front().rows();
  Eigen::Index width = 0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    if (blocks[h].rows() != n) throw ShapeMismatch("multihead: heads disagree on sequence length");
    width += heads[h].wv.cols();
  }
  if (w_out.rows() != width) throw ShapeMismatch("multihead: output projection has wrong rows");
  if (!bias.empty() && static_cast<Eigen::Index>(bias.size()) != w_out.cols()) {
    throw ShapeMismatch("multihead: bias width differs from projection width");
  }
  Mat concat(n, width);
  if (cache) cache->heads.resize(heads.size());
  Eigen::Index col = 0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Mat out = attention_forward(blocks[h], heads[h].wq, heads[h].wk, heads[h].wv,
                                      cache ? &cache->heads[h] : nullptr);
    concat.middleCols(col, out.cols()) = out;
    col += out.cols();
  }
  Mat result = concat * w_out;
  if (!bias.empty()) {
    const Eigen::Map<const RowVec> b(bias.data(), static_cast<Eigen::Index>(bias.size()));
    result.rowwise() += b;
  }
  if (cache) cache->concat = std::move(concat);
  return result;
}

void multihead_backward(const MultiHeadCache& cache, const std::vector<HeadWeights>& heads,
                        ConstMatRef w_out, ConstMatRef grad_out,
                        std::vector<HeadGrads>& head_grads, MatRef grad_w_out,
                        std::span<double> grad_bias, std::vector<Mat>* grad_blocks) {
  grad_w_out.noalias() += cache.concat.transpose() * grad_out;
  if (!grad_bias.empty()) {
    for (Eigen::Index j = 0; j < grad_out.cols(); ++j) grad_bias[j] += grad_out.col(j).sum();
  }
  const Mat grad_concat = grad_out * w_out.transpose();
  if (grad_blocks) grad_blocks->resize(heads.size());
  Eigen::Index col = 0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Eigen::Index w = heads[h].wv.cols();
    const Mat g = grad_concat.middleCols(col, w);
    attention_backward(cache.heads[h], heads[h].wq, heads[h].wk, heads[h].wv, g,
                       head_grads[h].wq, head_grads[h].wk, head_grads[h].wv,
                       grad_blocks ? &(*grad_blocks)[h] : nullptr);
    col += w;
  }
}

// ---------------------------------------------------------------------------

Vec mlp_forward(const Vec& x, const std::vector<DenseLayer>& layers, MlpCache* cache) {
  if (cache) {
    cache->inputs.clear();
    cache->pre_activation.clear();
  }
  Vec h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.weight.cols() != h.size() ||
        static_cast<Eigen::Index>(layer.bias.size()) != layer.weight.rows()) {
      throw ShapeMismatch("mlp: layer " + std::to_string(l) + " does not chain");
    }
    if (cache) cache->inputs.push_back(h);
    Vec z = layer.weight * h +
            Eigen::Map<const Vec>(layer.bias.data(), static_cast<Eigen::Index>(layer.bias.size()));
    if (cache) cache->pre_activation.push_back(z);
    if (l + 1 < layers.size()) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

Vec mlp_backward(const MlpCache& cache, const std::vector<DenseLayer>& layers, const Vec& grad_out,
                 std::vector<DenseGrads>& grads) {
  Vec g = grad_out;
  for (std::size_t li = layers.size(); li-- > 0;) {
    if (li + 1 < layers.size()) {
      const Vec& z = cache.pre_activation[li];
      for (Eigen::Index i = 0; i < g.size(); ++i)
        if (z(i) <= 0.0) g(i) = 0.0;
    }
    grads[li].weight.noalias() += g * cache.inputs[li].transpose();
    for (Eigen::Index i = 0; i < g.size(); ++i) grads[li].bias[i] += g(i);
    g = layers[li].weight.transpose() * g;
  }
  return g;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vec sigmoid_head(const Vec& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

double rmse_loss(ConstMatRef pred, ConstMatRef target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols() || pred.size() == 0) {
    throw ShapeMismatch("rmse_loss: prediction and target shapes differ");
  }
  return std::sqrt((pred - target).squaredNorm() / static_cast<double>(pred.size()));
}

Mat rmse_loss_grad(ConstMatRef pred, ConstMatRef target) {
  const double loss = rmse_loss(pred, target);
  if (loss == 0.0) return Mat::Zero(pred.rows(), pred.cols());
  return (pred - target) / (static_cast<double>(pred.size()) * loss);
}

// ---------------------------------------------------------------------------

GradientCheckResult finite_difference_check(ParamStore& store, const std::function<double()>& loss,
                                            const std::function<void()>& analytic, double eps,
                                            numerics::Rng& rng, std::size_t per_tensor) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw DomainError("finite_difference_check: eps outside [1e-7, 1e-3]");
  store.zero_grads();
  analytic();
  const std::vector<double> grads(store.grads().begin(), store.grads().end());
  auto values = store.values();

  GradientCheckResult result;
  for (const auto& t : store.tensors()) {
    std::vector<std::size_t> coords(t.size);
    std::iota(coords.begin(), coords.end(), t.offset);
    if (coords.size() > per_tensor) {
      // Partial Fisher-Yates: a reproducible random subset.
      for (std::size_t i = 0; i < per_tensor; ++i) {
        const std::size_t j = i + rng.below(coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(per_tensor);
    }
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + eps;
      const double up = loss();
      values[c] = saved - eps;
      const double down = loss();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = grads[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_tensor = t.name;
      }
      ++result.coordinates_checked;
    }
  }
  return result;
}

}  // namespace sigma::nn
