#pragma once

#include "sigma/numerics.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sigma::nn {

// ---------------------------------------------------------------------------
// Parameters

/// A named slice of a ParamStore. Values and gradients live in the store's
/// flat buffers so that the optimiser sees one contiguous array.
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamStore {
 public:
  /// Registers a tensor; weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  /// biases (fan_in == 0) start at zero.
  std::size_t add(const std::string& name, std::vector<int> shape, int fan_in,
                  numerics::Rng* rng);

  const std::vector<ParamTensor>& tensors() const { return tensors_; }
  std::size_t index(const std::string& name) const;
  std::size_t total_size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> grads() { return grads_; }
  std::span<const double> grads() const { return grads_; }

  std::span<double> values(std::size_t i);
  std::span<const double> values(std::size_t i) const;
  std::span<double> grads(std::size_t i);

  /// Row-major matrix view of a 2-D (or flattened N-D: first dim x rest) tensor.
  Eigen::Map<const Mat> matrix(std::size_t i) const;
  Eigen::Map<Mat> matrix(std::size_t i);
  /// Same view into an external gradient buffer laid out like the store.
  Eigen::Map<Mat> grad_matrix(std::size_t i, std::span<double> buffer) const;

  void zero_grads();

 private:
  std::vector<ParamTensor> tensors_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

// ---------------------------------------------------------------------------
// Layers. Weight layouts are row-major:
//   conv weight  [out_channels, kernel, in_channels] (viewed as out x (kernel*in))
//   dense weight [out, in]
//   attention projections [in, d_att]
//   output projection [sum of head widths, out]

/// Valid cross-correlation with stride; output length floor((n - k) / s) + 1.
Mat conv1d_forward(ConstMatRef input, ConstMatRef weight, std::span<const double> bias, int kernel,
                   int stride);
void conv1d_backward(ConstMatRef input, ConstMatRef weight, int kernel, int stride,
                     ConstMatRef grad_out, MatRef grad_weight, std::span<double> grad_bias,
                     Mat* grad_input);

struct AttentionCache {
  Mat x, q, k, v, weights;
};

/// softmax(Q K^T / sqrt(d_att)) V with Q = X W_Q, K = X W_K, V = X W_V. Row-wise
/// softmax with max subtraction.
Mat attention_forward(ConstMatRef x, ConstMatRef wq, ConstMatRef wk, ConstMatRef wv,
                      AttentionCache* cache = nullptr);
void attention_backward(const AttentionCache& cache, ConstMatRef wq, ConstMatRef wk,
                        ConstMatRef wv, ConstMatRef grad_out, MatRef grad_wq, MatRef grad_wk,
                        MatRef grad_wv, Mat* grad_x);

struct HeadWeights {
  ConstMatRef wq, wk, wv;
};

struct MultiHeadCache {
  std::vector<AttentionCache> heads;
  Mat concat;
};

/// Concat(head_1, ..., head_h) W_O (+ bias when non-empty). Head i attends over
/// its own input block; all blocks share the sequence length.
Mat multihead_forward(const std::vector<Mat>& blocks, const std::vector<HeadWeights>& heads,
                      ConstMatRef w_out, std::span<const double> bias,
                      MultiHeadCache* cache = nullptr);

struct HeadGrads {
  MatRef wq, wk, wv;
};

void multihead_backward(const MultiHeadCache& cache, const std::vector<HeadWeights>& heads,
                        ConstMatRef w_out, ConstMatRef grad_out,
                        std::vector<HeadGrads>& head_grads, MatRef grad_w_out,
                        std::span<double> grad_bias, std::vector<Mat>* grad_blocks);

struct DenseLayer {
  ConstMatRef weight;            // out x in
  std::span<const double> bias;  // out
};

struct MlpCache {
  std::vector<Vec> inputs;       // input to each layer
  std::vector<Vec> pre_activation;
};

/// Alternating affine maps and ReLU; the final affine map has no activation.
Vec mlp_forward(const Vec& x, const std::vector<DenseLayer>& layers, MlpCache* cache = nullptr);

struct DenseGrads {
  MatRef weight;
  std::span<double> bias;
};

Vec mlp_backward(const MlpCache& cache, const std::vector<DenseLayer>& layers, const Vec& grad_out,
                 std::vector<DenseGrads>& grads);

double sigmoid(double x);
Vec sigmoid_head(const Vec& x);

/// sqrt(mean of squared differences over all entries).
double rmse_loss(ConstMatRef pred, ConstMatRef target);
/// dL/dpred for rmse_loss (zero when the loss is zero).
Mat rmse_loss_grad(ConstMatRef pred, ConstMatRef target);

// ---------------------------------------------------------------------------

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::string worst_tensor;
};

/// Compares analytic gradients against central differences.
///
/// `loss` evaluates the scalar loss at the store's current values;
/// `analytic` must fill store.grads(). At least `per_tensor` coordinates of
/// every tensor are checked (all of them for small tensors). Relative error is
/// |a - f| / max(|a|, |f|, 1e-6), so coordinates with a vanishing
/// gradient compare absolutely.
GradientCheckResult finite_difference_check(ParamStore& store, const std::function<double()>& loss,
                                            const std::function<void()>& analytic, double eps,
                                            numerics::Rng& rng, std::size_t per_tensor = 50);

}  // namespace sigma::nn
