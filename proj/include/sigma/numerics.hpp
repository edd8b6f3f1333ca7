#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace sigma {

/// Dense row-major matrix used throughout the library. Row-major keeps the
/// flat storage order of parameters and signature matrices identical to the
/// order written to model and dataset files.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using MatRef = Eigen::Ref<Mat>;
using ConstMatRef = Eigen::Ref<const Mat>;

namespace numerics {

/// xoshiro256** generator seeded through splitmix64.
///
/// The algorithm is fixed so that streams are reproducible across compilers
/// and platforms: uniforms take the top 53 bits of each output, normals use
/// Box-Muller on pairs of uniforms (the second variate is cached).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream for work unit `index` of a run seeded with `seed`.
  /// Depends only on (seed, index), never on how many draws were taken
  /// elsewhere.
  static Rng derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  double uniform();       // [0, 1)
  double uniform_open();  // (0, 1)
  double uniform(double lo, double hi);
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

Mat standard_normal_matrix(Rng& rng, int rows, int cols);

/// Lower-triangular L with L L^T = a. Unblocked column algorithm, no
/// pivoting. Throws NotPositiveDefinite on a non-positive pivot.
Mat cholesky(const Mat& a);

/// ln Gamma(x) for x > 0 via the Lanczos approximation (g = 7, 9 terms),
/// with the reflection formula below 0.5.
double log_gamma(double x);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(std::size_t size, double learning_rate)
      : m(size, 0.0), v(size, 0.0), lr(learning_rate) {}
};

/// One bias-corrected Adam update applied in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace numerics
}  // namespace sigma
