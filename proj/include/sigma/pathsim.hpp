#pragma once

#include "sigma/numerics.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace sigma::pathsim {

enum class Process { fbm, fou, rheston };

std::string to_string(Process p);
Process parse_process(const std::string& name);

/// One sampled realisation on a uniform grid over [0, T].
struct Path {
  std::vector<double> times;
  Mat values;  // n x d
  Process process = Process::fbm;
  bool time_augmented = false;  // set once a time channel has been prepended

  int length() const { return static_cast<int>(values.rows()); }
  int channels() const { return static_cast<int>(values.cols()); }
};

/// Parameters of all three processes. `x0` is the initial value for fOU and
/// rHeston; fBm always starts at zero. Defaults are the fixed settings used for
/// single-parameter Hurst datasets.
struct ProcessParams {
  double hurst = 0.5;
  double alpha = 0.5;
  double mu = 0.15;
  double sigma = 0.2;
  double kappa1 = 0.1;
  double kappa2 = 0.03;
  double theta = 0.3;
  double x0 = 0.01;

  /// Read/write by label name ("H", "alpha", "mu", "sigma", "kappa1",
  /// "kappa2", "theta", "x0").
  double get(const std::string& name) const;
  void set(const std::string& name, double value);
};

/// Increment covariance of fBm on a grid with spacing dt: an (n-1) x (n-1)
/// Toeplitz matrix.
Mat fgn_covariance(double hurst, int n, double dt);

/// Cholesky factor of fgn_covariance, memoised by (H, n, dt). The cache is
/// bounded; factors beyond the bound are computed but not retained.
std::shared_ptr<const Mat> fgn_cholesky_factor(double hurst, int n, double dt);

/// fBm increments L z for z standard normal (length n-1).
Vec fbm_increments(numerics::Rng& rng, double hurst, int n, double horizon);

Path simulate_fbm(numerics::Rng& rng, double hurst, int n, double horizon = 1.0);

/// Euler-Maruyama on dX = -alpha (X - mu) dt + sigma dB^H. alpha = 0 is accepted.
Path simulate_fou(numerics::Rng& rng, double hurst, int n, double horizon, double alpha, double mu,
                  double sigma, double x0);

/// Left-point Volterra-Euler scheme for the rough Heston variance with
/// kernel K_H(t) = t^(H-1/2) / Gamma(H+1/2); values are clipped at zero after
/// each step and the diffusion uses sqrt(max(X, 0)).
Path simulate_rheston(numerics::Rng& rng, double hurst, int n, double horizon, double kappa1,
                      double kappa2, double theta, double x0);

Path simulate(numerics::Rng& rng, Process process, const ProcessParams& params, int n,
              double horizon = 1.0);

// ---------------------------------------------------------------------------
// Labelled datasets

struct SamplingRule {
  enum class Kind { set, uniform, beta };
  Kind kind = Kind::uniform;
  std::vector<double> values;  // set members, (a, b) for uniform and beta

  /// "set:v1,v2,...", "uniform:a,b" or "beta:a,b".
  static SamplingRule parse(const std::string& text);
  std::string to_string() const;

  double sample(numerics::Rng& rng) const;
  double lower() const;  // support
  double upper() const;
  bool contains(double x) const;
};

struct LabelRule {
  std::string name;
  SamplingRule rule;
};

struct DatasetSpec {
  Process process = Process::fbm;
  int n = 100;
  int count = 1;
  double horizon = 1.0;
  std::vector<LabelRule> labels;  // H first by convention
  ProcessParams base;             // values for parameters that are not labels
};

struct LabeledDataset {
  Process process = Process::fbm;
  int n = 0;
  int d = 1;
  double horizon = 1.0;
  std::uint64_t seed = 0;
  std::vector<LabelRule> rules;
  ProcessParams base;
  std::vector<Path> paths;
  Mat labels;  // count x p

  int size() const { return static_cast<int>(paths.size()); }
  int label_dim() const { return static_cast<int>(labels.cols()); }
  std::vector<std::string> label_names() const;
};

/// Path i depends only on (seed, i): labels are drawn first from the derived
/// stream Rng::derive(seed, i), then the path.
LabeledDataset generate_dataset(std::uint64_t seed, const DatasetSpec& spec);

/// PREFIX.csv (`label:<name>,...,x0,...,x{n-1}`) plus PREFIX.json manifest.
void write_dataset(const LabeledDataset& data, const std::string& prefix);
LabeledDataset read_dataset(const std::string& prefix);

}  // namespace sigma::pathsim
