#pragma once

#include <functional>
#include <span>
#include <vector>

namespace sigma::estimators {

struct WindowSpec {
  int window = 100;
  int step = 10;

  /// Throws DomainError unless 1 <= step <= window and series_length >= window.
  void validate(int series_length) const;
};

struct HurstEstimate {
  double value = 0.0;  // clamped to [0, 1]
  double raw = 0.0;    // unclamped fit
};

/// Higuchi fractal-dimension estimator, H = 2 - D. k_max = 0 picks
/// min(20, n / 10) (at least 2).
HurstEstimate higuchi(std::span<const double> series, int k_max = 0);

struct RescaledRangeOptions {
  bool increments = false;  // difference the series first (level input)
  bool detrend = false;     // remove a least-squares line first
};

/// Classical R/S analysis over dyadic block lengths 8, 16, ... <= n.
HurstEstimate rescaled_range(std::span<const double> series, RescaledRangeOptions opts = {});

int window_count(int series_length, const WindowSpec& spec);

struct WindowEstimate {
  int start = 0;
  double estimate = 0.0;
  double raw = 0.0;
  bool flat = false;  // zero-variance window
};

using WindowEstimator = std::function<HurstEstimate(std::span<const double>)>;

/// Applies `estimator` to windows starting at 0, step, 2 step, ...
std::vector<WindowEstimate> sliding_window_estimates(std::span<const double> series,
                                                     const WindowSpec& spec,
                                                     const WindowEstimator& estimator);

struct ConfidenceInterval {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
  double lo = 0.0;
  double hi = 0.0;
};

/// mean +- 1.959964 s / sqrt(m). Requires at least two estimates.
ConfidenceInterval confidence_interval(std::span<const double> estimates);

}  // namespace sigma::estimators
