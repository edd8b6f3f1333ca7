#include "sigma/estimators.hpp"

#include "sigma/error.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <string>

namespace sigma::estimators {

namespace {

constexpr double kZ95 = 1.959964;

/// Least-squares slope of y on x.
double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

HurstEstimate clamp(double raw) { return {std::clamp(raw, 0.0, 1.0), raw}; }

bool is_constant(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); });
}

}  // namespace

void WindowSpec::validate(int series_length) const {
  if (window < 1 || step < 1 || step > window) {
    throw DomainError("window spec needs 1 <= step <= window (got window=" + std::to_string(window) +
                      ", step=" + std::to_string(step) + ")");
  }
  if (series_length < window) {
    throw LengthMismatch("series of length " + std::to_string(series_length) +
                         " is shorter than the window " + std::to_string(window));
  }
}

HurstEstimate higuchi(std::span<const double> x, int k_max) {
  const int n = static_cast<int>(x.size());
  if (n < 10) throw DomainError("higuchi needs at least 10 samples");
  if (k_max == 0) k_max = std::max(2, std::min(20, n / 10));
  if (k_max < 2 || k_max > n / 4) {
    throw DomainError("higuchi k_max must lie in [2, n/4], got " + std::to_string(k_max));
  }
  if (is_constant(x)) throw DegenerateSeries("higuchi: series is constant");

  std::vector<double> log_inv_k, log_len;
  for (int k = 1; k <= k_max; ++k) {
    double total = 0.0;
    for (int m = 0; m < k; ++m) {
      const int steps = (n - 1 - m) / k;
      if (steps < 1) continue;
      double len = 0.0;
      for (int i = 1; i <= steps; ++i) len += std::abs(x[m + i * k] - x[m + (i - 1) * k]);
      total += len * (n - 1) / (static_cast<double>(steps) * k) / k;
    }
    const double mean_len = total / k;
    if (!(mean_len > 0.0)) throw DegenerateSeries("higuchi: zero curve length at k=" + std::to_string(k));
    log_inv_k.push_back(-std::log(static_cast<double>(k)));
    log_len.push_back(std::log(mean_len));
  }
  return clamp(2.0 - slope(log_inv_k, log_len));
}

HurstEstimate rescaled_range(std::span<const double> series, RescaledRangeOptions opts) {
  std::vector<double> x(series.begin(), series.end());
  if (opts.increments) {
    if (x.size() < 2) throw DomainError("rescaled_range: need at least 2 samples");
    for (std::size_t i = 0; i + 1 < x.size(); ++i) x[i] = x[i + 1] - x[i];
    x.pop_back();
  }
  const int n = static_cast<int>(x.size());
  if (n < 32) throw DomainError("rescaled_range needs at least 32 samples, got " + std::to_string(n));
  if (opts.detrend) {
    std::vector<double> t(x.size());
    for (int i = 0; i < n; ++i) t[i] = i;
    const double b = slope(t, x);
    double mean_x = 0.0;
    for (double v : x) mean_x += v;
    mean_x /= n;
    const double a = mean_x - b * (n - 1) / 2.0;
    for (int i = 0; i < n; ++i) x[i] -= a + b * i;
  }

  std::vector<double> log_len, log_rs;
  for (int len = 8; len <= n; len *= 2) {
    const int blocks = n / len;
    double rs_sum = 0.0;
    for (int b = 0; b < blocks; ++b) {
      const double* block = x.data() + static_cast<std::ptrdiff_t>(b) * len;
      double mean = 0.0;
      for (int i = 0; i < len; ++i) mean += block[i];
      mean /= len;
      double cum = 0.0, hi = 0.0, lo = 0.0, ss = 0.0;
      for (int i = 0; i < len; ++i) {
        const double dev = block[i] - mean;
        cum += dev;
        hi = std::max(hi, cum);
        lo = std::min(lo, cum);
        ss += dev * dev;
      }
      const double sd = std::sqrt(ss / len);
      if (!(sd > 0.0)) {
        throw DegenerateSeries("rescaled_range: block of length " + std::to_string(len) +
                               " has zero standard deviation");
      }
      rs_sum += (hi - lo) / sd;
    }
    log_len.push_back(std::log(static_cast<double>(len)));
    log_rs.push_back(std::log(rs_sum / blocks));
  }
  return clamp(slope(log_len, log_rs));
}

int window_count(int series_length, const WindowSpec& spec) {
  spec.validate(series_length);
  return (series_length - spec.window) / spec.step + 1;
}

std::vector<WindowEstimate> sliding_window_estimates(std::span<const double> series,
                                                     const WindowSpec& spec,
                                                     const WindowEstimator& estimator) {
  const int count = window_count(static_cast<int>(series.size()), spec);
  std::vector<WindowEstimate> out(count);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int w = 0; w < count; ++w) {
    try {
      const auto window = series.subspan(static_cast<std::size_t>(w) * spec.step, spec.window);
      const auto est = estimator(window);
      out[w] = {w * spec.step, est.value, est.raw, is_constant(window)};
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

ConfidenceInterval confidence_interval(std::span<const double> xs) {
  if (xs.size() < 2) throw DomainError("confidence_interval needs at least 2 estimates");
  const double m = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double v : xs) mean += v;
  mean /= m;
  double ss = 0.0;
  for (double v : xs) ss += (v - mean) * (v - mean);
  ConfidenceInterval ci;
  ci.mean = mean;
  ci.stddev = std::sqrt(ss / (m - 1.0));
  const double half = kZ95 * ci.stddev / std::sqrt(m);
  ci.lo = mean - half;
  ci.hi = mean + half;
  return ci;
}

}  // namespace sigma::estimators
