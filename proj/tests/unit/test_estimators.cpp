#include "doctest.h"

#include "sigma/error.hpp"
#include "sigma/estimators.hpp"
#include "sigma/pathsim.hpp"

#include <cmath>

using namespace sigma;
using namespace sigma::estimators;
using numerics::Rng;

namespace {

std::vector<double> fbm_series(double h, int n, std::uint64_t seed) {
  Rng rng(seed);
  const auto p = pathsim::simulate_fbm(rng, h, n, 1.0);
  return std::vector<double>(p.values.data(), p.values.data() + n);
}

double mean_estimate(double h, int n, int seeds, const WindowEstimator& est) {
  double acc = 0.0;
  for (int s = 0; s < seeds; ++s) acc += est(fbm_series(h, n, 1000 + s)).value;
  return acc / seeds;
}

}  // namespace

TEST_SUITE("estimators") {
  TEST_CASE("higuchi recovers H on fbm") {
    auto est = [](std::span<const double> x) { return higuchi(x, 20); };
    CHECK(std::abs(mean_estimate(0.7, 1000, 50, est) - 0.7) <= 0.1);
    CHECK(std::abs(mean_estimate(0.3, 1000, 50, est) - 0.3) <= 0.1);
  }

  TEST_CASE("higuchi preconditions") {
    const std::vector<double> flat(100, 3.0);
    CHECK_THROWS_AS(higuchi(flat), DegenerateSeries);
    const auto x = fbm_series(0.5, 100, 1);
    CHECK_THROWS_AS(higuchi(x, 26), DomainError);
    CHECK_THROWS_AS(higuchi(x, 1), DomainError);
    CHECK_THROWS_AS(higuchi(std::span(x).first(9)), DomainError);
    CHECK_NOTHROW(higuchi(x, 25));
  }

  TEST_CASE("persistent trend series gives H above one half") {
    // capacity-fade-like series: slow decay plus a little noise
    Rng rng(3);
    std::vector<double> x(168);
    for (int i = 0; i < 168; ++i) x[i] = 1.85 - 0.004 * i - 2e-6 * i * i + 0.004 * rng.normal();
    const auto est = higuchi(x);
    CHECK((est.value > 0.5 && est.value < 1.0));
  }

  TEST_CASE("rescaled range on white noise") {
    Rng rng(4);
    std::vector<double> noise(4096);
    for (auto& v : noise) v = rng.normal();
    const double h = rescaled_range(noise).value;
    CHECK((h > 0.45 && h < 0.65));
  }

  TEST_CASE("rescaled range on fbm increments") {
    auto est = [](std::span<const double> x) { return rescaled_range(x, {true, false}); };
    CHECK(std::abs(mean_estimate(0.8, 2048, 50, est) - 0.8) <= 0.12);
  }

  TEST_CASE("rescaled range degenerate input") {
    std::vector<double> ramp(256);
    for (int i = 0; i < 256; ++i) ramp[i] = 0.5 * i;
    CHECK_THROWS_AS(rescaled_range(ramp, {true, false}), DegenerateSeries);
    CHECK_THROWS_AS(rescaled_range(std::vector<double>(20, 1.0)), DomainError);
  }

  TEST_CASE("estimators are invariant to affine maps") {
    const auto x = fbm_series(0.6, 512, 7);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = -3.5 * x[i] + 12.0;
    CHECK(higuchi(y).raw == doctest::Approx(higuchi(x).raw).epsilon(1e-12));
    CHECK(rescaled_range(y).raw == doctest::Approx(rescaled_range(x).raw).epsilon(1e-12));
    CHECK(rescaled_range(y, {true, false}).raw ==
          doctest::Approx(rescaled_range(x, {true, false}).raw).epsilon(1e-12));
  }

  TEST_CASE("estimates are clamped to [0, 1]") {
    for (double h : {0.05, 0.5, 0.95}) {
      const auto x = fbm_series(h, 300, 11);
      for (auto e : {higuchi(x), rescaled_range(x), rescaled_range(x, {true, false})}) {
        CHECK((e.value >= 0.0 && e.value <= 1.0));
        CHECK(e.value == std::clamp(e.raw, 0.0, 1.0));
      }
    }
  }

  TEST_CASE("detrending removes a linear drift") {
    const auto base = fbm_series(0.5, 1024, 13);
    std::vector<double> inc(base.size() - 1), drifted(base.size() - 1);
    for (std::size_t i = 0; i + 1 < base.size(); ++i) {
      inc[i] = base[i + 1] - base[i];
      drifted[i] = inc[i] + 0.01 * static_cast<double>(i) / 1000.0;
    }
    const double plain = rescaled_range(inc, {false, true}).raw;
    CHECK(rescaled_range(drifted, {false, true}).raw == doctest::Approx(plain).epsilon(1e-9));
  }

  TEST_CASE("window counts") {
    CHECK(window_count(200, {100, 10}) == 11);
    CHECK(window_count(550, {100, 10}) == 46);
    CHECK(window_count(500, {100, 100}) == 5);
    for (int n = 10; n < 60; ++n)
      for (int w = 1; w <= 10; ++w)
        for (int s = 1; s <= w; ++s) CHECK(window_count(n, {w, s}) == (n - w) / s + 1);
    CHECK_THROWS_AS(window_count(50, {100, 10}), LengthMismatch);
    CHECK_THROWS_AS(window_count(500, {100, 0}), DomainError);
    CHECK_THROWS_AS(window_count(500, {100, 101}), DomainError);
  }

  TEST_CASE("sliding windows") {
    std::vector<double> x(550);
    Rng rng(5);
    for (auto& v : x) v = rng.normal();
    std::vector<int> starts;
    const auto rows = sliding_window_estimates(x, {100, 10}, [&](std::span<const double> w) {
      return HurstEstimate{w[0], w[0]};
    });
    REQUIRE(rows.size() == 46);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].start == static_cast<int>(10 * i));
      CHECK(rows[i].estimate == x[10 * i]);
      CHECK_FALSE(rows[i].flat);
    }
  }

  TEST_CASE("confidence intervals") {
    const std::vector<double> same(5, 0.7);
    const auto c = confidence_interval(same);
    CHECK(c.lo == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(c.hi == doctest::Approx(0.7).epsilon(1e-15));

    const std::vector<double> two{0.0, 1.0};
    const auto ci = confidence_interval(two);
    CHECK(ci.mean == 0.5);
    CHECK(ci.hi - ci.mean == doctest::Approx(1.959964 * std::sqrt(0.5) / std::sqrt(2.0)).epsilon(1e-14));
    CHECK(ci.hi - ci.mean == doctest::Approx(0.98).epsilon(1e-3));

    std::vector<double> four{0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0};
    std::vector<double> base{0.0, 1.0};
    // replicating the data shrinks the width roughly by 1 / sqrt(m)
    const double w2 = confidence_interval(base).hi - confidence_interval(base).lo;
    const double w8 = confidence_interval(four).hi - confidence_interval(four).lo;
    CHECK(w8 < w2 / 1.9);
    CHECK_THROWS_AS(confidence_interval(std::vector<double>{1.0}), DomainError);
  }
}
