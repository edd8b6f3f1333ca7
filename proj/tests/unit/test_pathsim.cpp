#include "doctest.h"

#include "sigma/error.hpp"
#include "sigma/pathsim.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>

using namespace sigma;
using namespace sigma::pathsim;
using numerics::Rng;

namespace {

std::string temp_dir(const std::string& leaf) {
  const char* env = std::getenv("SIGMA_TEST_TMP");
  const auto dir = std::filesystem::path(env ? env : "/tmp/sigma-tests") / leaf;
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_SUITE("pathsim") {
  TEST_CASE("fgn covariance examples") {
    const Mat bm = fgn_covariance(0.5, 6, 1.0);
    CHECK(bm == Mat::Identity(5, 5));

    const Mat c = fgn_covariance(0.7, 10, 1.0);
    CHECK(c(0, 1) == doctest::Approx(0.5 * (std::pow(2.0, 1.4) - 2.0)).epsilon(1e-14));
    CHECK(c(0, 1) == doctest::Approx(0.31951).epsilon(1e-5));
    for (double h : {0.1, 0.37, 0.9}) {
      const Mat m = fgn_covariance(h, 30, 0.01);
      CHECK(m == m.transpose());
      CHECK(m(0, 0) == doctest::Approx(std::pow(0.01, 2 * h)).epsilon(1e-14));
    }
    CHECK_THROWS_AS(fgn_covariance(1.0, 10, 1.0), DomainError);
    CHECK_THROWS_AS(fgn_covariance(0.0, 10, 1.0), DomainError);
  }

  TEST_CASE("fgn covariances factor for the whole H grid") {
    for (int k = 1; k <= 19; ++k) {
      const double h = 0.05 * k;
      for (int n : {50, 500}) CHECK_NOTHROW(numerics::cholesky(fgn_covariance(h, n, 1.0 / (n - 1))));
    }
    const Mat l = numerics::cholesky(fgn_covariance(0.99, 50, 1.0));
    for (int i = 0; i < l.rows(); ++i) CHECK(l(i, i) > 0.0);
  }

  TEST_CASE("fgn covariance factors at n = 1500") {
    for (double h : {0.05, 0.5, 0.95}) CHECK_NOTHROW(fgn_cholesky_factor(h, 1500, 1.0 / 1499));
  }

  TEST_CASE("fbm path grid and start") {
    Rng rng(5);
    const Path p = simulate_fbm(rng, 0.3, 50, 2.0);
    CHECK(p.length() == 50);
    CHECK(p.values(0, 0) == 0.0);
    CHECK(p.times.front() == 0.0);
    CHECK(p.times.back() == doctest::Approx(2.0).epsilon(1e-15));
    for (std::size_t i = 1; i < p.times.size(); ++i) CHECK(p.times[i] > p.times[i - 1]);
    CHECK_THROWS_AS(simulate_fbm(rng, 1.2, 50), DomainError);
  }

  TEST_CASE("fbm terminal variance and covariance") {
    const int paths = 2000, n = 500;
    for (double h : {0.5, 0.8}) {
      double sum_tt = 0.0, sum_ht = 0.0;
      for (int i = 0; i < paths; ++i) {
        Rng rng = Rng::derive(17, i);
        const Path p = simulate_fbm(rng, h, n, 1.0);
        const double end = p.values(n - 1, 0);
        // grid point 0.5 is not on the grid for n = 500, use the nearest one
        const int mid = (n - 1) / 2;
        sum_tt += end * end;
        sum_ht += p.values(mid, 0) * end;
      }
      const double var = sum_tt / paths;
      CHECK(std::abs(var - 1.0) <= 0.05 * 1.0 + 3.0 * std::sqrt(2.0 / paths));
      if (h == 0.8) {
        const double s = static_cast<double>((n - 1) / 2) / (n - 1);
        const double expected = 0.5 * (std::pow(s, 1.6) + 1.0 - std::pow(1.0 - s, 1.6));
        CHECK(std::abs(sum_ht / paths - expected) <= 0.07 * expected);
      } else {
        CHECK(std::abs(var - 1.0) <= 0.05);
      }
    }
  }

  TEST_CASE("fou degenerate cases") {
    Rng rng(8);
    const Path fixed = simulate_fou(rng, 0.7, 100, 1.0, 0.5, 0.15, 0.0, 0.15);
    for (int i = 0; i < 100; ++i) CHECK(fixed.values(i, 0) == doctest::Approx(0.15).epsilon(1e-15));

    // with alpha = 0 the path is x0 + sigma B^H on the same driver
    Rng a(21), b(21);
    const Path fou = simulate_fou(a, 0.6, 80, 1.0, 0.0, 0.3, 0.2, 1.5);
    const Path fbm = simulate_fbm(b, 0.6, 80, 1.0);
    for (int i = 0; i < 80; ++i) CHECK(fou.values(i, 0) == doctest::Approx(1.5 + 0.2 * fbm.values(i, 0)).epsilon(1e-12));

    CHECK_THROWS_AS(simulate_fou(rng, 0.7, 100, 1.0, -1.0, 0.0, 0.1, 0.0), DomainError);
    CHECK_THROWS_AS(simulate_fou(rng, 1.7, 100, 1.0, 1.0, 0.0, 0.1, 0.0), DomainError);
  }

  TEST_CASE("fou mean reverts toward mu") {
    const double alpha = 0.5, mu = 0.15, sigma = 0.2, x0 = 0.01;
    const int paths = 2000, n = 500;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < paths; ++i) {
      Rng rng = Rng::derive(33, i);
      const double end = simulate_fou(rng, 0.7, n, 1.0, alpha, mu, sigma, x0).values(n - 1, 0);
      sum += end;
      sum2 += end * end;
    }
    const double mean = sum / paths;
    const double se = std::sqrt((sum2 / paths - mean * mean) / paths);
    const double expected = mu * (1.0 - std::exp(-alpha)) + x0 * std::exp(-alpha);
    CHECK(std::abs(mean - expected) <= 3.0 * se);
  }

  TEST_CASE("rheston constant without drift or noise") {
    Rng rng(4);
    const Path p = simulate_rheston(rng, 0.1, 200, 1.0, 0.0, 0.0, 0.3, 0.05);
    for (int i = 0; i < 200; ++i) CHECK(p.values(i, 0) == 0.05);
  }

  TEST_CASE("rheston deterministic Volterra solution") {
    const double h = 0.2, k1 = 0.8, theta = 0.3, x0 = 0.01;
    const int n = 120;
    Rng rng(6);
    const Path p = simulate_rheston(rng, h, n, 1.0, k1, 0.0, theta, x0);

    // left-point Volterra-Euler, written out directly
    const double dt = 1.0 / (n - 1);
    const double gamma = std::tgamma(h + 0.5);
    std::vector<double> x(n, x0);
    for (int i = 1; i < n; ++i) {
      double acc = x0;
      for (int j = 0; j < i; ++j) acc += std::pow((i - j) * dt, h - 0.5) / gamma * k1 * (theta - x[j]) * dt;
      x[i] = std::max(acc, 0.0);
    }
    for (int i = 0; i < n; ++i) CHECK(p.values(i, 0) == doctest::Approx(x[i]).epsilon(1e-11));
    for (int i = 1; i < n; ++i) CHECK(p.values(i, 0) >= p.values(i - 1, 0));
    CHECK(p.values(n - 1, 0) <= theta);
  }

  TEST_CASE("rheston paper setting stays finite and nonnegative") {
    for (int s = 0; s < 20; ++s) {
      Rng rng = Rng::derive(90, s);
      const Path p = simulate_rheston(rng, 0.1, 500, 1.0, 0.1, 0.03, 0.3, 0.01);
      CHECK(p.values.allFinite());
      CHECK(p.values.minCoeff() >= 0.0);
    }
    Rng rng(1);
    CHECK_THROWS_AS(simulate_rheston(rng, 0.5, 100, 1.0, 0.1, 0.03, 0.3, 0.01), DomainError);
    CHECK_THROWS_AS(simulate_rheston(rng, 0.6, 100, 1.0, 0.1, 0.03, 0.3, 0.01), DomainError);
  }

  TEST_CASE("sampling rules") {
    const auto set = SamplingRule::parse("set:0.14,0.23,0.56,0.67,0.89");
    CHECK(set.kind == SamplingRule::Kind::set);
    CHECK(set.lower() == 0.14);
    CHECK(set.upper() == 0.89);
    const auto uni = SamplingRule::parse("uniform:0,5");
    const auto beta = SamplingRule::parse("beta:1,9");
    Rng rng(12);
    double beta_mean = 0.0;
    for (int i = 0; i < 20000; ++i) {
      const double u = uni.sample(rng);
      CHECK((u > 0.0 && u < 5.0));
      const double b = beta.sample(rng);
      CHECK((b > 0.0 && b < 1.0));
      beta_mean += b / 20000;
    }
    CHECK(beta_mean == doctest::Approx(0.1).epsilon(0.05));  // mean of Beta(1,9)
    CHECK(SamplingRule::parse(uni.to_string()).values == uni.values);
    CHECK_THROWS_AS(SamplingRule::parse("normal:0,1"), ConfigError);
    CHECK_THROWS_AS(SamplingRule::parse("uniform:1,0"), ConfigError);
    CHECK_THROWS_AS(SamplingRule::parse("beta:2,3"), ConfigError);
  }

  TEST_CASE("discrete fbm labels come from the set") {
    DatasetSpec spec;
    spec.n = 100;
    spec.count = 3000;
    spec.labels = {{"H", SamplingRule::parse("set:0.14,0.23,0.56,0.67,0.89")}};
    const auto data = generate_dataset(1, spec);
    const std::set<double> allowed{0.14, 0.23, 0.56, 0.67, 0.89};
    std::set<double> seen;
    for (int i = 0; i < data.size(); ++i) {
      CHECK(allowed.count(data.labels(i, 0)) == 1);
      seen.insert(data.labels(i, 0));
    }
    CHECK(seen == allowed);
  }

  TEST_CASE("multi-parameter fou labels stay inside their ranges") {
    DatasetSpec spec;
    spec.process = Process::fou;
    spec.n = 50;
    spec.count = 200;
    spec.labels = {{"H", SamplingRule::parse("uniform:0.5,1")},
                   {"alpha", SamplingRule::parse("uniform:0,5")},
                   {"mu", SamplingRule::parse("uniform:0,0.5")},
                   {"sigma", SamplingRule::parse("uniform:0,3")}};
    const auto data = generate_dataset(2, spec);
    CHECK(data.label_dim() == 4);
    for (int i = 0; i < data.size(); ++i)
      for (int k = 0; k < 4; ++k) CHECK(spec.labels[k].rule.contains(data.labels(i, k)));
  }

  TEST_CASE("dataset generation is reproducible and order independent") {
    DatasetSpec spec;
    spec.n = 64;
    spec.count = 1;
    spec.labels = {{"H", SamplingRule::parse("uniform:0,1")}};
    const auto a = generate_dataset(42, spec);
    const auto b = generate_dataset(42, spec);
    CHECK(a.paths[0].values == b.paths[0].values);
    CHECK(a.labels == b.labels);

    spec.count = 10;
    const auto big = generate_dataset(42, spec);
    CHECK(big.paths[0].values == a.paths[0].values);
  }

  TEST_CASE("dataset files round trip") {
    DatasetSpec spec;
    spec.process = Process::rheston;
    spec.n = 30;
    spec.count = 5;
    spec.labels = {{"H", SamplingRule::parse("set:0.04,0.08,0.11,0.16,0.21")},
                   {"kappa1", SamplingRule::parse("uniform:0,1")}};
    const auto data = generate_dataset(3, spec);
    const auto prefix = temp_dir("dataset") + "/rh";
    write_dataset(data, prefix);
    const auto back = read_dataset(prefix);
    CHECK(back.process == Process::rheston);
    CHECK(back.n == 30);
    CHECK(back.seed == 3);
    CHECK(back.label_names() == data.label_names());
    CHECK(back.labels == data.labels);
    for (int i = 0; i < data.size(); ++i) CHECK(back.paths[i].values == data.paths[i].values);
    CHECK_THROWS_AS(read_dataset(prefix + "-missing"), IoError);
  }
}
