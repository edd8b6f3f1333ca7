#include "sigma/pathsim.hpp"

#include "sigma/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <tuple>

namespace sigma::pathsim {

using numerics::Rng;

std::string to_string(Process p) {
  switch (p) {
    case Process::fbm: return "fbm";
    case Process::fou: return "fou";
    case Process::rheston: return "rheston";
  }
  return "?";
}

Process parse_process(const std::string& name) {
  if (name == "fbm") return Process::fbm;
  if (name == "fou") return Process::fou;
  if (name == "rheston") return Process::rheston;
  throw ConfigError("unknown process '" + name + "' (expected fbm|fou|rheston)");
}

double ProcessParams::get(const std::string& name) const {
  if (name == "H") return hurst;
  if (name == "alpha") return alpha;
  if (name == "mu") return mu;
  if (name == "sigma") return sigma;
  if (name == "kappa1") return kappa1;
  if (name == "kappa2") return kappa2;
  if (name == "theta") return theta;
  if (name == "x0") return x0;
  throw ConfigError("unknown process parameter '" + name + "'");
}

void ProcessParams::set(const std::string& name, double value) {
  if (name == "H") hurst = value;
  else if (name == "alpha") alpha = value;
  else if (name == "mu") mu = value;
  else if (name == "sigma") sigma = value;
  else if (name == "kappa1") kappa1 = value;
  else if (name == "kappa2") kappa2 = value;
  else if (name == "theta") theta = value;
  else if (name == "x0") x0 = value;
  else throw ConfigError("unknown process parameter '" + name + "'");
}

namespace {

void check_hurst(double hurst) {
  if (!(hurst > 0.0 && hurst < 1.0)) {
    throw DomainError("Hurst parameter must lie in (0, 1), got " + std::to_string(hurst));
  }
}

void check_grid(int n, double horizon) {
  if (n < 2) throw DomainError("path length n must be >= 2");
  if (!(horizon > 0.0)) throw DomainError("time horizon T must be positive");
}

std::vector<double> uniform_grid(int n, double horizon) {
  std::vector<double> t(n);
  const double dt = horizon / (n - 1);
  for (int i = 0; i < n; ++i) t[i] = i * dt;
  t[n - 1] = horizon;
  return t;
}

struct CacheKey {
  std::uint64_t hurst_bits;
  int n;
  std::uint64_t dt_bits;
  auto operator<=>(const CacheKey&) const = default;
};

constexpr std::size_t kMaxCachedFactors = 32;

}  // namespace

Mat fgn_covariance(double hurst, int n, double dt) {
  check_hurst(hurst);
  if (n < 2) throw DomainError("fgn_covariance: n must be >= 2");
  if (!(dt > 0.0)) throw DomainError("fgn_covariance: dt must be positive");
  const int m = n - 1;
  const double two_h = 2.0 * hurst;
  const double scale = 0.5 * std::pow(dt, two_h);
  std::vector<double> gamma(m);
  for (int k = 0; k < m; ++k) {
    const double kk = k;
    gamma[k] = scale * (std::pow(kk + 1.0, two_h) - 2.0 * std::pow(kk, two_h) +
                        std::pow(std::abs(kk - 1.0), two_h));
  }
  Mat cov(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) cov(i, j) = gamma[std::abs(i - j)];
  return cov;
}

std::shared_ptr<const Mat> fgn_cholesky_factor(double hurst, int n, double dt) {
  static std::mutex mutex;
  static std::map<CacheKey, std::shared_ptr<const Mat>> cache;
  const CacheKey key{std::bit_cast<std::uint64_t>(hurst), n, std::bit_cast<std::uint64_t>(dt)};
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto factor = std::make_shared<const Mat>(numerics::cholesky(fgn_covariance(hurst, n, dt)));
  std::lock_guard lock(mutex);
  if (cache.size() < kMaxCachedFactors) cache.emplace(key, factor);
  return factor;
}

Vec fbm_increments(Rng& rng, double hurst, int n, double horizon) {
  check_hurst(hurst);
  check_grid(n, horizon);
  const auto factor = fgn_cholesky_factor(hurst, n, horizon / (n - 1));
  Vec z(n - 1);
  for (int i = 0; i < n - 1; ++i) z[i] = rng.normal();
  return factor->triangularView<Eigen::Lower>() * z;
}

Path simulate_fbm(Rng& rng, double hurst, int n, double horizon) {
  const Vec inc = fbm_increments(rng, hurst, n, horizon);
  Path path{uniform_grid(n, horizon), Mat::Zero(n, 1), Process::fbm};
  double acc = 0.0;
  for (int i = 1; i < n; ++i) {
    acc += inc[i - 1];
    path.values(i, 0) = acc;
  }
  return path;
}

Path simulate_fou(Rng& rng, double hurst, int n, double horizon, double alpha, double mu,
                  double sigma, double x0) {
  if (alpha < 0.0) throw DomainError("fOU: alpha must be >= 0");
  if (sigma < 0.0) throw DomainError("fOU: sigma must be >= 0");
  const Vec inc = fbm_increments(rng, hurst, n, horizon);
  const double dt = horizon / (n - 1);
  Path path{uniform_grid(n, horizon), Mat::Zero(n, 1), Process::fou};
  double x = x0;
  path.values(0, 0) = x;
  for (int i = 1; i < n; ++i) {
    x = x - alpha * (x - mu) * dt + sigma * inc[i - 1];
    path.values(i, 0) = x;
  }
  return path;
}

Path simulate_rheston(Rng& rng, double hurst, int n, double horizon, double kappa1, double kappa2,
                      double theta, double x0) {
  if (!(hurst > 0.0 && hurst < 0.5)) {
    throw DomainError("rHeston requires H in (0, 1/2), got " + std::to_string(hurst));
  }
  check_grid(n, horizon);
  if (kappa1 < 0.0 || kappa2 < 0.0 || theta < 0.0) {
    throw DomainError("rHeston: kappa1, kappa2 and theta must be non-negative");
  }
  if (x0 < 0.0) throw DomainError("rHeston: x0 must be >= 0");

  const double dt = horizon / (n - 1);
  const double sqrt_dt = std::sqrt(dt);
  const double norm = std::exp(-numerics::log_gamma(hurst + 0.5));
  // kernel[l] = K_H(l dt) for lags l >= 1; lag 0 never enters the left-point sum.
  std::vector<double> kernel(n);
  for (int l = 1; l < n; ++l) kernel[l] = std::pow(l * dt, hurst - 0.5) * norm;

  Path path{uniform_grid(n, horizon), Mat::Zero(n, 1), Process::rheston};
  std::vector<double> x(n), increment(n);
  x[0] = x0;
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      double acc = x0;
      for (int j = 0; j < i; ++j) acc += kernel[i - j] * increment[j];
      x[i] = std::max(acc, 0.0);
    }
    const double db = sqrt_dt * rng.normal();
    increment[i] = kappa1 * (theta - x[i]) * dt + kappa2 * std::sqrt(std::max(x[i], 0.0)) * db;
    path.values(i, 0) = x[i];
  }
  return path;
}

Path simulate(Rng& rng, Process process, const ProcessParams& p, int n, double horizon) {
  switch (process) {
    case Process::fbm: return simulate_fbm(rng, p.hurst, n, horizon);
    case Process::fou:
      return simulate_fou(rng, p.hurst, n, horizon, p.alpha, p.mu, p.sigma, p.x0);
    case Process::rheston:
      return simulate_rheston(rng, p.hurst, n, horizon, p.kappa1, p.kappa2, p.theta, p.x0);
  }
  throw ConfigError("unknown process");
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + item + "' in sampling rule");
    }
  }
  return out;
}

std::string format_number(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

}  // namespace

SamplingRule SamplingRule::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ConfigError("sampling rule '" + text + "' must look like kind:values");
  }
  const std::string kind = text.substr(0, colon);
  SamplingRule rule;
  rule.values = parse_number_list(text.substr(colon + 1));
  if (kind == "set") {
    rule.kind = Kind::set;
    if (rule.values.empty()) throw ConfigError("set rule needs at least one value");
  } else if (kind == "uniform") {
    rule.kind = Kind::uniform;
    if (rule.values.size() != 2 || !(rule.values[0] < rule.values[1])) {
      throw ConfigError("uniform rule needs a,b with a < b");
    }
  } else if (kind == "beta") {
    rule.kind = Kind::beta;
    if (rule.values.size() != 2 || !(rule.values[0] > 0) || !(rule.values[1] > 0)) {
      throw ConfigError("beta rule needs positive a,b");
    }
    if (rule.values[0] != 1.0 && rule.values[1] != 1.0) {
      throw ConfigError("beta rule supports a = 1 or b = 1 (inverse-CDF sampling)");
    }
  } else {
    throw ConfigError("unknown sampling rule kind '" + kind + "'");
  }
  return rule;
}

std::string SamplingRule::to_string() const {
  std::string out = kind == Kind::set ? "set:" : kind == Kind::uniform ? "uniform:" : "beta:";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_number(values[i]);
  }
  return out;
}

double SamplingRule::sample(Rng& rng) const {
  switch (kind) {
    case Kind::set: return values[rng.below(values.size())];
    case Kind::uniform: {
      // Open interval so that labels such as H or alpha never hit an endpoint.
      return values[0] + (values[1] - values[0]) * rng.uniform_open();
    }
    case Kind::beta: {
      const double a = values[0], b = values[1];
      const double u = rng.uniform_open();
      if (a == 1.0) return 1.0 - std::pow(u, 1.0 / b);
      return std::pow(u, 1.0 / a);
    }
  }
  return 0.0;
}

double SamplingRule::lower() const {
  switch (kind) {
    case Kind::set: return *std::min_element(values.begin(), values.end());
    case Kind::uniform: return values[0];
    case Kind::beta: return 0.0;
  }
  return 0.0;
}

double SamplingRule::upper() const {
  switch (kind) {
    case Kind::set: return *std::max_element(values.begin(), values.end());
    case Kind::uniform: return values[1];
    case Kind::beta: return 1.0;
  }
  return 0.0;
}

bool SamplingRule::contains(double x) const {
  if (kind == Kind::set) return std::find(values.begin(), values.end(), x) != values.end();
  return x >= lower() && x <= upper();
}

std::vector<std::string> LabeledDataset::label_names() const {
  std::vector<std::string> names;
  for (const auto& r : rules) names.push_back(r.name);
  return names;
}

LabeledDataset generate_dataset(std::uint64_t seed, const DatasetSpec& spec) {
  if (spec.count < 1) throw ConfigError("dataset count must be >= 1");
  if (spec.labels.empty()) throw ConfigError("dataset needs at least one label rule");
  for (const auto& l : spec.labels) (void)spec.base.get(l.name);  // validates names

  LabeledDataset data;
  data.process = spec.process;
  data.n = spec.n;
  data.d = 1;
  data.horizon = spec.horizon;
  data.seed = seed;
  data.rules = spec.labels;
  data.base = spec.base;
  data.paths.resize(spec.count);
  data.labels.resize(spec.count, static_cast<Eigen::Index>(spec.labels.size()));

  // Warm the Cholesky cache for discrete Hurst sets so workers only read it.
  for (const auto& l : spec.labels) {
    if (l.name == "H" && l.rule.kind == SamplingRule::Kind::set &&
        spec.process != Process::rheston) {
      for (double h : l.rule.values) {
        (void)fgn_cholesky_factor(h, spec.n, spec.horizon / (spec.n - 1));
      }
    }
  }

  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < spec.count; ++i) {
    try {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
      ProcessParams params = spec.base;
      for (std::size_t j = 0; j < spec.labels.size(); ++j) {
        const double value = spec.labels[j].rule.sample(rng);
        params.set(spec.labels[j].name, value);
        data.labels(i, static_cast<Eigen::Index>(j)) = value;
      }
      data.paths[i] = simulate(rng, spec.process, params, spec.n, spec.horizon);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return data;
}

void write_dataset(const LabeledDataset& data, const std::string& prefix) {
  if (const auto parent = std::filesystem::path(prefix + ".csv").parent_path(); !parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream csv(prefix + ".csv", std::ios::binary);
  if (!csv) throw IoError("cannot write " + prefix + ".csv");
  const auto names = data.label_names();
  for (std::size_t j = 0; j < names.size(); ++j) csv << "label:" << names[j] << ',';
  for (int i = 0; i < data.n; ++i) csv << 'x' << i << (i + 1 < data.n ? "," : "\n");
  csv << std::setprecision(17);
  for (int r = 0; r < data.size(); ++r) {
    for (int j = 0; j < data.label_dim(); ++j) csv << data.labels(r, j) << ',';
    const Mat& v = data.paths[r].values;
    for (int i = 0; i < data.n; ++i) csv << v(i, 0) << (i + 1 < data.n ? "," : "\n");
  }

  nlohmann::ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["process"] = to_string(data.process);
  manifest["n"] = data.n;
  manifest["d"] = data.d;
  manifest["T"] = data.horizon;
  manifest["seed"] = data.seed;
  manifest["count"] = data.size();
  auto& rules = manifest["sampling_rules"] = nlohmann::ordered_json::array();
  for (const auto& r : data.rules) rules.push_back({{"name", r.name}, {"rule", r.rule.to_string()}});
  auto& fixed = manifest["fixed_params"] = nlohmann::ordered_json::object();
  for (const char* name : {"alpha", "mu", "sigma", "kappa1", "kappa2", "theta", "x0"}) {
    const bool is_label = std::any_of(data.rules.begin(), data.rules.end(),
                                      [&](const LabelRule& r) { return r.name == name; });
    if (!is_label) fixed[name] = data.base.get(name);
  }
  std::ofstream json(prefix + ".json", std::ios::binary);
  if (!json) throw IoError("cannot write " + prefix + ".json");
  json << manifest.dump(2) << '\n';
}

LabeledDataset read_dataset(const std::string& prefix) {
  std::ifstream json(prefix + ".json");
  if (!json) throw IoError("cannot read " + prefix + ".json");
  nlohmann::json manifest;
  try {
    json >> manifest;
  } catch (const std::exception& e) {
    throw IoError(prefix + ".json: " + e.what());
  }

  LabeledDataset data;
  data.process = parse_process(manifest.at("process").get<std::string>());
  data.n = manifest.at("n").get<int>();
  data.d = manifest.value("d", 1);
  data.horizon = manifest.value("T", 1.0);
  data.seed = manifest.value("seed", std::uint64_t{0});
  for (const auto& r : manifest.at("sampling_rules")) {
    data.rules.push_back({r.at("name").get<std::string>(),
                          SamplingRule::parse(r.at("rule").get<std::string>())});
  }
  if (manifest.contains("fixed_params")) {
    for (const auto& [name, value] : manifest["fixed_params"].items()) {
      data.base.set(name, value.get<double>());
    }
  }
  if (data.d != 1) throw IoError("only single-channel datasets are supported");

  std::ifstream csv(prefix + ".csv");
  if (!csv) throw IoError("cannot read " + prefix + ".csv");
  std::string line;
  std::getline(csv, line);
  const int p = static_cast<int>(data.rules.size());
  const int expected_cols = p + data.n;
  std::vector<std::vector<double>> rows;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(expected_cols);
    const char* s = line.c_str();
    char* end = nullptr;
    while (*s) {
      row.push_back(std::strtod(s, &end));
      if (end == s) throw IoError(prefix + ".csv: malformed number");
      s = end;
      if (*s == ',') ++s;
      else if (*s == '\r') break;
      else if (*s) throw IoError(prefix + ".csv: malformed row");
    }
    if (static_cast<int>(row.size()) != expected_cols) {
      throw IoError(prefix + ".csv: row has " + std::to_string(row.size()) + " columns, expected " +
                    std::to_string(expected_cols));
    }
    rows.push_back(std::move(row));
  }
  data.labels.resize(static_cast<Eigen::Index>(rows.size()), p);
  data.paths.resize(rows.size());
  const double dt = data.horizon / (data.n - 1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int j = 0; j < p; ++j) data.labels(static_cast<Eigen::Index>(r), j) = rows[r][j];
    Path& path = data.paths[r];
    path.process = data.process;
    path.times.resize(data.n);
    path.values.resize(data.n, 1);
    for (int i = 0; i < data.n; ++i) {
      path.times[i] = i * dt;
      path.values(i, 0) = rows[r][p + i];
    }
    path.times[data.n - 1] = data.horizon;
  }
  return data;
}

}  // namespace sigma::pathsim
