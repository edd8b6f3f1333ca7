#include "sigma/signature.hpp"

#include "sigma/error.hpp"

#include <string>

namespace sigma::signature {

namespace {

void check_depth(int depth) {
  if (depth < 1) throw DomainError("signature depth must be >= 1");
}

// Level-k tensor of the exponential of one segment, in place at s:
// S_k <- S_k + sum_{j=1..k} S_{k-j} (x) delta^{(x)j} / j!, evaluated by
// Horner's scheme from the top level down so lower levels are still the old ones.
void multiply_segment_exp(double* s, const double* delta, int d, int depth, const int* off,
                          std::vector<double>& acc, std::vector<double>& next) {
  for (int k = depth; k >= 1; --k) {
    acc.assign(delta, delta + d);
    const double first = 1.0 / k;
    for (double& x : acc) x *= first;
    int width = d;
    for (int j = 1; j < k; ++j) {
      const double* sj = s + off[j];
      const double scale = 1.0 / (k - j);
      next.resize(static_cast<std::size_t>(width) * d);
      for (int a = 0; a < width; ++a) {
        const double base = (acc[a] + sj[a]) * scale;
        double* out = next.data() + static_cast<std::size_t>(a) * d;
        for (int c = 0; c < d; ++c) out[c] = base * delta[c];
      }
      acc.swap(next);
      width *= d;
    }
    double* sk = s + off[k];
    for (int a = 0; a < width; ++a) sk[a] += acc[a];
  }
}

int ipow(int base, int exp) {
  int r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

}  // namespace

int sig_dim(int channels, int depth) {
  if (channels < 1) throw DomainError("signature channel count must be >= 1");
  check_depth(depth);
  if (channels == 1) return depth;
  int total = 0, p = 1;
  for (int i = 1; i <= depth; ++i) {
    p *= channels;
    total += p;
  }
  return total;
}

std::vector<int> level_offsets(int channels, int depth) {
  std::vector<int> off(depth + 2, 0);
  int p = 1;
  for (int i = 1; i <= depth; ++i) {
    off[i + 1] = off[i] + (p *= channels);
  }
  return off;
}

TruncatedSignature TruncatedSignature::identity(int channels, int depth) {
  return {channels, depth, std::vector<double>(sig_dim(channels, depth), 0.0)};
}

std::span<const double> TruncatedSignature::level(int i) const {
  const auto off = level_offsets(channels, depth);
  return std::span<const double>(data).subspan(off[i], off[i + 1] - off[i]);
}

std::span<double> TruncatedSignature::level(int i) {
  const auto off = level_offsets(channels, depth);
  return std::span<double>(data).subspan(off[i], off[i + 1] - off[i]);
}

Mat time_augment(ConstMatRef values) {
  const Eigen::Index n = values.rows();
  if (n < 2) throw DomainError("time_augment: path needs at least 2 samples");
  Mat out(n, values.cols() + 1);
  for (Eigen::Index i = 0; i < n; ++i) out(i, 0) = static_cast<double>(i) / (n - 1);
  out.rightCols(values.cols()) = values;
  return out;
}

pathsim::Path time_augment(const pathsim::Path& path) {
  if (path.time_augmented) {
    throw ConfigError("time_augment: path already carries a time channel");
  }
  pathsim::Path out = path;
  out.values = time_augment(path.values);
  out.time_augmented = true;
  return out;
}

TruncatedSignature segment_signature(std::span<const double> delta, int depth) {
  check_depth(depth);
  const int d = static_cast<int>(delta.size());
  TruncatedSignature sig = TruncatedSignature::identity(d, depth);
  const auto off = level_offsets(d, depth);
  // level_i = level_{i-1} (x) delta / i
  for (int c = 0; c < d; ++c) sig.data[off[1] + c] = delta[c];
  for (int i = 2; i <= depth; ++i) {
    const int prev = off[i + 1 - 1] - off[i - 1];
    for (int a = 0; a < prev; ++a)
      for (int c = 0; c < d; ++c)
        sig.data[off[i] + a * d + c] = sig.data[off[i - 1] + a] * delta[c] / i;
  }
  return sig;
}

TruncatedSignature chen_product(const TruncatedSignature& a, const TruncatedSignature& b) {
  if (a.channels != b.channels || a.depth != b.depth) {
    throw ShapeMismatch("chen_product: signatures differ in channels or depth");
  }
  const int d = a.channels, depth = a.depth;
  const auto off = level_offsets(d, depth);
  TruncatedSignature c = TruncatedSignature::identity(d, depth);
  for (int k = 1; k <= depth; ++k) {
    double* ck = c.data.data() + off[k];
    // i = k, j = 0 and i = 0, j = k
    for (int x = 0; x < off[k + 1] - off[k]; ++x) ck[x] = a.data[off[k] + x] + b.data[off[k] + x];
    for (int i = 1; i < k; ++i) {
      const int j = k - i;
      const int wi = ipow(d, i), wj = ipow(d, j);
      for (int x = 0; x < wi; ++x) {
        const double ax = a.data[off[i] + x];
        for (int y = 0; y < wj; ++y) ck[x * wj + y] += ax * b.data[off[j] + y];
      }
    }
  }
  return c;
}

void signature_stream(ConstMatRef path, int depth, SignatureTape& tape) {
  check_depth(depth);
  const int n = static_cast<int>(path.rows());
  const int d = static_cast<int>(path.cols());
  if (n < 1 || d < 1) throw ShapeMismatch("signature: empty path");
  tape.channels = d;
  tape.depth = depth;
  tape.offsets = level_offsets(d, depth);
  const int dim = tape.offsets[depth + 1];
  tape.running.resize(n, dim);
  tape.running.row(0).setZero();
  tape.increments.resize(std::max(n - 1, 0), d);
  std::vector<double> acc, next, delta(d);
  for (int t = 1; t < n; ++t) {
    for (int c = 0; c < d; ++c) delta[c] = path(t, c) - path(t - 1, c);
    tape.increments.row(t - 1) = Eigen::Map<const RowVec>(delta.data(), d);
    tape.running.row(t) = tape.running.row(t - 1);
    multiply_segment_exp(tape.running.row(t).data(), delta.data(), d, depth,
                         tape.offsets.data(), acc, next);
  }
}

TruncatedSignature path_signature(ConstMatRef path, int depth) {
  if (path.rows() < 2) throw DomainError("path_signature: path needs at least 2 samples");
  SignatureTape tape;
  signature_stream(path, depth, tape);
  TruncatedSignature sig{tape.channels, depth, {}};
  const auto last = tape.running.row(tape.running.rows() - 1);
  sig.data.assign(last.data(), last.data() + last.size());
  return sig;
}

namespace {

void check_stride(int n, int stride) {
  if (stride < 1 || 2 * stride > n) {
    throw StrideError("lift: stride " + std::to_string(stride) + " outside [1, " +
                      std::to_string(n / 2) + "]");
  }
  if (n % stride != 0) {
    throw StrideError("lift: path length " + std::to_string(n) + " is not divisible by stride " +
                      std::to_string(stride));
  }
}

}  // namespace

std::vector<Mat> lift(ConstMatRef path, int stride) {
  check_stride(static_cast<int>(path.rows()), stride);
  const int n = static_cast<int>(path.rows());
  std::vector<Mat> prefixes;
  for (int len = stride; len <= n; len += stride) prefixes.emplace_back(path.topRows(len));
  return prefixes;
}

std::vector<int> prefix_end_rows(int n, int stride) {
  if (stride < 1 || n % stride != 0) {
    throw StrideError("prefix rows: length " + std::to_string(n) +
                      " is not divisible by stride " + std::to_string(stride));
  }
  std::vector<int> rows;
  for (int len = stride; len <= n; len += stride) rows.push_back(len - 1);
  return rows;
}

LiftedSignatureMatrix lifted_signature_matrix(ConstMatRef path, int depth, int stride) {
  const int n = static_cast<int>(path.rows());
  check_stride(n, stride);
  SignatureTape tape;
  signature_stream(path, depth, tape);
  LiftedSignatureMatrix out;
  out.channels = tape.channels;
  out.depth = depth;
  const auto rows = prefix_end_rows(n, stride);
  out.matrix.resize(static_cast<Eigen::Index>(rows.size()), tape.running.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.matrix.row(static_cast<Eigen::Index>(r)) = tape.running.row(rows[r]);
    out.prefix_lengths.push_back(rows[r] + 1);
  }
  for (int i = 1; i <= depth; ++i) {
    out.level_spans.emplace_back(tape.offsets[i], tape.offsets[i + 1] - tape.offsets[i]);
  }
  return out;
}

void signature_stream_backward(const SignatureTape& tape, std::span<const int> rows,
                               ConstMatRef grad_rows, MatRef grad_path) {
  const int d = tape.channels, depth = tape.depth;
  const int n = static_cast<int>(tape.running.rows());
  const int dim = static_cast<int>(tape.running.cols());
  if (grad_rows.rows() != static_cast<Eigen::Index>(rows.size()) || grad_rows.cols() != dim) {
    throw ShapeMismatch("signature backward: gradient rows do not match the selected prefixes");
  }
  if (grad_path.rows() != n || grad_path.cols() != d) {
    throw ShapeMismatch("signature backward: path gradient has the wrong shape");
  }
  const int* off = tape.offsets.data();

  // External gradients land on the running row they were read from.
  std::vector<double> g(dim, 0.0), g_prev(dim);
  std::vector<int> pending(rows.begin(), rows.end());
  std::vector<std::vector<double>> powers(depth + 1);  // E_j = delta^{(x)j} / j!
  std::vector<std::vector<double>> grad_powers(depth + 1);
  std::vector<double> grad_delta(d);

  auto add_external = [&](int t) {
    for (std::size_t r = 0; r < pending.size(); ++r) {
      if (pending[r] == t) {
        const auto src = grad_rows.row(static_cast<Eigen::Index>(r));
        for (int x = 0; x < dim; ++x) g[x] += src(x);
      }
    }
  };

  for (int t = n - 1; t >= 1; --t) {
    add_external(t);
    const double* old = tape.running.row(t - 1).data();
    const double* delta = tape.increments.row(t - 1).data();

    powers[1].assign(delta, delta + d);
    for (int j = 2; j <= depth; ++j) {
      const auto& prev = powers[j - 1];
      auto& cur = powers[j];
      cur.resize(prev.size() * d);
      for (std::size_t a = 0; a < prev.size(); ++a)
        for (int c = 0; c < d; ++c) cur[a * d + c] = prev[a] * delta[c] / j;
    }
    for (int j = 1; j <= depth; ++j) grad_powers[j].assign(powers[j].size(), 0.0);

    // new_k = sum_{j=0..k} old_{k-j} (x) E_j with old_0 = E_0 = 1.
    std::fill(g_prev.begin(), g_prev.end(), 0.0);
    for (int k = 1; k <= depth; ++k) {
      const double* gk = g.data() + off[k];
      // j = 0: identity on old_k
      for (int x = 0; x < off[k + 1] - off[k]; ++x) g_prev[off[k] + x] += gk[x];
      // j = k: old_0 = 1
      for (int y = 0; y < off[k + 1] - off[k]; ++y) grad_powers[k][y] += gk[y];
      for (int j = 1; j < k; ++j) {
        const int i = k - j;
        const int wi = off[i + 1] - off[i];
        const int wj = static_cast<int>(powers[j].size());
        const double* old_i = old + off[i];
        const double* ej = powers[j].data();
        double* gej = grad_powers[j].data();
        double* gold = g_prev.data() + off[i];
        for (int a = 0; a < wi; ++a) {
          const double* row = gk + static_cast<std::size_t>(a) * wj;
          double s = 0.0;
          const double oa = old_i[a];
          for (int b = 0; b < wj; ++b) {
            s += row[b] * ej[b];
            gej[b] += row[b] * oa;
          }
          gold[a] += s;
        }
      }
    }

    // Reverse of E_j = E_{j-1} (x) delta / j.
    std::fill(grad_delta.begin(), grad_delta.end(), 0.0);
    for (int j = depth; j >= 2; --j) {
      const auto& prev = powers[j - 1];
      const auto& gj = grad_powers[j];
      auto& gprev = grad_powers[j - 1];
      for (std::size_t a = 0; a < prev.size(); ++a) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) {
          const double gv = gj[a * d + c] / j;
          s += gv * delta[c];
          grad_delta[c] += gv * prev[a];
        }
        gprev[a] += s;
      }
    }
    for (int c = 0; c < d; ++c) grad_delta[c] += grad_powers[1][c];

    for (int c = 0; c < d; ++c) {
      grad_path(t, c) += grad_delta[c];
      grad_path(t - 1, c) -= grad_delta[c];
    }
    g.swap(g_prev);
  }
}

}  // namespace sigma::signature
