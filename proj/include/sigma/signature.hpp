#pragma once

#include "sigma/numerics.hpp"
#include "sigma/pathsim.hpp"

#include <span>
#include <utility>
#include <vector>

// Truncated signatures of piecewise-linear paths.
//
// Storage order: levels 1..N are concatenated, level i holds d^i entries in
// row-major lexicographic order of the multi-index (i_1, ..., i_k), i_1 most
// significant. The level-0 constant 1 is implicit and never stored.

namespace sigma::signature {

/// Flattened length of levels 1..depth: (d^(N+1) - d) / (d - 1), or N when d = 1.
int sig_dim(int channels, int depth);

/// Start offset of every level: offsets[i] for i = 1..depth, offsets[depth+1] = sig_dim.
/// offsets[0] is 0 and unused.
std::vector<int> level_offsets(int channels, int depth);

struct TruncatedSignature {
  int channels = 0;
  int depth = 0;
  std::vector<double> data;  // length sig_dim(channels, depth)

  /// Signature of a constant path (all levels zero).
  static TruncatedSignature identity(int channels, int depth);

  std::span<const double> level(int i) const;
  std::span<double> level(int i);
};

/// Prepends the normalised time channel t_i = i / (n - 1).
Mat time_augment(ConstMatRef values);
pathsim::Path time_augment(const pathsim::Path& path);

/// Tensor exponential of one linear segment: level i = delta^{(x)i} / i!.
TruncatedSignature segment_signature(std::span<const double> delta, int depth);

/// Chen product (truncated tensor multiplication) of two signatures.
TruncatedSignature chen_product(const TruncatedSignature& a, const TruncatedSignature& b);

/// Signature of the piecewise-linear interpolation of the rows of `path`.
TruncatedSignature path_signature(ConstMatRef path, int depth);

/// Prefixes Y[0:stride], Y[0:2 stride], ..., Y[0:n].
std::vector<Mat> lift(ConstMatRef path, int stride);

struct LiftedSignatureMatrix {
  int channels = 0;
  int depth = 0;
  Mat matrix;                                   // prefixes x sig_dim
  std::vector<int> prefix_lengths;              // one per row
  std::vector<std::pair<int, int>> level_spans;  // (first column, width) for levels 1..N
};

/// Row r is the flattened signature of prefix r of lift(path, stride).
LiftedSignatureMatrix lifted_signature_matrix(ConstMatRef path, int depth, int stride);

// ---------------------------------------------------------------------------
// Differentiable form used inside models.

/// Running signatures of every prefix: row t holds Sig(path[0..t]) (row 0 is
/// zero). Kept for the reverse pass.
struct SignatureTape {
  int channels = 0;
  int depth = 0;
  std::vector<int> offsets;
  Mat running;     // n x sig_dim
  Mat increments;  // (n-1) x channels
};

/// Forward pass over all prefixes of `path`.
void signature_stream(ConstMatRef path, int depth, SignatureTape& tape);

/// Prefix end rows selected by a lifting stride: stride-1, 2 stride-1, ..., n-1.
std::vector<int> prefix_end_rows(int n, int stride);

/// Reverse pass. `grad_rows(r, :)` is dL/d running.row(rows[r]); the gradient
/// with respect to the path samples is accumulated into `grad_path` (n x d).
void signature_stream_backward(const SignatureTape& tape, std::span<const int> rows,
                               ConstMatRef grad_rows, MatRef grad_path);

}  // namespace sigma::signature
