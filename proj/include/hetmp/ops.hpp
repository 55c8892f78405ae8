#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hetmp/tensor.hpp"

namespace hetmp {

/// How a segment of raw scores becomes coefficients that sum to one.
enum class CoefficientMode {
  kSumNormalize,  // e_i / sum_j e_j, uniform fallback when |sum| <= tol
  kSoftmax,       // exp(e_i) / sum_j exp(e_j)
};

inline constexpr double kDefaultL2Eps = 1e-12;
inline constexpr double kDefaultLayerNormEps = 1e-5;
inline constexpr double kDefaultFallbackTol = 1e-12;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x * w^T for w stored as (out, in).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c);

/// x times a 1x1 tensor.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s);

/// Row i of x times w(i, 0); w is (rows, 1).
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& w);

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);

/// Stacks tensors with equal column counts vertically.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Inverted dropout. The mask bit for element i is a pure function of (key, i).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t key, bool training);

template <typename T>
Tensor<T> select_rows(const Tensor<T>& x, std::span<const std::uint32_t> rows);

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count);

/// out(idx[i]) += x(i) for an output with num_rows rows.
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, std::span<const std::uint32_t> idx,
                           std::size_t num_rows);

/// Per target, mean of x(src[e]) over edges with dst[e] == target. Zero row
/// for targets without edges.
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::uint32_t> src,
                       std::span<const std::uint32_t> dst, std::size_t num_targets);

/// Column means over all rows, shape (1, cols). Zero row for empty input.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

/// Per-row Euclidean norm, shape (rows, 1).
template <typename T>
Tensor<T> row_norms(const Tensor<T>& x);

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b);

/// Each row divided by max(||row||_2, eps).
template <typename T>
Tensor<T> l2norm_rows(const Tensor<T>& x, double eps = kDefaultL2Eps);

/// Per-row (x - mean) / sqrt(var + eps) * gamma + beta, population variance.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = kDefaultLayerNormEps);

/// s * ||node_row|| * message_row / max(||message_row||, eps).
template <typename T>
Tensor<T> msgnorm(const Tensor<T>& message, const Tensor<T>& node, const Tensor<T>& s,
                  double eps = kDefaultL2Eps);

/// Normalizes a column of scores within segments. segment[i] names the segment
/// of row i; every segment in [0, num_segments) that owns rows sums to one.
template <typename T>
Tensor<T> normalize_segments(const Tensor<T>& e, std::span<const std::uint32_t> segment,
                             std::size_t num_segments, CoefficientMode mode,
                             double fallback_tol = kDefaultFallbackTol);

/// Single-segment convenience over a plain vector (reporting / tests).
std::vector<double> normalize_sum(std::span<const double> e,
                                  double fallback_tol = kDefaultFallbackTol);

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

namespace testing {
/// Negative-control hook for gradient checks: perturbs the l2norm backward rule.
void set_corrupt_backward(bool on);
bool corrupt_backward();
}  // namespace testing

}  // namespace hetmp
