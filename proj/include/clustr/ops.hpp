#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "clustr/autodiff.hpp"

namespace clustr {

/// Counts the scalar multiplies performed by the matmul kernels it is handed to.
struct MacCounter {
  std::uint64_t multiplies = 0;
};

namespace kernels {

// out (+)= a * b, a: n x k, b: k x m
template <typename T>
void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate);
// out (+)= a * b^T, a: n x k, b: m x k
template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate);
// out (+)= a^T * b, a: k x n, b: k x m
template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool accumulate);

}  // namespace kernels

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, MacCounter* counter = nullptr);

/// a * b^T without materializing the transpose.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b, MacCounter* counter = nullptr);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Elementwise product of equal shapes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// x: N x C, bias: C elements broadcast over rows.
template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias);

template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> softmax_rows(Var<T> x);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// tanh-approximated GELU.
template <typename T>
Var<T> gelu(Var<T> x);

/// Softmax of `scores` (N elements) taken separately inside each label segment.
template <typename T>
Var<T> segment_softmax(Var<T> scores, std::span<const std::size_t> labels, std::size_t segments);

/// Row j of the result is sum of weights[i] * x[i] over rows with labels[i] == j.
/// Every segment must be nonempty.
template <typename T>
Var<T> segment_weighted_sum(Var<T> x, std::span<const std::size_t> labels, Var<T> weights, std::size_t segments);

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);

/// N x C -> 1 x C.
template <typename T>
Var<T> mean_rows(Var<T> x);

/// Sum of all elements as a one-element tensor.
template <typename T>
Var<T> sum(Var<T> x);

/// Mean softmax cross-entropy of logits rows against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels);

/// im2col over a row-major (height*width) x C token grid, zero padding outside.
/// Result is (out_h*out_w) x (kernel*kernel*C), columns ordered (ky, kx, c).
template <typename T>
Var<T> unfold_patches(Var<T> x, std::size_t height, std::size_t width, std::size_t kernel, std::size_t stride,
                      std::size_t padding);

/// Reduces each non-overlapping r x r patch of a (height*width) x C token grid to one token,
/// weighting patch position p by weights[p] (r*r elements).
template <typename T>
Var<T> grid_pool(Var<T> x, std::size_t height, std::size_t width, std::size_t r, Var<T> weights);

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row_bias(matmul(x, weight), bias);
}

/// Output spatial size of a strided window sweep.
std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace clustr
