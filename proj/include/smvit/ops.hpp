#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "smvit/tensor.hpp"

namespace smvit {

enum class BnMode { Train, Infer };

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

// Elementwise arithmetic on equal shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

/// x[..., n] + row[n], broadcast over the leading dimensions.
template <typename T> Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& row);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// [m,k] x [k,n] -> [m,n].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Batched product: [G,m,k] x [G,k,n], or [G,m,k] x [G,n,k]^T when transpose_b.
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// x[..., in] * w[in, out] + b[out]. `b` may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Cross-correlation of x[B,C,H,W] with k[O,C,kh,kw]; `bias` [O] may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// One kernel per channel: k[C,kh,kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding);

/// Per-channel normalization over (B,H,W). Train mode uses population batch
/// variance and updates `state` by EMA; Infer mode reads `state`.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      BnMode mode, T eps = T(1e-5));

/// Normalization over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

template <typename T> Tensor<T> silu(const Tensor<T>& x);

/// [B,C,H,W] -> [B,C], mean over the whole spatial plane.
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Max-subtracted softmax along the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

/// [B,C,H,W] -> [B, num_patches, patch_w*patch_h, C]; non-overlapping tiles,
/// patches and in-patch pixels both in row-major order.
template <typename T>
Tensor<T> unfold_patches(const Tensor<T>& x, std::size_t patch_w, std::size_t patch_h);

/// Exact inverse of unfold_patches.
template <typename T>
Tensor<T> fold_patches(const Tensor<T>& t, std::size_t height, std::size_t width, std::size_t patch_w,
                       std::size_t patch_h);

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

/// Spatial output size of a strided, padded window.
std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

}  // namespace smvit
