#pragma once

#include <cstddef>
#include <optional>
#include <type_traits>
#include <vector>

#include "mmdyn/tensor.hpp"

namespace mmdyn::ops {

/// Optional operand (biases) kept out of template argument deduction so
/// callers may pass std::nullopt.
template <typename T>
using OptionalTensor = std::optional<std::type_identity_t<Tensor<T>>>;

// Elementwise unary.
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
/// max(a, floor); the gradient is passed only where a > floor.
template <typename T> Tensor<T> clamp_min(const Tensor<T>& a, T floor);

// Elementwise binary; shapes must match exactly.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
/// Sum of any number of equal-shape tensors, invariant to argument order.
template <typename T> Tensor<T> add_n(const std::vector<Tensor<T>>& terms);

// Reductions.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Sums out one axis; the result has rank reduced by one.
template <typename T> Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis);

// Shape manipulation. All produce contiguous copies.
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Swaps the first two axes: [A, B, ...] -> [B, A, ...].
template <typename T> Tensor<T> transpose01(const Tensor<T>& a);

// Linear algebra.
/// x [N, in] times w [out, in] transposed, plus bias [out] when given.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const OptionalTensor<T>& bias);
/// a [N, M] times b [M, P].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Per-row matrix-vector product: a [B, K, M], x [B, M] -> [B, K].
template <typename T> Tensor<T> batched_matvec(const Tensor<T>& a, const Tensor<T>& x);

struct ConvGeometry {
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
  std::size_t pad_h = 1;
  std::size_t pad_w = 1;
};

/// x [N, C, H, W], w [O, C, kh, kw], bias [O] -> [N, O, Ho, Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const OptionalTensor<T>& bias,
                 ConvGeometry geom = {});
/// Adjoint of conv2d: x [N, C, H, W], w [C, O, kh, kw], bias [O] -> [N, O, Ho, Wo]
/// with Ho = (H - 1) * stride - 2 * pad + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const OptionalTensor<T>& bias, ConvGeometry geom = {});

/// direction * scale / ||direction|| where the norm runs over each slice of
/// the leading (output) axis. direction [O, ...], scale [O].
template <typename T> Tensor<T> weight_norm(const Tensor<T>& direction, const Tensor<T>& scale);

/// GRU cell with gate rows ordered (reset, update, candidate):
///   r = sigmoid(Wr x + br + Ur h + cr), z = sigmoid(Wz x + bz + Uz h + cz)
///   n = tanh(Wn x + bn + r * (Un h + cn)), h' = (1 - z) * n + z * h
/// x [B, in], h [B, H], w_ih [3H, in], w_hh [3H, H], biases [3H].
template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& w_ih,
                   const Tensor<T>& w_hh, const Tensor<T>& b_ih, const Tensor<T>& b_hh);

}  // namespace mmdyn::ops
