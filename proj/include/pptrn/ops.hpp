#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "pptrn/tensor.hpp"

// Differentiable operations over Tensor<T>. Every op validates extents
// (DimensionError naming the shapes), checks its output is finite
// (NumericError), and records a backward closure when any input requires grad.
//
// Broadcasting is limited to right-aligned axes whose extent is equal or 1.
namespace pptrn {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
// Gradient passes where lo <= x <= hi.
template <typename T> Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Reduces `axis` away.
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
// (x - mean) / sqrt(var + eps) along `axis`, no affine.
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, std::size_t axis, T eps = T(1e-5));

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& axes);
// 2-D transpose.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

// [m x k] . [k x n]; the flags multiply by the transpose of an operand
// without materialising it.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);

// Row-wise affine map: x [N x in] (or [in]) times weight [out x in]^T plus bias [out].
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;
};

// Cross-correlation of x [C_in x H x W] with weight [C_out x C_in/groups x k x k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias,
                 Conv2dOptions options = {});

// 2x2 mean pooling and nearest-neighbour 2x upsampling on [C x H x W].
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& x);
template <typename T> Tensor<T> upsample2(const Tensor<T>& x);

}  // namespace pptrn
