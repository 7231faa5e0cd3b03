#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gavatar/tensor.hpp"

namespace gavatar::ops {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

/// min(a, hi) elementwise; gradient is zero where the bound is active.
Tensor clamp_max(const Tensor& a, double hi);
/// Elementwise clamp to constant per-element bounds (shapes must match `a`).
Tensor clamp(const Tensor& a, const Tensor& lo, const Tensor& hi);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim);
Tensor mean(const Tensor& a, int axis, bool keepdim);

/// 2-D x 2-D, batched 3-D x 3-D, or 3-D x 2-D (right operand shared by the batch).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, std::span<const int> axes);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t end);
/// Rows of `a` (axis 0) picked by `indices`; repeated indices accumulate gradient.
Tensor index_select(const Tensor& a, std::span<const std::int64_t> indices);

/// Softmax along the last axis.
Tensor softmax(const Tensor& a);
/// Normalizes the last axis to zero mean / unit variance (no affine terms).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
/// Group normalization over [N, C, H, W] (or [C, H, W]); no affine terms.
Tensor group_norm(const Tensor& x, int groups, double eps = 1e-5);

/// 2-D convolution. x: [N, C, H, W], weight: [O, C, k, k], bias: [O] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int padding);

/// Samples map [C, H, W] at UVs in [0,1]^2 (texel centers at (i + 0.5) / size,
/// edge-clamped). Returns [N, C]. Differentiable w.r.t. the map only.
Tensor bilinear_sample(const Tensor& map, std::span<const double> uvs);

/// Mean pooling of an [H, W, C] image with a k x k window and stride k.
Tensor avg_pool_hwc(const Tensor& image, int k);

/// softmax(q k^T / sqrt(d)) v for [B, T, d] inputs, composed from primitives.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace gavatar::ops
