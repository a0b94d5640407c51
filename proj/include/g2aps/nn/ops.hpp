#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "g2aps/nn/tensor.hpp"

namespace g2aps::nn {

// Layouts: images and feature maps are NCHW, matrices are row-major [N, D].

/// 2-D convolution; `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad);

Tensor relu(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, float s);

/// Sum of w_i * t_i over scalar tensors; undefined tensors are skipped.
Tensor weighted_sum(const std::vector<std::pair<Tensor, float>>& terms);

/// y = x W^T + b, x [N, I], W [O, I], b [O].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// [N, C, H, W] -> [N, C].
Tensor global_avg_pool(const Tensor& x);

/// Adaptive average pooling to a grid x grid layout, flattened channel-major:
/// [N, C, H, W] -> [N, C * grid * grid]. Bin i spans
/// [floor(i * H / grid), ceil((i + 1) * H / grid)).
Tensor grid_avg_pool(const Tensor& x, int grid);

/// Rows scaled to unit L2 norm.
Tensor l2_normalize_rows(const Tensor& x, float eps = 1e-12f);

Tensor reshape(const Tensor& x, Shape shape);

/// Concatenation along dim 0; all inputs share trailing dims.
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Rows of x (dim 0) picked by index.
Tensor index_rows(const Tensor& x, std::span<const int> rows);

/// 1-D tensor of x's flat elements at `indices`.
Tensor gather_flat(const Tensor& x, std::span<const int> indices);

/// Mean softmax cross-entropy over rows whose target is >= 0. Returns an
/// exact zero (no graph) when no row is counted.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Mean binary cross-entropy with logits over the listed flat indices.
Tensor bce_with_logits(const Tensor& logits, std::span<const int> indices, std::span<const float> targets);

/// Sum of smooth-L1 over rows in `rows` of pred [N, K] against `targets`
/// (same layout as pred), divided by `normalizer`.
Tensor smooth_l1(const Tensor& pred, std::span<const float> targets, std::span<const int> rows, float beta,
                 float normalizer);

/// Scalar function of 2-D inputs evaluated in double precision. `fn` returns
/// the value and fills one gradient matrix per input (same shape).
using MatrixFn = std::function<double(const std::vector<Eigen::MatrixXd>& inputs,
                                      std::vector<Eigen::MatrixXd>& grads)>;
Tensor matrix_function(const std::vector<Tensor>& inputs, MatrixFn fn);

Eigen::MatrixXd to_matrix(const Tensor& t);

}  // namespace g2aps::nn
