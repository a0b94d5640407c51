#pragma once

#include <vector>

#include "g2aps/model/box_ops.hpp"
#include "g2aps/nn/tensor.hpp"

namespace g2aps::model {

/// RoIAlign with half-pixel alignment and an adaptive sampling grid
/// (ceil(bin size) samples per bin side). `features` is [B, C, H, W];
/// `batch_index[i]` picks the image of `boxes[i]`; boxes are in image pixels
/// and `spatial_scale` maps them to the feature grid. Output [N, C, P, P].
/// Throws std::invalid_argument for a zero-area box.
nn::Tensor roi_align(const nn::Tensor& features, const std::vector<Box>& boxes, const std::vector<int>& batch_index,
                     int pooled_size, float spatial_scale);

}  // namespace g2aps::model
