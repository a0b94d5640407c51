#pragma once

#include <array>
#include <vector>

namespace g2aps::model {

/// Corner-form box (x1, y1, x2, y2) in image pixels.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

using Deltas = std::array<float, 4>;

/// Plain IoU; 0 when either box is empty.
float box_iou(const Box& a, const Box& b);

/// Row-major [a.size(), b.size()] IoU matrix.
std::vector<float> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b);

/// Faster R-CNN parameterization (dx, dy, dw, dh) divided by `weights`.
Deltas encode_box(const Box& anchor, const Box& target, const std::array<float, 4>& weights);
Box decode_box(const Box& anchor, const Deltas& d, const std::array<float, 4>& weights);

Box clip_box(const Box& b, float width, float height);

/// Greedy NMS over score-sorted candidates; returns kept indices in
/// descending score order (ties by index).
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<float>& scores, float threshold);

/// Anchors for a feature map of size (fh, fw) with the given stride, one per
/// (cell, size, aspect) in that order. Aspect is height / width.
std::vector<Box> make_anchors(int fh, int fw, int stride, const std::vector<float>& sizes,
                              const std::vector<float>& aspects);

}  // namespace g2aps::model
