#include "g2aps/model/box_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace g2aps::model {

namespace {
constexpr float kMaxLogScale = 4.135166556742356f;  // log(1000 / 16)
}

float box_iou(const Box& a, const Box& b) {
  const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0f;
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

std::vector<float> iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b) {
  std::vector<float> m(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) m[i * b.size() + j] = box_iou(a[i], b[j]);
  }
  return m;
}

Deltas encode_box(const Box& anchor, const Box& target, const std::array<float, 4>& weights) {
  const float aw = anchor.width(), ah = anchor.height();
  const float ax = anchor.x1 + 0.5f * aw, ay = anchor.y1 + 0.5f * ah;
  const float tw = target.width(), th = target.height();
  const float tx = target.x1 + 0.5f * tw, ty = target.y1 + 0.5f * th;
  return {weights[0] * (tx - ax) / aw, weights[1] * (ty - ay) / ah, weights[2] * std::log(tw / aw),
          weights[3] * std::log(th / ah)};
}

Box decode_box(const Box& anchor, const Deltas& d, const std::array<float, 4>& weights) {
  const float aw = anchor.width(), ah = anchor.height();
  const float ax = anchor.x1 + 0.5f * aw, ay = anchor.y1 + 0.5f * ah;
  const float dw = std::min(d[2] / weights[2], kMaxLogScale);
  const float dh = std::min(d[3] / weights[3], kMaxLogScale);
  const float cx = ax + d[0] / weights[0] * aw;
  const float cy = ay + d[1] / weights[1] * ah;
  const float w = aw * std::exp(dw), h = ah * std::exp(dh);
  return {cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h};
}

Box clip_box(const Box& b, float width, float height) {
  return {std::clamp(b.x1, 0.0f, width), std::clamp(b.y1, 0.0f, height), std::clamp(b.x2, 0.0f, width),
          std::clamp(b.y2, 0.0f, height)};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<float>& scores, float threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (int i : order) {
    if (removed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (!removed[static_cast<std::size_t>(j)] && j != i &&
          box_iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > threshold) {
        removed[static_cast<std::size_t>(j)] = 1;
      }
    }
    removed[static_cast<std::size_t>(i)] = 1;
  }
  return keep;
}

std::vector<Box> make_anchors(int fh, int fw, int stride, const std::vector<float>& sizes,
                              const std::vector<float>& aspects) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(fh) * fw * sizes.size() * aspects.size());
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      const float cx = (x + 0.5f) * stride, cy = (y + 0.5f) * stride;
      for (float s : sizes) {
        for (float a : aspects) {
          // Area s^2, h / w = a.
          const float w = s / std::sqrt(a), h = s * std::sqrt(a);
          anchors.push_back({cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h});
        }
      }
    }
  }
  return anchors;
}

}  // namespace g2aps::model
