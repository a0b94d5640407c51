#include "g2aps/model/roi_align.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace g2aps::model {

namespace {

struct Tap {
  int offset;  // y * W + x within one channel plane
  float weight;
};

// Bilinear taps of one sample point; torchvision border handling.
void bilinear_taps(float y, float x, int h, int w, float scale, std::vector<Tap>& out) {
  if (y < -1.0f || y > static_cast<float>(h) || x < -1.0f || x > static_cast<float>(w)) return;
  y = std::max(y, 0.0f);
  x = std::max(x, 0.0f);
  int y0 = static_cast<int>(y), x0 = static_cast<int>(x), y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    y = static_cast<float>(y0);
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    x = static_cast<float>(x0);
  } else {
    x1 = x0 + 1;
  }
  const float ly = y - static_cast<float>(y0), lx = x - static_cast<float>(x0);
  const float hy = 1.0f - ly, hx = 1.0f - lx;
  out.push_back({y0 * w + x0, hy * hx * scale});
  out.push_back({y0 * w + x1, hy * lx * scale});
  out.push_back({y1 * w + x0, ly * hx * scale});
  out.push_back({y1 * w + x1, ly * lx * scale});
}

}  // namespace

nn::Tensor roi_align(const nn::Tensor& features, const std::vector<Box>& boxes, const std::vector<int>& batch_index,
                     int pooled_size, float spatial_scale) {
  if (features.shape().size() != 4) throw std::invalid_argument("roi_align: features must be [B, C, H, W]");
  if (boxes.size() != batch_index.size()) throw std::invalid_argument("roi_align: batch index count");
  const int c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const int p = pooled_size;
  const int n = static_cast<int>(boxes.size());
  const int cells = p * p;

  // Taps per (roi, cell), flattened with start offsets.
  auto taps = std::make_shared<std::vector<Tap>>();
  auto starts = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * cells + 1, 0);
  for (int r = 0; r < n; ++r) {
    const Box& b = boxes[static_cast<std::size_t>(r)];
    if (!(b.width() > 0) || !(b.height() > 0)) throw std::invalid_argument("roi_align: zero-area box");
    if (batch_index[static_cast<std::size_t>(r)] < 0 || batch_index[static_cast<std::size_t>(r)] >= features.dim(0)) {
      throw std::out_of_range("roi_align: batch index out of range");
    }
    const float sx = b.x1 * spatial_scale - 0.5f, sy = b.y1 * spatial_scale - 0.5f;
    const float bw = b.width() * spatial_scale / static_cast<float>(p);
    const float bh = b.height() * spatial_scale / static_cast<float>(p);
    const int gw = std::max(1, static_cast<int>(std::ceil(bw)));
    const int gh = std::max(1, static_cast<int>(std::ceil(bh)));
    const float inv = 1.0f / static_cast<float>(gw * gh);
    for (int py = 0; py < p; ++py) {
      for (int px = 0; px < p; ++px) {
        for (int iy = 0; iy < gh; ++iy) {
          const float y = sy + py * bh + (iy + 0.5f) * bh / gh;
          for (int ix = 0; ix < gw; ++ix) {
            const float x = sx + px * bw + (ix + 0.5f) * bw / gw;
            bilinear_taps(y, x, h, w, inv, *taps);
          }
        }
        (*starts)[static_cast<std::size_t>(r) * cells + py * p + px + 1] = static_cast<int>(taps->size());
      }
    }
  }

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<float> out(static_cast<std::size_t>(n) * c * cells, 0.0f);
  const float* fv = features.values().data();
  for (int r = 0; r < n; ++r) {
    const float* img = fv + static_cast<std::size_t>(batch_index[static_cast<std::size_t>(r)]) * c * plane;
    for (int ch = 0; ch < c; ++ch) {
      const float* src = img + static_cast<std::size_t>(ch) * plane;
      float* dst = out.data() + (static_cast<std::size_t>(r) * c + ch) * cells;
      for (int cell = 0; cell < cells; ++cell) {
        float acc = 0.0f;
        const std::size_t k0 = static_cast<std::size_t>((*starts)[static_cast<std::size_t>(r) * cells + cell]);
        const std::size_t k1 = static_cast<std::size_t>((*starts)[static_cast<std::size_t>(r) * cells + cell + 1]);
        for (std::size_t k = k0; k < k1; ++k) acc += (*taps)[k].weight * src[(*taps)[k].offset];
        dst[cell] = acc;
      }
    }
  }

  auto bidx = std::make_shared<std::vector<int>>(batch_index);
  return nn::make_result({n, c, p, p}, std::move(out), {features},
                         [taps, starts, bidx, n, c, cells, plane](nn::Node& self) {
                           auto& g = self.parents[0]->ensure_grad();
                           for (int r = 0; r < n; ++r) {
                             float* img = g.data() + static_cast<std::size_t>((*bidx)[static_cast<std::size_t>(r)]) * c * plane;
                             for (int ch = 0; ch < c; ++ch) {
                               float* dst = img + static_cast<std::size_t>(ch) * plane;
                               const float* gy = self.grad.data() + (static_cast<std::size_t>(r) * c + ch) * cells;
                               for (int cell = 0; cell < cells; ++cell) {
                                 const std::size_t k0 = static_cast<std::size_t>((*starts)[static_cast<std::size_t>(r) * cells + cell]);
                                 const std::size_t k1 = static_cast<std::size_t>((*starts)[static_cast<std::size_t>(r) * cells + cell + 1]);
                                 for (std::size_t k = k0; k < k1; ++k) dst[(*taps)[k].offset] += (*taps)[k].weight * gy[cell];
                               }
                             }
                           }
                         });
}

}  // namespace g2aps::model
