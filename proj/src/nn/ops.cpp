#include "g2aps/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace g2aps::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.shape().size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(t.shape()));
  }
}

struct ConvGeom {
  int n, c, h, w, o, k, stride, pad, ho, wo;
  int rows() const { return c * k * k; }
  int cols() const { return n * ho * wo; }
};

void im2col(const float* x, const ConvGeom& g, float* cols) {
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        float* row = cols + static_cast<std::size_t>((ci * g.k + ki) * g.k + kj) * g.cols();
        for (int ni = 0; ni < g.n; ++ni) {
          const float* xp = x + (static_cast<std::size_t>(ni) * g.c + ci) * g.h * g.w;
          float* out = row + static_cast<std::size_t>(ni) * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              out[oy * g.wo + ox] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) ? xp[iy * g.w + ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, float* gx) {
  const int plane = g.ho * g.wo;
  for (int ci = 0; ci < g.c; ++ci) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const float* row = cols + static_cast<std::size_t>((ci * g.k + ki) * g.k + kj) * g.cols();
        for (int ni = 0; ni < g.n; ++ni) {
          float* xp = gx + (static_cast<std::size_t>(ni) * g.c + ci) * g.h * g.w;
          const float* in = row + static_cast<std::size_t>(ni) * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) xp[iy * g.w + ix] += in[oy * g.wo + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, pad, 0, 0};
  if (weight.dim(1) != g.c || weight.dim(3) != g.k) throw std::invalid_argument("conv2d: weight/input mismatch");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");

  auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(g.rows()) * g.cols());
  im2col(x.values().data(), g, cols->data());
  CMapR wm(weight.values().data(), g.o, g.rows());
  CMapR cm(cols->data(), g.rows(), g.cols());
  RowMat ybig(g.o, g.cols());
  ybig.noalias() = wm * cm;

  const int plane = g.ho * g.wo;
  std::vector<float> out(static_cast<std::size_t>(g.n) * g.o * plane);
  for (int ni = 0; ni < g.n; ++ni) {
    for (int oi = 0; oi < g.o; ++oi) {
      const float b = bias.defined() ? bias.values()[static_cast<std::size_t>(oi)] : 0.0f;
      const float* src = ybig.data() + static_cast<std::size_t>(oi) * g.cols() + static_cast<std::size_t>(ni) * plane;
      float* dst = out.data() + (static_cast<std::size_t>(ni) * g.o + oi) * plane;
      for (int p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result({g.n, g.o, g.ho, g.wo}, std::move(out), parents, [g, cols, has_bias](Node& self) {
    const int plane = g.ho * g.wo;
    RowMat gy(g.o, g.cols());
    for (int ni = 0; ni < g.n; ++ni) {
      for (int oi = 0; oi < g.o; ++oi) {
        const float* src = self.grad.data() + (static_cast<std::size_t>(ni) * g.o + oi) * plane;
        std::copy_n(src, plane, gy.data() + static_cast<std::size_t>(oi) * g.cols() + static_cast<std::size_t>(ni) * plane);
      }
    }
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    CMapR cm(cols->data(), g.rows(), g.cols());
    if (wn.requires_grad) {
      MapR gw(wn.ensure_grad().data(), g.o, g.rows());
      gw.noalias() += gy * cm.transpose();
    }
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (int oi = 0; oi < g.o; ++oi) gb[static_cast<std::size_t>(oi)] += gy.row(oi).sum();
    }
    if (xn.requires_grad) {
      CMapR wm(wn.value.data(), g.o, g.rows());
      RowMat gcols(g.rows(), g.cols());
      gcols.noalias() = wm.transpose() * gy;
      col2im(gcols.data(), g, xn.ensure_grad().data());
    }
  });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "max_pool2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  std::vector<float> out(static_cast<std::size_t>(n) * c * ho * wo);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  const float* xv = x.values().data();
  std::size_t o = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const float* xp = xv + static_cast<std::size_t>(plane) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        float best = -std::numeric_limits<float>::infinity();
        int best_i = -1;
        for (int ki = 0; ki < kernel; ++ki) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const int ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= w) continue;
            if (xp[iy * w + ix] > best) {
              best = xp[iy * w + ix];
              best_i = plane * h * w + iy * w + ix;
            }
          }
        }
        out[o] = best;
        (*argmax)[o] = best_i;
      }
    }
  }
  return make_result({n, c, ho, wo}, std::move(out), {x}, [argmax](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < argmax->size(); ++i) {
      if ((*argmax)[i] >= 0) gx[static_cast<std::size_t>((*argmax)[i])] += self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = std::max(v, 0.0f);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (self.value[i] > 0.0f) gx[i] += self.grad[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor weighted_sum(const std::vector<std::pair<Tensor, float>>& terms) {
  std::vector<Tensor> parents;
  std::vector<float> weights;
  double total = 0.0;
  for (const auto& [t, w] : terms) {
    if (!t.defined()) continue;
    if (t.numel() != 1) throw std::invalid_argument("weighted_sum: scalar terms only");
    parents.push_back(t);
    weights.push_back(w);
    total += static_cast<double>(w) * t.item();
  }
  return make_result({}, {static_cast<float>(total)}, parents, [weights](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (self.parents[i]->requires_grad) self.parents[i]->ensure_grad()[0] += weights[i] * self.grad[0];
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != in) throw std::invalid_argument("linear: weight/input mismatch");
  RowMat y(n, o);
  CMapR xm(x.values().data(), n, in);
  CMapR wm(weight.values().data(), o, in);
  y.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < o; ++j) y(i, j) += bias.values()[static_cast<std::size_t>(j)];
    }
  }
  std::vector<float> out(y.data(), y.data() + y.size());
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result({n, o}, std::move(out), parents, [n, in, o, has_bias](Node& self) {
    CMapR gy(self.grad.data(), n, o);
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    if (xn.requires_grad) {
      MapR gx(xn.ensure_grad().data(), n, in);
      gx.noalias() += gy * CMapR(wn.value.data(), o, in);
    }
    if (wn.requires_grad) {
      MapR gw(wn.ensure_grad().data(), o, in);
      gw.noalias() += gy.transpose() * CMapR(xn.value.data(), n, in);
    }
    if (has_bias && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (int j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += gy.col(j).sum();
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const int plane = x.dim(2) * x.dim(3);
  std::vector<float> out(static_cast<std::size_t>(n) * c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (int p = 0; p < plane; ++p) s += x.values()[i * plane + static_cast<std::size_t>(p)];
    out[i] = static_cast<float>(s / plane);
  }
  return make_result({n, c}, std::move(out), {x}, [plane](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    const float inv = 1.0f / static_cast<float>(plane);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      for (int p = 0; p < plane; ++p) gx[i * plane + static_cast<std::size_t>(p)] += self.grad[i] * inv;
    }
  });
}

Tensor grid_avg_pool(const Tensor& x, int grid) {
  require_rank(x, 4, "grid_avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (grid < 1 || grid > h || grid > w) {
    throw std::invalid_argument("grid_avg_pool: grid " + std::to_string(grid) + " does not fit " + shape_string(x.shape()));
  }
  auto lo = [](int i, int size, int g) { return i * size / g; };
  auto hi = [](int i, int size, int g) { return ((i + 1) * size + g - 1) / g; };
  const int cells = grid * grid;
  std::vector<float> out(static_cast<std::size_t>(n) * c * cells);
  const auto& xv = x.node()->value;
  for (int p = 0; p < n * c; ++p) {
    const float* plane = xv.data() + static_cast<std::size_t>(p) * h * w;
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        double s = 0.0;
        const int y0 = lo(gy, h, grid), y1 = hi(gy, h, grid), x0 = lo(gx, w, grid), x1 = hi(gx, w, grid);
        for (int y = y0; y < y1; ++y) {
          for (int xx = x0; xx < x1; ++xx) s += plane[y * w + xx];
        }
        out[static_cast<std::size_t>(p) * cells + gy * grid + gx] = static_cast<float>(s / ((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return make_result({n, c * cells}, std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int p = 0; p < n * c; ++p) {
      float* plane = g.data() + static_cast<std::size_t>(p) * h * w;
      for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
          const int y0 = lo(gy, h, grid), y1 = hi(gy, h, grid), x0 = lo(gx, w, grid), x1 = hi(gx, w, grid);
          const float v = self.grad[static_cast<std::size_t>(p) * cells + gy * grid + gx] /
                          static_cast<float>((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y) {
            for (int xx = x0; xx < x1; ++xx) plane[y * w + xx] += v;
          }
        }
      }
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x, float eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const int n = x.dim(0), d = x.dim(1);
  std::vector<float> out(x.numel());
  auto norms = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = x.values()[static_cast<std::size_t>(i) * d + j];
      s += v * v;
    }
    const float norm = std::max(static_cast<float>(std::sqrt(s)), eps);
    (*norms)[static_cast<std::size_t>(i)] = norm;
    for (int j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(i) * d + j] = x.values()[static_cast<std::size_t>(i) * d + j] / norm;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [n, d, norms](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += static_cast<double>(self.value[base + j]) * self.grad[base + j];
      const float inv = 1.0f / (*norms)[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        gx[base + j] += (self.grad[base + j] - static_cast<float>(dot) * self.value[base + j]) * inv;
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) throw std::invalid_argument("reshape: element count mismatch");
  std::vector<float> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw std::invalid_argument("concat_rows: scalar input");
  shape[0] = 0;
  std::vector<float> out;
  for (const auto& p : parts) {
    Shape trailing = p.shape();
    trailing[0] = 0;
    if (trailing != shape) throw std::invalid_argument("concat_rows: trailing dims differ");
  }
  for (const auto& p : parts) {
    shape[0] += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_result(shape, std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor index_rows(const Tensor& x, std::span<const int> rows) {
  if (x.shape().empty()) throw std::invalid_argument("index_rows: scalar input");
  const std::size_t row_size = x.numel() / static_cast<std::size_t>(std::max(1, x.dim(0)));
  Shape shape = x.shape();
  shape[0] = static_cast<int>(rows.size());
  std::vector<float> out(rows.size() * row_size);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= x.dim(0)) throw std::out_of_range("index_rows: row out of range");
    std::copy_n(x.values().data() + static_cast<std::size_t>(rows[r]) * row_size, row_size, out.data() + r * row_size);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {x}, [idx, row_size](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < row_size; ++j) {
        g[static_cast<std::size_t>(idx[r]) * row_size + j] += self.grad[r * row_size + j];
      }
    }
  });
}

Tensor gather_flat(const Tensor& x, std::span<const int> indices) {
  std::vector<float> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= x.numel()) {
      throw std::out_of_range("gather_flat: index out of range");
    }
    out[i] = x.values()[static_cast<std::size_t>(indices[i])];
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return make_result({static_cast<int>(idx.size())}, std::move(out), {x}, [idx](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g[static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) throw std::invalid_argument("softmax_cross_entropy: target count");
  auto probs = std::make_shared<std::vector<float>>(logits.numel());
  double loss = 0.0;
  int counted = 0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.values().data() + static_cast<std::size_t>(i) * k;
    const float m = *std::max_element(z, z + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - m));
    const double lse = m + std::log(s);
    for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i) * k + j] = static_cast<float>(std::exp(z[j] - lse));
    if (targets[static_cast<std::size_t>(i)] >= 0) {
      if (targets[static_cast<std::size_t>(i)] >= k) throw std::out_of_range("softmax_cross_entropy: target >= classes");
      loss += lse - z[targets[static_cast<std::size_t>(i)]];
      ++counted;
    }
  }
  if (counted == 0) return Tensor::scalar(0.0f);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({}, {static_cast<float>(loss / counted)}, {logits}, [probs, tg, n, k, counted](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const float s = self.grad[0] / static_cast<float>(counted);
    for (int i = 0; i < n; ++i) {
      if (tg[static_cast<std::size_t>(i)] < 0) continue;
      for (int j = 0; j < k; ++j) {
        const std::size_t at = static_cast<std::size_t>(i) * k + j;
        g[at] += s * ((*probs)[at] - (j == tg[static_cast<std::size_t>(i)] ? 1.0f : 0.0f));
      }
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const int> indices, std::span<const float> targets) {
  if (indices.size() != targets.size()) throw std::invalid_argument("bce_with_logits: size mismatch");
  if (indices.empty()) return Tensor::scalar(0.0f);
  double loss = 0.0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double z = logits.values()[static_cast<std::size_t>(indices[i])];
    const double t = targets[i];
    // max(z,0) - z t + log(1 + exp(-|z|))
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<float> tg(targets.begin(), targets.end());
  const auto count = static_cast<float>(idx.size());
  return make_result({}, {static_cast<float>(loss / count)}, {logits}, [idx, tg, count](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& z = self.parents[0]->value;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float sig = 1.0f / (1.0f + std::exp(-z[static_cast<std::size_t>(idx[i])]));
      g[static_cast<std::size_t>(idx[i])] += self.grad[0] * (sig - tg[i]) / count;
    }
  });
}

Tensor smooth_l1(const Tensor& pred, std::span<const float> targets, std::span<const int> rows, float beta,
                 float normalizer) {
  require_rank(pred, 2, "smooth_l1");
  if (targets.size() != pred.numel()) throw std::invalid_argument("smooth_l1: target layout mismatch");
  if (rows.empty()) return Tensor::scalar(0.0f);
  const int k = pred.dim(1);
  double loss = 0.0;
  for (int r : rows) {
    for (int j = 0; j < k; ++j) {
      const std::size_t at = static_cast<std::size_t>(r) * k + j;
      const double d = std::abs(static_cast<double>(pred.values()[at]) - targets[at]);
      loss += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
  }
  std::vector<int> rv(rows.begin(), rows.end());
  std::vector<float> tg(targets.begin(), targets.end());
  return make_result({}, {static_cast<float>(loss / normalizer)}, {pred}, [rv, tg, k, beta, normalizer](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& p = self.parents[0]->value;
    const float s = self.grad[0] / normalizer;
    for (int r : rv) {
      for (int j = 0; j < k; ++j) {
        const std::size_t at = static_cast<std::size_t>(r) * k + j;
        const float d = p[at] - tg[at];
        g[at] += s * (std::abs(d) < beta ? d / beta : (d > 0 ? 1.0f : -1.0f));
      }
    }
  });
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  require_rank(t, 2, "to_matrix");
  return CMapR(t.values().data(), t.dim(0), t.dim(1)).cast<double>();
}

Tensor matrix_function(const std::vector<Tensor>& inputs, MatrixFn fn) {
  std::vector<Eigen::MatrixXd> mats;
  mats.reserve(inputs.size());
  for (const auto& t : inputs) mats.push_back(to_matrix(t));
  auto grads = std::make_shared<std::vector<Eigen::MatrixXd>>(inputs.size());
  const double value = fn(mats, *grads);
  if (grads->size() != inputs.size()) throw std::logic_error("matrix_function: gradient count mismatch");
  return make_result({}, {static_cast<float>(value)}, inputs, [grads](Node& self) {
    const double up = self.grad[0];
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (!p.requires_grad) continue;
      const auto& gm = (*grads)[i];
      auto& g = p.ensure_grad();
      const auto cols = static_cast<Eigen::Index>(p.shape[1]);
      for (Eigen::Index r = 0; r < gm.rows(); ++r) {
        for (Eigen::Index c = 0; c < gm.cols(); ++c) {
          g[static_cast<std::size_t>(r * cols + c)] += static_cast<float>(up * gm(r, c));
        }
      }
    }
  });
}

}  // namespace g2aps::nn
