#include "g2aps/model/layers.hpp"

#include <cmath>

#include "g2aps/nn/ops.hpp"

namespace g2aps::model {

namespace {

nn::Tensor normal_tensor(nn::Shape shape, float std, Rng& rng) {
  std::vector<float> v(nn::numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal()) * std;
  return nn::Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng, float gain)
    : weight(normal_tensor({out, in, kernel, kernel}, gain * std::sqrt(2.0f / static_cast<float>(in * kernel * kernel)), rng)),
      bias(nn::Tensor::zeros({out}, true)),
      stride(stride_),
      pad(pad_) {}

nn::Tensor Conv2d::forward(const nn::Tensor& x) const { return nn::conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(const std::string& prefix, nn::ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Linear::Linear(int in, int out, float std, Rng& rng)
    : weight(normal_tensor({out, in}, std, rng)), bias(nn::Tensor::zeros({out}, true)) {}

nn::Tensor Linear::forward(const nn::Tensor& x) const { return nn::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, nn::ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Bottleneck::Bottleneck(int in, int mid, int out, int stride, Rng& rng)
    : reduce(in, mid, 1, 1, 0, rng),
      spatial(mid, mid, 3, stride, 1, rng),
      expand(mid, out, 1, 1, 0, rng, 0.5f),
      has_shortcut(in != out || stride != 1) {
  if (has_shortcut) shortcut = Conv2d(in, out, 1, stride, 0, rng, 0.5f);
}

nn::Tensor Bottleneck::forward(const nn::Tensor& x) const {
  auto y = nn::relu(reduce.forward(x));
  y = nn::relu(spatial.forward(y));
  y = expand.forward(y);
  return nn::relu(nn::add(y, has_shortcut ? shortcut.forward(x) : x));
}

void Bottleneck::collect(const std::string& prefix, nn::ParameterList& out) const {
  reduce.collect(prefix + ".conv1", out);
  spatial.collect(prefix + ".conv2", out);
  expand.collect(prefix + ".conv3", out);
  if (has_shortcut) shortcut.collect(prefix + ".downsample", out);
}

Stage::Stage(int in, const StageSpec& spec, Rng& rng) {
  for (int b = 0; b < spec.blocks; ++b) {
    blocks.emplace_back(b == 0 ? in : spec.out, spec.mid, spec.out, b == 0 ? spec.stride : 1, rng);
  }
}

nn::Tensor Stage::forward(const nn::Tensor& x) const {
  nn::Tensor y = x;
  for (const auto& b : blocks) y = b.forward(y);
  return y;
}

void Stage::collect(const std::string& prefix, nn::ParameterList& out) const {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + "." + std::to_string(i), out);
}

int Stage::out_channels() const { return blocks.empty() ? 0 : blocks.back().expand.weight.dim(0); }

}  // namespace g2aps::model
