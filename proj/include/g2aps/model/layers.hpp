#pragma once

#include <string>
#include <vector>

#include "g2aps/common/rng.hpp"
#include "g2aps/nn/optim.hpp"
#include "g2aps/nn/tensor.hpp"

namespace g2aps::model {

struct Conv2d {
  nn::Tensor weight;  // [O, I, k, k]
  nn::Tensor bias;    // [O]
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  /// He-normal weights scaled by `gain`, zero bias.
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, float gain = 1.0f);

  nn::Tensor forward(const nn::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
};

struct Linear {
  nn::Tensor weight;  // [O, I]
  nn::Tensor bias;    // [O]

  Linear() = default;
  /// Normal(0, std) weights, zero bias.
  Linear(int in, int out, float std, Rng& rng);

  nn::Tensor forward(const nn::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
};

/// 1x1 -> 3x3 (strided) -> 1x1 residual block with a projection shortcut
/// when shape changes. Batch statistics are folded into the conv biases, so
/// there are no normalization layers.
struct Bottleneck {
  Conv2d reduce, spatial, expand, shortcut;
  bool has_shortcut = false;

  Bottleneck() = default;
  Bottleneck(int in, int mid, int out, int stride, Rng& rng);

  nn::Tensor forward(const nn::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
};

struct StageSpec {
  int blocks = 1;
  int mid = 16;
  int out = 32;
  int stride = 2;
};

struct Stage {
  std::vector<Bottleneck> blocks;

  Stage() = default;
  Stage(int in, const StageSpec& spec, Rng& rng);

  nn::Tensor forward(const nn::Tensor& x) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
  int out_channels() const;
};

}  // namespace g2aps::model
