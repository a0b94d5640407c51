#pragma once

#include <string>
#include <vector>

#include "g2aps/nn/tensor.hpp"

namespace g2aps::nn {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

/// SGD with momentum and L2 weight decay, PyTorch update order:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * v.
/// Parameters that received no gradient in a step are left untouched.
class Sgd {
 public:
  Sgd(ParameterList params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();

  const ParameterList& parameters() const { return params_; }

  /// One buffer per parameter, empty until the parameter's first update.
  std::vector<std::vector<float>>& momentum_buffers() { return buffers_; }
  const std::vector<std::vector<float>>& momentum_buffers() const { return buffers_; }

 private:
  ParameterList params_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<float>> buffers_;
};

/// Rescales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

}  // namespace g2aps::nn
