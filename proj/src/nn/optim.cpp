#include "g2aps/nn/optim.hpp"

#include <cmath>

namespace g2aps::nn {

Sgd::Sgd(ParameterList params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay), buffers_(params_.size()) {}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Node& n = *params_[i].tensor.node();
    if (n.grad.empty()) continue;
    auto& v = buffers_[i];
    const bool fresh = v.empty();
    if (fresh) v.assign(n.value.size(), 0.0f);
    for (std::size_t j = 0; j < n.value.size(); ++j) {
      const float g = n.grad[j] + static_cast<float>(weight_decay_) * n.value[j];
      v[j] = fresh ? g : static_cast<float>(momentum_) * v[j] + g;
      n.value[j] -= static_cast<float>(lr) * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double clip_grad_norm(const ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const auto s = static_cast<float>(max_norm / norm);
    for (const auto& p : params) {
      for (float& g : p.tensor.node()->grad) g *= s;
    }
  }
  return norm;
}

}  // namespace g2aps::nn
