#include "g2aps/loss/oim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "g2aps/common/rng.hpp"

namespace g2aps::loss {

OimState::OimState(int num_classes, int queue_size, int dim, double temperature, double momentum,
                   std::uint64_t seed)
    : lut_(num_classes, dim), queue_(Eigen::MatrixXd::Zero(queue_size, dim)), temperature_(temperature),
      momentum_(momentum) {
  if (num_classes < 0 || queue_size < 0 || dim <= 0) throw std::invalid_argument("OimState: bad sizes");
  if (!(temperature > 0)) throw std::invalid_argument("OimState: temperature must be > 0");
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("OimState: momentum must be in (0, 1)");
  Rng rng(seed);
  for (int i = 0; i < num_classes; ++i) {
    for (int j = 0; j < dim; ++j) lut_(i, j) = rng.normal();
    lut_.row(i).normalize();
  }
}

Eigen::MatrixXd OimState::classifier() const {
  Eigen::MatrixXd w(lut_.rows() + occupied_, lut_.cols());
  w.topRows(lut_.rows()) = lut_;
  w.bottomRows(occupied_) = queue_.topRows(occupied_);
  return w;
}

void OimState::push_unlabeled(const Eigen::RowVectorXd& x) {
  if (queue_.rows() == 0) return;
  queue_.row(cursor_) = x.normalized();
  cursor_ = (cursor_ + 1) % static_cast<int>(queue_.rows());
  occupied_ = std::min(occupied_ + 1, static_cast<int>(queue_.rows()));
}

void OimState::update(const Eigen::MatrixXd& x, std::span<const int> labels) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y >= 0) {
      Eigen::RowVectorXd v = momentum_ * lut_.row(y) + (1.0 - momentum_) * x.row(i);
      lut_.row(y) = v.normalized();
    } else {
      push_unlabeled(x.row(i));
    }
  }
}

void OimState::restore(Eigen::MatrixXd lut, Eigen::MatrixXd queue, int cursor, int occupied) {
  lut_ = std::move(lut);
  queue_ = std::move(queue);
  cursor_ = cursor;
  occupied_ = occupied;
}

namespace {

void check_dims(const Eigen::MatrixXd& x, const OimState& state) {
  if (x.cols() != state.dim()) {
    throw std::invalid_argument("oim: embedding dim " + std::to_string(x.cols()) + " != state dim " +
                                std::to_string(state.dim()));
  }
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    p.row(i) = (z.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

Eigen::MatrixXd oim_probabilities(const Eigen::MatrixXd& x, const OimState& state) {
  check_dims(x, state);
  return softmax_rows(x * state.lut().transpose() / state.temperature());
}

OimLoss oim_loss(const Eigen::MatrixXd& x, std::span<const int> labels, const OimState& state) {
  check_dims(x, state);
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw std::invalid_argument("oim: label count");
  OimLoss out;
  out.grad = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (int y : labels) {
    if (y < -1 || y >= state.num_classes()) throw std::invalid_argument("oim: label out of range: " + std::to_string(y));
    if (y >= 0) ++out.labeled;
  }
  if (out.labeled == 0) {
    out.no_labeled = true;
    return out;
  }
  const Eigen::MatrixXd w = state.classifier();
  const double inv_tau = 1.0 / state.temperature();
  const Eigen::MatrixXd z = x * w.transpose() * inv_tau;
  const Eigen::MatrixXd p = softmax_rows(z);
  Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0) continue;
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.value += lse - z(i, y);
    dz.row(i) = p.row(i);
    dz(i, y) -= 1.0;
  }
  out.value /= out.labeled;
  out.grad = dz * w * (inv_tau / out.labeled);
  return out;
}

OimLoss oim_loss_and_update(const Eigen::MatrixXd& x, std::span<const int> labels, OimState& state) {
  OimLoss out = oim_loss(x, labels, state);
  state.update(x, labels);
  return out;
}

}  // namespace g2aps::loss
