#pragma once

#include <cstdint>
#include <span>

#include <Eigen/Dense>

namespace g2aps::loss {

/// Lookup table of labeled-identity prototypes plus a circular queue of
/// unlabeled embeddings. All stored rows are unit-norm.
class OimState {
 public:
  OimState() = default;

  /// LUT rows start as seeded random unit vectors; the queue starts empty.
  OimState(int num_classes, int queue_size, int dim, double temperature, double momentum, std::uint64_t seed);

  int num_classes() const { return static_cast<int>(lut_.rows()); }
  int queue_size() const { return static_cast<int>(queue_.rows()); }
  int dim() const { return static_cast<int>(lut_.cols()); }
  double temperature() const { return temperature_; }
  double momentum() const { return momentum_; }

  const Eigen::MatrixXd& lut() const { return lut_; }
  /// Full queue storage; only the first occupancy() rows hold data.
  const Eigen::MatrixXd& queue_storage() const { return queue_; }
  int occupancy() const { return occupied_; }
  /// Next slot to be written.
  int cursor() const { return cursor_; }

  /// LUT rows followed by occupied queue rows.
  Eigen::MatrixXd classifier() const;

  /// lut[y] <- normalize(momentum * lut[y] + (1 - momentum) * x) for labeled
  /// rows, FIFO push of unlabeled rows, in row order.
  void update(const Eigen::MatrixXd& x, std::span<const int> labels);

  void push_unlabeled(const Eigen::RowVectorXd& x);

  /// Raw state access for checkpoint restore; rows are not re-validated.
  void restore(Eigen::MatrixXd lut, Eigen::MatrixXd queue, int cursor, int occupied);

  bool operator==(const OimState&) const = default;

 private:
  Eigen::MatrixXd lut_;
  Eigen::MatrixXd queue_;
  int cursor_ = 0;
  int occupied_ = 0;
  double temperature_ = 1.0 / 30.0;
  double momentum_ = 0.5;
};

/// Row-softmax of x * lut^T / tau over the C labeled classes (queue excluded).
/// Throws std::invalid_argument on a dimension mismatch.
Eigen::MatrixXd oim_probabilities(const Eigen::MatrixXd& x, const OimState& state);

struct OimLoss {
  double value = 0.0;
  Eigen::MatrixXd grad;  // d value / d x
  int labeled = 0;
  bool no_labeled = false;  // value is 0 because nothing was labeled
};

/// Mean over labeled rows of -log softmax(x * [lut; queue]^T / tau)[y].
/// Labels must lie in {-1} and [0, C). Does not modify the state.
OimLoss oim_loss(const Eigen::MatrixXd& x, std::span<const int> labels, const OimState& state);

/// oim_loss followed by state.update.
OimLoss oim_loss_and_update(const Eigen::MatrixXd& x, std::span<const int> labels, OimState& state);

}  // namespace g2aps::loss
