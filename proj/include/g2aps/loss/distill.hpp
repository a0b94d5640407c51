#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace g2aps::loss {

inline constexpr double kLogFloor = 1e-12;

/// Sum_j p_j log(p_j / q_j) with 0 log 0 = 0 and q floored at kLogFloor.
/// Throws std::invalid_argument on negative entries or a size mismatch.
double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXd>& q);

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& z);
Eigen::MatrixXd row_log_softmax(const Eigen::MatrixXd& z);

/// Value of a two-input loss and its gradients with respect to both inputs.
struct PairLoss {
  double value = 0.0;
  Eigen::MatrixXd grad_student;
  Eigen::MatrixXd grad_teacher;
  bool empty = false;  // no rows; value is 0
};

/// (1/N) Sum_i [KL(p_t_i || p_s_i) + KL(p_s_i || p_t_i)] over probability rows.
PairLoss prob_distill_loss(const Eigen::MatrixXd& p_s, const Eigen::MatrixXd& p_t);

/// Same loss on embeddings: each branch's class distribution is
/// softmax(F lut^T / tau) over its own lookup table. Gradients are with
/// respect to F_s and F_t; the tables are held fixed.
PairLoss prob_distill_embeddings(const Eigen::MatrixXd& f_s, const Eigen::MatrixXd& lut_s, const Eigen::MatrixXd& f_t,
                                 const Eigen::MatrixXd& lut_t, double temperature);

/// M = F F^T.
Eigen::MatrixXd similarity_matrix(const Eigen::MatrixXd& f);

enum class RelationDistance { kKl, kMse, kMutualInfo };
enum class RelationDirection { kStudentToTeacher, kTeacherToStudent, kSymmetric };

std::string_view to_string(RelationDistance d);
std::string_view to_string(RelationDirection d);
/// Accepts "kl", "mse", "mi" / "mutual_info". Throws std::invalid_argument.
RelationDistance parse_relation_distance(std::string_view s);
/// Accepts "s_to_t", "t_to_s", "symmetric". Throws std::invalid_argument.
RelationDirection parse_relation_direction(std::string_view s);

/// Relation loss between the batch similarity structures of two branches.
///   kl:  rows of M turned into distributions by softmax, (1/N) Sum_i KL(D_s_i || D_t_i)
///   mse: (1/N) Sum_i ||D_s_i - D_t_i||^2
///   mutual_info: cosine kernel K = (M + 1) / 2, rows normalized to sum 1,
///                then compared by KL as for kl
/// The direction swaps the KL arguments (mse ignores it). Row counts must
/// match; throws std::invalid_argument otherwise.
PairLoss relation_distill_loss(const Eigen::MatrixXd& f_s, const Eigen::MatrixXd& f_t, RelationDistance distance,
                               RelationDirection direction = RelationDirection::kStudentToTeacher);

}  // namespace g2aps::loss
