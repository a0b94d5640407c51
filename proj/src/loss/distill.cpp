#include "g2aps/loss/distill.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace g2aps::loss {

double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& p, const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  if ((p.array() < 0).any() || (q.array() < 0).any()) throw std::invalid_argument("kl_divergence: negative entry");
  double s = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    if (p[j] == 0.0) continue;
    s += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kLogFloor)));
  }
  return s;
}

Eigen::MatrixXd row_log_softmax(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd l(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    l.row(i) = z.row(i).array() - lse;
  }
  return l;
}

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& z) { return row_log_softmax(z).array().exp(); }

PairLoss prob_distill_loss(const Eigen::MatrixXd& p_s, const Eigen::MatrixXd& p_t) {
  if (p_s.rows() != p_t.rows() || p_s.cols() != p_t.cols()) throw std::invalid_argument("prob_distill_loss: shape mismatch");
  PairLoss out;
  if (p_s.rows() == 0) {
    out.empty = true;
    return out;
  }
  for (Eigen::Index i = 0; i < p_s.rows(); ++i) {
    const Eigen::VectorXd s = p_s.row(i).transpose();
    const Eigen::VectorXd t = p_t.row(i).transpose();
    out.value += kl_divergence(t, s) + kl_divergence(s, t);
  }
  out.value /= static_cast<double>(p_s.rows());
  return out;
}

namespace {

// Gradient of KL(softmax(z) || q) with respect to z, given p = softmax(z)
// and d = log p - log q.
Eigen::MatrixXd kl_grad_first(const Eigen::MatrixXd& p, const Eigen::MatrixXd& d) {
  Eigen::MatrixXd g = p.cwiseProduct(d);
  const Eigen::VectorXd inner = g.rowwise().sum();
  return g - p.cwiseProduct(inner.replicate(1, p.cols()));
}

// KL of softmax rows: value and gradients wrt the logits of both sides,
// summed over rows (not averaged).
struct LogitKl {
  double value;
  Eigen::MatrixXd ga;  // wrt first argument logits
  Eigen::MatrixXd gb;  // wrt second argument logits
};

LogitKl softmax_kl(const Eigen::MatrixXd& za, const Eigen::MatrixXd& zb) {
  const Eigen::MatrixXd la = row_log_softmax(za), lb = row_log_softmax(zb);
  const Eigen::MatrixXd pa = la.array().exp(), pb = lb.array().exp();
  const Eigen::MatrixXd d = la - lb;
  return {pa.cwiseProduct(d).sum(), kl_grad_first(pa, d), pb - pa};
}

// Backward through M = F F^T.
Eigen::MatrixXd gram_backward(const Eigen::MatrixXd& g, const Eigen::MatrixXd& f) { return (g + g.transpose()) * f; }

// KL(a || b) on already-normalized rows with the floor inside the logs;
// gradients wrt a and b, summed over rows.
LogitKl floored_kl(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::ArrayXXd la = (a.array() + kLogFloor).log(), lb = (b.array() + kLogFloor).log();
  LogitKl r;
  r.value = (a.array() * (la - lb)).sum();
  r.ga = (la - lb + a.array() / (a.array() + kLogFloor)).matrix();
  r.gb = (-a.array() / (b.array() + kLogFloor)).matrix();
  return r;
}

// Backward through P = K / rowsum(K).
Eigen::MatrixXd row_normalize_backward(const Eigen::MatrixXd& gp, const Eigen::MatrixXd& p, const Eigen::VectorXd& sums) {
  const Eigen::VectorXd inner = gp.cwiseProduct(p).rowwise().sum();
  Eigen::MatrixXd gk = gp - inner.replicate(1, p.cols());
  return gk.array().colwise() / sums.array();
}

}  // namespace

PairLoss prob_distill_embeddings(const Eigen::MatrixXd& f_s, const Eigen::MatrixXd& lut_s, const Eigen::MatrixXd& f_t,
                                 const Eigen::MatrixXd& lut_t, double temperature) {
  if (f_s.rows() != f_t.rows() || f_s.cols() != lut_s.cols() || f_t.cols() != lut_t.cols() ||
      lut_s.rows() != lut_t.rows()) {
    throw std::invalid_argument("prob_distill_embeddings: shape mismatch");
  }
  PairLoss out;
  out.grad_student = Eigen::MatrixXd::Zero(f_s.rows(), f_s.cols());
  out.grad_teacher = Eigen::MatrixXd::Zero(f_t.rows(), f_t.cols());
  if (f_s.rows() == 0) {
    out.empty = true;
    return out;
  }
  const double n = static_cast<double>(f_s.rows());
  const Eigen::MatrixXd z_s = f_s * lut_s.transpose() / temperature;
  const Eigen::MatrixXd z_t = f_t * lut_t.transpose() / temperature;
  const LogitKl st = softmax_kl(z_s, z_t);
  const LogitKl ts = softmax_kl(z_t, z_s);
  out.value = (st.value + ts.value) / n;
  const Eigen::MatrixXd dz_s = (st.ga + ts.gb) / n;
  const Eigen::MatrixXd dz_t = (st.gb + ts.ga) / n;
  out.grad_student = dz_s * lut_s / temperature;
  out.grad_teacher = dz_t * lut_t / temperature;
  return out;
}

Eigen::MatrixXd similarity_matrix(const Eigen::MatrixXd& f) { return f * f.transpose(); }

std::string_view to_string(RelationDistance d) {
  switch (d) {
    case RelationDistance::kKl: return "kl";
    case RelationDistance::kMse: return "mse";
    case RelationDistance::kMutualInfo: return "mi";
  }
  return "?";
}

std::string_view to_string(RelationDirection d) {
  switch (d) {
    case RelationDirection::kStudentToTeacher: return "s_to_t";
    case RelationDirection::kTeacherToStudent: return "t_to_s";
    case RelationDirection::kSymmetric: return "symmetric";
  }
  return "?";
}

RelationDistance parse_relation_distance(std::string_view s) {
  if (s == "kl") return RelationDistance::kKl;
  if (s == "mse") return RelationDistance::kMse;
  if (s == "mi" || s == "mutual_info") return RelationDistance::kMutualInfo;
  throw std::invalid_argument("unknown relation distance: " + std::string(s));
}

RelationDirection parse_relation_direction(std::string_view s) {
  if (s == "s_to_t") return RelationDirection::kStudentToTeacher;
  if (s == "t_to_s") return RelationDirection::kTeacherToStudent;
  if (s == "symmetric") return RelationDirection::kSymmetric;
  throw std::invalid_argument("unknown relation direction: " + std::string(s));
}

PairLoss relation_distill_loss(const Eigen::MatrixXd& f_s, const Eigen::MatrixXd& f_t, RelationDistance distance,
                               RelationDirection direction) {
  if (f_s.rows() != f_t.rows()) throw std::invalid_argument("relation_distill_loss: row count mismatch");
  PairLoss out;
  out.grad_student = Eigen::MatrixXd::Zero(f_s.rows(), f_s.cols());
  out.grad_teacher = Eigen::MatrixXd::Zero(f_t.rows(), f_t.cols());
  if (f_s.rows() == 0) {
    out.empty = true;
    return out;
  }
  const double n = static_cast<double>(f_s.rows());
  const Eigen::MatrixXd m_s = similarity_matrix(f_s), m_t = similarity_matrix(f_t);
  Eigen::MatrixXd g_s = Eigen::MatrixXd::Zero(m_s.rows(), m_s.cols());
  Eigen::MatrixXd g_t = g_s;

  const bool forward = direction != RelationDirection::kTeacherToStudent;
  const bool backward = direction != RelationDirection::kStudentToTeacher;

  switch (distance) {
    case RelationDistance::kKl: {
      if (forward) {
        const LogitKl r = softmax_kl(m_s, m_t);
        out.value += r.value;
        g_s += r.ga;
        g_t += r.gb;
      }
      if (backward) {
        const LogitKl r = softmax_kl(m_t, m_s);
        out.value += r.value;
        g_t += r.ga;
        g_s += r.gb;
      }
      break;
    }
    case RelationDistance::kMse: {
      const Eigen::MatrixXd d_s = row_softmax(m_s), d_t = row_softmax(m_t);
      const Eigen::MatrixXd diff = d_s - d_t;
      out.value = diff.squaredNorm();
      // Through the softmax: dz = p * (g - <p, g>).
      auto softmax_back = [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& g) {
        const Eigen::VectorXd inner = p.cwiseProduct(g).rowwise().sum();
        return Eigen::MatrixXd(p.cwiseProduct(g - inner.replicate(1, p.cols())));
      };
      g_s = softmax_back(d_s, 2.0 * diff);
      g_t = softmax_back(d_t, -2.0 * diff);
      break;
    }
    case RelationDistance::kMutualInfo: {
      const Eigen::MatrixXd k_s = (m_s.array() + 1.0) * 0.5, k_t = (m_t.array() + 1.0) * 0.5;
      const Eigen::VectorXd sum_s = k_s.rowwise().sum(), sum_t = k_t.rowwise().sum();
      const Eigen::MatrixXd p_s = k_s.array().colwise() / sum_s.array();
      const Eigen::MatrixXd p_t = k_t.array().colwise() / sum_t.array();
      Eigen::MatrixXd gp_s = Eigen::MatrixXd::Zero(p_s.rows(), p_s.cols());
      Eigen::MatrixXd gp_t = gp_s;
      if (forward) {
        const LogitKl r = floored_kl(p_s, p_t);
        out.value += r.value;
        gp_s += r.ga;
        gp_t += r.gb;
      }
      if (backward) {
        const LogitKl r = floored_kl(p_t, p_s);
        out.value += r.value;
        gp_t += r.ga;
        gp_s += r.gb;
      }
      g_s = row_normalize_backward(gp_s, p_s, sum_s) * 0.5;
      g_t = row_normalize_backward(gp_t, p_t, sum_t) * 0.5;
      break;
    }
  }
  out.value /= n;
  out.grad_student = gram_backward(g_s / n, f_s);
  out.grad_teacher = gram_backward(g_t / n, f_t);
  return out;
}

}  // namespace g2aps::loss
