#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include "doctest.h"
#include "g2aps/common/errors.hpp"
#include "g2aps/loss/distill.hpp"
#include "g2aps/loss/objective.hpp"
#include "g2aps/loss/oim.hpp"
#include "support.hpp"

using namespace g2aps;
using namespace g2aps::loss;
using g2aps::testing::finite_difference;
using g2aps::testing::random_matrix;
using g2aps::testing::random_unit_rows;
using g2aps::testing::relative_error;

namespace {

// Reference KL straight from the definition, no shared helpers.
double kl_ref(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0) s += p[j] * std::log(p[j] / std::max(q[j], 1e-12));
  }
  return s;
}

std::vector<double> softmax_ref(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double sum = 0;
  std::vector<double> e;
  for (double v : z) {
    e.push_back(std::exp(v - m));
    sum += e.back();
  }
  for (double& v : e) v /= sum;
  return e;
}

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r[i++] = x;
  return r;
}

OimState toy_state(int classes, int queue, int dim, double tau) {
  OimState s(classes, queue, dim, tau, 0.5, 1);
  Eigen::MatrixXd lut = Eigen::MatrixXd::Identity(classes, dim);
  s.restore(lut, Eigen::MatrixXd::Zero(queue, dim), 0, 0);
  return s;
}

}  // namespace

TEST_CASE("kl_divergence hand values") {
  CHECK(kl_divergence(vec({0.3, 0.7}), vec({0.3, 0.7})) == doctest::Approx(0.0));
  const double a = kl_divergence(vec({1.0, 0.0}), vec({0.5, 0.5}));
  CHECK(a == doctest::Approx(kl_ref({1, 0}, {0.5, 0.5})).epsilon(1e-12));
  CHECK(a == doctest::Approx(0.6931).epsilon(1e-4));
  const double b = kl_divergence(vec({0.5, 0.5}), vec({0.9, 0.1}));
  CHECK(b == doctest::Approx(kl_ref({0.5, 0.5}, {0.9, 0.1})).epsilon(1e-12));
  CHECK(b == doctest::Approx(0.5108).epsilon(1e-4));
}

TEST_CASE("kl_divergence rejects negative entries and size mismatch") {
  CHECK_THROWS_AS(kl_divergence(vec({-0.1, 1.1}), vec({0.5, 0.5})), std::invalid_argument);
  CHECK_THROWS_AS(kl_divergence(vec({0.5, 0.5}), vec({1.0})), std::invalid_argument);
}

TEST_CASE("kl_divergence floors q inside the log") {
  const double v = kl_divergence(vec({0.5, 0.5}), vec({1.0, 0.0}));
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(0.5 * std::log(0.5) + 0.5 * (std::log(0.5) - std::log(1e-12))));
}

TEST_CASE("kl_divergence is nonnegative on random distributions") {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    Eigen::VectorXd p(5), q(5);
    for (int j = 0; j < 5; ++j) {
      p[j] = rng.uniform();
      q[j] = rng.uniform() + 1e-3;
    }
    p /= p.sum();
    q /= q.sum();
    CHECK(kl_divergence(p, q) >= 0.0);
    CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-14));
  }
}

TEST_CASE("prob_distill_loss hand value, identity and symmetry") {
  Eigen::MatrixXd ps(1, 2), pt(1, 2);
  ps << 0.5, 0.5;
  pt << 0.9, 0.1;
  const double oracle = kl_ref({0.9, 0.1}, {0.5, 0.5}) + kl_ref({0.5, 0.5}, {0.9, 0.1});
  const PairLoss l = prob_distill_loss(ps, pt);
  CHECK(l.value == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(l.value == doctest::Approx(0.8789).epsilon(1e-4));
  CHECK(prob_distill_loss(pt, ps).value == l.value);
  CHECK(prob_distill_loss(ps, ps).value == 0.0);

  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    Eigen::MatrixXd a = random_matrix(4, 6, rng).array().exp();
    Eigen::MatrixXd b = random_matrix(4, 6, rng).array().exp();
    a = a.array().colwise() / a.rowwise().sum().array();
    b = b.array().colwise() / b.rowwise().sum().array();
    CHECK(prob_distill_loss(a, b).value == prob_distill_loss(b, a).value);
    CHECK(prob_distill_loss(a, b).value > 0.0);
  }
}

TEST_CASE("prob_distill_loss on an empty batch is flagged zero") {
  const PairLoss l = prob_distill_loss(Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 3));
  CHECK(l.empty);
  CHECK(l.value == 0.0);
  const PairLoss e = prob_distill_embeddings(Eigen::MatrixXd(0, 4), Eigen::MatrixXd::Identity(3, 4), Eigen::MatrixXd(0, 4),
                                             Eigen::MatrixXd::Identity(3, 4), 1.0);
  CHECK(e.empty);
  CHECK(e.value == 0.0);
}

TEST_CASE("prob_distill_embeddings matches the probability form") {
  Rng rng(11);
  const auto fs = random_unit_rows(5, 8, rng), ft = random_unit_rows(5, 8, rng);
  const auto ls = random_unit_rows(4, 8, rng), lt = random_unit_rows(4, 8, rng);
  const double tau = 0.2;
  const PairLoss a = prob_distill_embeddings(fs, ls, ft, lt, tau);
  const PairLoss b = prob_distill_loss(row_softmax(fs * ls.transpose() / tau), row_softmax(ft * lt.transpose() / tau));
  CHECK(a.value == doctest::Approx(b.value).epsilon(1e-10));
}

TEST_CASE("similarity_matrix examples and symmetry") {
  Eigen::MatrixXd one(1, 3);
  one << 0, 1, 0;
  CHECK(similarity_matrix(one)(0, 0) == doctest::Approx(1.0));
  const Eigen::MatrixXd id = similarity_matrix(Eigen::MatrixXd::Identity(2, 4));
  CHECK(id.isApprox(Eigen::MatrixXd::Identity(2, 2)));
  Eigen::MatrixXd e(2, 3);
  e << 1, 0, 0, std::sqrt(0.5), std::sqrt(0.5), 0;
  CHECK(similarity_matrix(e)(0, 1) == doctest::Approx(0.7071).epsilon(1e-4));
  CHECK(similarity_matrix(Eigen::MatrixXd(0, 4)).size() == 0);

  Rng rng(2);
  const auto f = random_unit_rows(6, 5, rng);
  const auto m = similarity_matrix(f);
  CHECK(m == m.transpose());
  for (int i = 0; i < 6; ++i) CHECK(m(i, i) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("relation_distill_loss hand values") {
  Eigen::MatrixXd fs(2, 2), ft(2, 2);
  fs << 1, 0, 0, 1;
  ft << 1, 0, 1, 0;
  const auto row0 = softmax_ref({1, 0});
  const auto row1 = softmax_ref({0, 1});
  const double kl_oracle = (kl_ref(row0, {0.5, 0.5}) + kl_ref(row1, {0.5, 0.5})) / 2;
  const double kl = relation_distill_loss(fs, ft, RelationDistance::kKl).value;
  CHECK(kl == doctest::Approx(kl_oracle).epsilon(1e-12));
  CHECK(std::abs(kl - 0.1110) <= 1e-3);

  double mse_oracle = 0;
  for (const auto& r : {row0, row1}) mse_oracle += (r[0] - 0.5) * (r[0] - 0.5) + (r[1] - 0.5) * (r[1] - 0.5);
  mse_oracle /= 2;
  const double mse = relation_distill_loss(fs, ft, RelationDistance::kMse).value;
  CHECK(mse == doctest::Approx(mse_oracle).epsilon(1e-12));
  CHECK(mse == doctest::Approx(0.1068).epsilon(1e-3));
}

TEST_CASE("relation_distill_loss mutual_info against a direct oracle") {
  Rng rng(17);
  const auto fs = random_unit_rows(4, 6, rng), ft = random_unit_rows(4, 6, rng);
  double oracle = 0;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> ps(4), pt(4);
    double ss = 0, st = 0;
    for (int j = 0; j < 4; ++j) {
      ps[j] = (fs.row(i).dot(fs.row(j)) + 1) / 2;
      pt[j] = (ft.row(i).dot(ft.row(j)) + 1) / 2;
      ss += ps[j];
      st += pt[j];
    }
    double kl = 0;
    for (int j = 0; j < 4; ++j) {
      const double a = ps[j] / ss, b = pt[j] / st;
      kl += a * (std::log(a + 1e-12) - std::log(b + 1e-12));
    }
    oracle += kl;
  }
  oracle /= 4;
  CHECK(relation_distill_loss(fs, ft, RelationDistance::kMutualInfo).value == doctest::Approx(oracle).epsilon(1e-10));
}

TEST_CASE("relation_distill_loss vanishes for identical branches and rejects mismatched N") {
  Rng rng(4);
  const auto f = random_unit_rows(5, 7, rng);
  for (auto d : {RelationDistance::kKl, RelationDistance::kMse, RelationDistance::kMutualInfo}) {
    CHECK(relation_distill_loss(f, f, d).value == doctest::Approx(0.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(relation_distill_loss(f, random_unit_rows(4, 7, rng), RelationDistance::kKl), std::invalid_argument);
  CHECK(relation_distill_loss(Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 3), RelationDistance::kKl).empty);
}

TEST_CASE("relation direction variants") {
  Rng rng(8);
  const auto fs = random_unit_rows(4, 5, rng), ft = random_unit_rows(4, 5, rng);
  for (auto d : {RelationDistance::kKl, RelationDistance::kMutualInfo}) {
    const double st = relation_distill_loss(fs, ft, d, RelationDirection::kStudentToTeacher).value;
    const double ts = relation_distill_loss(fs, ft, d, RelationDirection::kTeacherToStudent).value;
    const double sym = relation_distill_loss(fs, ft, d, RelationDirection::kSymmetric).value;
    CHECK(ts == doctest::Approx(relation_distill_loss(ft, fs, d).value).epsilon(1e-12));
    CHECK(sym == doctest::Approx(st + ts).epsilon(1e-12));
  }
  CHECK(parse_relation_direction("t_to_s") == RelationDirection::kTeacherToStudent);
  CHECK(parse_relation_distance("mutual_info") == RelationDistance::kMutualInfo);
  CHECK(parse_relation_distance("mi") == RelationDistance::kMutualInfo);
  CHECK_THROWS_AS(parse_relation_distance("cosine"), std::invalid_argument);
}

TEST_CASE("row softmax is invariant to per-row shifts") {
  Rng rng(6);
  const auto m = random_matrix(5, 5, rng);
  Eigen::MatrixXd shifted = m;
  for (int i = 0; i < 5; ++i) shifted.row(i).array() += 3.0 * (i + 1);
  CHECK((row_softmax(m) - row_softmax(shifted)).cwiseAbs().maxCoeff() <= 1e-7);
}

TEST_CASE("distillation gradients match finite differences") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(7));
    const int d = 3 + static_cast<int>(rng.uniform_int(14));
    const auto fs = random_matrix(n, d, rng), ft = random_matrix(n, d, rng);
    const auto ls = random_unit_rows(5, d, rng), lt = random_unit_rows(5, d, rng);

    const PairLoss p = prob_distill_embeddings(fs, ls, ft, lt, 0.5);
    CHECK(relative_error(p.grad_student,
                         finite_difference([&](const Eigen::MatrixXd& x) { return prob_distill_embeddings(x, ls, ft, lt, 0.5).value; }, fs)) < 1e-4);
    CHECK(relative_error(p.grad_teacher,
                         finite_difference([&](const Eigen::MatrixXd& x) { return prob_distill_embeddings(fs, ls, x, lt, 0.5).value; }, ft)) < 1e-4);

    for (auto dist : {RelationDistance::kKl, RelationDistance::kMse, RelationDistance::kMutualInfo}) {
      for (auto dir : {RelationDirection::kStudentToTeacher, RelationDirection::kTeacherToStudent, RelationDirection::kSymmetric}) {
        // The cosine kernel needs M > -1; unit rows keep it in range.
        const auto us = random_unit_rows(n, d, rng), ut = random_unit_rows(n, d, rng);
        const PairLoss r = relation_distill_loss(us, ut, dist, dir);
        const auto gs = finite_difference([&](const Eigen::MatrixXd& x) { return relation_distill_loss(x, ut, dist, dir).value; }, us);
        const auto gt = finite_difference([&](const Eigen::MatrixXd& x) { return relation_distill_loss(us, x, dist, dir).value; }, ut);
        CHECK(relative_error(r.grad_student, gs) < 1e-4);
        CHECK(relative_error(r.grad_teacher, gt) < 1e-4);
      }
    }
  }
}

TEST_CASE("OIM toy loss") {
  const OimState s = toy_state(2, 0, 2, 1.0);
  Eigen::MatrixXd x = s.lut().row(1);
  const std::vector<int> y{1};
  const OimLoss l = oim_loss(x, y, s);
  const double oracle = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(l.value == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(std::abs(l.value - 0.3133) <= 1e-4);
  CHECK(l.labeled == 1);
}

TEST_CASE("oim_probabilities examples") {
  const OimState s = toy_state(2, 3, 2, 1.0);
  Eigen::MatrixXd x(2, 2);
  x << 0, 1, 0, 1;
  const auto p = oim_probabilities(x, s);
  CHECK(p.cols() == 2);
  CHECK(p(0, 1) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-12));
  CHECK(p.row(0) == p.row(1));

  OimState hot(4, 0, 4, 1e6, 0.5, 3);
  Rng rng(1);
  const auto q = oim_probabilities(random_unit_rows(3, 4, rng), hot);
  CHECK((q.array() - 0.25).abs().maxCoeff() < 1e-5);
  CHECK_THROWS_AS(oim_probabilities(Eigen::MatrixXd::Zero(1, 5), s), std::invalid_argument);
}

TEST_CASE("OIM loss with no labeled rows is flagged zero") {
  OimState s(3, 4, 5, 1.0 / 30, 0.5, 9);
  Rng rng(2);
  const std::vector<int> y{-1, -1};
  const OimLoss l = oim_loss(random_unit_rows(2, 5, rng), y, s);
  CHECK(l.no_labeled);
  CHECK(l.value == 0.0);
  CHECK(l.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("OIM rejects labels outside {-1} and [0, C)") {
  OimState s(3, 2, 4, 1.0 / 30, 0.5, 9);
  Rng rng(2);
  const auto x = random_unit_rows(1, 4, rng);
  CHECK_THROWS_AS(oim_loss(x, std::vector<int>{3}, s), std::invalid_argument);
  CHECK_THROWS_AS(oim_loss(x, std::vector<int>{-2}, s), std::invalid_argument);
}

TEST_CASE("OIM loss counts the queue as negatives") {
  OimState s = toy_state(2, 2, 3, 1.0);
  Eigen::MatrixXd x(1, 3);
  x << 0, 1, 0;
  const double before = oim_loss(x, std::vector<int>{1}, s).value;
  Eigen::RowVectorXd q(3);
  q << 0, 0, 1;
  s.push_unlabeled(q);
  const double after = oim_loss(x, std::vector<int>{1}, s).value;
  CHECK(after == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 2.0))).epsilon(1e-12));
  CHECK(after > before);
}

TEST_CASE("OIM gradient matches finite differences") {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(7));
    const int d = 3 + static_cast<int>(rng.uniform_int(14));
    OimState s(5, 4, d, 0.1, 0.5, 100 + trial);
    for (int k = 0; k < 3; ++k) s.push_unlabeled(random_unit_rows(1, d, rng));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.uniform_int(6)) - 1;
    y[0] = 2;
    const auto x = random_matrix(n, d, rng);
    const OimLoss l = oim_loss(x, y, s);
    const auto fd = finite_difference([&](const Eigen::MatrixXd& z) { return oim_loss(z, y, s).value; }, x);
    CHECK(relative_error(l.grad, fd) < 1e-4);
  }
}

TEST_CASE("OIM update fixed point and momentum rule") {
  OimState s(3, 2, 4, 1.0 / 30, 0.5, 5);
  const Eigen::MatrixXd before = s.lut();
  s.update(before.row(1), std::vector<int>{1});
  CHECK((s.lut().row(1) - before.row(1)).norm() < 1e-12);

  Rng rng(3);
  const Eigen::MatrixXd x = random_unit_rows(1, 4, rng);
  s.update(x, std::vector<int>{2});
  Eigen::RowVectorXd expect = 0.5 * before.row(2) + 0.5 * x.row(0);
  expect.normalize();
  CHECK((s.lut().row(2) - expect).norm() < 1e-12);
  CHECK(s.lut().row(0) == before.row(0));
}

TEST_CASE("OIM queue is FIFO: pushing Q+1 evicts the first") {
  OimState s(2, 3, 2, 1.0, 0.5, 1);
  std::vector<Eigen::RowVectorXd> pushed;
  for (int i = 0; i < 4; ++i) {
    Eigen::RowVectorXd v(2);
    v << std::cos(i * 0.3), std::sin(i * 0.3);
    pushed.push_back(v);
    s.push_unlabeled(v);
  }
  CHECK(s.occupancy() == 3);
  bool first_present = false;
  for (int r = 0; r < 3; ++r) first_present |= (s.queue_storage().row(r) - pushed[0]).norm() < 1e-12;
  CHECK_FALSE(first_present);
  CHECK((s.queue_storage().row(0) - pushed[3]).norm() < 1e-12);
}

TEST_CASE("OIM state machine against a reference ring buffer") {
  const int q = 7, c = 5, d = 6;
  OimState s(c, q, d, 1.0 / 30, 0.5, 77);
  Rng rng(77);
  std::vector<Eigen::RowVectorXd> ring(q);
  int cursor = 0, count = 0;
  for (int step = 0; step < 1000; ++step) {
    const int n = 1 + static_cast<int>(rng.uniform_int(4));
    Eigen::MatrixXd x = random_unit_rows(n, d, rng);
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.uniform_int(c + 1)) - 1;
    s.update(x, y);
    for (int i = 0; i < n; ++i) {
      if (y[static_cast<std::size_t>(i)] != -1) continue;
      ring[static_cast<std::size_t>(cursor)] = x.row(i);
      cursor = (cursor + 1) % q;
      count = std::min(count + 1, q);
    }
    REQUIRE(s.occupancy() == count);
    REQUIRE(s.cursor() == cursor);
  }
  for (int r = 0; r < q; ++r) CHECK((s.queue_storage().row(r) - ring[static_cast<std::size_t>(r)]).norm() < 1e-12);
  for (int r = 0; r < c; ++r) CHECK(std::abs(s.lut().row(r).norm() - 1.0) < 1e-5);
  for (int r = 0; r < q; ++r) CHECK(std::abs(s.queue_storage().row(r).norm() - 1.0) < 1e-5);
  CHECK(s.classifier().rows() == c + q);
}

TEST_CASE("OimState constructor validation") {
  CHECK_THROWS_AS(OimState(2, 2, 0, 1.0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(OimState(2, 2, 4, 0.0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(OimState(2, 2, 4, 1.0, 1.0, 1), std::invalid_argument);
  const OimState s(4, 3, 8, 1.0 / 30, 0.5, 12);
  for (int r = 0; r < 4; ++r) CHECK(s.lut().row(r).norm() == doctest::Approx(1.0));
  CHECK(s.occupancy() == 0);
  CHECK(s == OimState(4, 3, 8, 1.0 / 30, 0.5, 12));
}

TEST_CASE("detection_loss linear combinations") {
  const DetectionParts p{0.2, 0.3, 0.1, 0.4, 0.0, 0.0};
  CHECK(detection_loss(p) == doctest::Approx(1.0));
  CHECK(detection_loss(DetectionParts{}) == 0.0);
  CHECK(detection_loss(p, DetectionWeights{2, 1, 1, 1, 1}) == doctest::Approx(1.2));
  const DetectionParts with_rpn{0.2, 0.3, 0.1, 0.4, 0.05, 0.15};
  CHECK(detection_loss(with_rpn) == doctest::Approx(1.2));
}

TEST_CASE("total_loss composition and reconstruction") {
  LossComponents c;
  c.l_prob = 0.5;
  c.l_rela = 0.01;
  c.det = {0.5, 0.5, 0.5, 0.5, 0, 0};
  c.l_oim_s = 3.0;
  c.l_oim_t = 3.1;
  const auto [total, report] = total_loss(c);
  CHECK(total == doctest::Approx(11.6));
  CHECK(report.total == total);
  CHECK(report.recomputed_total() == doctest::Approx(report.total).epsilon(1e-12));
  CHECK(report.weights.lambda_prob == 1.0);
  CHECK(report.weights.lambda_rela == 300.0);

  LossComponents base = c;
  base.l_prob = base.l_rela = 0;
  CHECK(total_loss(base).first == doctest::Approx(2.0 + 3.0 + 3.1));
  CHECK(total_loss(c, LossWeights{0, 0, {}}).first == doctest::Approx(2.0 + 3.0 + 3.1));

  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    LossComponents r;
    r.l_prob = rng.uniform();
    r.l_rela = rng.uniform() * 0.01;
    r.det = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    r.l_oim_s = rng.uniform(0, 5);
    r.l_oim_t = rng.uniform(0, 5);
    const LossWeights w{rng.uniform(0, 2), rng.uniform(0, 500), {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), 1}};
    const auto rep = total_loss(r, w).second;
    CHECK(std::abs(rep.recomputed_total() - rep.total) <= 1e-6);
  }
}

TEST_CASE("total_loss names the non-finite component") {
  LossComponents c;
  c.l_rela = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(c);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("l_rela") != std::string::npos);
  }
  c.l_rela = 0;
  c.l_oim_t = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(total_loss(c), NumericError);
}
