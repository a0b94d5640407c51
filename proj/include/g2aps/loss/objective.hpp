#pragma once

#include <string>
#include <utility>

namespace g2aps::loss {

struct DetectionWeights {
  double k1 = 1.0;  // second-stage box regression
  double k2 = 1.0;  // second-stage classification
  double k3 = 1.0;  // ReID-head box regression
  double k4 = 1.0;  // ReID-head classification
  double rpn = 1.0; // each RPN term

  bool operator==(const DetectionWeights&) const = default;
};

struct DetectionParts {
  double reg1 = 0, cls1 = 0, reg2 = 0, cls2 = 0;
  double rpn_reg = 0, rpn_cls = 0;
};

/// k1 reg1 + k2 cls1 + k3 reg2 + k4 cls2 + rpn * (rpn_reg + rpn_cls).
double detection_loss(const DetectionParts& parts, const DetectionWeights& w = {});

struct LossWeights {
  double lambda_prob = 1.0;
  double lambda_rela = 300.0;
  DetectionWeights det;

  bool operator==(const LossWeights&) const = default;
};

struct LossComponents {
  double l_prob = 0, l_rela = 0;
  DetectionParts det;
  double l_oim_s = 0, l_oim_t = 0;
};

struct LossReport {
  double l_prob = 0, l_rela = 0;
  double l_reg1 = 0, l_cls1 = 0, l_reg2 = 0, l_cls2 = 0;
  double l_rpn_reg = 0, l_rpn_cls = 0;
  double l_det = 0;
  double l_oim_s = 0, l_oim_t = 0;
  double total = 0;
  LossWeights weights;

  /// lambda_prob l_prob + lambda_rela l_rela + l_det + l_oim_s + l_oim_t.
  double recomputed_total() const;
};

/// Builds the report; throws NumericError naming the first non-finite
/// component.
std::pair<double, LossReport> total_loss(const LossComponents& parts, const LossWeights& weights = {});

}  // namespace g2aps::loss
