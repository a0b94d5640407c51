#include "g2aps/loss/objective.hpp"

#include <cmath>

#include "g2aps/common/errors.hpp"

namespace g2aps::loss {

double detection_loss(const DetectionParts& p, const DetectionWeights& w) {
  return w.k1 * p.reg1 + w.k2 * p.cls1 + w.k3 * p.reg2 + w.k4 * p.cls2 + w.rpn * (p.rpn_reg + p.rpn_cls);
}

double LossReport::recomputed_total() const {
  return weights.lambda_prob * l_prob + weights.lambda_rela * l_rela + l_det + l_oim_s + l_oim_t;
}

std::pair<double, LossReport> total_loss(const LossComponents& parts, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {
      {"l_prob", parts.l_prob},       {"l_rela", parts.l_rela},       {"l_reg1", parts.det.reg1},
      {"l_cls1", parts.det.cls1},     {"l_reg2", parts.det.reg2},     {"l_cls2", parts.det.cls2},
      {"l_rpn_reg", parts.det.rpn_reg}, {"l_rpn_cls", parts.det.rpn_cls}, {"l_oim_s", parts.l_oim_s},
      {"l_oim_t", parts.l_oim_t}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss component ") + name);
  }
  LossReport r;
  r.l_prob = parts.l_prob;
  r.l_rela = parts.l_rela;
  r.l_reg1 = parts.det.reg1;
  r.l_cls1 = parts.det.cls1;
  r.l_reg2 = parts.det.reg2;
  r.l_cls2 = parts.det.cls2;
  r.l_rpn_reg = parts.det.rpn_reg;
  r.l_rpn_cls = parts.det.rpn_cls;
  r.l_det = detection_loss(parts.det, weights.det);
  r.l_oim_s = parts.l_oim_s;
  r.l_oim_t = parts.l_oim_t;
  r.weights = weights;
  r.total = r.recomputed_total();
  return {r.total, r};
}

}  // namespace g2aps::loss
