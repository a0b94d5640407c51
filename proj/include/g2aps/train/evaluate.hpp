#pragma once

#include <optional>

#include "g2aps/data/annotations.hpp"
#include "g2aps/data/protocol.hpp"
#include "g2aps/eval/metrics.hpp"
#include "g2aps/model/search_model.hpp"
#include "json.hpp"

namespace g2aps::train {

struct EvalResult {
  eval::DetectionMetrics detection;
  eval::SearchMetrics search;
  std::optional<eval::StratifiedReport> stratified;
};

/// Runs the student-only inference path over every test image, scores
/// detection Recall / AP on all of them and person search on the protocol
/// using gallery detections with score >= `search_score_threshold`.
EvalResult evaluate_model(const model::SearchModel& model, const data::AnnotationSet& test,
                          const data::SearchProtocol& protocol, double search_score_threshold, bool stratify);

/// Inference results of a set of images, as evaluation detections.
eval::DetectionMap detect_all(const model::SearchModel& model, const data::AnnotationSet& set, int batch_size = 4);

nlohmann::json to_json(const EvalResult& r);

}  // namespace g2aps::train
