#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "g2aps/data/annotations.hpp"
#include "g2aps/data/protocol.hpp"

namespace g2aps::eval {

inline constexpr double kMatchIou = 0.5;

struct Detection {
  data::BoundingBox box;
  double score = 0.0;
  std::vector<float> embedding;
};

/// Detections per image id.
using DetectionMap = std::map<std::string, std::vector<Detection>>;

/// Intersection over union. Throws std::invalid_argument for a box with
/// non-positive width or height.
double iou(const data::BoundingBox& a, const data::BoundingBox& b);

struct MatchResult {
  std::vector<int> det_to_gt;  // -1 when unmatched
  std::vector<int> gt_to_det;  // -1 when unmatched
  int matches = 0;
};

/// Greedy one-to-one matching in the given detection order (callers pass
/// detections sorted by descending score): each detection claims the
/// unclaimed ground truth of highest IoU, provided it exceeds `threshold`.
MatchResult match_detections(const std::vector<data::BoundingBox>& dets, const std::vector<data::BoundingBox>& gts,
                             double threshold = kMatchIou);

/// All-point interpolated AP of a ranked list of hit flags against
/// `num_positives` relevant items: the area under the precision envelope.
/// 0 when num_positives is 0.
double average_precision(const std::vector<bool>& ranked_hits, std::size_t num_positives);

struct DetectionMetrics {
  std::optional<double> recall;  // nullopt without ground truth
  std::optional<double> ap;
  std::size_t ground_truth = 0;
  std::size_t detections = 0;
};

/// Recall and AP over all images of `set` (every box, labeled or not, is a
/// person to detect). Images absent from `dets` have no detections.
DetectionMetrics detection_recall_ap(const DetectionMap& dets, const data::AnnotationSet& set,
                                     double threshold = kMatchIou);

struct QueryResult {
  int identity = data::kUnlabeled;
  double ap = 0.0;
  int first_match_rank = 0;  // 1-based; 0 when no true match was ranked
  std::size_t positives = 0;  // query-identity GT boxes in the gallery
  bool flagged = false;       // no true match among the gallery detections
};

inline constexpr int kCmcRanks[] = {1, 5, 10};

struct SearchMetrics {
  double map = 0.0;
  double top1 = 0.0, top5 = 0.0, top10 = 0.0;
  std::size_t queries = 0;
  std::size_t flagged = 0;
  std::vector<QueryResult> per_query;
};

using QueryEmbeddingFn = std::function<std::vector<float>(const data::SearchQuery&)>;

/// Ranks every detection of an entry's gallery by cosine similarity to the
/// query embedding (ties: ascending detection index, gallery order then
/// per-image order). For each gallery GT box of the query identity the most
/// similar detection overlapping it with IoU > threshold is the true match;
/// unlabeled boxes are never positives. AP uses all-point interpolation
/// with the gallery GT count as recall denominator; a query without a true
/// match scores AP 0, counts as a CMC miss and is flagged.
SearchMetrics search_map_cmc(const data::SearchProtocol& protocol, const data::AnnotationSet& set,
                             const DetectionMap& gallery_dets, const QueryEmbeddingFn& query_embedding,
                             double threshold = kMatchIou);

struct BucketRow {
  data::AltitudeBucket bucket;
  std::size_t entries = 0;
  std::optional<SearchMetrics> metrics;  // nullopt when the bucket is absent
};

struct StratifiedReport {
  std::vector<BucketRow> buckets;  // one per UAV bucket
  SearchMetrics full;
};

/// search_map_cmc over each altitude sub-protocol plus the full protocol.
/// Query embeddings are computed once per query.
StratifiedReport evaluate_stratified(const data::SearchProtocol& protocol, const data::AnnotationSet& set,
                                     const DetectionMap& gallery_dets, const QueryEmbeddingFn& query_embedding);

}  // namespace g2aps::eval
