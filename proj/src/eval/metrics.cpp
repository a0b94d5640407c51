#include "g2aps/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace g2aps::eval {

double iou(const data::BoundingBox& a, const data::BoundingBox& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw std::invalid_argument("iou: zero-area box");
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

MatchResult match_detections(const std::vector<data::BoundingBox>& dets, const std::vector<data::BoundingBox>& gts,
                             double threshold) {
  MatchResult m;
  m.det_to_gt.assign(dets.size(), -1);
  m.gt_to_det.assign(gts.size(), -1);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = threshold;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_to_det[g] >= 0) continue;
      const double v = iou(dets[d], gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      m.det_to_gt[d] = best_g;
      m.gt_to_det[static_cast<std::size_t>(best_g)] = static_cast<int>(d);
      ++m.matches;
    }
  }
  return m;
}

double average_precision(const std::vector<bool>& ranked_hits, std::size_t num_positives) {
  if (num_positives == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked_hits.size(); ++k) {
    if (ranked_hits[k]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_positives));
  }
  // Envelope from the right, then sum over recall steps.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    if (recall[k] > prev) {
      ap += (recall[k] - prev) * precision[k];
      prev = recall[k];
    }
  }
  return ap;
}

namespace {

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding size mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace

DetectionMetrics detection_recall_ap(const DetectionMap& dets, const data::AnnotationSet& set, double threshold) {
  struct Scored {
    double score;
    bool hit;
  };
  std::vector<Scored> all;
  DetectionMetrics out;
  std::size_t matched = 0;
  static const std::vector<Detection> kNone;
  for (const auto& rec : set.records()) {
    const auto it = dets.find(rec.image_id);
    const auto& list = it == dets.end() ? kNone : it->second;
    const auto order = score_order(list);
    std::vector<data::BoundingBox> sorted;
    for (auto i : order) sorted.push_back(list[i].box);
    const MatchResult m = match_detections(sorted, rec.boxes, threshold);
    for (std::size_t k = 0; k < order.size(); ++k) all.push_back({list[order[k]].score, m.det_to_gt[k] >= 0});
    matched += static_cast<std::size_t>(m.matches);
    out.ground_truth += rec.boxes.size();
  }
  out.detections = all.size();
  if (out.ground_truth == 0) return out;
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<bool> hits;
  for (const auto& s : all) hits.push_back(s.hit);
  out.recall = static_cast<double>(matched) / static_cast<double>(out.ground_truth);
  out.ap = average_precision(hits, out.ground_truth);
  return out;
}

SearchMetrics search_map_cmc(const data::SearchProtocol& protocol, const data::AnnotationSet& set,
                             const DetectionMap& gallery_dets, const QueryEmbeddingFn& query_embedding,
                             double threshold) {
  SearchMetrics out;
  std::size_t hits[3] = {0, 0, 0};
  for (const auto& entry : protocol.entries) {
    const std::vector<float> q = query_embedding(entry.query);
    const int target = entry.query.identity;
    std::vector<double> sims;
    std::vector<bool> is_match;
    std::size_t positives = 0;
    for (const auto& gid : entry.gallery) {
      const auto rec_i = set.find(gid);
      if (!rec_i) throw std::invalid_argument("gallery image not in annotation set: " + gid);
      const auto& rec = set.records()[*rec_i];
      const auto it = gallery_dets.find(gid);
      const std::size_t base = sims.size();
      if (it != gallery_dets.end()) {
        for (const auto& d : it->second) {
          sims.push_back(cosine(q, d.embedding));
          is_match.push_back(false);
        }
      }
      if (target < 0) continue;
      for (const auto& gt : rec.boxes) {
        if (gt.identity != target) continue;
        ++positives;
        if (it == gallery_dets.end()) continue;
        int best = -1;
        for (std::size_t k = 0; k < it->second.size(); ++k) {
          if (is_match[base + k] || iou(it->second[k].box, gt) <= threshold) continue;
          if (best < 0 || sims[base + k] > sims[base + static_cast<std::size_t>(best)]) best = static_cast<int>(k);
        }
        if (best >= 0) is_match[base + static_cast<std::size_t>(best)] = true;
      }
    }
    std::vector<std::size_t> order(sims.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
    std::vector<bool> ranked;
    QueryResult r;
    r.identity = target;
    r.positives = positives;
    for (std::size_t k = 0; k < order.size(); ++k) {
      ranked.push_back(is_match[order[k]]);
      if (is_match[order[k]] && r.first_match_rank == 0) r.first_match_rank = static_cast<int>(k + 1);
    }
    r.ap = average_precision(ranked, positives);
    r.flagged = r.first_match_rank == 0;
    for (int c = 0; c < 3; ++c) {
      if (r.first_match_rank > 0 && r.first_match_rank <= kCmcRanks[c]) ++hits[c];
    }
    out.map += r.ap;
    if (r.flagged) ++out.flagged;
    out.per_query.push_back(r);
  }
  out.queries = protocol.entries.size();
  if (out.queries > 0) {
    const auto n = static_cast<double>(out.queries);
    out.map /= n;
    out.top1 = static_cast<double>(hits[0]) / n;
    out.top5 = static_cast<double>(hits[1]) / n;
    out.top10 = static_cast<double>(hits[2]) / n;
  }
  return out;
}

StratifiedReport evaluate_stratified(const data::SearchProtocol& protocol, const data::AnnotationSet& set,
                                     const DetectionMap& gallery_dets, const QueryEmbeddingFn& query_embedding) {
  std::map<int, std::vector<float>> cache;
  QueryEmbeddingFn cached = [&](const data::SearchQuery& q) {
    auto it = cache.find(q.identity);
    if (it == cache.end()) it = cache.emplace(q.identity, query_embedding(q)).first;
    return it->second;
  };
  StratifiedReport report;
  report.full = search_map_cmc(protocol, set, gallery_dets, cached);
  for (auto bucket : data::kUavBuckets) {
    BucketRow row{bucket, 0, std::nullopt};
    const data::SearchProtocol sub = data::stratify_by_altitude(protocol, set, bucket);
    row.entries = sub.entries.size();
    if (!sub.entries.empty()) row.metrics = search_map_cmc(sub, set, gallery_dets, cached);
    report.buckets.push_back(std::move(row));
  }
  return report;
}

}  // namespace g2aps::eval
