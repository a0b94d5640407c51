#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "g2aps/common/rng.hpp"
#include "g2aps/data/annotations.hpp"
#include "g2aps/data/protocol.hpp"
#include "g2aps/eval/metrics.hpp"

namespace g2aps::testing {

/// One random search problem: a set of UAV images with GT boxes, gallery
/// detections with embeddings and one query per entry.
struct SearchInstance {
  data::AnnotationSet set;
  data::SearchProtocol protocol;
  eval::DetectionMap dets;
  std::vector<std::vector<float>> query_embeddings;  // per entry
};

inline double oracle_iou(const data::BoundingBox& a, const data::BoundingBox& b) {
  const double w = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double h = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h / (a.w * a.h + b.w * b.h - w * h);
}

/// Independent AP of one query: every detection's rank is counted from
/// pairwise comparisons, and AP is (1 / P) * sum over true matches of the
/// best precision at or below that match's rank.
inline double oracle_query_ap(const data::ProtocolEntry& e, const data::AnnotationSet& set,
                              const eval::DetectionMap& dets, const std::vector<float>& q) {
  struct Item {
    double sim;
    bool match;
  };
  std::vector<Item> items;
  std::size_t positives = 0;
  for (const auto& gid : e.gallery) {
    const auto& rec = set.records()[*set.find(gid)];
    const auto it = dets.find(gid);
    std::vector<Item> local;
    if (it != dets.end()) {
      for (const auto& d : it->second) {
        double dot = 0, nq = 0, nd = 0;
        for (std::size_t k = 0; k < q.size(); ++k) {
          dot += static_cast<double>(q[k]) * d.embedding[k];
          nq += static_cast<double>(q[k]) * q[k];
          nd += static_cast<double>(d.embedding[k]) * d.embedding[k];
        }
        local.push_back({dot / std::sqrt(nq * nd), false});
      }
    }
    for (const auto& gt : rec.boxes) {
      if (gt.identity != e.query.identity) continue;
      ++positives;
      int best = -1;
      for (std::size_t k = 0; k < local.size(); ++k) {
        if (local[k].match || oracle_iou(it->second[k].box, gt) <= 0.5) continue;
        if (best < 0 || local[k].sim > local[static_cast<std::size_t>(best)].sim) best = static_cast<int>(k);
      }
      if (best >= 0) local[static_cast<std::size_t>(best)].match = true;
    }
    items.insert(items.end(), local.begin(), local.end());
  }
  if (positives == 0) return 0.0;
  const std::size_t n = items.size();
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank[i] = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (items[j].sim > items[i].sim || (items[j].sim == items[i].sim && j < i)) ++rank[i];
    }
  }
  std::vector<bool> hit(n, false);
  for (std::size_t i = 0; i < n; ++i) hit[rank[i]] = items[i].match;
  double ap = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!hit[r]) continue;
    double best = 0;
    for (std::size_t s = r; s < n; ++s) {
      std::size_t tp = 0;
      for (std::size_t t = 0; t <= s; ++t) tp += hit[t];
      best = std::max(best, static_cast<double>(tp) / static_cast<double>(s + 1));
    }
    ap += best;
  }
  return ap / static_cast<double>(positives);
}

inline double oracle_map(const SearchInstance& inst) {
  if (inst.protocol.entries.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < inst.protocol.entries.size(); ++i) {
    s += oracle_query_ap(inst.protocol.entries[i], inst.set, inst.dets, inst.query_embeddings[i]);
  }
  return s / static_cast<double>(inst.protocol.entries.size());
}

/// Random instance with at most `max_dets` gallery detections per query.
/// Detections are jittered copies of GT boxes (some below the IoU
/// threshold) or free boxes; a few repeat a similarity to exercise ties.
inline SearchInstance random_search_instance(Rng& rng, int max_dets = 6, int dim = 4) {
  SearchInstance inst;
  const int images = 1 + static_cast<int>(rng.uniform_int(3));
  const int entries = 1 + static_cast<int>(rng.uniform_int(2));
  auto unit = [&] {
    std::vector<float> v(static_cast<std::size_t>(dim));
    double n = 0;
    for (auto& x : v) {
      x = static_cast<float>(rng.normal());
      n += static_cast<double>(x) * x;
    }
    for (auto& x : v) x = static_cast<float>(x / std::sqrt(n));
    return v;
  };
  std::vector<data::ImageRecord> recs;
  std::vector<std::string> gallery;
  int budget = max_dets;
  for (int i = 0; i < images; ++i) {
    data::ImageRecord r;
    r.image_id = "u" + std::to_string(i);
    r.file = r.image_id + ".png";
    r.camera = data::Camera::kUav;
    r.altitude = data::AltitudeBucket::k20to30;
    const int gts = static_cast<int>(rng.uniform_int(4));
    for (int g = 0; g < gts; ++g) {
      const int id = static_cast<int>(rng.uniform_int(4)) - 1;  // -1 .. 2
      r.boxes.push_back({40.0 * g + 1, 5, 20, 40, id, std::nullopt});
    }
    std::vector<eval::Detection> ds;
    const int nd = std::min(budget, static_cast<int>(rng.uniform_int(4)));
    budget -= nd;
    for (int k = 0; k < nd; ++k) {
      eval::Detection d;
      if (!r.boxes.empty() && rng.uniform() < 0.8) {
        const auto& gt = r.boxes[rng.uniform_int(r.boxes.size())];
        const double shift = rng.uniform() < 0.7 ? rng.uniform(0, 3) : rng.uniform(8, 14);
        d.box = {gt.x + shift, gt.y + rng.uniform(0, 2), gt.w, gt.h, data::kUnlabeled, std::nullopt};
      } else {
        d.box = {rng.uniform(0, 100), rng.uniform(0, 50), 15, 30, data::kUnlabeled, std::nullopt};
      }
      d.score = rng.uniform();
      d.embedding = (k > 0 && rng.uniform() < 0.15) ? ds.back().embedding : unit();
      ds.push_back(std::move(d));
    }
    inst.dets[r.image_id] = std::move(ds);
    gallery.push_back(r.image_id);
    recs.push_back(std::move(r));
  }
  inst.set = data::AnnotationSet(std::move(recs), data::Split::kTest);
  inst.protocol.gallery_size = images;
  for (int e = 0; e < entries; ++e) {
    data::ProtocolEntry pe;
    pe.query.image_id = "q";
    pe.query.identity = e;
    pe.query.box = {0, 0, 10, 20, e, std::nullopt};
    pe.gallery = gallery;
    inst.protocol.entries.push_back(pe);
    inst.query_embeddings.push_back(unit());
  }
  return inst;
}

inline eval::SearchMetrics run_search(const SearchInstance& inst) {
  return eval::search_map_cmc(inst.protocol, inst.set, inst.dets, [&](const data::SearchQuery& q) {
    return inst.query_embeddings[static_cast<std::size_t>(q.identity)];
  });
}

}  // namespace g2aps::testing
