#include "g2aps/train/evaluate.hpp"

#include "g2aps/eval/report.hpp"

namespace g2aps::train {

eval::DetectionMap detect_all(const model::SearchModel& model, const data::AnnotationSet& set, int batch_size) {
  eval::DetectionMap out;
  const auto& recs = set.records();
  for (std::size_t start = 0; start < recs.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(recs.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<data::Image> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(set.load_pixels(recs[i]));
    std::vector<const data::Image*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    const auto dets = model.inference(model::make_image_batch(ptrs, model.config()));
    for (std::size_t i = start; i < end; ++i) {
      auto& list = out[recs[i].image_id];
      for (const auto& d : dets[i - start]) {
        eval::Detection e;
        e.box = {d.box.x1, d.box.y1, d.box.width(), d.box.height(), data::kUnlabeled, d.score};
        e.score = d.score;
        e.embedding = d.embedding;
        list.push_back(std::move(e));
      }
    }
  }
  return out;
}

EvalResult evaluate_model(const model::SearchModel& model, const data::AnnotationSet& test,
                          const data::SearchProtocol& protocol, double search_score_threshold, bool stratify) {
  EvalResult r;
  const eval::DetectionMap all = detect_all(model, test);
  r.detection = eval::detection_recall_ap(all, test);

  eval::DetectionMap gallery;
  for (const auto& [id, list] : all) {
    auto& g = gallery[id];
    for (const auto& d : list) {
      if (d.score >= search_score_threshold) g.push_back(d);
    }
  }
  eval::QueryEmbeddingFn query = [&](const data::SearchQuery& q) {
    const auto idx = test.find(q.image_id);
    if (!idx) throw std::invalid_argument("query image not in test set: " + q.image_id);
    const data::Image im = test.load_pixels(test.records()[*idx]);
    const auto batch = model::make_image_batch({&im}, model.config());
    const model::Box b{static_cast<float>(q.box.x), static_cast<float>(q.box.y), static_cast<float>(q.box.x2()),
                       static_cast<float>(q.box.y2())};
    return model.embed_boxes(batch, {b}).front();
  };
  if (stratify) {
    r.stratified = eval::evaluate_stratified(protocol, test, gallery, query);
    r.search = r.stratified->full;
  } else {
    r.search = eval::search_map_cmc(protocol, test, gallery, query);
  }
  return r;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j{{"detection", eval::to_json(r.detection)}, {"search", eval::to_json(r.search, true)}};
  if (r.stratified) j["stratified"] = eval::to_json(*r.stratified);
  return j;
}

}  // namespace g2aps::train
