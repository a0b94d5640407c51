#include "g2aps/model/search_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "g2aps/common/errors.hpp"
#include "g2aps/model/roi_align.hpp"
#include "g2aps/nn/ops.hpp"

namespace g2aps::model {

namespace {

constexpr std::array<float, 4> kRpnWeights = {1.0f, 1.0f, 1.0f, 1.0f};
constexpr std::array<float, 4> kBoxWeights = {10.0f, 10.0f, 5.0f, 5.0f};
constexpr float kSmoothL1Beta = 1.0f / 9.0f;
constexpr float kMinBoxSide = 1.0f;

// Gain that turns the He-normal std of a conv into `std`.
float gain_for_std(float std, int in, int kernel) { return std / std::sqrt(2.0f / static_cast<float>(in * kernel * kernel)); }

struct Sampled {
  std::vector<int> positive;
  std::vector<int> negative;
};

Sampled sample_balanced(std::vector<int> positive, std::vector<int> negative, int batch, float fraction, Rng& rng) {
  rng.shuffle(std::span<int>(positive));
  rng.shuffle(std::span<int>(negative));
  const auto num_pos = std::min<std::size_t>(positive.size(), static_cast<std::size_t>(batch * fraction));
  const auto num_neg = std::min<std::size_t>(negative.size(), static_cast<std::size_t>(batch) - num_pos);
  positive.resize(num_pos);
  negative.resize(num_neg);
  return {std::move(positive), std::move(negative)};
}

// Per candidate: best ground-truth index and IoU (-1 / 0 without GT).
void best_matches(const std::vector<Box>& cand, const std::vector<Box>& gts, std::vector<int>& idx,
                  std::vector<float>& iou) {
  idx.assign(cand.size(), -1);
  iou.assign(cand.size(), 0.0f);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const float v = box_iou(cand[i], gts[j]);
      if (v > iou[i]) {
        iou[i] = v;
        idx[i] = static_cast<int>(j);
      }
    }
  }
}

bool valid_box(const Box& b) { return b.width() >= kMinBoxSide && b.height() >= kMinBoxSide; }

std::vector<float> softmax_fg(const nn::Tensor& logits) {
  std::vector<float> p(static_cast<std::size_t>(logits.dim(0)));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float a = logits.values()[2 * i], b = logits.values()[2 * i + 1];
    p[i] = 1.0f / (1.0f + std::exp(a - b));
  }
  return p;
}

Deltas row4(const nn::Tensor& t, std::size_t i) {
  return {t.values()[4 * i], t.values()[4 * i + 1], t.values()[4 * i + 2], t.values()[4 * i + 3]};
}

}  // namespace

std::string to_string(BackboneKind k) { return k == BackboneKind::kTiny ? "tiny" : "resnet50"; }

BackboneKind parse_backbone(const std::string& s) {
  if (s == "tiny") return BackboneKind::kTiny;
  if (s == "resnet50") return BackboneKind::kResNet50;
  throw std::invalid_argument("unknown backbone: " + s);
}

int ModelConfig::stride() const {
  int s = 2 * (stem_pool ? 2 : 1);
  for (const auto& st : stages) s *= st.stride;
  return s;
}

int ModelConfig::backbone_channels() const { return stages.empty() ? stem_channels : stages.back().out; }

ModelConfig tiny_model_config() { return ModelConfig{}; }

ModelConfig resnet50_model_config() {
  ModelConfig c;
  c.backbone = BackboneKind::kResNet50;
  c.stem_channels = 64;
  c.stem_kernel = 7;
  c.stem_pool = true;
  c.stages = {{3, 64, 256, 1}, {4, 128, 512, 2}, {6, 256, 1024, 2}};
  c.head_stage = {3, 512, 2048, 2};
  c.pool_size = 14;
  c.head_pool_grid = 1;
  c.anchor_sizes = {32.0f, 64.0f, 128.0f, 256.0f, 512.0f};
  c.anchor_aspects = {0.5f, 1.0f, 2.0f};
  c.rpn_batch = 256;
  c.rpn_pre_nms_train = 12000;
  c.rpn_post_nms_train = 2000;
  c.rpn_pre_nms_test = 6000;
  c.max_proposals = 300;
  c.box_batch = 128;
  c.box_positive_fraction = 0.25f;
  c.reid_batch = 128;
  c.detections_per_image = 300;
  return c;
}

ImageBatch make_image_batch(const std::vector<const data::Image*>& images, const ModelConfig& config) {
  for (float s : config.pixel_std) {
    if (s == 0.0f) throw NumericError("pixel_std has a zero entry");
  }
  ImageBatch batch;
  int hmax = 0, wmax = 0;
  for (const auto* im : images) {
    hmax = std::max(hmax, im->height);
    wmax = std::max(wmax, im->width);
    batch.sizes.push_back({im->height, im->width});
  }
  const auto b = static_cast<int>(images.size());
  std::vector<float> v(static_cast<std::size_t>(b) * 3 * hmax * wmax, 0.0f);
  const std::size_t plane = static_cast<std::size_t>(hmax) * wmax;
  for (int i = 0; i < b; ++i) {
    const auto& im = *images[static_cast<std::size_t>(i)];
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        const auto* px = im.pixel(x, y);
        for (int c = 0; c < 3; ++c) {
          v[(static_cast<std::size_t>(i) * 3 + c) * plane + static_cast<std::size_t>(y) * wmax + x] =
              (px[c] / 255.0f - config.pixel_mean[static_cast<std::size_t>(c)]) / config.pixel_std[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  batch.pixels = nn::Tensor::from({b, 3, hmax, wmax}, std::move(v));
  return batch;
}

SearchModel::SearchModel(ModelConfig config) : config_(std::move(config)) {
  if (config_.embedding_dim <= 0 || config_.pool_size <= 0) throw ConfigError("model: bad embedding dim or pool size");
  if (config_.head_pool_grid < 1) throw ConfigError("model: head_pool_grid must be >= 1");
  if (config_.anchor_sizes.empty() || config_.anchor_aspects.empty()) throw ConfigError("model: no anchor shapes");
  const std::uint64_t seed = config_.init_seed;

  Rng backbone_rng(derive_seed(seed, 1));
  stem_ = Conv2d(3, config_.stem_channels, config_.stem_kernel, 2, config_.stem_kernel / 2, backbone_rng);
  int ch = config_.stem_channels;
  for (const auto& spec : config_.stages) {
    stages_.emplace_back(ch, spec, backbone_rng);
    ch = spec.out;
  }

  Rng rpn_rng(derive_seed(seed, 2));
  const int anchors = static_cast<int>(config_.anchor_sizes.size() * config_.anchor_aspects.size());
  rpn_conv_ = Conv2d(ch, ch, 3, 1, 1, rpn_rng);
  rpn_cls_ = Conv2d(ch, anchors, 1, 1, 0, rpn_rng, gain_for_std(0.01f, ch, 1));
  rpn_reg_ = Conv2d(ch, 4 * anchors, 1, 1, 0, rpn_rng, gain_for_std(0.01f, ch, 1));

  const int head_out = config_.head_stage.out * config_.head_pool_grid * config_.head_pool_grid;
  auto make_head = [&](std::uint64_t stream, bool embed, bool box) {
    Rng rng(derive_seed(seed, stream));
    Head h;
    h.trunk = Stage(ch, config_.head_stage, rng);
    if (embed) h.embed = Linear(head_out, config_.embedding_dim, 1.0f / std::sqrt(static_cast<float>(head_out)), rng);
    if (box) {
      h.cls = Linear(head_out, 2, 0.01f, rng);
      h.reg = Linear(head_out, 4, 0.001f, rng);
    }
    return h;
  };
  box_head_ = make_head(3, false, true);
  student_ = make_head(4, true, true);
  if (config_.with_teacher) teacher_ = make_head(5, true, false);
}

FeatureMap SearchModel::backbone_forward(const nn::Tensor& pixels) const {
  for (float v : pixels.values()) {
    if (!std::isfinite(v)) throw NumericError("backbone input has non-finite values");
  }
  nn::Tensor x = nn::relu(stem_.forward(pixels));
  if (config_.stem_pool) x = nn::max_pool2d(x, 3, 2, 1);
  for (const auto& s : stages_) x = s.forward(x);
  return {x, config_.stride()};
}

ProposalSet SearchModel::propose_regions(const FeatureMap& fm, const std::vector<std::array<int, 2>>& sizes,
                                         const std::vector<ImageTargets>* targets, Rng* rng) const {
  const int b = fm.values.dim(0), fh = fm.values.dim(2), fw = fm.values.dim(3);
  const std::vector<Box> anchors = make_anchors(fh, fw, fm.stride, config_.anchor_sizes, config_.anchor_aspects);
  if (anchors.empty()) throw ConfigError("RPN: no anchors for feature map " + std::to_string(fh) + "x" + std::to_string(fw));
  const nn::Tensor h = nn::relu(rpn_conv_.forward(fm.values));
  const nn::Tensor cls = rpn_cls_.forward(h);
  const nn::Tensor reg = rpn_reg_.forward(h);
  const int a = cls.dim(1);
  const int cells = fh * fw;

  auto logit_index = [&](int img, int k) { return (img * a + k % a) * cells + k / a; };
  auto reg_index = [&](int img, int k, int j) { return (img * 4 * a + (k % a) * 4 + j) * cells + k / a; };

  const bool training = targets != nullptr;
  const int pre = training ? config_.rpn_pre_nms_train : config_.rpn_pre_nms_test;
  const int post = training ? config_.rpn_post_nms_train : config_.max_proposals;

  ProposalSet out;
  std::vector<int> cls_idx, reg_idx;
  std::vector<float> cls_tgt, reg_tgt;
  for (int img = 0; img < b; ++img) {
    const auto fh_img = static_cast<float>(sizes[static_cast<std::size_t>(img)][0]);
    const auto fw_img = static_cast<float>(sizes[static_cast<std::size_t>(img)][1]);
    std::vector<Box> boxes;
    std::vector<float> scores;
    boxes.reserve(anchors.size());
    for (int k = 0; k < static_cast<int>(anchors.size()); ++k) {
      Deltas d{};
      for (int j = 0; j < 4; ++j) d[static_cast<std::size_t>(j)] = reg.values()[static_cast<std::size_t>(reg_index(img, k, j))];
      const Box bx = clip_box(decode_box(anchors[static_cast<std::size_t>(k)], d, kRpnWeights), fw_img, fh_img);
      if (!valid_box(bx)) continue;
      boxes.push_back(bx);
      scores.push_back(cls.values()[static_cast<std::size_t>(logit_index(img, k))]);
    }
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return scores[static_cast<std::size_t>(x)] > scores[static_cast<std::size_t>(y)]; });
    if (static_cast<int>(order.size()) > pre) order.resize(static_cast<std::size_t>(pre));
    std::vector<Box> top_boxes;
    std::vector<float> top_scores;
    for (int i : order) {
      top_boxes.push_back(boxes[static_cast<std::size_t>(i)]);
      top_scores.push_back(scores[static_cast<std::size_t>(i)]);
    }
    std::vector<int> keep = nms(top_boxes, top_scores, config_.rpn_nms);
    if (static_cast<int>(keep.size()) > post) keep.resize(static_cast<std::size_t>(post));
    std::vector<Box> pb;
    std::vector<float> ps;
    for (int i : keep) {
      pb.push_back(top_boxes[static_cast<std::size_t>(i)]);
      ps.push_back(1.0f / (1.0f + std::exp(-top_scores[static_cast<std::size_t>(i)])));
    }
    out.boxes.push_back(std::move(pb));
    out.scores.push_back(std::move(ps));

    if (!training) continue;
    const auto& gts = (*targets)[static_cast<std::size_t>(img)].boxes;
    std::vector<int> match;
    std::vector<float> best;
    best_matches(anchors, gts, match, best);
    std::vector<int> label(anchors.size(), -1);
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      if (best[k] >= config_.rpn_positive_iou) label[k] = 1;
      else if (best[k] < config_.rpn_negative_iou) label[k] = 0;
    }
    for (std::size_t j = 0; j < gts.size(); ++j) {
      float gmax = 0.0f;
      for (const auto& an : anchors) gmax = std::max(gmax, box_iou(an, gts[j]));
      if (gmax <= 0.0f) continue;
      for (std::size_t k = 0; k < anchors.size(); ++k) {
        if (box_iou(anchors[k], gts[j]) == gmax) {
          label[k] = 1;
          match[k] = static_cast<int>(j);
        }
      }
    }
    std::vector<int> pos, neg;
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      if (label[k] == 1) pos.push_back(static_cast<int>(k));
      else if (label[k] == 0) neg.push_back(static_cast<int>(k));
    }
    const Sampled s = sample_balanced(std::move(pos), std::move(neg), config_.rpn_batch, config_.rpn_positive_fraction, *rng);
    for (int k : s.positive) {
      cls_idx.push_back(logit_index(img, k));
      cls_tgt.push_back(1.0f);
      const Deltas t = encode_box(anchors[static_cast<std::size_t>(k)], gts[static_cast<std::size_t>(match[static_cast<std::size_t>(k)])], kRpnWeights);
      for (int j = 0; j < 4; ++j) {
        reg_idx.push_back(reg_index(img, k, j));
        reg_tgt.push_back(t[static_cast<std::size_t>(j)]);
      }
    }
    for (int k : s.negative) {
      cls_idx.push_back(logit_index(img, k));
      cls_tgt.push_back(0.0f);
    }
  }
  if (training) {
    std::vector<int> all(cls_idx.size());
    std::iota(all.begin(), all.end(), 0);
    out.loss_objectness = nn::bce_with_logits(nn::gather_flat(cls, cls_idx), all, cls_tgt);
    const int npos = static_cast<int>(reg_idx.size() / 4);
    if (npos == 0) {
      out.loss_box = nn::Tensor::scalar(0.0f);
    } else {
      std::vector<int> rows(static_cast<std::size_t>(npos));
      std::iota(rows.begin(), rows.end(), 0);
      const nn::Tensor pred = nn::reshape(nn::gather_flat(reg, reg_idx), {npos, 4});
      out.loss_box = nn::smooth_l1(pred, reg_tgt, rows, kSmoothL1Beta, static_cast<float>(std::max<std::size_t>(1, cls_idx.size())));
    }
  }
  return out;
}

RoiFeatures SearchModel::pool_rois(const FeatureMap& fm, const std::vector<Box>& boxes,
                                   const std::vector<int>& batch_index) const {
  RoiFeatures r;
  r.values = roi_align(fm.values, boxes, batch_index, config_.pool_size, 1.0f / static_cast<float>(fm.stride));
  r.boxes = boxes;
  r.batch_index = batch_index;
  r.identities.assign(boxes.size(), kBackground);
  return r;
}

nn::Tensor SearchModel::head_features(const Stage& trunk, const nn::Tensor& rois) const {
  return nn::grid_avg_pool(trunk.forward(rois), config_.head_pool_grid);
}

DetectionHeadOutput SearchModel::detection_head(const RoiFeatures& rois, const std::vector<std::array<int, 2>>& sizes,
                                                const std::vector<int>* labels,
                                                const std::vector<std::array<float, 4>>* regression_targets) const {
  DetectionHeadOutput out;
  if (rois.boxes.empty()) return out;
  const nn::Tensor feat = head_features(box_head_.trunk, rois.values);
  const nn::Tensor logits = box_head_.cls.forward(feat);
  const nn::Tensor deltas = box_head_.reg.forward(feat);
  out.scores = softmax_fg(logits);
  for (std::size_t i = 0; i < rois.boxes.size(); ++i) {
    const auto& sz = sizes[static_cast<std::size_t>(rois.batch_index[i])];
    out.refined.push_back(clip_box(decode_box(rois.boxes[i], row4(deltas, i), kBoxWeights), static_cast<float>(sz[1]),
                                   static_cast<float>(sz[0])));
  }
  if (labels != nullptr) {
    out.loss_cls = nn::softmax_cross_entropy(logits, *labels);
    std::vector<float> tgt(rois.boxes.size() * 4, 0.0f);
    std::vector<int> rows;
    for (std::size_t i = 0; i < rois.boxes.size(); ++i) {
      if ((*labels)[i] != 1) continue;
      rows.push_back(static_cast<int>(i));
      std::copy_n((*regression_targets)[i].begin(), 4, tgt.begin() + static_cast<std::ptrdiff_t>(4 * i));
    }
    out.loss_reg = nn::smooth_l1(deltas, tgt, rows, kSmoothL1Beta, static_cast<float>(rois.boxes.size()));
  }
  return out;
}

ReidOutput SearchModel::reid_head_forward(Branch branch, const nn::Tensor& rois) const {
  if (branch == Branch::kTeacher && !config_.with_teacher) throw std::logic_error("model has no teacher head");
  const Head& h = branch == Branch::kStudent ? student_ : teacher_;
  if (branch == Branch::kTeacher) ++teacher_calls_;
  ReidOutput out;
  const nn::Tensor feat = head_features(h.trunk, rois);
  out.embeddings = nn::l2_normalize_rows(h.embed.forward(feat));
  if (branch == Branch::kStudent) {
    out.logits = h.cls.forward(feat);
    out.deltas = h.reg.forward(feat);
  }
  return out;
}

TrainForward SearchModel::forward_train(const ImageBatch& batch, const std::vector<ImageTargets>& targets, Rng& rng,
                                        bool detach_teacher) const {
  const FeatureMap fm = backbone_forward(batch.pixels);
  const ProposalSet props = propose_regions(fm, batch.sizes, &targets, &rng);
  TrainForward out;
  out.rpn_cls = props.loss_objectness;
  out.rpn_reg = props.loss_box;

  // Detection-head RoIs: proposals plus ground truth, balanced fg / bg.
  std::vector<Box> roi_boxes;
  std::vector<int> roi_batch, roi_labels;
  std::vector<std::array<float, 4>> roi_targets;
  for (std::size_t img = 0; img < targets.size(); ++img) {
    std::vector<Box> cand = props.boxes[img];
    const auto& gts = targets[img].boxes;
    cand.insert(cand.end(), gts.begin(), gts.end());
    out.proposals += static_cast<int>(props.boxes[img].size());
    std::vector<int> match;
    std::vector<float> best;
    best_matches(cand, gts, match, best);
    std::vector<int> fg, bg;
    for (std::size_t i = 0; i < cand.size(); ++i) (best[i] >= config_.box_foreground_iou ? fg : bg).push_back(static_cast<int>(i));
    const Sampled s = sample_balanced(std::move(fg), std::move(bg), config_.box_batch, config_.box_positive_fraction, rng);
    for (int i : s.positive) {
      const Box& c = cand[static_cast<std::size_t>(i)];
      roi_boxes.push_back(c);
      roi_batch.push_back(static_cast<int>(img));
      roi_labels.push_back(1);
      const Deltas t = encode_box(c, gts[static_cast<std::size_t>(match[static_cast<std::size_t>(i)])], kBoxWeights);
      roi_targets.push_back({t[0], t[1], t[2], t[3]});
    }
    for (int i : s.negative) {
      roi_boxes.push_back(cand[static_cast<std::size_t>(i)]);
      roi_batch.push_back(static_cast<int>(img));
      roi_labels.push_back(0);
      roi_targets.push_back({0, 0, 0, 0});
    }
  }
  const RoiFeatures rois = pool_rois(fm, roi_boxes, roi_batch);
  const DetectionHeadOutput det = detection_head(rois, batch.sizes, &roi_labels, &roi_targets);
  out.cls1 = det.loss_cls;
  out.reg1 = det.loss_reg;

  // ReID RoIs: refined boxes re-matched to ground truth.
  std::vector<Box> reid_boxes;
  std::vector<int> reid_batch, reid_ids;
  std::vector<float> reid_targets;
  for (std::size_t img = 0; img < targets.size(); ++img) {
    std::vector<Box> cand;
    for (std::size_t i = 0; i < det.refined.size(); ++i) {
      if (static_cast<std::size_t>(roi_batch[i]) == img && valid_box(det.refined[i])) cand.push_back(det.refined[i]);
    }
    const auto& gts = targets[img].boxes;
    std::vector<int> match;
    std::vector<float> best;
    best_matches(cand, gts, match, best);
    std::vector<int> fg, bg;
    for (std::size_t i = 0; i < cand.size(); ++i) (best[i] >= config_.reid_foreground_iou ? fg : bg).push_back(static_cast<int>(i));
    const Sampled s = sample_balanced(std::move(fg), std::move(bg), config_.reid_batch, config_.reid_foreground_fraction, rng);
    for (int i : s.positive) {
      const Box& c = cand[static_cast<std::size_t>(i)];
      const auto g = static_cast<std::size_t>(match[static_cast<std::size_t>(i)]);
      reid_boxes.push_back(c);
      reid_batch.push_back(static_cast<int>(img));
      reid_ids.push_back(targets[img].identities[g]);
      const Deltas t = encode_box(c, gts[g], kBoxWeights);
      reid_targets.insert(reid_targets.end(), t.begin(), t.end());
    }
    for (int i : s.negative) {
      reid_boxes.push_back(cand[static_cast<std::size_t>(i)]);
      reid_batch.push_back(static_cast<int>(img));
      reid_ids.push_back(kBackground);
      reid_targets.insert(reid_targets.end(), 4, 0.0f);
    }
  }

  std::vector<int> fg_rows, fg_ids;
  for (std::size_t i = 0; i < reid_ids.size(); ++i) {
    if (reid_ids[i] != kBackground) {
      fg_rows.push_back(static_cast<int>(i));
      fg_ids.push_back(reid_ids[i]);
    }
  }
  out.student.branch = Branch::kStudent;
  out.teacher.branch = Branch::kTeacher;
  if (reid_boxes.empty()) {
    out.reid_skipped = true;
    out.cls2 = nn::Tensor::scalar(0.0f);
    out.reg2 = nn::Tensor::scalar(0.0f);
    out.student.embeddings = nn::Tensor::zeros({0, config_.embedding_dim});
    out.teacher.embeddings = nn::Tensor::zeros({0, config_.embedding_dim});
    return out;
  }
  RoiFeatures reid = pool_rois(fm, reid_boxes, reid_batch);
  reid.identities = reid_ids;
  const ReidOutput st = reid_head_forward(Branch::kStudent, reid.values);
  std::vector<int> fgbg(reid_ids.size());
  for (std::size_t i = 0; i < reid_ids.size(); ++i) fgbg[i] = reid_ids[i] == kBackground ? 0 : 1;
  out.cls2 = nn::softmax_cross_entropy(st.logits, fgbg);
  out.reg2 = nn::smooth_l1(st.deltas, reid_targets, fg_rows, kSmoothL1Beta, static_cast<float>(reid_ids.size()));
  out.student.identities = fg_ids;
  out.teacher.identities = fg_ids;
  if (fg_rows.empty()) {
    out.reid_skipped = true;
    out.student.embeddings = nn::Tensor::zeros({0, config_.embedding_dim});
    out.teacher.embeddings = nn::Tensor::zeros({0, config_.embedding_dim});
    return out;
  }
  out.student.embeddings = nn::index_rows(st.embeddings, fg_rows);
  if (config_.with_teacher) {
    nn::Tensor teacher_in = nn::index_rows(reid.values, fg_rows);
    if (detach_teacher) teacher_in = nn::detach(teacher_in);
    out.teacher.embeddings = reid_head_forward(Branch::kTeacher, teacher_in).embeddings;
  }
  return out;
}

std::vector<std::vector<Detection>> SearchModel::inference(const ImageBatch& batch) const {
  nn::NoGradGuard no_grad;
  const FeatureMap fm = backbone_forward(batch.pixels);
  const ProposalSet props = propose_regions(fm, batch.sizes, nullptr, nullptr);
  const auto b = batch.sizes.size();
  std::vector<std::vector<Detection>> result(b);

  std::vector<Box> boxes;
  std::vector<int> index;
  for (std::size_t img = 0; img < b; ++img) {
    for (const auto& bx : props.boxes[img]) {
      boxes.push_back(bx);
      index.push_back(static_cast<int>(img));
    }
  }
  if (boxes.empty()) return result;
  const DetectionHeadOutput det = detection_head(pool_rois(fm, boxes, index), batch.sizes, nullptr, nullptr);

  std::vector<Box> kept;
  std::vector<int> kept_index;
  for (std::size_t img = 0; img < b; ++img) {
    std::vector<Box> cand;
    std::vector<float> sc;
    for (std::size_t i = 0; i < det.refined.size(); ++i) {
      if (static_cast<std::size_t>(index[i]) != img || det.scores[i] < config_.box_score_threshold ||
          !valid_box(det.refined[i])) {
        continue;
      }
      cand.push_back(det.refined[i]);
      sc.push_back(det.scores[i]);
    }
    std::vector<int> keep = nms(cand, sc, config_.box_nms);
    if (static_cast<int>(keep.size()) > config_.detections_per_image) keep.resize(static_cast<std::size_t>(config_.detections_per_image));
    for (int k : keep) {
      kept.push_back(cand[static_cast<std::size_t>(k)]);
      kept_index.push_back(static_cast<int>(img));
    }
  }
  if (kept.empty()) return result;

  const ReidOutput st = reid_head_forward(Branch::kStudent, pool_rois(fm, kept, kept_index).values);
  const std::vector<float> scores = softmax_fg(st.logits);
  const int d = st.embeddings.dim(1);
  for (std::size_t img = 0; img < b; ++img) {
    std::vector<Detection> dets;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (static_cast<std::size_t>(kept_index[i]) != img) continue;
      const auto& sz = batch.sizes[img];
      Detection det_i;
      det_i.box = clip_box(decode_box(kept[i], row4(st.deltas, i), kBoxWeights), static_cast<float>(sz[1]),
                           static_cast<float>(sz[0]));
      if (!valid_box(det_i.box)) det_i.box = kept[i];
      det_i.score = scores[i];
      const auto* e = st.embeddings.values().data() + i * static_cast<std::size_t>(d);
      det_i.embedding.assign(e, e + d);
      dets.push_back(std::move(det_i));
    }
    std::vector<Box> fb;
    std::vector<float> fs;
    for (const auto& x : dets) {
      fb.push_back(x.box);
      fs.push_back(x.score);
    }
    for (int k : nms(fb, fs, config_.box_nms)) result[img].push_back(dets[static_cast<std::size_t>(k)]);
  }
  return result;
}

std::vector<std::vector<float>> SearchModel::embed_boxes(const ImageBatch& single, const std::vector<Box>& boxes) const {
  nn::NoGradGuard no_grad;
  std::vector<std::vector<float>> out;
  if (boxes.empty()) return out;
  const FeatureMap fm = backbone_forward(single.pixels);
  const std::vector<int> index(boxes.size(), 0);
  const ReidOutput st = reid_head_forward(Branch::kStudent, pool_rois(fm, boxes, index).values);
  const int d = st.embeddings.dim(1);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto* e = st.embeddings.values().data() + i * static_cast<std::size_t>(d);
    out.emplace_back(e, e + d);
  }
  return out;
}

void SearchModel::collect_backbone(nn::ParameterList& out) const {
  stem_.collect("backbone.stem", out);
  for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect("backbone.stage" + std::to_string(i + 1), out);
  rpn_conv_.collect("rpn.conv", out);
  rpn_cls_.collect("rpn.cls", out);
  rpn_reg_.collect("rpn.reg", out);
}

void SearchModel::collect_head(const Head& h, const std::string& prefix, bool with_embed, bool with_box,
                               nn::ParameterList& out) const {
  h.trunk.collect(prefix + ".trunk", out);
  if (with_embed) h.embed.collect(prefix + ".embed", out);
  if (with_box) {
    h.cls.collect(prefix + ".cls", out);
    h.reg.collect(prefix + ".reg", out);
  }
}

nn::ParameterList SearchModel::inference_parameters() const {
  nn::ParameterList out;
  collect_backbone(out);
  collect_head(box_head_, "box_head", false, true, out);
  collect_head(student_, "reid_student", true, true, out);
  return out;
}

nn::ParameterList SearchModel::teacher_parameters() const {
  nn::ParameterList out;
  if (config_.with_teacher) collect_head(teacher_, "reid_teacher", true, false, out);
  return out;
}

nn::ParameterList SearchModel::parameters() const {
  nn::ParameterList out = inference_parameters();
  for (auto& p : teacher_parameters()) out.push_back(std::move(p));
  return out;
}

}  // namespace g2aps::model
