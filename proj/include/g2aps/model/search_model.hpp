#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "g2aps/common/rng.hpp"
#include "g2aps/data/image.hpp"
#include "g2aps/model/box_ops.hpp"
#include "g2aps/model/layers.hpp"
#include "g2aps/nn/optim.hpp"
#include "g2aps/nn/tensor.hpp"

namespace g2aps::model {

/// ReID-assignment label of a box that matches no ground truth.
inline constexpr int kBackground = -2;

enum class BackboneKind { kTiny, kResNet50 };

std::string to_string(BackboneKind k);
/// "tiny" or "resnet50"; throws std::invalid_argument otherwise.
BackboneKind parse_backbone(const std::string& s);

struct ModelConfig {
  BackboneKind backbone = BackboneKind::kTiny;
  int stem_channels = 16;
  int stem_kernel = 3;
  bool stem_pool = false;
  std::vector<StageSpec> stages = {{1, 16, 32, 2}, {1, 32, 64, 2}};
  StageSpec head_stage = {1, 64, 128, 1};  // shared by box head and ReID heads
  int pool_size = 7;
  int head_pool_grid = 2;  // 1 = global average pooling of the head trunk
  int embedding_dim = 256;
  std::array<float, 3> pixel_mean = {0.485f, 0.456f, 0.406f};
  std::array<float, 3> pixel_std = {0.229f, 0.224f, 0.225f};

  std::vector<float> anchor_sizes = {16.0f, 32.0f, 64.0f};
  std::vector<float> anchor_aspects = {2.5f};  // height / width
  int rpn_batch = 128;
  float rpn_positive_fraction = 0.5f;
  float rpn_positive_iou = 0.7f;
  float rpn_negative_iou = 0.3f;
  float rpn_nms = 0.7f;
  int rpn_pre_nms_train = 300;
  int rpn_post_nms_train = 64;
  int rpn_pre_nms_test = 300;
  int max_proposals = 50;  // post-NMS proposals at inference

  int box_batch = 32;  // sampled RoIs per image for the detection head
  float box_positive_fraction = 0.5f;
  float box_foreground_iou = 0.5f;
  int reid_batch = 16;  // refined boxes per image for the ReID heads
  float reid_foreground_fraction = 0.5f;
  float reid_foreground_iou = 0.5f;

  float box_score_threshold = 0.05f;
  float box_nms = 0.4f;
  int detections_per_image = 20;

  bool with_teacher = true;
  std::uint64_t init_seed = 0;

  /// Backbone output stride.
  int stride() const;
  int backbone_channels() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Tiny CPU backbone (stride 8) used by tests and the synthetic recipe.
ModelConfig tiny_model_config();
/// Residual-50 layout: res2-res4 backbone (stride 16), res5 as head trunk.
ModelConfig resnet50_model_config();

struct FeatureMap {
  nn::Tensor values;  // [B, C, H / stride, W / stride]
  int stride = 1;
};

struct RoiFeatures {
  nn::Tensor values;  // [N, C, P, P]
  std::vector<Box> boxes;
  std::vector<int> batch_index;
  std::vector<int> identities;  // >= 0 labeled, -1 unlabeled person, kBackground
};

enum class Branch { kStudent, kTeacher };

struct EmbeddingBatch {
  nn::Tensor embeddings;  // [N, D], unit rows
  std::vector<int> identities;
  Branch branch = Branch::kStudent;
};

/// Ground-truth boxes of one image; identities >= -1.
struct ImageTargets {
  std::vector<Box> boxes;
  std::vector<int> identities;
};

struct ImageBatch {
  nn::Tensor pixels;                      // [B, 3, H, W], normalized, zero padded
  std::vector<std::array<int, 2>> sizes;  // (height, width) before padding
};

/// Normalizes and pads images into one batch. Throws NumericError when
/// the config's std has a zero entry.
ImageBatch make_image_batch(const std::vector<const data::Image*>& images, const ModelConfig& config);

struct ProposalSet {
  std::vector<std::vector<Box>> boxes;  // per image
  std::vector<std::vector<float>> scores;
  nn::Tensor loss_objectness;  // training only
  nn::Tensor loss_box;
};

struct DetectionHeadOutput {
  std::vector<Box> refined;  // clipped, one per input RoI
  std::vector<float> scores; // foreground probability
  nn::Tensor loss_cls;       // training only
  nn::Tensor loss_reg;
};

/// Student head output: embeddings plus fg/bg logits and box deltas.
struct ReidOutput {
  nn::Tensor embeddings;  // [N, D]
  nn::Tensor logits;      // [N, 2], student only
  nn::Tensor deltas;      // [N, 4], student only
};

struct Detection {
  Box box;
  float score = 0.0f;
  std::vector<float> embedding;
};

/// Everything a training step needs from one forward pass.
struct TrainForward {
  nn::Tensor rpn_cls, rpn_reg, cls1, reg1, cls2, reg2;
  EmbeddingBatch student;  // foreground rows only
  EmbeddingBatch teacher;  // same rows; undefined without a teacher
  int proposals = 0;
  bool reid_skipped = false;  // no foreground RoI reached the ReID heads
};

class SearchModel {
 public:
  explicit SearchModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  FeatureMap backbone_forward(const nn::Tensor& pixels) const;

  /// Proposals per image; losses are produced when `targets` is non-null.
  ProposalSet propose_regions(const FeatureMap& fm, const std::vector<std::array<int, 2>>& sizes,
                              const std::vector<ImageTargets>* targets, Rng* rng) const;

  /// RoIAlign of image-space boxes. Throws std::invalid_argument for a
  /// zero-area box.
  RoiFeatures pool_rois(const FeatureMap& fm, const std::vector<Box>& boxes, const std::vector<int>& batch_index) const;

  /// Scores and refines RoIs. With `labels` / `regression_targets`
  /// (one label per RoI, 1 = person; targets used on positive rows) the
  /// losses are filled in.
  DetectionHeadOutput detection_head(const RoiFeatures& rois, const std::vector<std::array<int, 2>>& sizes,
                                     const std::vector<int>* labels,
                                     const std::vector<std::array<float, 4>>* regression_targets) const;

  /// Student or teacher ReID head. The teacher call counter increments on
  /// every teacher evaluation. Throws std::logic_error for the teacher on a
  /// model built without one.
  ReidOutput reid_head_forward(Branch branch, const nn::Tensor& rois) const;

  TrainForward forward_train(const ImageBatch& batch, const std::vector<ImageTargets>& targets, Rng& rng,
                             bool detach_teacher) const;

  /// Student-only detection and embedding. No gradients are recorded.
  std::vector<std::vector<Detection>> inference(const ImageBatch& batch) const;

  /// Student embeddings of given boxes in one image (query extraction).
  std::vector<std::vector<float>> embed_boxes(const ImageBatch& single, const std::vector<Box>& boxes) const;

  nn::ParameterList parameters() const;
  /// Parameters reachable from inference(): everything but the teacher.
  nn::ParameterList inference_parameters() const;
  nn::ParameterList teacher_parameters() const;

  long teacher_calls() const { return teacher_calls_; }
  void reset_teacher_calls() { teacher_calls_ = 0; }

 private:
  struct Head {
    Stage trunk;
    Linear embed;
    Linear cls;
    Linear reg;
  };

  nn::Tensor head_features(const Stage& trunk, const nn::Tensor& rois) const;
  void collect_backbone(nn::ParameterList& out) const;
  void collect_head(const Head& h, const std::string& prefix, bool with_embed, bool with_box, nn::ParameterList& out) const;

  ModelConfig config_;
  Conv2d stem_;
  std::vector<Stage> stages_;
  Conv2d rpn_conv_, rpn_cls_, rpn_reg_;
  Head box_head_;
  Head student_;
  Head teacher_;
  mutable long teacher_calls_ = 0;
};

}  // namespace g2aps::model
