#include "g2aps/train/config.hpp"

#include <fstream>
#include <sstream>

#include "g2aps/common/errors.hpp"

namespace g2aps::train {

using nlohmann::json;

loss::LossWeights TrainConfig::loss_weights() const {
  loss::LossWeights w;
  w.lambda_prob = enable_prob_kd ? lambda_prob : 0.0;
  w.lambda_rela = enable_rela_kd ? lambda_rela : 0.0;
  w.det = detection_weights;
  return w;
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.dataset = name;
  c.output_dir = "runs/" + name;
  if (name == "g2aps" || name == "prw" || name == "cuhk-sysu") {
    c.model = model::resnet50_model_config();
    if (name == "g2aps") {
      c.batch_size = 2;
      c.initial_lr = 0.001;
      c.oim.queue_size = 2000;
      c.oim.lut_size = 2078;
    } else if (name == "prw") {
      c.batch_size = 4;
      c.initial_lr = 0.0018;
      c.oim.queue_size = 500;
      c.oim.lut_size = 482;
    } else {
      c.batch_size = 3;
      c.initial_lr = 0.0018;
      c.oim.queue_size = 5000;
      c.oim.lut_size = 5532;
    }
    c.data.train_annotations = "data/" + name + "/train.jsonl";
    c.data.test_annotations = "data/" + name + "/test.jsonl";
    return c;
  }
  if (name == "synthetic") {
    c.model = model::tiny_model_config();
    c.data.synthetic = true;
    c.data.synth = data::SynthConfig{};
    c.batch_size = 2;
    c.initial_lr = 0.01;
    c.total_epochs = 12;
    c.lr_decay_epoch = 10;
    c.grad_clip = 5.0;
    c.oim.queue_size = 64;
    c.oim.lut_size = c.data.synth.num_ids;
    return c;
  }
  throw ConfigError("unknown preset: " + name);
}

void validate(const TrainConfig& c) {
  if (c.total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
  if (c.lr_decay_epoch < 1 || c.lr_decay_epoch > c.total_epochs) {
    throw ConfigError("lr_decay_epoch must lie in [1, total_epochs]");
  }
  if (!(c.lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be > 0");
  if (!(c.initial_lr > 0)) throw ConfigError("initial_lr must be > 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.momentum < 0 || c.weight_decay < 0) throw ConfigError("momentum and weight_decay must be >= 0");
  if (c.lambda_prob < 0 || c.lambda_rela < 0) throw ConfigError("distillation weights must be >= 0");
  if (!(c.oim.temperature > 0)) throw ConfigError("oim.temperature must be > 0");
  if (!(c.oim.momentum > 0 && c.oim.momentum < 1)) throw ConfigError("oim.momentum must lie in (0, 1)");
  if (c.oim.queue_size < 0) throw ConfigError("oim.queue_size must be >= 0");
  if (c.grad_clip && !(*c.grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
  if (!c.model.with_teacher && (c.enable_prob_kd || c.enable_rela_kd) && (c.lambda_prob > 0 || c.lambda_rela > 0)) {
    throw ConfigError("distillation needs the teacher head");
  }
}

double lr_schedule(const TrainConfig& c, int epoch) {
  if (epoch < 0 || epoch >= c.total_epochs) {
    throw std::invalid_argument("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.total_epochs) + ")");
  }
  return epoch + 1 >= c.lr_decay_epoch ? c.initial_lr * c.lr_decay_factor : c.initial_lr;
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config key '") + key + "': " + e.what());
  }
}

json stage_to_json(const model::StageSpec& s) {
  return {{"blocks", s.blocks}, {"mid", s.mid}, {"out", s.out}, {"stride", s.stride}};
}

model::StageSpec stage_from_json(const json& j) {
  model::StageSpec s;
  read(j, "blocks", s.blocks);
  read(j, "mid", s.mid);
  read(j, "out", s.out);
  read(j, "stride", s.stride);
  return s;
}

json synth_to_json(const data::SynthConfig& s) {
  json alts = json::array();
  for (auto a : s.uav_altitudes) alts.push_back(std::string(data::to_string(a)));
  return {{"seed", s.seed},
          {"num_ids", s.num_ids},
          {"images_per_view", s.images_per_view},
          {"boxes_per_id", s.boxes_per_id},
          {"image_size", s.image_size},
          {"scale_ratio_uav", s.scale_ratio_uav},
          {"ground_width_min", s.ground_width_min},
          {"ground_width_max", s.ground_width_max},
          {"aspect", s.aspect},
          {"persons_per_image", s.persons_per_image},
          {"unlabeled_probability", s.unlabeled_probability},
          {"uav_altitudes", alts},
          {"disjoint_test_identities", s.disjoint_test_identities},
          {"noise", s.noise}};
}

data::SynthConfig synth_from_json(const json& j, data::SynthConfig s) {
  read(j, "seed", s.seed);
  read(j, "num_ids", s.num_ids);
  read(j, "images_per_view", s.images_per_view);
  read(j, "boxes_per_id", s.boxes_per_id);
  read(j, "image_size", s.image_size);
  read(j, "scale_ratio_uav", s.scale_ratio_uav);
  read(j, "ground_width_min", s.ground_width_min);
  read(j, "ground_width_max", s.ground_width_max);
  read(j, "aspect", s.aspect);
  read(j, "persons_per_image", s.persons_per_image);
  read(j, "unlabeled_probability", s.unlabeled_probability);
  read(j, "disjoint_test_identities", s.disjoint_test_identities);
  read(j, "noise", s.noise);
  if (j.contains("uav_altitudes")) {
    s.uav_altitudes.clear();
    try {
      for (const auto& a : j.at("uav_altitudes")) s.uav_altitudes.push_back(data::parse_altitude(a.get<std::string>()));
    } catch (const std::exception& e) {
      throw SchemaError(std::string("config key 'uav_altitudes': ") + e.what());
    }
  }
  return s;
}

}  // namespace

json model_config_to_json(const model::ModelConfig& m) {
  json stages = json::array();
  for (const auto& s : m.stages) stages.push_back(stage_to_json(s));
  return {{"backbone", model::to_string(m.backbone)},
          {"stem_channels", m.stem_channels},
          {"stem_kernel", m.stem_kernel},
          {"stem_pool", m.stem_pool},
          {"stages", stages},
          {"head_stage", stage_to_json(m.head_stage)},
          {"pool_size", m.pool_size},
          {"head_pool_grid", m.head_pool_grid},
          {"embedding_dim", m.embedding_dim},
          {"pixel_mean", m.pixel_mean},
          {"pixel_std", m.pixel_std},
          {"anchor_sizes", m.anchor_sizes},
          {"anchor_aspects", m.anchor_aspects},
          {"rpn_batch", m.rpn_batch},
          {"rpn_positive_fraction", m.rpn_positive_fraction},
          {"rpn_positive_iou", m.rpn_positive_iou},
          {"rpn_negative_iou", m.rpn_negative_iou},
          {"rpn_nms", m.rpn_nms},
          {"rpn_pre_nms_train", m.rpn_pre_nms_train},
          {"rpn_post_nms_train", m.rpn_post_nms_train},
          {"rpn_pre_nms_test", m.rpn_pre_nms_test},
          {"max_proposals", m.max_proposals},
          {"box_batch", m.box_batch},
          {"box_positive_fraction", m.box_positive_fraction},
          {"box_foreground_iou", m.box_foreground_iou},
          {"reid_batch", m.reid_batch},
          {"reid_foreground_fraction", m.reid_foreground_fraction},
          {"reid_foreground_iou", m.reid_foreground_iou},
          {"box_score_threshold", m.box_score_threshold},
          {"box_nms", m.box_nms},
          {"detections_per_image", m.detections_per_image},
          {"with_teacher", m.with_teacher},
          {"init_seed", m.init_seed}};
}

model::ModelConfig model_config_from_json(const json& j, model::ModelConfig m) {
  if (j.contains("backbone")) {
    try {
      const auto kind = model::parse_backbone(j.at("backbone").get<std::string>());
      if (kind != m.backbone) m = kind == model::BackboneKind::kTiny ? model::tiny_model_config() : model::resnet50_model_config();
    } catch (const std::exception& e) {
      throw SchemaError(std::string("config key 'model.backbone': ") + e.what());
    }
  }
  read(j, "stem_channels", m.stem_channels);
  read(j, "stem_kernel", m.stem_kernel);
  read(j, "stem_pool", m.stem_pool);
  if (j.contains("stages")) {
    m.stages.clear();
    for (const auto& s : j.at("stages")) m.stages.push_back(stage_from_json(s));
  }
  if (j.contains("head_stage")) m.head_stage = stage_from_json(j.at("head_stage"));
  read(j, "pool_size", m.pool_size);
  read(j, "head_pool_grid", m.head_pool_grid);
  read(j, "embedding_dim", m.embedding_dim);
  read(j, "pixel_mean", m.pixel_mean);
  read(j, "pixel_std", m.pixel_std);
  read(j, "anchor_sizes", m.anchor_sizes);
  read(j, "anchor_aspects", m.anchor_aspects);
  read(j, "rpn_batch", m.rpn_batch);
  read(j, "rpn_positive_fraction", m.rpn_positive_fraction);
  read(j, "rpn_positive_iou", m.rpn_positive_iou);
  read(j, "rpn_negative_iou", m.rpn_negative_iou);
  read(j, "rpn_nms", m.rpn_nms);
  read(j, "rpn_pre_nms_train", m.rpn_pre_nms_train);
  read(j, "rpn_post_nms_train", m.rpn_post_nms_train);
  read(j, "rpn_pre_nms_test", m.rpn_pre_nms_test);
  read(j, "max_proposals", m.max_proposals);
  read(j, "box_batch", m.box_batch);
  read(j, "box_positive_fraction", m.box_positive_fraction);
  read(j, "box_foreground_iou", m.box_foreground_iou);
  read(j, "reid_batch", m.reid_batch);
  read(j, "reid_foreground_fraction", m.reid_foreground_fraction);
  read(j, "reid_foreground_iou", m.reid_foreground_iou);
  read(j, "box_score_threshold", m.box_score_threshold);
  read(j, "box_nms", m.box_nms);
  read(j, "detections_per_image", m.detections_per_image);
  read(j, "with_teacher", m.with_teacher);
  read(j, "init_seed", m.init_seed);
  return m;
}

json config_to_json(const TrainConfig& c) {
  const auto& d = c.detection_weights;
  json j{{"version", kConfigVersion},
         {"dataset", c.dataset},
         {"data",
          {{"synthetic", c.data.synthetic},
           {"synth", synth_to_json(c.data.synth)},
           {"train_annotations", c.data.train_annotations},
           {"test_annotations", c.data.test_annotations},
           {"protocol", c.data.protocol},
           {"gallery_size", c.data.gallery_size},
           {"positives", c.data.positives},
           {"protocol_seed", c.data.protocol_seed}}},
         {"model", model_config_to_json(c.model)},
         {"batch_size", c.batch_size},
         {"initial_lr", c.initial_lr},
         {"lr_decay_epoch", c.lr_decay_epoch},
         {"lr_decay_factor", c.lr_decay_factor},
         {"total_epochs", c.total_epochs},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"grad_clip", c.grad_clip ? json(*c.grad_clip) : json(nullptr)},
         {"max_steps_per_epoch", c.max_steps_per_epoch},
         {"lambda_prob", c.lambda_prob},
         {"lambda_rela", c.lambda_rela},
         {"relation_distance", std::string(loss::to_string(c.relation_distance))},
         {"relation_direction", std::string(loss::to_string(c.relation_direction))},
         {"detach_teacher", c.detach_teacher},
         {"enable_prob_kd", c.enable_prob_kd},
         {"enable_rela_kd", c.enable_rela_kd},
         {"kd_to_teacher", c.kd_to_teacher},
         {"detection_weights", {{"k1", d.k1}, {"k2", d.k2}, {"k3", d.k3}, {"k4", d.k4}, {"rpn", d.rpn}}},
         {"oim",
          {{"temperature", c.oim.temperature},
           {"momentum", c.oim.momentum},
           {"queue_size", c.oim.queue_size},
           {"lut_size", c.oim.lut_size}}},
         {"search_score_threshold", c.search_score_threshold},
         {"seed", c.seed},
         {"output_dir", c.output_dir}};
  return j;
}

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("config must be a JSON object");
  if (j.contains("version") && j.at("version") != kConfigVersion) {
    throw SchemaError("unsupported config version " + j.at("version").dump());
  }
  std::string name = "g2aps";
  read(j, "dataset", name);
  TrainConfig c;
  try {
    c = preset(name);
  } catch (const ConfigError&) {
    c = preset("g2aps");
    c.dataset = name;
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    read(d, "synthetic", c.data.synthetic);
    if (d.contains("synth")) c.data.synth = synth_from_json(d.at("synth"), c.data.synth);
    read(d, "train_annotations", c.data.train_annotations);
    read(d, "test_annotations", c.data.test_annotations);
    read(d, "protocol", c.data.protocol);
    read(d, "gallery_size", c.data.gallery_size);
    read(d, "positives", c.data.positives);
    read(d, "protocol_seed", c.data.protocol_seed);
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
  read(j, "batch_size", c.batch_size);
  read(j, "initial_lr", c.initial_lr);
  read(j, "lr_decay_epoch", c.lr_decay_epoch);
  read(j, "lr_decay_factor", c.lr_decay_factor);
  read(j, "total_epochs", c.total_epochs);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  if (j.contains("grad_clip")) {
    if (j.at("grad_clip").is_null()) c.grad_clip.reset();
    else c.grad_clip = j.at("grad_clip").get<double>();
  }
  read(j, "max_steps_per_epoch", c.max_steps_per_epoch);
  read(j, "lambda_prob", c.lambda_prob);
  read(j, "lambda_rela", c.lambda_rela);
  try {
    if (j.contains("relation_distance")) c.relation_distance = loss::parse_relation_distance(j.at("relation_distance").get<std::string>());
    if (j.contains("relation_direction")) c.relation_direction = loss::parse_relation_direction(j.at("relation_direction").get<std::string>());
  } catch (const std::exception& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  read(j, "detach_teacher", c.detach_teacher);
  read(j, "enable_prob_kd", c.enable_prob_kd);
  read(j, "enable_rela_kd", c.enable_rela_kd);
  read(j, "kd_to_teacher", c.kd_to_teacher);
  if (j.contains("detection_weights")) {
    const json& d = j.at("detection_weights");
    read(d, "k1", c.detection_weights.k1);
    read(d, "k2", c.detection_weights.k2);
    read(d, "k3", c.detection_weights.k3);
    read(d, "k4", c.detection_weights.k4);
    read(d, "rpn", c.detection_weights.rpn);
  }
  if (j.contains("oim")) {
    const json& o = j.at("oim");
    read(o, "temperature", c.oim.temperature);
    read(o, "momentum", c.oim.momentum);
    read(o, "queue_size", c.oim.queue_size);
    read(o, "lut_size", c.oim.lut_size);
  }
  read(j, "search_score_threshold", c.search_score_threshold);
  read(j, "seed", c.seed);
  read(j, "output_dir", c.output_dir);
  return c;
}

void save_config(const TrainConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << config_to_json(c).dump(2) << '\n';
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  TrainConfig c = config_from_json(j);
  // Relative data paths resolve against the config file.
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative() && !base.empty()) p = (base / p).lexically_normal().string();
  };
  if (j.contains("data")) {
    const json& d = j.at("data");
    if (d.contains("train_annotations")) resolve(c.data.train_annotations);
    if (d.contains("test_annotations")) resolve(c.data.test_annotations);
    if (d.contains("protocol")) resolve(c.data.protocol);
  }
  return c;
}

}  // namespace g2aps::train
