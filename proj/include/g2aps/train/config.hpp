#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "g2aps/data/synth.hpp"
#include "g2aps/loss/distill.hpp"
#include "g2aps/loss/objective.hpp"
#include "g2aps/model/search_model.hpp"
#include "json.hpp"

namespace g2aps::train {

inline constexpr int kConfigVersion = 1;

/// Where the training and test data come from. With `synthetic` set the
/// generator runs in memory and the annotation paths are ignored.
struct DataSpec {
  bool synthetic = false;
  data::SynthConfig synth;
  std::string train_annotations;
  std::string test_annotations;
  std::string protocol;  // optional; built from the test split when empty
  int gallery_size = 50;
  int positives = 10;
  std::uint64_t protocol_seed = 0;
};

struct OimSettings {
  double temperature = 1.0 / 30.0;
  double momentum = 0.5;
  int queue_size = 2000;
  int lut_size = 2078;  // expected identity count; the table is sized from the data
};

struct TrainConfig {
  std::string dataset = "g2aps";
  DataSpec data;
  model::ModelConfig model;

  int batch_size = 2;
  double initial_lr = 0.001;
  int lr_decay_epoch = 16;  // 1-indexed epoch from which the decayed rate applies
  double lr_decay_factor = 0.1;
  int total_epochs = 21;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::optional<double> grad_clip;  // global L2 norm; off when empty
  int max_steps_per_epoch = 0;      // 0 = full pass

  double lambda_prob = 1.0;
  double lambda_rela = 300.0;
  loss::RelationDistance relation_distance = loss::RelationDistance::kKl;
  loss::RelationDirection relation_direction = loss::RelationDirection::kStudentToTeacher;
  bool detach_teacher = true;
  bool enable_prob_kd = true;
  bool enable_rela_kd = true;
  bool kd_to_teacher = false;  // let distillation gradients reach the teacher head
  loss::DetectionWeights detection_weights;
  OimSettings oim;

  double search_score_threshold = 0.5;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  loss::LossWeights loss_weights() const;
};

/// Named presets: "g2aps", "prw", "cuhk-sysu" (full residual model) and
/// "synthetic" (tiny model, in-memory generator). Throws ConfigError for an
/// unknown name.
TrainConfig preset(const std::string& name);

/// Throws ConfigError on an inconsistent config.
void validate(const TrainConfig& c);

/// Learning rate of 0-indexed `epoch`. Epoch e runs at the decayed rate
/// when e + 1 >= lr_decay_epoch. Throws std::invalid_argument outside
/// [0, total_epochs).
double lr_schedule(const TrainConfig& c, int epoch);

nlohmann::json config_to_json(const TrainConfig& c);
/// Keys absent from `j` keep the values of the preset named by "dataset"
/// (default "g2aps"). Throws SchemaError on a wrong version or bad value.
TrainConfig config_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const model::ModelConfig& m);
model::ModelConfig model_config_from_json(const nlohmann::json& j, model::ModelConfig base);

void save_config(const TrainConfig& c, const std::filesystem::path& path);
TrainConfig load_config(const std::filesystem::path& path);

}  // namespace g2aps::train
