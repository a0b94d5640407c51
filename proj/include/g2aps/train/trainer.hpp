#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "g2aps/data/annotations.hpp"
#include "g2aps/data/protocol.hpp"
#include "g2aps/loss/objective.hpp"
#include "g2aps/loss/oim.hpp"
#include "g2aps/model/search_model.hpp"
#include "g2aps/nn/optim.hpp"
#include "g2aps/train/checkpoint.hpp"
#include "g2aps/train/config.hpp"
#include "g2aps/train/evaluate.hpp"
#include "json.hpp"

namespace g2aps::train {

struct Dataset {
  data::AnnotationSet train;
  data::AnnotationSet test;
  data::SearchProtocol protocol;
};

/// Generates (synthetic) or loads the data named by the config and builds
/// the search protocol unless a protocol file is given.
Dataset load_dataset(const TrainConfig& config);

struct StepRecord {
  int epoch = 0;  // 0-indexed
  int step = 0;
  long global_step = 0;
  double lr = 0.0;
  loss::LossReport report;
  int labeled = 0;    // labeled ReID rows
  int unlabeled = 0;  // unlabeled-person ReID rows
  int proposals = 0;
};

nlohmann::json to_json(const StepRecord& r);

/// Owns the model, optimizer and OIM states of one training run.
class Trainer {
 public:
  Trainer(TrainConfig config, Dataset data);

  const TrainConfig& config() const { return config_; }
  const Dataset& data() const { return data_; }
  model::SearchModel& model() { return model_; }
  const model::SearchModel& model() const { return model_; }
  nn::Sgd& optimizer() { return optimizer_; }
  const loss::OimState& oim_student() const { return oim_student_; }
  const loss::OimState& oim_teacher() const { return oim_teacher_; }

  /// Training-identity label -> OIM class index.
  const std::map<int, int>& class_index() const { return class_of_; }

  /// One SGD update on the given training records. Throws NumericError
  /// naming the component and the batch image ids on a non-finite loss.
  StepRecord train_step(const std::vector<std::size_t>& records, int epoch, int step);

  /// Record order of a 0-indexed epoch (seeded shuffle).
  std::vector<std::size_t> epoch_order(int epoch) const;
  int steps_per_epoch() const;

  /// Runs one epoch; returns its step records.
  std::vector<StepRecord> run_epoch(int epoch, const std::function<void(const StepRecord&)>& on_step = {});

  int completed_epochs() const { return completed_epochs_; }
  const nlohmann::json& history() const { return history_; }

  Checkpoint make_checkpoint() const;
  /// Restores parameters, momentum, OIM states and progress. Throws
  /// IntegrityError if the checkpoint does not fit this model.
  void restore(const Checkpoint& c);

  EvalResult evaluate(bool stratify) const;

 private:
  TrainConfig config_;
  Dataset data_;
  model::SearchModel model_;
  nn::Sgd optimizer_;
  loss::OimState oim_student_;
  loss::OimState oim_teacher_;
  std::map<int, int> class_of_;
  int completed_epochs_ = 0;
  long global_step_ = 0;
  nlohmann::json history_ = nlohmann::json::array();
};

struct RunOptions {
  bool write_files = true;  // config snapshot, metrics.jsonl, checkpoints, final_eval.json
  int stop_after_epoch = -1;  // stop once this many epochs are complete (-1: run to the end)
  bool final_eval = true;
  bool stratify = true;
  std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
  std::vector<StepRecord> steps;
  std::optional<EvalResult> final_eval;
  int completed_epochs = 0;
};

/// Fresh run: per-step metrics log, per-epoch checkpoints
/// (<output_dir>/checkpoints/epoch_NNN.ckpt), final evaluation.
RunResult run_training(const TrainConfig& config, const RunOptions& options = {});

/// Continues from a checkpoint holding k completed epochs. Metrics log lines
/// of epochs >= k are dropped before appending.
RunResult resume_training(const std::filesystem::path& checkpoint, const RunOptions& options = {});

/// Model with the checkpoint's architecture and parameters.
model::SearchModel model_from_checkpoint(const Checkpoint& c);

std::filesystem::path checkpoint_path(const std::filesystem::path& output_dir, int completed_epochs);

}  // namespace g2aps::train
