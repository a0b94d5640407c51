#include "g2aps/train/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "g2aps/common/errors.hpp"
#include "g2aps/common/rng.hpp"
#include "g2aps/data/synth.hpp"
#include "g2aps/loss/distill.hpp"
#include "g2aps/nn/ops.hpp"

namespace g2aps::train {

namespace {

model::ModelConfig seeded_model_config(const TrainConfig& c) {
  model::ModelConfig m = c.model;
  m.init_seed = derive_seed(c.seed, 0x6d6f64656cULL, c.model.init_seed);
  return m;
}

model::Box to_model_box(const data::BoundingBox& b) {
  return {static_cast<float>(b.x), static_cast<float>(b.y), static_cast<float>(b.x2()), static_cast<float>(b.y2())};
}

std::vector<int> map_labels(const std::vector<int>& ids, const std::map<int, int>& class_of) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (int id : ids) {
    const auto it = class_of.find(id);
    out.push_back(id >= 0 && it != class_of.end() ? it->second : data::kUnlabeled);
  }
  return out;
}

nn::Tensor oim_term(const nn::Tensor& emb, const std::vector<int>& labels, const loss::OimState& state) {
  return nn::matrix_function({emb}, [&labels, &state](const std::vector<Eigen::MatrixXd>& in, std::vector<Eigen::MatrixXd>& g) {
    loss::OimLoss r = loss::oim_loss(in[0], labels, state);
    g[0] = std::move(r.grad);
    return r.value;
  });
}

}  // namespace

Dataset load_dataset(const TrainConfig& config) {
  Dataset d;
  if (config.data.synthetic) {
    data::SynthDataset s = data::synth_generate(config.data.synth);
    d.train = std::move(s.train);
    d.test = std::move(s.test);
  } else {
    if (config.data.train_annotations.empty() || config.data.test_annotations.empty()) {
      throw ConfigError("data.train_annotations and data.test_annotations are required");
    }
    d.train = data::load_annotations(config.data.train_annotations);
    d.test = data::load_annotations(config.data.test_annotations);
  }
  if (!config.data.protocol.empty()) {
    d.protocol = data::load_protocol(config.data.protocol);
  } else {
    d.protocol = data::build_search_protocol(d.test, config.data.gallery_size, config.data.positives, config.data.protocol_seed);
  }
  return d;
}

nlohmann::json to_json(const StepRecord& r) {
  const auto& l = r.report;
  return {{"epoch", r.epoch},         {"step", r.step},           {"global_step", r.global_step},
          {"lr", r.lr},               {"l_prob", l.l_prob},       {"l_rela", l.l_rela},
          {"l_reg1", l.l_reg1},       {"l_cls1", l.l_cls1},       {"l_reg2", l.l_reg2},
          {"l_cls2", l.l_cls2},       {"l_rpn_reg", l.l_rpn_reg}, {"l_rpn_cls", l.l_rpn_cls},
          {"l_det", l.l_det},         {"l_oim_s", l.l_oim_s},     {"l_oim_t", l.l_oim_t},
          {"total", l.total},         {"lambda_prob", l.weights.lambda_prob},
          {"lambda_rela", l.weights.lambda_rela},
          {"labeled", r.labeled},     {"unlabeled", r.unlabeled}, {"proposals", r.proposals}};
}

Trainer::Trainer(TrainConfig config, Dataset data)
    : config_(std::move(config)),
      data_(std::move(data)),
      model_(seeded_model_config(config_)),
      optimizer_(model_.parameters(), config_.momentum, config_.weight_decay) {
  validate(config_);
  int k = 0;
  for (int id : data_.train.identity_universe()) class_of_[id] = k++;
  const int dim = config_.model.embedding_dim;
  oim_student_ = loss::OimState(k, config_.oim.queue_size, dim, config_.oim.temperature, config_.oim.momentum,
                                derive_seed(config_.seed, 0x6f696d, 1));
  if (config_.model.with_teacher) {
    oim_teacher_ = loss::OimState(k, config_.oim.queue_size, dim, config_.oim.temperature, config_.oim.momentum,
                                  derive_seed(config_.seed, 0x6f696d, 2));
  }
}

int Trainer::steps_per_epoch() const {
  const auto n = static_cast<int>(data_.train.records().size());
  int steps = (n + config_.batch_size - 1) / config_.batch_size;
  if (config_.max_steps_per_epoch > 0) steps = std::min(steps, config_.max_steps_per_epoch);
  return steps;
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(data_.train.records().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(config_.seed, 0x65706f6368ULL, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

StepRecord Trainer::train_step(const std::vector<std::size_t>& records, int epoch, int step) {
  const auto& recs = data_.train.records();
  std::vector<data::Image> images;
  std::vector<model::ImageTargets> targets;
  for (auto i : records) {
    images.push_back(data_.train.load_pixels(recs[i]));
    model::ImageTargets t;
    for (const auto& b : recs[i].boxes) {
      t.boxes.push_back(to_model_box(b));
      t.identities.push_back(b.identity);
    }
    targets.push_back(std::move(t));
  }
  std::vector<const data::Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const model::ImageBatch batch = model::make_image_batch(ptrs, config_.model);

  Rng rng(derive_seed(config_.seed, static_cast<std::uint64_t>(epoch) + 1, static_cast<std::uint64_t>(step) + 1));
  const model::TrainForward fwd = model_.forward_train(batch, targets, rng, config_.detach_teacher);

  const std::vector<int> labels = map_labels(fwd.student.identities, class_of_);
  std::vector<int> labeled_rows;
  StepRecord rec;
  rec.epoch = epoch;
  rec.step = step;
  rec.proposals = fwd.proposals;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) labeled_rows.push_back(static_cast<int>(i));
    else ++rec.unlabeled;
  }
  rec.labeled = static_cast<int>(labeled_rows.size());

  const bool teacher = config_.model.with_teacher;
  const nn::Tensor oim_s = oim_term(fwd.student.embeddings, labels, oim_student_);
  nn::Tensor oim_t;
  if (teacher) oim_t = oim_term(fwd.teacher.embeddings, labels, oim_teacher_);

  const loss::LossWeights weights = config_.loss_weights();
  nn::Tensor prob, rela;
  if (teacher && !labeled_rows.empty() && (config_.enable_prob_kd || config_.enable_rela_kd)) {
    const nn::Tensor fs = nn::index_rows(fwd.student.embeddings, labeled_rows);
    nn::Tensor ft = nn::index_rows(fwd.teacher.embeddings, labeled_rows);
    if (!config_.kd_to_teacher) ft = nn::detach(ft);
    if (config_.enable_prob_kd) {
      const double tau = config_.oim.temperature;
      prob = nn::matrix_function({fs, ft}, [this, tau](const std::vector<Eigen::MatrixXd>& in, std::vector<Eigen::MatrixXd>& g) {
        loss::PairLoss r = loss::prob_distill_embeddings(in[0], oim_student_.lut(), in[1], oim_teacher_.lut(), tau);
        g[0] = std::move(r.grad_student);
        g[1] = std::move(r.grad_teacher);
        return r.value;
      });
    }
    if (config_.enable_rela_kd) {
      const auto distance = config_.relation_distance;
      const auto direction = config_.relation_direction;
      rela = nn::matrix_function({fs, ft}, [distance, direction](const std::vector<Eigen::MatrixXd>& in, std::vector<Eigen::MatrixXd>& g) {
        loss::PairLoss r = loss::relation_distill_loss(in[0], in[1], distance, direction);
        g[0] = std::move(r.grad_student);
        g[1] = std::move(r.grad_teacher);
        return r.value;
      });
    }
  }

  // All loss values are fixed now; the OIM tables may move.
  oim_student_.update(nn::to_matrix(fwd.student.embeddings), labels);
  if (teacher) oim_teacher_.update(nn::to_matrix(fwd.teacher.embeddings), labels);

  auto value = [](const nn::Tensor& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  loss::LossComponents parts;
  parts.l_prob = value(prob);
  parts.l_rela = value(rela);
  parts.det = {value(fwd.reg1), value(fwd.cls1), value(fwd.reg2), value(fwd.cls2), value(fwd.rpn_reg), value(fwd.rpn_cls)};
  parts.l_oim_s = value(oim_s);
  parts.l_oim_t = value(oim_t);
  try {
    rec.report = loss::total_loss(parts, weights).second;
  } catch (const NumericError& e) {
    std::string ids;
    for (auto i : records) ids += (ids.empty() ? "" : ", ") + recs[i].image_id;
    throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                       ", images: " + ids + ")");
  }

  const auto& dw = weights.det;
  const nn::Tensor total = nn::weighted_sum({{fwd.rpn_cls, static_cast<float>(dw.rpn)},
                                             {fwd.rpn_reg, static_cast<float>(dw.rpn)},
                                             {fwd.reg1, static_cast<float>(dw.k1)},
                                             {fwd.cls1, static_cast<float>(dw.k2)},
                                             {fwd.reg2, static_cast<float>(dw.k3)},
                                             {fwd.cls2, static_cast<float>(dw.k4)},
                                             {oim_s, 1.0f},
                                             {oim_t, 1.0f},
                                             {prob, static_cast<float>(weights.lambda_prob)},
                                             {rela, static_cast<float>(weights.lambda_rela)}});
  total.backward();
  if (config_.grad_clip) nn::clip_grad_norm(optimizer_.parameters(), *config_.grad_clip);
  rec.lr = lr_schedule(config_, epoch);
  optimizer_.step(rec.lr);
  optimizer_.zero_grad();
  rec.global_step = ++global_step_;
  return rec;
}

std::vector<StepRecord> Trainer::run_epoch(int epoch, const std::function<void(const StepRecord&)>& on_step) {
  const auto order = epoch_order(epoch);
  const int steps = steps_per_epoch();
  std::vector<StepRecord> out;
  for (int s = 0; s < steps; ++s) {
    std::vector<std::size_t> batch;
    for (int b = 0; b < config_.batch_size; ++b) {
      const std::size_t at = static_cast<std::size_t>(s) * static_cast<std::size_t>(config_.batch_size) + static_cast<std::size_t>(b);
      if (at < order.size()) batch.push_back(order[at]);
    }
    out.push_back(train_step(batch, epoch, s));
    if (on_step) on_step(out.back());
  }
  double mean = 0.0;
  for (const auto& r : out) mean += r.report.total;
  if (!out.empty()) mean /= static_cast<double>(out.size());
  history_.push_back({{"epoch", epoch}, {"steps", out.size()}, {"mean_total", mean}, {"lr", lr_schedule(config_, epoch)}});
  completed_epochs_ = epoch + 1;
  return out;
}

Checkpoint Trainer::make_checkpoint() const {
  Checkpoint c;
  c.meta = {{"config", config_to_json(config_)},
            {"completed_epochs", completed_epochs_},
            {"global_step", global_step_},
            {"history", history_}};
  c.parameters = capture_parameters(model_.parameters());
  c.oim_student = oim_student_;
  c.oim_teacher = oim_teacher_;
  c.momentum = optimizer_.momentum_buffers();
  return c;
}

void Trainer::restore(const Checkpoint& c) {
  restore_parameters(c.parameters, model_.parameters());
  if (c.momentum.size() != optimizer_.momentum_buffers().size()) throw IntegrityError("checkpoint momentum count mismatch");
  for (std::size_t i = 0; i < c.momentum.size(); ++i) {
    if (!c.momentum[i].empty() && c.momentum[i].size() != optimizer_.parameters()[i].tensor.numel()) {
      throw IntegrityError("checkpoint momentum shape mismatch for " + optimizer_.parameters()[i].name);
    }
  }
  optimizer_.momentum_buffers() = c.momentum;
  if (c.oim_student.num_classes() != oim_student_.num_classes() || c.oim_student.dim() != oim_student_.dim()) {
    throw IntegrityError("checkpoint OIM table does not match the training identities");
  }
  oim_student_ = c.oim_student;
  oim_teacher_ = c.oim_teacher;
  completed_epochs_ = c.meta.value("completed_epochs", 0);
  global_step_ = c.meta.value("global_step", 0L);
  history_ = c.meta.value("history", nlohmann::json::array());
}

EvalResult Trainer::evaluate(bool stratify) const {
  return evaluate_model(model_, data_.test, data_.protocol, config_.search_score_threshold, stratify);
}

model::SearchModel model_from_checkpoint(const Checkpoint& c) {
  if (!c.meta.contains("config")) throw IntegrityError("checkpoint has no config snapshot");
  model::SearchModel m(config_from_json(c.meta.at("config")).model);
  restore_parameters(c.parameters, m.parameters());
  return m;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& output_dir, int completed_epochs) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%03d.ckpt", completed_epochs);
  return output_dir / "checkpoints" / name;
}

namespace {

void truncate_metrics(const std::filesystem::path& path, int from_epoch) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).value("epoch", 0) < from_epoch) keep.push_back(line);
    } catch (const nlohmann::json::parse_error&) {
      // A torn final line from an interrupted run.
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

RunResult drive(Trainer& trainer, const RunOptions& options) {
  const TrainConfig& cfg = trainer.config();
  const std::filesystem::path dir = cfg.output_dir;
  std::ofstream metrics;
  if (options.write_files) {
    std::filesystem::create_directories(dir);
    save_config(cfg, dir / "config.json");
    metrics.open(dir / "metrics.jsonl", std::ios::app);
  }
  RunResult result;
  const int last = options.stop_after_epoch >= 0 ? std::min(options.stop_after_epoch, cfg.total_epochs) : cfg.total_epochs;
  for (int e = trainer.completed_epochs(); e < last; ++e) {
    trainer.run_epoch(e, [&](const StepRecord& r) {
      result.steps.push_back(r);
      if (metrics.is_open()) metrics << to_json(r).dump() << '\n' << std::flush;
      if (options.on_step) options.on_step(r);
    });
    if (options.write_files) save_checkpoint(trainer.make_checkpoint(), checkpoint_path(dir, trainer.completed_epochs()));
  }
  result.completed_epochs = trainer.completed_epochs();
  if (options.final_eval && trainer.completed_epochs() == cfg.total_epochs) {
    result.final_eval = trainer.evaluate(options.stratify);
    if (options.write_files) {
      std::ofstream out(dir / "final_eval.json");
      out << to_json(*result.final_eval).dump(2) << '\n';
    }
  }
  return result;
}

}  // namespace

RunResult run_training(const TrainConfig& config, const RunOptions& options) {
  validate(config);
  Trainer trainer(config, load_dataset(config));
  if (options.write_files) {
    std::filesystem::create_directories(config.output_dir);
    std::ofstream(std::filesystem::path(config.output_dir) / "metrics.jsonl", std::ios::trunc);
  }
  return drive(trainer, options);
}

RunResult resume_training(const std::filesystem::path& checkpoint, const RunOptions& options) {
  const Checkpoint c = load_checkpoint(checkpoint);
  if (!c.meta.contains("config")) throw IntegrityError("checkpoint has no config snapshot");
  const TrainConfig config = config_from_json(c.meta.at("config"));
  Trainer trainer(config, load_dataset(config));
  trainer.restore(c);
  if (options.write_files) truncate_metrics(std::filesystem::path(config.output_dir) / "metrics.jsonl", trainer.completed_epochs());
  return drive(trainer, options);
}

}  // namespace g2aps::train
