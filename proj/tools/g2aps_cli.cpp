// Command-line front end: dataset tooling, training, evaluation, ablations.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "g2aps/common/errors.hpp"
#include "g2aps/data/annotations.hpp"
#include "g2aps/data/protocol.hpp"
#include "g2aps/data/synth.hpp"
#include "g2aps/eval/report.hpp"
#include "g2aps/train/ablation.hpp"
#include "g2aps/train/checkpoint.hpp"
#include "g2aps/train/config.hpp"
#include "g2aps/train/evaluate.hpp"
#include "g2aps/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace g2aps;

namespace {

void check_device() {
  const char* dev = std::getenv("G2APS_DEVICE");
  if (dev != nullptr && std::string(dev) != "cpu") {
    throw ConfigError(std::string("G2APS_DEVICE=") + dev + " is not available; only cpu is supported");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void print_step(const train::StepRecord& r) {
  if (r.step % 20 != 0) return;
  std::cout << "epoch " << r.epoch << " step " << r.step << " lr " << r.lr << " total " << r.report.total
            << " det " << r.report.l_det << " oim_s " << r.report.l_oim_s << " oim_t " << r.report.l_oim_t
            << " prob " << r.report.l_prob << " rela " << r.report.l_rela << '\n';
}

void print_eval(const train::EvalResult& r) {
  std::cout << eval::format_table(eval::summary_table(r.detection, r.search));
  if (r.search.flagged > 0) {
    std::cout << r.search.flagged << " of " << r.search.queries
              << " queries had no true match among gallery detections (AP 0, CMC miss)\n";
  }
  if (r.stratified) std::cout << '\n' << eval::format_table(eval::stratified_table(*r.stratified));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ground-to-aerial person search: data tools, HKD training and evaluation"};
  app.require_subcommand(1);

  std::string stats_path;
  bool stats_json = false;
  auto* stats = app.add_subcommand("stats", "Summarize an annotation file");
  stats->add_option("path", stats_path, "Annotation file (.jsonl)")->required()->check(CLI::ExistingFile);
  stats->add_flag("--json", stats_json, "Emit JSON instead of a table");

  std::string proto_path, proto_out;
  std::uint64_t proto_seed = 0;
  int proto_gallery = 50, proto_positives = 10;
  auto* proto = app.add_subcommand("protocol-build", "Build the query/gallery search protocol of a test split");
  proto->add_option("path", proto_path, "Test annotation file")->required()->check(CLI::ExistingFile);
  proto->add_option("--seed", proto_seed, "Sampling seed")->required();
  proto->add_option("--gallery", proto_gallery, "Gallery images per query")->capture_default_str();
  proto->add_option("--positives", proto_positives, "Gallery images holding the query identity")->capture_default_str();
  proto->add_option("--out", proto_out, "Output file (default: stdout)");

  data::SynthConfig synth;
  std::string synth_out;
  std::vector<std::string> synth_altitudes;
  auto* synth_cmd = app.add_subcommand("synth-gen", "Generate a synthetic dual-view dataset");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--ids", synth.num_ids, "Number of identities")->capture_default_str();
  synth_cmd->add_option("--images-per-view", synth.images_per_view, "Images per camera and split")->capture_default_str();
  synth_cmd->add_option("--boxes-per-id", synth.boxes_per_id, "Exact labeled boxes per identity and split")->capture_default_str();
  synth_cmd->add_option("--image-size", synth.image_size, "Square image side in pixels")->capture_default_str();
  synth_cmd->add_option("--scale-ratio-uav", synth.scale_ratio_uav, "UAV person size relative to ground")->capture_default_str();
  synth_cmd->add_option("--altitudes", synth_altitudes, "UAV altitude buckets to cycle through (e.g. 20-30m,40-50m)")
      ->delimiter(',');
  synth_cmd->add_flag("--disjoint-test-ids", synth.disjoint_test_identities, "Use separate identities in the test split");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  std::string train_config, train_resume, train_output, train_distance, train_preset;
  std::optional<std::uint64_t> train_seed;
  bool no_detach = false, no_prob = false, no_rela = false;
  std::optional<int> train_epochs;
  auto* train_cmd = app.add_subcommand("train", "Train a search model");
  train_cmd->add_option("--config", train_config, "Config file (JSON)")->check(CLI::ExistingFile);
  train_cmd->add_option("--preset", train_preset, "Start from a named preset: g2aps, prw, cuhk-sysu, synthetic");
  train_cmd->add_option("--seed", train_seed, "Override the seed");
  train_cmd->add_flag("--no-detach", no_detach, "Let the teacher loss reach the shared network");
  train_cmd->add_flag("--no-prob-kd", no_prob, "Disable probability distillation");
  train_cmd->add_flag("--no-rela-kd", no_rela, "Disable relation distillation");
  train_cmd->add_option("--relation-distance", train_distance, "kl, mse or mi")->check(CLI::IsMember({"kl", "mse", "mi"}));
  train_cmd->add_option("--epochs", train_epochs, "Override total epochs");
  train_cmd->add_option("--output", train_output, "Override the output directory");
  train_cmd->add_option("--resume", train_resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  std::string eval_ckpt, eval_protocol, eval_annotations, eval_json;
  bool eval_stratify = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a search protocol");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--protocol", eval_protocol, "Protocol file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--annotations", eval_annotations, "Test annotation file (default: from protocol or config)");
  eval_cmd->add_flag("--stratify", eval_stratify, "Report per altitude bucket");
  eval_cmd->add_option("--json", eval_json, "Also write the report as JSON");

  std::string abl_config, abl_grid = "hkd", abl_preset;
  auto* abl = app.add_subcommand("ablate", "Run an ablation grid (hkd: prob x rela, detach: on/off, none)");
  abl->add_option("--config", abl_config, "Base config file")->check(CLI::ExistingFile);
  abl->add_option("--preset", abl_preset, "Base preset when no config is given");
  abl->add_option("--grid", abl_grid, "Grid name")->capture_default_str()->check(CLI::IsMember({"hkd", "detach", "none"}));

  std::string cfg_preset = "g2aps", cfg_out;
  auto* cfg_cmd = app.add_subcommand("config", "Print a preset config");
  cfg_cmd->add_option("--preset", cfg_preset, "Preset name")->capture_default_str();
  cfg_cmd->add_option("--out", cfg_out, "Output file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    check_device();
    if (stats->parsed()) {
      const auto set = data::load_annotations(stats_path);
      const auto s = data::dataset_stats(set);
      if (stats_json) {
        nlohmann::json j{{"images", s.images},
                         {"ground_images", s.ground_images},
                         {"uav_images", s.uav_images},
                         {"labeled_boxes", s.labeled_boxes},
                         {"unlabeled_boxes", s.unlabeled_boxes},
                         {"total_boxes", s.total_boxes},
                         {"identities", s.identities},
                         {"mean_boxes_per_identity", s.mean_boxes_per_identity},
                         {"ground_width_histogram", s.ground_widths.counts},
                         {"uav_width_histogram", s.uav_widths.counts}};
        std::cout << j.dump(2) << '\n';
      } else {
        std::cout << data::format_stats(s);
      }
    } else if (proto->parsed()) {
      const auto set = data::load_annotations(proto_path);
      auto p = data::build_search_protocol(set, proto_gallery, proto_positives, proto_seed);
      p.annotations = fs::absolute(proto_path).lexically_normal().string();
      if (proto_out.empty()) {
        std::cout << data::protocol_to_json(p);
      } else {
        data::save_protocol(p, proto_out);
      }
      std::cerr << p.entries.size() << " entries, " << p.skipped.size() << " identities skipped\n";
      for (const auto& s : p.skipped) std::cerr << "  skipped identity " << s.identity << ": " << s.reason << '\n';
    } else if (synth_cmd->parsed()) {
      if (!synth_altitudes.empty()) {
        synth.uav_altitudes.clear();
        for (const auto& a : synth_altitudes) synth.uav_altitudes.push_back(data::parse_altitude(a));
      }
      const auto ds = data::synth_generate(synth);
      data::write_synth_dataset(ds, synth_out);
      std::cout << "wrote " << ds.train.records().size() << " train and " << ds.test.records().size()
                << " test images to " << synth_out << '\n';
    } else if (train_cmd->parsed()) {
      train::RunOptions opt;
      opt.on_step = print_step;
      train::RunResult r;
      if (!train_resume.empty()) {
        r = train::resume_training(train_resume, opt);
      } else {
        train::TrainConfig c;
        if (!train_config.empty()) c = train::load_config(train_config);
        else c = train::preset(train_preset.empty() ? "synthetic" : train_preset);
        if (train_seed) c.seed = *train_seed;
        if (no_detach) c.detach_teacher = false;
        if (no_prob) c.enable_prob_kd = false;
        if (no_rela) c.enable_rela_kd = false;
        if (!train_distance.empty()) c.relation_distance = loss::parse_relation_distance(train_distance);
        if (train_epochs) {
          c.total_epochs = *train_epochs;
          c.lr_decay_epoch = std::min(c.lr_decay_epoch, c.total_epochs);
        }
        if (!train_output.empty()) c.output_dir = train_output;
        r = train::run_training(c, opt);
      }
      std::cout << "completed " << r.completed_epochs << " epochs\n";
      if (r.final_eval) print_eval(*r.final_eval);
    } else if (eval_cmd->parsed()) {
      const auto ckpt = train::load_checkpoint(eval_ckpt);
      const auto model = train::model_from_checkpoint(ckpt);
      const auto config = train::config_from_json(ckpt.meta.at("config"));
      const auto protocol = data::load_protocol(eval_protocol);
      data::AnnotationSet test;
      if (!eval_annotations.empty()) test = data::load_annotations(eval_annotations);
      else if (!protocol.annotations.empty()) test = data::load_annotations(protocol.annotations);
      else if (config.data.synthetic) test = data::synth_generate(config.data.synth).test;
      else test = data::load_annotations(config.data.test_annotations);
      const auto r = train::evaluate_model(model, test, protocol, config.search_score_threshold, eval_stratify);
      print_eval(r);
      if (!eval_json.empty()) write_text(eval_json, train::to_json(r).dump(2) + "\n");
    } else if (abl->parsed()) {
      train::TrainConfig base = !abl_config.empty() ? train::load_config(abl_config)
                                                    : train::preset(abl_preset.empty() ? "synthetic" : abl_preset);
      const auto cells = train::make_grid(abl_grid, base);
      const auto rows = train::run_ablation(cells, train::train_and_evaluate);
      if (abl_grid == "detach") std::cout << eval::format_table(train::detach_table(rows));
      else std::cout << eval::format_table(train::hkd_table(rows));
    } else if (cfg_cmd->parsed()) {
      const std::string text = train::config_to_json(train::preset(cfg_preset)).dump(2) + "\n";
      if (cfg_out.empty()) std::cout << text;
      else write_text(cfg_out, text);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
