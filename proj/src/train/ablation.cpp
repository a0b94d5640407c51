#include "g2aps/train/ablation.hpp"

#include <stdexcept>

#include "g2aps/train/trainer.hpp"

namespace g2aps::train {

namespace {

std::string mark(bool on) { return on ? "yes" : "no"; }

}  // namespace

std::vector<AblationCell> hkd_grid(const TrainConfig& base) {
  std::vector<AblationCell> cells;
  for (bool prob : {false, true}) {
    for (bool rela : {false, true}) {
      TrainConfig c = base;
      c.enable_prob_kd = prob;
      c.enable_rela_kd = rela;
      const std::string label = std::string("prob_") + (prob ? "on" : "off") + "_rela_" + (rela ? "on" : "off");
      c.output_dir = base.output_dir + "/" + label;
      cells.push_back({label, c});
    }
  }
  return cells;
}

std::vector<AblationCell> detach_grid(const TrainConfig& base) {
  std::vector<AblationCell> cells;
  for (bool detach : {false, true}) {
    TrainConfig c = base;
    c.detach_teacher = detach;
    const std::string label = detach ? "detach_on" : "detach_off";
    c.output_dir = base.output_dir + "/" + label;
    cells.push_back({label, c});
  }
  return cells;
}

std::vector<AblationCell> make_grid(const std::string& name, const TrainConfig& base) {
  if (name == "hkd") return hkd_grid(base);
  if (name == "detach") return detach_grid(base);
  if (name == "none") return {};
  throw std::invalid_argument("unknown ablation grid: " + name);
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells, const CellRunner& runner) {
  std::vector<AblationRow> rows;
  for (const auto& c : cells) rows.push_back({c, runner(c.config)});
  return rows;
}

EvalResult train_and_evaluate(const TrainConfig& config) {
  RunOptions opt;
  opt.stratify = false;
  RunResult r = run_training(config, opt);
  return *r.final_eval;
}

eval::Table hkd_table(const std::vector<AblationRow>& rows) {
  eval::Table t{"HKD components (AP: all-point interpolation)", {"L_prob", "L_rela", "mAP", "top-1"}, {}};
  for (const auto& r : rows) {
    t.rows.push_back({mark(r.cell.config.enable_prob_kd), mark(r.cell.config.enable_rela_kd),
                      eval::percent(r.result.search.map), eval::percent(r.result.search.top1)});
  }
  return t;
}

eval::Table detach_table(const std::vector<AblationRow>& rows) {
  eval::Table t{"Teacher gradient detach", {"detach", "Recall", "AP", "mAP", "top-1"}, {}};
  for (const auto& r : rows) {
    t.rows.push_back({mark(r.cell.config.detach_teacher), eval::percent(r.result.detection.recall),
                      eval::percent(r.result.detection.ap), eval::percent(r.result.search.map),
                      eval::percent(r.result.search.top1)});
  }
  return t;
}

}  // namespace g2aps::train
