#pragma once

#include <functional>
#include <string>
#include <vector>

#include "g2aps/eval/report.hpp"
#include "g2aps/train/config.hpp"
#include "g2aps/train/evaluate.hpp"

namespace g2aps::train {

struct AblationCell {
  std::string label;
  TrainConfig config;
};

/// Probability KD x relation KD, four cells from the same base config.
std::vector<AblationCell> hkd_grid(const TrainConfig& base);
/// Teacher input detached vs. attached, two cells.
std::vector<AblationCell> detach_grid(const TrainConfig& base);
/// "hkd", "detach" or "none" (empty grid). Throws std::invalid_argument.
std::vector<AblationCell> make_grid(const std::string& name, const TrainConfig& base);

struct AblationRow {
  AblationCell cell;
  EvalResult result;
};

using CellRunner = std::function<EvalResult(const TrainConfig&)>;

/// Runs every cell (each into its own output subdirectory) with the shared
/// seed of the base config.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells, const CellRunner& runner);

/// Train + evaluate one cell end to end.
EvalResult train_and_evaluate(const TrainConfig& config);

/// Rows "L_prob L_rela | mAP top-1".
eval::Table hkd_table(const std::vector<AblationRow>& rows);
/// Rows "detach | Recall AP mAP top-1".
eval::Table detach_table(const std::vector<AblationRow>& rows);

}  // namespace g2aps::train
