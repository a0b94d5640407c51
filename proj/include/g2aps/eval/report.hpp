#pragma once

#include <string>
#include <vector>

#include "g2aps/eval/metrics.hpp"
#include "json.hpp"

namespace g2aps::eval {

/// Plain-text table with a title line and aligned columns.
struct Table {
  std::string title;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string format_table(const Table& table);

/// Percentage with two decimals, "-" for nullopt.
std::string percent(std::optional<double> v);

nlohmann::json to_json(const DetectionMetrics& m);
nlohmann::json to_json(const SearchMetrics& m, bool per_query = false);
nlohmann::json to_json(const StratifiedReport& r);

/// Single-row summary: Recall, AP, mAP, top-1/5/10.
Table summary_table(const DetectionMetrics& det, const SearchMetrics& search);

/// One row per altitude bucket plus the full test set (mAP, top-1).
Table stratified_table(const StratifiedReport& r);

}  // namespace g2aps::eval
