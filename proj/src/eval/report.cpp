#include "g2aps/eval/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace g2aps::eval {

std::string format_table(const Table& t) {
  std::vector<std::size_t> width(t.header.size(), 0);
  for (std::size_t c = 0; c < t.header.size(); ++c) width[c] = t.header[c].size();
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      os << (c == 0 ? "" : " | ") << cell << std::string(width[c] - cell.size(), ' ');
    }
    os << '\n';
  };
  if (!t.title.empty()) os << t.title << '\n';
  line(t.header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  os << std::string(total + 3 * (width.empty() ? 0 : width.size() - 1), '-') << '\n';
  for (const auto& r : t.rows) line(r);
  return os.str();
}

std::string percent(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

nlohmann::json to_json(const DetectionMetrics& m) {
  nlohmann::json j;
  j["recall"] = m.recall ? nlohmann::json(*m.recall) : nlohmann::json(nullptr);
  j["ap"] = m.ap ? nlohmann::json(*m.ap) : nlohmann::json(nullptr);
  j["ground_truth"] = m.ground_truth;
  j["detections"] = m.detections;
  j["ap_interpolation"] = "all-point";
  return j;
}

nlohmann::json to_json(const SearchMetrics& m, bool per_query) {
  nlohmann::json j{{"map", m.map},         {"top1", m.top1},       {"top5", m.top5},
                   {"top10", m.top10},     {"queries", m.queries}, {"flagged_queries", m.flagged},
                   {"ap_interpolation", "all-point"},
                   {"zero_match_queries", "counted as misses with AP 0"}};
  if (per_query) {
    auto& arr = j["per_query"] = nlohmann::json::array();
    for (const auto& q : m.per_query) {
      arr.push_back({{"identity", q.identity},
                     {"ap", q.ap},
                     {"first_match_rank", q.first_match_rank},
                     {"positives", q.positives},
                     {"flagged", q.flagged}});
    }
  }
  return j;
}

nlohmann::json to_json(const StratifiedReport& r) {
  nlohmann::json j;
  j["full"] = to_json(r.full);
  auto& arr = j["buckets"] = nlohmann::json::array();
  for (const auto& b : r.buckets) {
    nlohmann::json row{{"bucket", std::string(data::to_string(b.bucket))}, {"entries", b.entries}};
    if (b.metrics) row["metrics"] = to_json(*b.metrics);
    else row["absent"] = true;
    arr.push_back(row);
  }
  return j;
}

Table summary_table(const DetectionMetrics& det, const SearchMetrics& s) {
  Table t{"Detection and search (AP: all-point interpolation)",
          {"Recall", "AP", "mAP", "top-1", "top-5", "top-10"},
          {{percent(det.recall), percent(det.ap), percent(s.map), percent(s.top1), percent(s.top5), percent(s.top10)}}};
  return t;
}

Table stratified_table(const StratifiedReport& r) {
  Table t{"Search by flight altitude", {"Height", "mAP", "top-1"}, {}};
  for (const auto& b : r.buckets) {
    if (b.metrics) {
      t.rows.push_back({std::string(data::to_string(b.bucket)), percent(b.metrics->map), percent(b.metrics->top1)});
    } else {
      t.rows.push_back({std::string(data::to_string(b.bucket)), "absent", "absent"});
    }
  }
  t.rows.push_back({"full test dataset", percent(r.full.map), percent(r.full.top1)});
  return t;
}

}  // namespace g2aps::eval
