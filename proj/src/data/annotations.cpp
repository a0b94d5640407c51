#include "g2aps/data/annotations.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "g2aps/common/errors.hpp"

namespace g2aps::data {

using nlohmann::json;

std::string_view to_string(Camera c) { return c == Camera::kGround ? "ground" : "uav"; }

std::string_view to_string(AltitudeBucket b) {
  switch (b) {
    case AltitudeBucket::k20to30: return "20-30m";
    case AltitudeBucket::k30to40: return "30-40m";
    case AltitudeBucket::k40to50: return "40-50m";
    case AltitudeBucket::k50to60: return "50-60m";
    case AltitudeBucket::kNotApplicable: return "not-applicable";
  }
  return "not-applicable";
}

std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Camera parse_camera(std::string_view s) {
  if (s == "ground") return Camera::kGround;
  if (s == "uav") return Camera::kUav;
  throw std::invalid_argument("unknown camera '" + std::string(s) + "'");
}

AltitudeBucket parse_altitude(std::string_view s) {
  for (auto b : {AltitudeBucket::k20to30, AltitudeBucket::k30to40, AltitudeBucket::k40to50,
                 AltitudeBucket::k50to60, AltitudeBucket::kNotApplicable}) {
    if (s == to_string(b)) return b;
  }
  throw std::invalid_argument("unknown altitude bucket '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

namespace {

std::string where(const ImageRecord& r) { return "record '" + r.image_id + "'"; }

void validate_record(const ImageRecord& r) {
  if (r.image_id.empty()) throw SchemaError("record with empty image_id");
  if (r.camera == Camera::kGround && r.altitude != AltitudeBucket::kNotApplicable) {
    throw SchemaError(where(r) + ": field 'altitude_bucket' must be not-applicable for ground camera");
  }
  if (r.width < 0 || r.height < 0) throw SchemaError(where(r) + ": field 'width'/'height' negative");
  for (std::size_t i = 0; i < r.boxes.size(); ++i) {
    const auto& b = r.boxes[i];
    const std::string f = where(r) + ": field 'boxes[" + std::to_string(i) + "]";
    if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) || !std::isfinite(b.h)) {
      throw SchemaError(f + "' has non-finite coordinates");
    }
    if (b.w <= 0) throw SchemaError(f + ".w' must be > 0");
    if (b.h <= 0) throw SchemaError(f + ".h' must be > 0");
    if (b.x < 0) throw SchemaError(f + ".x' must be >= 0");
    if (b.y < 0) throw SchemaError(f + ".y' must be >= 0");
    if (b.identity < kUnlabeled) throw SchemaError(f + ".id' must be >= -1");
    if (r.width > 0 && b.x2() > r.width) throw SchemaError(f + "' exceeds image width");
    if (r.height > 0 && b.y2() > r.height) throw SchemaError(f + "' exceeds image height");
  }
}

template <typename T>
T required(const json& j, const char* key, std::size_t line_no) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw SchemaError("line " + std::to_string(line_no) + ": missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw SchemaError("line " + std::to_string(line_no) + ": field '" + key + "' has wrong type");
  }
}

}  // namespace

AnnotationSet::AnnotationSet(std::vector<ImageRecord> records, Split split)
    : records_(std::move(records)), split_(split) {
  std::unordered_set<std::string> seen;
  for (const auto& r : records_) {
    validate_record(r);
    if (!seen.insert(r.image_id).second) {
      throw IntegrityError("duplicate image_id '" + r.image_id + "'");
    }
    for (const auto& b : r.boxes) {
      if (b.labeled()) {
        ++labeled_;
        identities_.insert(b.identity);
      } else {
        ++unlabeled_;
      }
    }
  }
}

std::optional<std::size_t> AnnotationSet::find(std::string_view image_id) const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].image_id == image_id) return i;
  }
  return std::nullopt;
}

Image AnnotationSet::load_pixels(const ImageRecord& r) const {
  if (r.pixels) return *r.pixels;
  return read_image(image_path(r));
}

std::string record_to_line(const ImageRecord& r, Split split) {
  json boxes = json::array();
  for (const auto& b : r.boxes) {
    json jb = {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"id", b.identity}};
    if (b.confidence) jb["confidence"] = *b.confidence;
    boxes.push_back(std::move(jb));
  }
  json j = {{"version", kAnnotationVersion},
            {"image_id", r.image_id},
            {"file", r.file},
            {"camera", to_string(r.camera)},
            {"altitude_bucket", to_string(r.altitude)},
            {"split", to_string(split)},
            {"boxes", std::move(boxes)}};
  if (r.width > 0) j["width"] = r.width;
  if (r.height > 0) j["height"] = r.height;
  return j.dump();
}

ImageRecord record_from_line(std::string_view line, std::size_t line_no, Split* split_out) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SchemaError("line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw SchemaError("line " + std::to_string(line_no) + ": record is not an object");
  const int version = required<int>(j, "version", line_no);
  if (version != kAnnotationVersion) {
    throw SchemaError("line " + std::to_string(line_no) + ": unsupported version " + std::to_string(version));
  }
  ImageRecord r;
  r.image_id = required<std::string>(j, "image_id", line_no);
  const std::string rec = "record '" + r.image_id + "'";
  r.file = required<std::string>(j, "file", line_no);
  try {
    r.camera = parse_camera(required<std::string>(j, "camera", line_no));
  } catch (const std::invalid_argument& e) {
    throw SchemaError(rec + ": field 'camera': " + e.what());
  }
  try {
    r.altitude = parse_altitude(required<std::string>(j, "altitude_bucket", line_no));
  } catch (const std::invalid_argument& e) {
    throw SchemaError(rec + ": field 'altitude_bucket': " + e.what());
  }
  if (split_out) {
    try {
      *split_out = parse_split(j.value("split", std::string("train")));
    } catch (const std::invalid_argument& e) {
      throw SchemaError(rec + ": field 'split': " + e.what());
    }
  }
  r.width = j.value("width", 0);
  r.height = j.value("height", 0);
  const auto boxes_it = j.find("boxes");
  if (boxes_it == j.end() || !boxes_it->is_array()) {
    throw SchemaError(rec + ": field 'boxes' missing or not an array");
  }
  for (std::size_t i = 0; i < boxes_it->size(); ++i) {
    const json& jb = (*boxes_it)[i];
    const std::string f = rec + ": field 'boxes[" + std::to_string(i) + "]";
    BoundingBox b;
    try {
      b.x = jb.at("x").get<double>();
      b.y = jb.at("y").get<double>();
      b.w = jb.at("w").get<double>();
      b.h = jb.at("h").get<double>();
      b.identity = jb.at("id").get<int>();
      if (jb.contains("confidence")) b.confidence = jb.at("confidence").get<double>();
    } catch (const json::exception&) {
      throw SchemaError(f + "' must have numeric x, y, w, h, id");
    }
    r.boxes.push_back(b);
  }
  return r;
}

AnnotationSet load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open annotation file: " + path.string());
  std::vector<ImageRecord> records;
  std::optional<Split> split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Split s = Split::kTrain;
    records.push_back(record_from_line(line, line_no, &s));
    if (split && *split != s) {
      throw SchemaError("record '" + records.back().image_id + "': field 'split' differs from earlier records");
    }
    split = s;
  }
  AnnotationSet set(std::move(records), split.value_or(Split::kTrain));
  set.set_root(path.parent_path());
  return set;
}

void save_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write annotation file: " + path.string());
  for (const auto& r : set.records()) out << record_to_line(r, set.split()) << '\n';
}

DatasetStats dataset_stats(const AnnotationSet& set, double bin_width, std::size_t bins) {
  DatasetStats s;
  s.ground_widths = {bin_width, std::vector<std::size_t>(bins, 0)};
  s.uav_widths = {bin_width, std::vector<std::size_t>(bins, 0)};
  s.images = set.records().size();
  for (const auto& r : set.records()) {
    (r.camera == Camera::kGround ? s.ground_images : s.uav_images)++;
    auto& hist = r.camera == Camera::kGround ? s.ground_widths : s.uav_widths;
    for (const auto& b : r.boxes) {
      auto bin = static_cast<std::size_t>(b.w / bin_width);
      if (bins > 0) hist.counts[std::min(bin, bins - 1)]++;
    }
  }
  s.labeled_boxes = set.labeled_box_count();
  s.unlabeled_boxes = set.unlabeled_box_count();
  s.total_boxes = set.total_box_count();
  s.identities = set.identity_universe().size();
  if (s.identities > 0) {
    s.mean_boxes_per_identity = static_cast<double>(s.labeled_boxes) / static_cast<double>(s.identities);
  }
  return s;
}

std::string format_stats(const DatasetStats& s) {
  std::ostringstream os;
  os << "images            " << s.images << " (ground " << s.ground_images << ", uav " << s.uav_images << ")\n"
     << "identities        " << s.identities << '\n'
     << "labeled boxes     " << s.labeled_boxes << '\n'
     << "unlabeled boxes   " << s.unlabeled_boxes << '\n'
     << "total boxes       " << s.total_boxes << '\n'
     << "boxes / identity  " << std::fixed << std::setprecision(2) << s.mean_boxes_per_identity << '\n'
     << "box width histogram (px)      ground        uav\n";
  const std::size_t bins = s.ground_widths.counts.size();
  for (std::size_t i = 0; i < bins; ++i) {
    std::ostringstream label;
    const auto lo = static_cast<int>(i * s.ground_widths.bin_width);
    if (i + 1 == bins) {
      label << ">=" << lo;
    } else {
      label << lo << "-" << static_cast<int>((i + 1) * s.ground_widths.bin_width);
    }
    os << "  " << std::left << std::setw(26) << label.str() << std::right << std::setw(8)
       << s.ground_widths.counts[i] << std::setw(11) << s.uav_widths.counts[i] << '\n';
  }
  return os.str();
}

}  // namespace g2aps::data
