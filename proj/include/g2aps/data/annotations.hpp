#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "g2aps/data/image.hpp"

namespace g2aps::data {

inline constexpr int kUnlabeled = -1;
inline constexpr int kAnnotationVersion = 1;

/// Person box in pixels, top-left corner plus size. identity == -1 marks a
/// person seen by only one camera.
struct BoundingBox {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;
  int identity = kUnlabeled;
  std::optional<double> confidence;  // detections only

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  bool labeled() const { return identity >= 0; }

  bool operator==(const BoundingBox&) const = default;
};

enum class Camera { kGround, kUav };

enum class AltitudeBucket { k20to30, k30to40, k40to50, k50to60, kNotApplicable };

inline constexpr std::array<AltitudeBucket, 4> kUavBuckets = {
    AltitudeBucket::k20to30, AltitudeBucket::k30to40, AltitudeBucket::k40to50,
    AltitudeBucket::k50to60};

enum class Split { kTrain, kTest };

std::string_view to_string(Camera c);
std::string_view to_string(AltitudeBucket b);
std::string_view to_string(Split s);

// Throw std::invalid_argument on unknown names.
Camera parse_camera(std::string_view s);
AltitudeBucket parse_altitude(std::string_view s);
Split parse_split(std::string_view s);

struct ImageRecord {
  std::string image_id;
  std::string file;  // relative to the annotation file's directory
  Camera camera = Camera::kGround;
  AltitudeBucket altitude = AltitudeBucket::kNotApplicable;
  int width = 0;   // 0 when unknown; extent checks are skipped then
  int height = 0;
  std::vector<BoundingBox> boxes;
  std::shared_ptr<const Image> pixels;  // optional in-memory pixel data

  bool operator==(const ImageRecord& o) const {
    return image_id == o.image_id && file == o.file && camera == o.camera &&
           altitude == o.altitude && width == o.width && height == o.height && boxes == o.boxes;
  }
};

/// Validated collection of image records for one split.
class AnnotationSet {
 public:
  AnnotationSet() = default;

  /// Validates every record and derives the identity universe. Throws
  /// SchemaError on invariant violations and IntegrityError on duplicate ids.
  AnnotationSet(std::vector<ImageRecord> records, Split split);

  const std::vector<ImageRecord>& records() const { return records_; }
  Split split() const { return split_; }
  const std::set<int>& identity_universe() const { return identities_; }

  std::size_t labeled_box_count() const { return labeled_; }
  std::size_t unlabeled_box_count() const { return unlabeled_; }
  std::size_t total_box_count() const { return labeled_ + unlabeled_; }

  /// Index of image_id in records(), or nullopt.
  std::optional<std::size_t> find(std::string_view image_id) const;

  /// Resolved location of the record's pixel file.
  std::filesystem::path image_path(const ImageRecord& r) const { return root_ / r.file; }
  const std::filesystem::path& root() const { return root_; }
  void set_root(std::filesystem::path root) { root_ = std::move(root); }

  /// Pixels from memory when attached, otherwise read from disk.
  Image load_pixels(const ImageRecord& r) const;

  bool operator==(const AnnotationSet& o) const {
    return split_ == o.split_ && records_ == o.records_;
  }

 private:
  std::vector<ImageRecord> records_;
  Split split_ = Split::kTrain;
  std::set<int> identities_;
  std::size_t labeled_ = 0;
  std::size_t unlabeled_ = 0;
  std::filesystem::path root_;
};

/// Reads the line-delimited annotation file. Every line is one JSON record:
///   {"version":1,"image_id":..,"file":..,"camera":"ground|uav",
///    "altitude_bucket":"20-30m|..|not-applicable",["width":W,"height":H,]
///    ["split":"train|test",] "boxes":[{"x":..,"y":..,"w":..,"h":..,"id":..}]}
/// Blank lines are ignored. Split defaults to train when absent.
AnnotationSet load_annotations(const std::filesystem::path& path);

void save_annotations(const AnnotationSet& set, const std::filesystem::path& path);

/// Record <-> single JSON line, exposed for tooling and tests.
std::string record_to_line(const ImageRecord& r, Split split);
ImageRecord record_from_line(std::string_view line, std::size_t line_no, Split* split_out = nullptr);

struct WidthHistogram {
  double bin_width = 5.0;
  std::vector<std::size_t> counts;  // last bin collects everything wider
};

struct DatasetStats {
  std::size_t images = 0;
  std::size_t ground_images = 0;
  std::size_t uav_images = 0;
  std::size_t labeled_boxes = 0;
  std::size_t unlabeled_boxes = 0;
  std::size_t total_boxes = 0;
  std::size_t identities = 0;
  double mean_boxes_per_identity = 0.0;  // labeled boxes / identities
  WidthHistogram ground_widths;
  WidthHistogram uav_widths;
};

DatasetStats dataset_stats(const AnnotationSet& set, double bin_width = 5.0, std::size_t bins = 20);

std::string format_stats(const DatasetStats& stats);

}  // namespace g2aps::data
