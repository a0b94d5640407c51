#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "g2aps/data/annotations.hpp"

namespace g2aps::data {

struct SearchQuery {
  std::string image_id;
  BoundingBox box;
  int identity = kUnlabeled;

  bool operator==(const SearchQuery&) const = default;
};

struct ProtocolEntry {
  SearchQuery query;
  std::vector<std::string> gallery;  // UAV image ids, sorted

  bool operator==(const ProtocolEntry&) const = default;
};

/// Why an identity or entry is missing from a protocol.
struct SkipRecord {
  int identity = kUnlabeled;
  std::string reason;

  bool operator==(const SkipRecord&) const = default;
};

struct SearchProtocol {
  std::uint64_t seed = 0;
  int gallery_size = 50;
  int positives = 10;
  std::vector<ProtocolEntry> entries;  // ascending query identity
  std::vector<SkipRecord> skipped;
  std::string annotations;  // optional path of the test annotation file

  bool operator==(const SearchProtocol&) const = default;
};

/// One entry per identity that has a ground image and at least `positives`
/// UAV images (plus enough UAV distractors). The query image is drawn among
/// the identity's ground images; `positives` UAV images with the identity
/// and `gallery_size - positives` without it are drawn without replacement.
/// Ineligible identities land in `skipped`.
SearchProtocol build_search_protocol(const AnnotationSet& test, int gallery_size, int positives,
                                     std::uint64_t seed);

/// Sub-protocol restricted to gallery images of one UAV altitude bucket.
/// Entries left without any positive image are dropped and reported in
/// `skipped`. Throws std::invalid_argument for kNotApplicable.
SearchProtocol stratify_by_altitude(const SearchProtocol& protocol, const AnnotationSet& set,
                                    AltitudeBucket bucket);

/// Number of gallery images of an entry that hold a box of the query identity.
int count_positive_gallery_images(const ProtocolEntry& entry, const AnnotationSet& set);

std::string protocol_to_json(const SearchProtocol& protocol);
SearchProtocol protocol_from_json(const std::string& text);

void save_protocol(const SearchProtocol& protocol, const std::filesystem::path& path);
SearchProtocol load_protocol(const std::filesystem::path& path);

}  // namespace g2aps::data
