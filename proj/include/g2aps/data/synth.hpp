#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "g2aps/data/annotations.hpp"

namespace g2aps::data {

/// Knobs of the synthetic dual-view generator. Persons are rendered as
/// identity-coded figures (head, torso color and pattern, leg color); the
/// same identity looks the same from both cameras, only smaller from the UAV.
struct SynthConfig {
  std::uint64_t seed = 1;
  int num_ids = 8;
  int images_per_view = 60;  // per split and per camera
  int boxes_per_id = 0;      // > 0 overrides images_per_view: exactly this many labeled boxes per id and split
  int image_size = 128;      // square images
  double scale_ratio_uav = 0.5;
  int ground_width_min = 20;
  int ground_width_max = 28;
  double aspect = 2.4;  // height / width
  int persons_per_image = 2;       // labeled persons per image
  double unlabeled_probability = 0.3;  // chance of one extra unlabeled person per image
  std::vector<AltitudeBucket> uav_altitudes = {AltitudeBucket::k20to30};
  bool disjoint_test_identities = false;
  double noise = 6.0;  // per-pixel noise amplitude
};

struct SynthDataset {
  AnnotationSet train;
  AnnotationSet test;
};

/// Deterministic under `config.seed`. Throws ConfigError for num_ids < 2 or
/// when persons cannot be placed without overlap.
SynthDataset synth_generate(const SynthConfig& config);

/// Writes `<dir>/train.jsonl`, `<dir>/test.jsonl` and PNG files next to them.
void write_synth_dataset(const SynthDataset& dataset, const std::filesystem::path& dir);

}  // namespace g2aps::data
