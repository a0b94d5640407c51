#include "g2aps/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "g2aps/common/errors.hpp"
#include "g2aps/common/rng.hpp"

namespace g2aps::data {

namespace {

using Rgb = std::array<int, 3>;

constexpr std::array<Rgb, 8> kIdentityPalette = {{{220, 40, 40},
                                                  {40, 180, 60},
                                                  {40, 70, 220},
                                                  {230, 210, 40},
                                                  {40, 200, 210},
                                                  {200, 50, 200},
                                                  {235, 235, 235},
                                                  {240, 140, 30}}};

// Unlabeled persons never share colors with labeled identities.
constexpr std::array<Rgb, 4> kDistractorPalette = {{{100, 40, 130}, {110, 120, 30}, {20, 110, 100}, {110, 20, 30}}};

constexpr Rgb kSkin = {225, 185, 150};

struct Appearance {
  Rgb top;
  Rgb bottom;
  int pattern = 0;  // 0 solid, 1 horizontal stripes, 2 vertical band
};

std::vector<Appearance> identity_appearances(int count, Rng& rng) {
  std::vector<std::pair<int, int>> combos;
  for (int t = 0; t < static_cast<int>(kIdentityPalette.size()); ++t) {
    for (int b = 0; b < static_cast<int>(kIdentityPalette.size()); ++b) {
      if (t != b) combos.emplace_back(t, b);
    }
  }
  rng.shuffle(std::span(combos));
  std::vector<Appearance> out;
  for (int i = 0; i < count; ++i) {
    const auto [t, b] = combos[static_cast<std::size_t>(i) % combos.size()];
    // Past the palette's pair count the pattern keeps identities apart.
    const int pattern = (i / static_cast<int>(combos.size()) + i) % 3;
    out.push_back({kIdentityPalette[t], kIdentityPalette[b], pattern});
  }
  return out;
}

std::uint8_t clamp8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

void fill_background(Image& img, Camera camera, double noise, Rng& rng) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      auto* p = img.pixel(x, y);
      const double n = noise * (2.0 * rng.uniform() - 1.0);
      if (camera == Camera::kGround) {
        const double g = 150.0 - 40.0 * y / img.height;
        p[0] = clamp8(g + n);
        p[1] = clamp8(g + n);
        p[2] = clamp8(g + 5 + n);
      } else {
        p[0] = clamp8(95 + n);
        p[1] = clamp8(110 + n);
        p[2] = clamp8(85 + n);
      }
    }
  }
  // Dull square clutter so detection is not a pure color threshold.
  for (int k = 0; k < 2; ++k) {
    const int s = 6 + static_cast<int>(rng.uniform_int(8));
    const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img.width - s)));
    const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img.height - s)));
    const double shade = 60 + rng.uniform_int(60);
    for (int y = y0; y < y0 + s; ++y) {
      for (int x = x0; x < x0 + s; ++x) {
        auto* p = img.pixel(x, y);
        p[0] = p[1] = p[2] = clamp8(shade);
      }
    }
  }
}

void render_person(Image& img, const BoundingBox& b, const Appearance& a) {
  const int x0 = static_cast<int>(b.x);
  const int y0 = static_cast<int>(b.y);
  const int w = static_cast<int>(b.w);
  const int h = static_cast<int>(b.h);
  const int head_end = y0 + std::max(1, static_cast<int>(std::lround(0.18 * h)));
  const int torso_end = y0 + static_cast<int>(std::lround(0.55 * h));
  const int stripe = std::max(1, h / 12);
  for (int y = y0; y < y0 + h; ++y) {
    for (int x = x0; x < x0 + w; ++x) {
      const double u = (x - x0 + 0.5) / w;
      Rgb c;
      if (y < head_end) {
        if (u < 0.3 || u > 0.7) continue;
        c = kSkin;
      } else if (y < torso_end) {
        c = a.top;
        bool dark = false;
        if (a.pattern == 1) dark = ((y - head_end) / stripe) % 2 == 1;
        if (a.pattern == 2) dark = u > 0.35 && u < 0.65;
        if (dark) c = {c[0] / 2, c[1] / 2, c[2] / 2};
      } else {
        if (u > 0.45 && u < 0.55) continue;  // gap between the legs
        c = a.bottom;
      }
      auto* p = img.pixel(x, y);
      p[0] = static_cast<std::uint8_t>(c[0]);
      p[1] = static_cast<std::uint8_t>(c[1]);
      p[2] = static_cast<std::uint8_t>(c[2]);
    }
  }
}

void add_noise(Image& img, double noise, Rng& rng) {
  for (auto& v : img.rgb) v = clamp8(v + noise * (2.0 * rng.uniform() - 1.0));
}

bool overlaps(const BoundingBox& a, const BoundingBox& b, double margin) {
  return a.x < b.x2() + margin && b.x < a.x2() + margin && a.y < b.y2() + margin && b.y < a.y2() + margin;
}

// Draws identities in whole shuffled rounds so counts differ by at most one.
class IdentityDealer {
 public:
  IdentityDealer(std::vector<int> ids, Rng& rng) : ids_(std::move(ids)), rng_(rng) {}

  int next(const std::vector<int>& exclude) {
    auto allowed = [&](int id) { return std::find(exclude.begin(), exclude.end(), id) == exclude.end(); };
    for (int round = 0; round < 2; ++round) {
      if (pos_ == deck_.size()) {
        deck_ = ids_;
        rng_.shuffle(std::span(deck_));
        pos_ = 0;
      }
      for (std::size_t j = pos_; j < deck_.size(); ++j) {
        if (allowed(deck_[j])) {
          std::swap(deck_[pos_], deck_[j]);
          return deck_[pos_++];
        }
      }
      pos_ = deck_.size();  // only excluded cards left; start a new round
    }
    throw ConfigError("cannot draw distinct identities for one image");
  }

 private:
  std::vector<int> ids_;
  Rng& rng_;
  std::vector<int> deck_;
  std::size_t pos_ = 0;
};

struct ViewPlan {
  Camera camera;
  int images;
  int labeled_slots;
};

std::vector<ImageRecord> render_view(const SynthConfig& cfg, Split split, const ViewPlan& plan,
                                     const std::vector<int>& ids, const std::vector<Appearance>& looks,
                                     int id_offset, Rng& rng) {
  IdentityDealer dealer(ids, rng);
  const double scale = plan.camera == Camera::kUav ? cfg.scale_ratio_uav : 1.0;
  std::vector<ImageRecord> out;
  int slots_left = plan.labeled_slots;
  for (int n = 0; n < plan.images; ++n) {
    ImageRecord r;
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%s_%04d", split == Split::kTrain ? "train" : "test",
                  plan.camera == Camera::kGround ? "g" : "u", n);
    r.image_id = name;
    r.file = std::string(to_string(split)) + "/" + r.image_id + ".png";
    r.camera = plan.camera;
    r.altitude = plan.camera == Camera::kGround
                     ? AltitudeBucket::kNotApplicable
                     : cfg.uav_altitudes[static_cast<std::size_t>(n) % cfg.uav_altitudes.size()];
    r.width = r.height = cfg.image_size;

    const int remaining_images = plan.images - n;
    const int labeled = std::min(slots_left, (slots_left + remaining_images - 1) / remaining_images);
    slots_left -= labeled;
    const bool extra = rng.uniform() < cfg.unlabeled_probability;

    std::vector<int> chosen;
    for (int k = 0; k < labeled; ++k) chosen.push_back(dealer.next(chosen));
    if (extra) chosen.push_back(kUnlabeled);

    auto image = std::make_shared<Image>(cfg.image_size, cfg.image_size);
    fill_background(*image, plan.camera, cfg.noise, rng);
    std::vector<BoundingBox> boxes;
    for (int id : chosen) {
      const int base = cfg.ground_width_min +
                       static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.ground_width_max - cfg.ground_width_min + 1)));
      BoundingBox b;
      b.w = std::max(2.0, std::round(base * scale));
      b.h = std::max(4.0, std::round(b.w * cfg.aspect));
      b.identity = id;
      if (b.w + 2 > cfg.image_size || b.h + 2 > cfg.image_size) {
        throw ConfigError("image_size too small for the configured person size");
      }
      boxes.push_back(b);
    }
    // Whole-layout restarts: a bad early position can block later boxes.
    bool placed = false;
    for (int layout = 0; layout < 200 && !placed; ++layout) {
      placed = true;
      for (std::size_t k = 0; k < boxes.size() && placed; ++k) {
        auto& b = boxes[k];
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
          b.x = 1 + static_cast<double>(rng.uniform_int(static_cast<std::uint64_t>(cfg.image_size - b.w - 1)));
          b.y = 1 + static_cast<double>(rng.uniform_int(static_cast<std::uint64_t>(cfg.image_size - b.h - 1)));
          ok = std::none_of(boxes.begin(), boxes.begin() + static_cast<std::ptrdiff_t>(k),
                            [&](const BoundingBox& o) { return overlaps(b, o, 3.0); });
        }
        placed = ok;
      }
    }
    if (!placed) throw ConfigError("infeasible placement: too many persons for image_size");
    for (const auto& b : boxes) {
      Appearance look;
      if (b.identity >= 0) {
        look = looks[static_cast<std::size_t>(b.identity - id_offset)];
      } else {
        look.top = kDistractorPalette[rng.uniform_int(kDistractorPalette.size())];
        look.bottom = kDistractorPalette[rng.uniform_int(kDistractorPalette.size())];
        look.pattern = 0;
      }
      render_person(*image, b, look);
    }
    r.boxes = std::move(boxes);
    add_noise(*image, cfg.noise / 2, rng);
    r.pixels = std::move(image);
    out.push_back(std::move(r));
  }
  return out;
}

AnnotationSet render_split(const SynthConfig& cfg, Split split, const std::vector<int>& ids,
                           const std::vector<Appearance>& looks, int id_offset, Rng& rng) {
  ViewPlan ground{Camera::kGround, cfg.images_per_view, cfg.images_per_view * cfg.persons_per_image};
  ViewPlan uav{Camera::kUav, cfg.images_per_view, cfg.images_per_view * cfg.persons_per_image};
  if (cfg.boxes_per_id > 0) {
    const int total = cfg.boxes_per_id * cfg.num_ids;
    ground.labeled_slots = total / 2;
    uav.labeled_slots = total - ground.labeled_slots;
    ground.images = (ground.labeled_slots + cfg.persons_per_image - 1) / cfg.persons_per_image;
    uav.images = (uav.labeled_slots + cfg.persons_per_image - 1) / cfg.persons_per_image;
  }
  auto records = render_view(cfg, split, ground, ids, looks, id_offset, rng);
  auto uav_records = render_view(cfg, split, uav, ids, looks, id_offset, rng);
  records.insert(records.end(), std::make_move_iterator(uav_records.begin()),
                 std::make_move_iterator(uav_records.end()));
  return AnnotationSet(std::move(records), split);
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
  if (cfg.num_ids < 2) throw ConfigError("synthetic data needs num_ids >= 2 (distractor identities)");
  if (cfg.persons_per_image < 1 || cfg.persons_per_image > cfg.num_ids) {
    throw ConfigError("persons_per_image must be in [1, num_ids]");
  }
  if (cfg.images_per_view < 1 && cfg.boxes_per_id <= 0) throw ConfigError("images_per_view must be >= 1");
  if (cfg.ground_width_min < 2 || cfg.ground_width_max < cfg.ground_width_min) {
    throw ConfigError("invalid ground width range");
  }
  if (!(cfg.scale_ratio_uav > 0.0)) throw ConfigError("scale_ratio_uav must be positive");
  if (cfg.uav_altitudes.empty()) throw ConfigError("uav_altitudes must not be empty");
  for (auto b : cfg.uav_altitudes) {
    if (b == AltitudeBucket::kNotApplicable) throw ConfigError("UAV images need a real altitude bucket");
  }
  const double max_h = std::round(cfg.ground_width_max * cfg.aspect);
  if (max_h + 2 > cfg.image_size) throw ConfigError("image_size too small for the configured person size");

  Rng rng(cfg.seed);
  const int id_count = cfg.disjoint_test_identities ? 2 * cfg.num_ids : cfg.num_ids;
  const auto looks = identity_appearances(id_count, rng);

  std::vector<int> train_ids(static_cast<std::size_t>(cfg.num_ids));
  for (int i = 0; i < cfg.num_ids; ++i) train_ids[static_cast<std::size_t>(i)] = i;
  std::vector<int> test_ids = train_ids;
  if (cfg.disjoint_test_identities) {
    for (auto& id : test_ids) id += cfg.num_ids;
  }
  SynthDataset out;
  out.train = render_split(cfg, Split::kTrain, train_ids, looks, 0, rng);
  out.test = render_split(cfg, Split::kTest, test_ids, looks, 0, rng);
  return out;
}

void write_synth_dataset(const SynthDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const AnnotationSet* set : {&dataset.train, &dataset.test}) {
    for (const auto& r : set->records()) {
      if (r.pixels) write_image(*r.pixels, dir / r.file);
    }
    save_annotations(*set, dir / (std::string(to_string(set->split())) + ".jsonl"));
  }
}

}  // namespace g2aps::data
