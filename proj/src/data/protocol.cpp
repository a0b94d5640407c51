#include "g2aps/data/protocol.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "g2aps/common/errors.hpp"
#include "g2aps/common/rng.hpp"

namespace g2aps::data {

using nlohmann::json;

namespace {

bool has_identity(const ImageRecord& r, int identity) {
  return std::any_of(r.boxes.begin(), r.boxes.end(),
                     [identity](const BoundingBox& b) { return b.identity == identity; });
}

// First `k` elements of a seeded shuffle.
std::vector<std::size_t> sample(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  rng.shuffle(std::span<std::size_t>(pool));
  pool.resize(std::min(k, pool.size()));
  return pool;
}

}  // namespace

SearchProtocol build_search_protocol(const AnnotationSet& test, int gallery_size, int positives,
                                     std::uint64_t seed) {
  if (positives <= 0 || gallery_size < positives) {
    throw std::invalid_argument("protocol needs 0 < positives <= gallery_size");
  }
  SearchProtocol p;
  p.seed = seed;
  p.gallery_size = gallery_size;
  p.positives = positives;

  const auto& recs = test.records();
  std::vector<std::size_t> uav;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].camera == Camera::kUav) uav.push_back(i);
  }

  for (int id : test.identity_universe()) {
    std::vector<std::size_t> ground_with, uav_with, uav_without;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const bool has = has_identity(recs[i], id);
      if (recs[i].camera == Camera::kGround) {
        if (has) ground_with.push_back(i);
      } else {
        (has ? uav_with : uav_without).push_back(i);
      }
    }
    const auto need_distractors = static_cast<std::size_t>(gallery_size - positives);
    if (ground_with.empty()) {
      p.skipped.push_back({id, "no ground-camera image"});
      continue;
    }
    if (uav_with.size() < static_cast<std::size_t>(positives)) {
      p.skipped.push_back({id, "only " + std::to_string(uav_with.size()) + " UAV images (need " +
                                   std::to_string(positives) + ")"});
      continue;
    }
    if (uav_without.size() < need_distractors) {
      p.skipped.push_back({id, "only " + std::to_string(uav_without.size()) +
                                   " UAV distractor images (need " + std::to_string(need_distractors) + ")"});
      continue;
    }
    // Per-identity stream so entries do not depend on which others were skipped.
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
    const std::size_t qi = ground_with[rng.uniform_int(ground_with.size())];
    const auto pos = sample(uav_with, static_cast<std::size_t>(positives), rng);
    const auto neg = sample(uav_without, need_distractors, rng);

    ProtocolEntry e;
    e.query.image_id = recs[qi].image_id;
    e.query.identity = id;
    for (const auto& b : recs[qi].boxes) {
      if (b.identity == id) {
        e.query.box = b;
        break;
      }
    }
    for (auto i : pos) e.gallery.push_back(recs[i].image_id);
    for (auto i : neg) e.gallery.push_back(recs[i].image_id);
    std::sort(e.gallery.begin(), e.gallery.end());
    p.entries.push_back(std::move(e));
  }
  return p;
}

int count_positive_gallery_images(const ProtocolEntry& entry, const AnnotationSet& set) {
  int n = 0;
  for (const auto& g : entry.gallery) {
    auto idx = set.find(g);
    if (idx && has_identity(set.records()[*idx], entry.query.identity)) ++n;
  }
  return n;
}

SearchProtocol stratify_by_altitude(const SearchProtocol& protocol, const AnnotationSet& set,
                                    AltitudeBucket bucket) {
  if (bucket == AltitudeBucket::kNotApplicable) {
    throw std::invalid_argument("stratification needs a UAV altitude bucket");
  }
  std::map<std::string, AltitudeBucket, std::less<>> altitude;
  for (const auto& r : set.records()) altitude.emplace(r.image_id, r.altitude);

  SearchProtocol out = protocol;
  out.entries.clear();
  out.skipped.clear();
  for (const auto& e : protocol.entries) {
    ProtocolEntry sub;
    sub.query = e.query;
    for (const auto& g : e.gallery) {
      auto it = altitude.find(g);
      if (it == altitude.end()) throw IntegrityError("gallery image '" + g + "' not in annotation set");
      if (it->second == bucket) sub.gallery.push_back(g);
    }
    if (count_positive_gallery_images(sub, set) == 0) {
      out.skipped.push_back({e.query.identity, "no positive gallery image at " + std::string(to_string(bucket))});
      continue;
    }
    out.entries.push_back(std::move(sub));
  }
  return out;
}

namespace {

json box_to_json(const BoundingBox& b) {
  return {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"id", b.identity}};
}

BoundingBox box_from_json(const json& j) {
  BoundingBox b;
  b.x = j.at("x").get<double>();
  b.y = j.at("y").get<double>();
  b.w = j.at("w").get<double>();
  b.h = j.at("h").get<double>();
  b.identity = j.at("id").get<int>();
  return b;
}

}  // namespace

std::string protocol_to_json(const SearchProtocol& p) {
  json entries = json::array();
  for (const auto& e : p.entries) {
    entries.push_back({{"query", {{"image_id", e.query.image_id}, {"identity", e.query.identity},
                                  {"box", box_to_json(e.query.box)}}},
                       {"gallery", e.gallery}});
  }
  json skipped = json::array();
  for (const auto& s : p.skipped) skipped.push_back({{"identity", s.identity}, {"reason", s.reason}});
  json j = {{"version", 1},
            {"seed", p.seed},
            {"gallery_size", p.gallery_size},
            {"positives", p.positives},
            {"entries", std::move(entries)},
            {"skipped", std::move(skipped)}};
  if (!p.annotations.empty()) j["annotations"] = p.annotations;
  return j.dump(1) + "\n";
}

SearchProtocol protocol_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("version").get<int>() != 1) throw SchemaError("unsupported protocol version");
    SearchProtocol p;
    p.seed = j.at("seed").get<std::uint64_t>();
    p.gallery_size = j.at("gallery_size").get<int>();
    p.positives = j.at("positives").get<int>();
    p.annotations = j.value("annotations", std::string());
    for (const auto& je : j.at("entries")) {
      ProtocolEntry e;
      const auto& q = je.at("query");
      e.query.image_id = q.at("image_id").get<std::string>();
      e.query.identity = q.at("identity").get<int>();
      e.query.box = box_from_json(q.at("box"));
      e.gallery = je.at("gallery").get<std::vector<std::string>>();
      p.entries.push_back(std::move(e));
    }
    for (const auto& js : j.value("skipped", json::array())) {
      p.skipped.push_back({js.at("identity").get<int>(), js.at("reason").get<std::string>()});
    }
    return p;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed protocol: ") + e.what());
  }
}

void save_protocol(const SearchProtocol& protocol, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write protocol: " + path.string());
  out << protocol_to_json(protocol);
}

SearchProtocol load_protocol(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open protocol: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return protocol_from_json(ss.str());
}

}  // namespace g2aps::data
