#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "g2aps/common/errors.hpp"
#include "g2aps/train/ablation.hpp"
#include "g2aps/train/checkpoint.hpp"
#include "g2aps/train/config.hpp"
#include "g2aps/train/trainer.hpp"
#include "support.hpp"

using namespace g2aps;
using namespace g2aps::train;
using nlohmann::json;

namespace {

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  return json::parse(in);
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) {
    if (!l.empty()) lines.push_back(l);
  }
  return lines;
}

// Synthetic recipe shrunk to a few steps per epoch.
TrainConfig quick_config(const std::filesystem::path& out) {
  TrainConfig c = preset("synthetic");
  c.data.synth.images_per_view = 16;
  c.data.gallery_size = 8;
  c.data.positives = 2;
  c.max_steps_per_epoch = 3;
  c.total_epochs = 2;
  c.lr_decay_epoch = 2;
  c.output_dir = out.string();
  return c;
}

std::vector<double> totals(const std::vector<StepRecord>& steps) {
  std::vector<double> t;
  for (const auto& s : steps) t.push_back(s.report.total);
  return t;
}

bool same_config(const TrainConfig& a, const TrainConfig& b) { return config_to_json(a) == config_to_json(b); }

bool same_parameters(const nn::ParameterList& a, const nn::ParameterList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(), b[i].tensor.values().begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("preset configs match the golden files") {
  for (const std::string name : {"g2aps", "prw", "cuhk-sysu"}) {
    CAPTURE(name);
    const json golden = read_json(std::filesystem::path(G2APS_TEST_DATA) / "golden" / (name + ".json"));
    CHECK(config_to_json(preset(name)) == golden);
    CHECK(same_config(config_from_json(golden), preset(name)));
  }
}

TEST_CASE("golden files carry the reference hyperparameters") {
  struct Row {
    const char* name;
    int batch;
    double lr;
    int queue;
    int lut;
  };
  for (const Row& r : {Row{"g2aps", 2, 0.001, 2000, 2078}, Row{"prw", 4, 0.0018, 500, 482},
                       Row{"cuhk-sysu", 3, 0.0018, 5000, 5532}}) {
    CAPTURE(r.name);
    const json j = read_json(std::filesystem::path(G2APS_TEST_DATA) / "golden" / (std::string(r.name) + ".json"));
    CHECK(j["batch_size"] == r.batch);
    CHECK(j["initial_lr"] == r.lr);
    CHECK(j["total_epochs"] == 21);
    CHECK(j["lr_decay_epoch"] == 16);
    CHECK(j["lr_decay_factor"] == 0.1);
    CHECK(j["lambda_prob"] == 1.0);
    CHECK(j["lambda_rela"] == 300.0);
    CHECK(j["momentum"] == 0.9);
    CHECK(j["weight_decay"] == 0.0005);
    CHECK(j["oim"]["queue_size"] == r.queue);
    CHECK(j["oim"]["lut_size"] == r.lut);
    CHECK(j["detach_teacher"] == true);
    CHECK(j["grad_clip"].is_null());
  }
  CHECK_THROWS_AS(preset("market"), ConfigError);
}

TEST_CASE("lr_schedule") {
  const TrainConfig g = preset("g2aps");
  CHECK(lr_schedule(g, 0) == 0.001);
  CHECK(lr_schedule(g, 14) == 0.001);
  // The 16th epoch is index 15.
  CHECK(lr_schedule(g, 15) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_schedule(g, 16) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_schedule(g, 20) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_schedule(preset("prw"), 5) == 0.0018);
  TrainConfig flat = g;
  flat.lr_decay_factor = 1.0;
  for (int e = 0; e < flat.total_epochs; ++e) CHECK(lr_schedule(flat, e) == 0.001);
  CHECK_THROWS_AS(lr_schedule(g, -1), std::invalid_argument);
  CHECK_THROWS_AS(lr_schedule(g, 21), std::invalid_argument);
}

TEST_CASE("validate rejects inconsistent configs") {
  CHECK_NOTHROW(validate(preset("g2aps")));
  CHECK_NOTHROW(validate(preset("synthetic")));
  auto broken = [](auto mutate) {
    TrainConfig c = preset("g2aps");
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(validate(broken([](TrainConfig& c) { c.total_epochs = 0; })), ConfigError);
  CHECK_THROWS_AS(validate(broken([](TrainConfig& c) { c.lr_decay_epoch = 22; })), ConfigError);
  CHECK_THROWS_AS(validate(broken([](TrainConfig& c) { c.lr_decay_factor = 0; })), ConfigError);
  CHECK_THROWS_AS(validate(broken([](TrainConfig& c) { c.initial_lr = -1; })), ConfigError);
  CHECK_THROWS_AS(validate(broken([](TrainConfig& c) { c.batch_size = 0; })), ConfigError);
}

TEST_CASE("config json round trip and partial files") {
  TrainConfig c = preset("synthetic");
  c.seed = 42;
  c.relation_distance = loss::RelationDistance::kMutualInfo;
  c.relation_direction = loss::RelationDirection::kSymmetric;
  c.detach_teacher = false;
  c.grad_clip.reset();
  c.model.head_pool_grid = 3;
  c.data.synth.uav_altitudes = {data::AltitudeBucket::k30to40, data::AltitudeBucket::k50to60};
  CHECK(same_config(config_from_json(config_to_json(c)), c));

  testing::TempDir dir("cfg");
  save_config(c, dir.path() / "c.json");
  CHECK(same_config(load_config(dir.path() / "c.json"), c));

  const TrainConfig partial = config_from_json(json{{"version", 1}, {"dataset", "synthetic"}, {"seed", 9}});
  TrainConfig expected = preset("synthetic");
  expected.seed = 9;
  CHECK(same_config(partial, expected));
  CHECK_THROWS_AS(config_from_json(json{{"version", 2}}), SchemaError);
  CHECK_THROWS_AS(config_from_json(json{{"version", 1}, {"relation_distance", "l1"}}), SchemaError);
  CHECK_THROWS_AS(config_from_json(json{{"version", 1}, {"batch_size", "two"}}), SchemaError);
}

TEST_CASE("checkpoint round trip and corruption") {
  testing::TempDir dir("ckpt");
  Trainer t(quick_config(dir.path()), load_dataset(quick_config(dir.path())));
  t.run_epoch(0);
  const Checkpoint c = t.make_checkpoint();
  const std::string bytes = serialize_checkpoint(c);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.meta == c.meta);
  CHECK(back.oim_student == c.oim_student);
  CHECK(back.oim_teacher == c.oim_teacher);
  CHECK(back.momentum == c.momentum);
  REQUIRE(back.parameters.size() == c.parameters.size());
  for (std::size_t i = 0; i < c.parameters.size(); ++i) {
    CHECK(back.parameters[i].name == c.parameters[i].name);
    CHECK(back.parameters[i].values == c.parameters[i].values);
  }
  CHECK(serialize_checkpoint(back) == bytes);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 0x10);
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), IntegrityError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 9)), IntegrityError);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(magic), IntegrityError);
  CHECK_THROWS_AS(deserialize_checkpoint(""), IntegrityError);

  save_checkpoint(c, dir.path() / "c.ckpt");
  {
    std::fstream f(dir.path() / "c.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "c.ckpt"), IntegrityError);
  CHECK_THROWS_AS(resume_training(dir.path() / "c.ckpt"), IntegrityError);

  std::vector<NamedArray> wrong = c.parameters;
  wrong[0].shape.push_back(1);
  CHECK_THROWS_AS(restore_parameters(wrong, t.model().parameters()), IntegrityError);
  wrong = c.parameters;
  wrong.pop_back();
  CHECK_THROWS_AS(restore_parameters(wrong, t.model().parameters()), IntegrityError);
}

TEST_CASE("restored model gives bitwise-identical inference") {
  testing::TempDir dir("restore");
  const TrainConfig cfg = quick_config(dir.path());
  Trainer t(cfg, load_dataset(cfg));
  t.run_epoch(0);
  const model::SearchModel m = model_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(t.make_checkpoint())));
  const auto& rec = t.data().test.records().front();
  const data::Image img = t.data().test.load_pixels(rec);
  const auto batch = model::make_image_batch({&img}, cfg.model);
  const auto a = t.model().inference(batch), b = m.inference(batch);
  REQUIRE(a[0].size() == b[0].size());
  for (std::size_t i = 0; i < a[0].size(); ++i) {
    CHECK(a[0][i].box == b[0][i].box);
    CHECK(a[0][i].score == b[0][i].score);
    CHECK(a[0][i].embedding == b[0][i].embedding);
  }
}

TEST_CASE("seeded runs produce identical loss streams") {
  testing::TempDir d1("det1"), d2("det2");
  RunOptions opt;
  opt.write_files = false;
  opt.final_eval = false;
  const auto a = run_training(quick_config(d1.path()), opt);
  const auto b = run_training(quick_config(d2.path()), opt);
  REQUIRE(a.steps.size() == 6);
  CHECK(totals(a.steps) == totals(b.steps));
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].report.l_oim_s == b.steps[i].report.l_oim_s);
    CHECK(a.steps[i].report.l_rela == b.steps[i].report.l_rela);
    CHECK(std::isfinite(a.steps[i].report.total));
    CHECK(a.steps[i].report.total == doctest::Approx(a.steps[i].report.recomputed_total()).epsilon(1e-9));
  }
  TrainConfig other = quick_config(d2.path());
  other.seed = 1;
  CHECK(totals(run_training(other, opt).steps) != totals(a.steps));
}

TEST_CASE("resume continues the run without duplicated epochs") {
  testing::TempDir full_dir("full"), part_dir("part");
  TrainConfig full_cfg = quick_config(full_dir.path());
  full_cfg.total_epochs = 3;
  RunOptions opt;
  opt.final_eval = false;
  const RunResult full = run_training(full_cfg, opt);

  TrainConfig part_cfg = full_cfg;
  part_cfg.output_dir = part_dir.path().string();
  RunOptions stop = opt;
  stop.stop_after_epoch = 1;
  const RunResult first = run_training(part_cfg, stop);
  CHECK(first.completed_epochs == 1);
  // Stale lines of a crashed second epoch must be dropped on resume.
  {
    std::ofstream m(part_dir.path() / "metrics.jsonl", std::ios::app);
    m << json{{"epoch", 1}, {"step", 0}}.dump() << "\n{\"epoch\": 1, \"st";
  }
  const RunResult rest = resume_training(checkpoint_path(part_dir.path(), 1), opt);
  CHECK(rest.completed_epochs == 3);

  std::vector<double> stitched = totals(first.steps);
  for (double v : totals(rest.steps)) stitched.push_back(v);
  CHECK(stitched == totals(full.steps));

  const auto lines = read_lines(part_dir.path() / "metrics.jsonl");
  const auto ref = read_lines(full_dir.path() / "metrics.jsonl");
  CHECK(lines.size() == ref.size());
  std::set<std::pair<int, int>> seen;
  for (const auto& l : lines) {
    const json j = json::parse(l);
    CHECK(seen.insert({j["epoch"].get<int>(), j["step"].get<int>()}).second);
  }
  const Checkpoint a = load_checkpoint(checkpoint_path(full_dir.path(), 3));
  const Checkpoint b = load_checkpoint(checkpoint_path(part_dir.path(), 3));
  for (std::size_t i = 0; i < a.parameters.size(); ++i) CHECK(a.parameters[i].values == b.parameters[i].values);
  CHECK(a.meta["history"] == b.meta["history"]);
  CHECK(std::filesystem::exists(full_dir.path() / "config.json"));
}

TEST_CASE("zero distillation weights equal disabled distillation") {
  testing::TempDir d1("lam0"), d2("off");
  TrainConfig zero = quick_config(d1.path());
  zero.lambda_prob = 0;
  zero.lambda_rela = 0;
  TrainConfig off = quick_config(d2.path());
  off.enable_prob_kd = false;
  off.enable_rela_kd = false;
  Trainer a(zero, load_dataset(zero)), b(off, load_dataset(off));
  int kd_steps = 0;
  for (int s = 0; s < 4; ++s) {
    const auto order = a.epoch_order(0);
    const std::vector<std::size_t> recs{order[static_cast<std::size_t>(2 * s)], order[static_cast<std::size_t>(2 * s + 1)]};
    const StepRecord ra = a.train_step(recs, 0, s);
    b.train_step(recs, 0, s);
    kd_steps += ra.report.l_prob > 0;
    CHECK(same_parameters(a.model().parameters(), b.model().parameters()));
  }
  CHECK(kd_steps > 0);
}

TEST_CASE("teacher parameters receive no gradient from distillation by default") {
  testing::TempDir d1("kdon"), d2("kdoff");
  // Clipping rescales by the global norm, which couples all parameters.
  TrainConfig with = quick_config(d1.path());
  with.grad_clip.reset();
  TrainConfig without = quick_config(d2.path());
  without.grad_clip.reset();
  without.enable_prob_kd = false;
  without.enable_rela_kd = false;
  Trainer a(with, load_dataset(with)), b(without, load_dataset(without));
  const auto order = a.epoch_order(0);
  a.train_step({order[0], order[1]}, 0, 0);
  b.train_step({order[0], order[1]}, 0, 0);
  CHECK(same_parameters(a.model().teacher_parameters(), b.model().teacher_parameters()));
  CHECK_FALSE(same_parameters(a.model().inference_parameters(), b.model().inference_parameters()));
}

TEST_CASE("ablation grids") {
  const TrainConfig base = preset("synthetic");
  const auto hkd = make_grid("hkd", base);
  REQUIRE(hkd.size() == 4);
  std::set<std::pair<bool, bool>> flags;
  for (const auto& c : hkd) {
    flags.insert({c.config.enable_prob_kd, c.config.enable_rela_kd});
    CHECK(c.config.seed == base.seed);
  }
  CHECK(flags.size() == 4);
  const auto det = make_grid("detach", base);
  REQUIRE(det.size() == 2);
  CHECK(det[0].config.detach_teacher != det[1].config.detach_teacher);
  CHECK(make_grid("none", base).empty());
  CHECK_THROWS_AS(make_grid("everything", base), std::invalid_argument);

  int calls = 0;
  const auto rows = run_ablation(hkd, [&](const TrainConfig& c) {
    EvalResult r;
    r.search.map = c.enable_prob_kd ? 0.5 : 0.25;
    ++calls;
    return r;
  });
  CHECK(calls == 4);
  const auto table = hkd_table(rows);
  CHECK(table.rows.size() == 4);
  const auto detach_rows = run_ablation(det, [](const TrainConfig&) { return EvalResult{}; });
  const auto dt = detach_table(detach_rows);
  CHECK(dt.rows.size() == 2);
  CHECK(std::find(dt.header.begin(), dt.header.end(), "Recall") != dt.header.end());
  CHECK(hkd_table({}).rows.empty());
  CHECK_FALSE(eval::format_table(hkd_table({})).empty());
}

TEST_CASE("full run writes its artifacts") {
  testing::TempDir dir("artifacts");
  const RunResult r = run_training(quick_config(dir.path()));
  REQUIRE(r.final_eval);
  CHECK(r.completed_epochs == 2);
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 1)));
  CHECK(std::filesystem::exists(checkpoint_path(dir.path(), 2)));
  const json eval = read_json(dir.path() / "final_eval.json");
  CHECK(eval.contains("search"));
  CHECK(read_lines(dir.path() / "metrics.jsonl").size() == 6);
  const auto& s = r.final_eval->search;
  CHECK(s.map >= 0.0);
  CHECK(s.map <= 1.0);
  CHECK(r.steps[0].lr == doctest::Approx(0.01));
  CHECK(r.steps.back().lr == doctest::Approx(0.001));
}
