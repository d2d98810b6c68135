#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <string>

#include "sgdsc/trainer.hpp"

using namespace sgdsc;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("sgdsc_trainer_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Two classes with opposite spectral ramps plus small noise. Class 1 fills the
// left half, class 2 the right half; the outer ring of pixels is unlabelled.
HsiCube separable_cube(std::uint64_t seed) {
  HsiCube c;
  c.height = 14;
  c.width = 14;
  c.bands = 6;
  c.classes = 2;
  c.class_names = {"rising", "falling"};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  c.reflectance.resize(c.bands * c.height * c.width);
  c.labels.assign(c.height * c.width, 0);
  for (std::size_t r = 0; r < c.height; ++r)
    for (std::size_t col = 0; col < c.width; ++col) {
      const bool left = col < c.width / 2;
      for (std::size_t b = 0; b < c.bands; ++b) {
        const float ramp = static_cast<float>(b) / static_cast<float>(c.bands - 1);
        c.reflectance[(b * c.height + r) * c.width + col] = (left ? ramp : 1.0f - ramp) + noise(rng);
      }
      const bool ring = r == 0 || col == 0 || r + 1 == c.height || col + 1 == c.width;
      if (!ring) c.labels[r * c.width + col] = left ? 1 : 2;
    }
  return c;
}

TrainConfig toy_config() {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.lr = 1e-2;
  cfg.early_stop_patience = 5;
  cfg.patch = {5, 5};
  cfg.seed = 7;
  cfg.network.stage_blocks = {1, 1, 1};
  cfg.network.k0 = 4;
  cfg.network.groups = 2;
  cfg.network.compression = 4;
  cfg.network.snake_length = 3;
  return cfg;
}

// The toy run is shared by several tests.
struct ToyRun {
  TempDir dir;
  HsiCube cube = separable_cube(1);
  TrainConfig cfg = toy_config();
  TrainResult result;
  ToyRun() { result = train(cube, cfg, dir.path() / "toy.ckpt"); }
};

ToyRun& toy_run() {
  static ToyRun run;
  return run;
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig cfg = toy_config();
  cfg.split = parse_split("8:1:1");
  cfg.band_step = 3;
  cfg.data_dir = "/some/where";
  const TrainConfig back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));

  const auto partial = train_config_from_json(nlohmann::json{{"patch", 9}, {"epochs", 3}});
  EXPECT_EQ(partial.patch.rows, 9u);
  EXPECT_EQ(partial.patch.cols, 9u);
  EXPECT_EQ(partial.epochs, 3u);
  EXPECT_EQ(partial.batch_size, 32u);
  EXPECT_DOUBLE_EQ(partial.lr, 1e-3);
  EXPECT_EQ(partial.early_stop_patience, 15u);

  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"patch", {1, 2, 3}}}), ConfigError);
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = toy_config();
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainConfig, DefaultPatchSizeByScene) {
  HsiCube c;
  c.height = c.width = 145;
  EXPECT_EQ(default_patch_size(c), 15u);
  c.height = 610;
  c.width = 340;
  EXPECT_EQ(default_patch_size(c), 11u);
  c.height = 512;
  c.width = 614;
  EXPECT_EQ(default_patch_size(c), 17u);
  c.height = c.width = 20;
  EXPECT_EQ(default_patch_size(c), 11u);
}

TEST(Seeds, StreamsAreDistinctAndStable) {
  EXPECT_EQ(derive_seed(5, 1), derive_seed(5, 1));
  EXPECT_NE(derive_seed(5, 1), derive_seed(5, 2));
  EXPECT_NE(derive_seed(5, 1), derive_seed(6, 1));
}

TEST(Checkpoint, RoundTripPreservesEveryTensorAndOutput) {
  TempDir tmp;
  auto cfg = toy_config().network;
  cfg.input_patch = {6, 5, 5};
  cfg.num_classes = 3;
  cfg.seed = 11;
  ModelParams model = build_model(cfg);
  // Move running statistics away from their initial values.
  std::mt19937_64 rng(3), fusion(4);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(4 * 6 * 25);
  for (auto& x : v) x = n(rng);
  const Tensor batch({4, 1, 6, 5, 5}, v);
  forward(model, batch, true, &fusion);

  save_checkpoint(tmp.path() / "m.ckpt", model, {{"note", "x"}});
  Checkpoint ck = load_checkpoint(tmp.path() / "m.ckpt");
  EXPECT_EQ(ck.extra.at("note"), "x");
  EXPECT_EQ(to_json(ck.model.config), to_json(model.config));
  const auto a = model.named_tensors(), b = ck.model.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
  }
  EXPECT_EQ(forward_eval(model, batch).values(), forward_eval(ck.model, batch).values());
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir tmp;
  std::ofstream(tmp.path() / "bad.ckpt") << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(tmp.path() / "bad.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(tmp.path() / "missing.ckpt"), IoError);

  auto cfg = toy_config().network;
  cfg.input_patch = {6, 5, 5};
  cfg.num_classes = 2;
  save_checkpoint(tmp.path() / "m.ckpt", build_model(cfg));
  fs::resize_file(tmp.path() / "m.ckpt", fs::file_size(tmp.path() / "m.ckpt") - 4);
  EXPECT_THROW(load_checkpoint(tmp.path() / "m.ckpt"), DataError);
}

TEST(Train, SeparableToyReachesPerfectTrainAccuracy) {
  auto& run = toy_run();
  ASSERT_FALSE(run.result.epochs.empty());
  ASSERT_LE(run.result.epochs.size(), 5u);
  // Eval-mode accuracy on the training split of the best checkpoint.
  Checkpoint ck = load_checkpoint(run.result.checkpoint);
  const auto report = evaluate(ck, run.cube, SplitPart::Train);
  EXPECT_EQ(report.oa, 1.0);
  EXPECT_EQ(run.result.best_val_oa, 1.0);
}

TEST(Train, LogAndBestCheckpointInvariants) {
  auto& run = toy_run();
  const auto& r = run.result;
  for (const auto& e : r.epochs) {
    EXPECT_GE(r.best_val_oa, e.val_oa);
    EXPECT_TRUE(std::isfinite(e.train_loss));
    EXPECT_GE(e.train_oa, 0.0);
    EXPECT_LE(e.train_oa, 1.0);
  }
  Checkpoint ck = load_checkpoint(r.checkpoint);
  EXPECT_EQ(ck.extra.at("epoch").get<std::size_t>(), r.best_epoch);
  EXPECT_EQ(ck.extra.at("val_oa").get<double>(), r.best_val_oa);
  std::ifstream log(r.checkpoint.string() + ".log.json");
  ASSERT_TRUE(log.good());
  nlohmann::json j;
  log >> j;
  EXPECT_EQ(j.at("epochs").size(), r.epochs.size());
  EXPECT_EQ(j.at("best_epoch").get<std::size_t>(), r.best_epoch);
}

TEST(Train, SeededRunsAreIdentical) {
  TempDir tmp;
  auto cfg = toy_config();
  cfg.epochs = 2;
  const auto cube = separable_cube(2);
  const auto a = train(cube, cfg, tmp.path() / "a.ckpt");
  const auto b = train(cube, cfg, tmp.path() / "b.ckpt");
  ASSERT_EQ(a.epochs.size(), b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    EXPECT_EQ(a.epochs[i].train_loss, b.epochs[i].train_loss);
    EXPECT_EQ(a.epochs[i].val_oa, b.epochs[i].val_oa);
  }
  Checkpoint ca = load_checkpoint(tmp.path() / "a.ckpt"), cb = load_checkpoint(tmp.path() / "b.ckpt");
  EXPECT_EQ(to_json(evaluate(ca, cube, SplitPart::Test)).dump(), to_json(evaluate(cb, cube, SplitPart::Test)).dump());

  cfg.seed = 8;
  const auto c = train(cube, cfg, tmp.path() / "c.ckpt");
  EXPECT_NE(c.epochs[0].train_loss, a.epochs[0].train_loss);
}

TEST(Train, EarlyStoppingWaitsForPatience) {
  TempDir tmp;
  auto cfg = toy_config();
  cfg.epochs = 8;
  cfg.early_stop_patience = 2;
  const auto r = train(separable_cube(3), cfg, tmp.path() / "e.ckpt");
  // Walk the log: a stop happens only after `patience` epochs without a gain.
  double best = -1.0;
  std::size_t since = 0;
  for (std::size_t i = 0; i < r.epochs.size(); ++i) {
    if (r.epochs[i].val_oa > best) {
      best = r.epochs[i].val_oa;
      since = 0;
    } else {
      ++since;
    }
    if (i + 1 < r.epochs.size()) EXPECT_LT(since, cfg.early_stop_patience) << "epoch " << i + 1;
  }
  if (r.stopped_early) {
    EXPECT_EQ(since, cfg.early_stop_patience);
  } else {
    EXPECT_EQ(r.epochs.size(), cfg.epochs);
  }
}

TEST(Train, NonFiniteLossNamesEpochAndBatch) {
  TempDir tmp;
  auto cube = separable_cube(4);
  cube.reflectance[0] = std::numeric_limits<float>::infinity();
  try {
    train(cube, toy_config(), tmp.path() / "n.ckpt");
    FAIL() << "training on a non-finite cube succeeded";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 1"), std::string::npos) << msg;
  }
}

TEST(Evaluate, DeterministicAndSizedByClassCount) {
  auto& run = toy_run();
  Checkpoint ck = load_checkpoint(run.result.checkpoint);
  const auto a = to_json(evaluate(ck, run.cube, SplitPart::Test)).dump();
  const auto b = to_json(evaluate(ck, run.cube, SplitPart::Test)).dump();
  EXPECT_EQ(a, b);
  const auto report = evaluate(ck, run.cube, SplitPart::Val);
  EXPECT_EQ(report.per_class.size(), run.cube.classes);
  EXPECT_EQ(report.confusion.size(), run.cube.classes);
  EXPECT_THROW(parse_split_part("holdout"), ConfigError);
}

TEST(Evaluate, RejectsMismatchedDataset) {
  auto& run = toy_run();
  Checkpoint ck = load_checkpoint(run.result.checkpoint);
  auto wrong_bands = run.cube;
  wrong_bands = subsample_bands(wrong_bands, 2);
  EXPECT_THROW(evaluate(ck, wrong_bands, SplitPart::Test), ConfigError);
  auto wrong_classes = run.cube;
  wrong_classes.classes = 3;
  wrong_classes.class_names.push_back("extra");
  wrong_classes.labels[11] = 3;
  EXPECT_THROW(evaluate(ck, wrong_classes, SplitPart::Test), ConfigError);
}

TEST(Map, MatchesGroundTruthAndRendersPpm) {
  auto& run = toy_run();
  Checkpoint ck = load_checkpoint(run.result.checkpoint);
  const auto map = predict_map(ck, run.cube);
  EXPECT_EQ(map.height, run.cube.height);
  EXPECT_EQ(map.width, run.cube.width);
  for (std::size_t i = 0; i < map.classes.size(); ++i) EXPECT_EQ(map.classes[i], run.cube.labels[i]) << i;

  const auto path = run.dir.path() / "map.ppm";
  write_ppm(map, path);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, run.cube.width);
  EXPECT_EQ(h, run.cube.height);
  EXPECT_EQ(maxv, 255u);
  std::vector<unsigned char> px((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(px.size(), w * h * 3);
  const auto c1 = class_color(1);
  EXPECT_EQ(px[(1 * w + 1) * 3], c1[0]);
  EXPECT_EQ(px[0], 0);
}

TEST(Map, AllUnlabelledCubeIsBlack) {
  auto& run = toy_run();
  Checkpoint ck = load_checkpoint(run.result.checkpoint);
  auto blank = run.cube;
  std::fill(blank.labels.begin(), blank.labels.end(), 0);
  const auto map = predict_map(ck, blank);
  EXPECT_EQ(map.height * map.width, blank.labels.size());
  for (int c : map.classes) EXPECT_EQ(c, 0);
  const auto path = run.dir.path() / "blank.ppm";
  write_ppm(map, path);
  std::ifstream in(path, std::ios::binary);
  std::string header;
  std::getline(in, header);
  std::getline(in, header);
  std::getline(in, header);
  std::vector<unsigned char> px((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(px.size(), blank.labels.size() * 3);
  for (unsigned char b : px) EXPECT_EQ(b, 0);
}

TEST(Map, PaletteIsFixedAndDistinct) {
  EXPECT_EQ(class_color(0), (std::array<std::uint8_t, 3>{0, 0, 0}));
  std::set<std::array<std::uint8_t, 3>> seen;
  for (int c = 0; c <= 16; ++c) seen.insert(class_color(c));
  EXPECT_EQ(seen.size(), 17u);
}
