#pragma once

// Training, evaluation and map rendering on top of the container format.
// Every random stream (split, weight init, batch shuffle, fusion subsets) is
// derived from TrainConfig::seed.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdsc/checkpoint.hpp"
#include "sgdsc/hsidata.hpp"
#include "sgdsc/metrics.hpp"
#include "sgdsc/network.hpp"
#include "sgdsc/ops_nn.hpp"
#include "sgdsc/optim.hpp"

namespace sgdsc {

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t early_stop_patience = 15;  // epochs without a validation OA gain
  std::filesystem::path data_dir;
  PatchSpec patch{};
  SplitSpec split{};
  NetworkConfig network{};
  std::size_t band_step = 1;  // keep every band_step-th band; 1 keeps all
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive and finite");
    if (band_step < 1) throw ConfigError("band_step must be >= 1");
    patch.validate();
    split.validate();
  }
};

/// Random stream `stream` of a run seeded with `seed` (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace seed_stream {
inline constexpr std::uint64_t split = 0, init = 1, shuffle = 2, fusion = 3;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"early_stop_patience", c.early_stop_patience},
          {"data", c.data_dir.string()},
          {"patch", {c.patch.rows, c.patch.cols}},
          {"split", c.split.str()},
          {"band_step", c.band_step},
          {"seed", c.seed},
          {"network", to_json(c.network)}};
}

/// Missing keys keep the values already in `c`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("early_stop_patience")) c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
    if (j.contains("data")) c.data_dir = j.at("data").get<std::string>();
    if (j.contains("patch")) {
      const auto& p = j.at("patch");
      if (p.is_number()) {
        c.patch.rows = c.patch.cols = p.get<std::size_t>();
      } else {
        const auto v = p.get<std::vector<std::size_t>>();
        if (v.size() != 2) throw ConfigError("patch must be an integer or [rows, cols]");
        c.patch.rows = v[0];
        c.patch.cols = v[1];
      }
    }
    if (j.contains("split")) c.split = parse_split(j.at("split").get<std::string>());
    if (j.contains("band_step")) c.band_step = j.at("band_step").get<std::size_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("network")) c.network = network_config_from_json(j.at("network"), c.network);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " does not parse: " + e.what());
  }
  return train_config_from_json(j);
}

/// Patch edge length for well-known scenes, identified by raster size and
/// band count; 11 otherwise.
inline std::size_t default_patch_size(const HsiCube& cube) {
  if (cube.height == 145 && cube.width == 145) return 15;  // Indian Pines
  if (cube.height == 610 && cube.width == 340) return 11;  // Pavia University
  if (cube.height == 512 && cube.width == 614) return 17;  // Kennedy Space Center
  return 11;
}

/// Normalised, padded cube together with its labelled pixels and split.
struct PreparedData {
  HsiCube padded;
  std::vector<PixelSample> samples;
  Split split;
};

inline HsiCube preprocess(const HsiCube& raw, const TrainConfig& cfg) {
  HsiCube cube = cfg.band_step > 1 ? subsample_bands(raw, cfg.band_step) : raw;
  return pad_edges(normalize(std::move(cube)), cfg.patch.margin());
}

inline PreparedData prepare_data(const HsiCube& raw, const TrainConfig& cfg) {
  cfg.validate();
  PreparedData d;
  d.padded = preprocess(raw, cfg);
  d.samples = labeled_pixels(d.padded);
  std::vector<int> labels;
  labels.reserve(d.samples.size());
  for (const auto& s : d.samples) labels.push_back(s.label);
  SplitSpec spec = cfg.split;
  spec.seed = derive_seed(cfg.seed, seed_stream::split);
  d.split = stratified_split(labels, d.padded.classes, spec);
  return d;
}

/// Network configuration with the input extents and class count taken from
/// the prepared data and the init seed derived from the run seed.
inline NetworkConfig resolve_network(const TrainConfig& cfg, const HsiCube& padded) {
  NetworkConfig net = cfg.network;
  net.input_patch = {padded.bands, cfg.patch.rows, cfg.patch.cols};
  net.num_classes = padded.classes;
  net.seed = derive_seed(cfg.seed, seed_stream::init);
  return net;
}

struct Batch {
  Tensor inputs;            // [N, 1, bands, rows, cols]
  std::vector<int> labels;  // 0-based
};

inline Batch make_batch(const HsiCube& padded, const PatchSpec& patch, std::span<const PixelSample> samples,
                        std::span<const std::size_t> indices) {
  require_padding(padded, patch);
  const std::size_t per = padded.bands * patch.rows * patch.cols;
  std::vector<float> values(indices.size() * per);
  Batch b;
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = samples[indices[i]];
    fill_patch(padded, patch, s, values.data() + i * per);
    b.labels.push_back(s.label - 1);
  }
  b.inputs = Tensor({indices.size(), 1, padded.bands, patch.rows, patch.cols}, std::move(values));
  return b;
}

/// Eval-mode confusion matrix of `model` over `indices`.
inline ConfusionMatrix evaluate_indices(ModelParams& model, const PreparedData& data, const PatchSpec& patch,
                                        std::span<const std::size_t> indices, std::size_t batch_size) {
  ConfusionMatrix cm(model.config.num_classes);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const Batch b = make_batch(data.padded, patch, data.samples, chunk);
    const auto pred = argmax_rows(forward_eval(model, b.inputs));
    for (std::size_t i = 0; i < pred.size(); ++i) cm.accumulate(b.labels[i] + 1, pred[i] + 1);
  }
  return cm;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_oa = 0.0;  // running accuracy of the training-mode forward passes
  double val_oa = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_oa = -1.0;
  bool stopped_early = false;
  std::filesystem::path checkpoint;
};

inline nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_oa", e.train_oa},
                      {"val_oa", e.val_oa},
                      {"seconds", e.seconds}});
  }
  return {{"epochs", epochs},
          {"best_epoch", r.best_epoch},
          {"best_val_oa", r.best_val_oa},
          {"stopped_early", r.stopped_early},
          {"checkpoint", r.checkpoint.string()}};
}

/// Per-epoch callback; used by the CLI for progress output.
using EpochObserver = std::function<void(const EpochLog&)>;

/// Trains on an already loaded cube and writes the best-validation-OA
/// checkpoint to `out` plus a JSON log next to it (`<out>.log.json`).
inline TrainResult train(const HsiCube& raw, const TrainConfig& cfg, const std::filesystem::path& out,
                         const EpochObserver& observer = {}) {
  const PreparedData data = prepare_data(raw, cfg);
  ModelParams model = build_model(resolve_network(cfg, data.padded));
  auto params = model.parameters();
  AdamState adam;
  adam.options.lr = static_cast<float>(cfg.lr);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, seed_stream::shuffle));
  std::mt19937_64 fusion_rng(derive_seed(cfg.seed, seed_stream::fusion));

  TrainResult result;
  result.checkpoint = out;
  std::size_t since_best = 0;
  std::vector<std::size_t> order = data.split.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch_no = 1; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Batch b = make_batch(data.padded, cfg.patch, data.samples, chunk);
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
      Tensor logits, loss;
      try {
        logits = forward(model, b.inputs, true, &fusion_rng);
        loss = softmax_cross_entropy(logits, b.labels);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where);
      }
      const float lv = loss.item();
      if (!std::isfinite(lv)) throw NumericError("non-finite training loss at " + where);
      loss_sum += static_cast<double>(lv) * static_cast<double>(chunk.size());
      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1 : 0;
      backward(loss);
      adam_step(params, adam);
      zero_grads(params);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.train_oa = static_cast<double>(correct) / static_cast<double>(order.size());
    log.val_oa = overall_accuracy(evaluate_indices(model, data, cfg.patch, data.split.val, cfg.batch_size));
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (observer) observer(log);

    if (log.val_oa > result.best_val_oa) {
      result.best_val_oa = log.val_oa;
      result.best_epoch = epoch;
      since_best = 0;
      save_checkpoint(out, model,
                      {{"train", to_json(cfg)}, {"epoch", epoch}, {"val_oa", log.val_oa}});
    } else if (++since_best >= cfg.early_stop_patience && cfg.early_stop_patience > 0) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }

  std::ofstream log_out(out.string() + ".log.json");
  if (!log_out) throw IoError("cannot write training log next to " + out.string());
  log_out << to_json(result).dump(2) << '\n';
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out,
                         const EpochObserver& observer = {}) {
  return train(load_cube(cfg.data_dir), cfg, out, observer);
}

enum class SplitPart { Train, Val, Test };

inline SplitPart parse_split_part(const std::string& name) {
  if (name == "train") return SplitPart::Train;
  if (name == "val") return SplitPart::Val;
  if (name == "test") return SplitPart::Test;
  throw ConfigError("split must be one of train, val, test; got '" + name + "'");
}

inline const std::vector<std::size_t>& split_indices(const Split& s, SplitPart part) {
  switch (part) {
    case SplitPart::Train: return s.train;
    case SplitPart::Val: return s.val;
    case SplitPart::Test: return s.test;
  }
  throw ConfigError("unknown split part");
}

/// Training configuration stored inside a checkpoint written by train().
inline TrainConfig checkpoint_train_config(const Checkpoint& ck) {
  if (!ck.extra.contains("train")) throw DataError("checkpoint carries no training configuration");
  return train_config_from_json(ck.extra.at("train"));
}

inline void require_compatible(const ModelParams& model, const HsiCube& padded, const PatchSpec& patch) {
  const auto& c = model.config;
  if (c.input_patch.bands != padded.bands || c.input_patch.rows != patch.rows || c.input_patch.cols != patch.cols) {
    throw ConfigError("checkpoint expects patches of " + std::to_string(c.input_patch.bands) + " bands x " +
                      std::to_string(c.input_patch.rows) + "x" + std::to_string(c.input_patch.cols) +
                      " but the dataset yields " + std::to_string(padded.bands) + " bands x " +
                      std::to_string(patch.rows) + "x" + std::to_string(patch.cols));
  }
  if (c.num_classes != padded.classes) {
    throw ConfigError("checkpoint was trained for " + std::to_string(c.num_classes) + " classes, dataset has " +
                      std::to_string(padded.classes));
  }
}

/// Metrics of a checkpoint on one part of the split it was trained with.
inline MetricsReport evaluate(Checkpoint& ck, const HsiCube& raw, SplitPart part, std::size_t batch_size = 64) {
  const TrainConfig cfg = checkpoint_train_config(ck);
  const PreparedData data = prepare_data(raw, cfg);
  require_compatible(ck.model, data.padded, cfg.patch);
  return make_report(evaluate_indices(ck.model, data, cfg.patch, split_indices(data.split, part), batch_size));
}

inline MetricsReport evaluate(const std::filesystem::path& checkpoint, SplitPart part,
                              const std::optional<std::filesystem::path>& data_dir = std::nullopt) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const TrainConfig cfg = checkpoint_train_config(ck);
  return evaluate(ck, load_cube(data_dir.value_or(cfg.data_dir)), part);
}

/// Colours for classes 1..16; later classes reuse the table with a shift.
inline std::array<std::uint8_t, 3> class_color(int label) {
  static constexpr std::uint8_t kPalette[16][3] = {
      {255, 0, 0},     {0, 255, 0},     {0, 0, 255},     {255, 255, 0},  {0, 255, 255},   {255, 0, 255},
      {176, 48, 96},   {46, 139, 87},   {160, 32, 240},  {255, 127, 80}, {127, 255, 212}, {218, 112, 214},
      {160, 82, 45},   {127, 255, 0},   {216, 191, 216}, {238, 0, 0}};
  if (label <= 0) return {0, 0, 0};
  const auto& c = kPalette[(label - 1) % 16];
  const auto shift = static_cast<std::uint8_t>(((label - 1) / 16) * 37);
  return {static_cast<std::uint8_t>(c[0] ^ shift), static_cast<std::uint8_t>(c[1] ^ shift),
          static_cast<std::uint8_t>(c[2] ^ shift)};
}

/// Predicted classes per pixel of the original raster (0 where unlabelled).
struct ClassMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> classes;  // row-major
};

inline ClassMap predict_map(Checkpoint& ck, const HsiCube& raw, std::size_t batch_size = 64) {
  const TrainConfig cfg = checkpoint_train_config(ck);
  const HsiCube padded = preprocess(raw, cfg);
  require_compatible(ck.model, padded, cfg.patch);
  const auto samples = labeled_pixels(padded);
  ClassMap map{raw.height, raw.width, std::vector<int>(raw.height * raw.width, 0)};
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const std::span<const std::size_t> chunk(all.data() + start, std::min(batch_size, all.size() - start));
    const Batch b = make_batch(padded, cfg.patch, samples, chunk);
    const auto pred = argmax_rows(forward_eval(ck.model, b.inputs));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto& s = samples[chunk[i]];
      map.classes[s.row * map.width + s.col] = pred[i] + 1;
    }
  }
  return map;
}

/// Binary PPM (P6).
inline void write_ppm(const ClassMap& map, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << map.width << ' ' << map.height << "\n255\n";
  for (int c : map.classes) {
    const auto rgb = class_color(c);
    out.write(reinterpret_cast<const char*>(rgb.data()), 3);
  }
  if (!out) throw IoError("failed writing image " + path.string());
}

}  // namespace sgdsc
