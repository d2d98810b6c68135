#pragma once

// Checkpoint container:
//   8 bytes   magic "SGDSCKPT"
//   8 bytes   little-endian uint64 length of the JSON index
//   index     UTF-8 JSON: {"format":1, "network":{...}, "extra":{...},
//                          "tensors":[{"name","dtype":"f32le","shape","offset"}]}
//   payload   raw little-endian float32 tensors; offsets are relative to the
//             first payload byte

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdsc/network.hpp"

namespace sgdsc {

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"stage_blocks", c.stage_blocks},
          {"k0", c.k0},
          {"growth_rates", c.growth_rates()},
          {"groups", c.groups},
          {"compression", c.compression},
          {"bottleneck_factor", c.bottleneck_factor},
          {"snake_length", c.snake_length},
          {"fusion", {{"m", c.fusion.m}, {"p", c.fusion.p}, {"seed", c.fusion.seed}}},
          {"num_classes", c.num_classes},
          {"input_patch", {c.input_patch.bands, c.input_patch.rows, c.input_patch.cols}},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults, so partial JSON configs are accepted.
inline NetworkConfig network_config_from_json(const nlohmann::json& j, NetworkConfig c = {}) {
  try {
    if (j.contains("stage_blocks")) c.stage_blocks = j.at("stage_blocks").get<std::vector<std::size_t>>();
    if (j.contains("k0")) c.k0 = j.at("k0").get<std::size_t>();
    if (j.contains("groups")) c.groups = j.at("groups").get<std::size_t>();
    if (j.contains("compression")) c.compression = j.at("compression").get<std::size_t>();
    if (j.contains("bottleneck_factor")) c.bottleneck_factor = j.at("bottleneck_factor").get<std::size_t>();
    if (j.contains("snake_length")) c.snake_length = j.at("snake_length").get<std::size_t>();
    if (j.contains("fusion")) {
      const auto& f = j.at("fusion");
      if (f.contains("m")) c.fusion.m = f.at("m").get<std::size_t>();
      if (f.contains("p")) c.fusion.p = f.at("p").get<double>();
      if (f.contains("seed")) c.fusion.seed = f.at("seed").get<std::uint64_t>();
    }
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("input_patch")) {
      const auto v = j.at("input_patch").get<std::vector<std::size_t>>();
      if (v.size() != 3) throw ConfigError("input_patch must list [bands, rows, cols]");
      c.input_patch = {v[0], v[1], v[2]};
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("growth_rates") && j.at("growth_rates").get<std::vector<std::size_t>>() != c.growth_rates()) {
      throw ConfigError("growth_rates in config disagree with 2^m * k0 for k0 = " + std::to_string(c.k0));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  return c;
}

struct Checkpoint {
  ModelParams model;
  nlohmann::json extra;
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& model,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json index;
  index["format"] = 1;
  index["network"] = to_json(model.config);
  index["extra"] = extra;
  index["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto named = model.named_tensors();
  for (const auto& [name, t] : named) {
    index["tensors"].push_back({{"name", name}, {"dtype", "f32le"}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel() * sizeof(float);
  }
  const std::string text = index.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write("SGDSCKPT", 8);
  auto put_u64 = [&](std::uint64_t v) {
    std::array<unsigned char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b.data()), 8);
  };
  put_u64(text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named) {
    for (float v : t.data()) {
      auto raw = std::bit_cast<std::array<unsigned char, 4>>(v);
      if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
      out.write(reinterpret_cast<const char*>(raw.data()), 4);
    }
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "SGDSCKPT", 8) != 0) {
    throw DataError(path.string() + " is not a checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + len > bytes.size()) throw DataError("checkpoint index overruns file " + path.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint index does not parse: " + std::string(e.what()));
  }
  if (index.value("format", 0) != 1) throw DataError("unsupported checkpoint format in " + path.string());
  const std::size_t payload = 16 + len;

  Checkpoint ck;
  ck.model = build_model(network_config_from_json(index.at("network")));
  ck.extra = index.value("extra", nlohmann::json::object());
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : index.at("tensors")) entries[e.at("name").get<std::string>()] = e;
  for (auto& [name, t] : ck.model.named_tensors()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                      shape_str(t.shape()));
    }
    const auto off = it->second.at("offset").get<std::uint64_t>();
    if (payload + off + t.numel() * 4 > bytes.size()) throw DataError("checkpoint tensor '" + name + "' truncated");
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::array<unsigned char, 4> raw{};
      std::memcpy(raw.data(), bytes.data() + payload + off + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
      dst[i] = std::bit_cast<float>(raw);
    }
  }
  return ck;
}

}  // namespace sgdsc
