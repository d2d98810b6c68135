#pragma once

// Hyperspectral cube container, preprocessing, patch extraction and the
// stratified split.
//
// On-disk container (one directory):
//   header.json  {"version":1, "height", "width", "bands", "classes",
//                 "class_names", "dtype":"f32le", "layout":"band-seq",
//                 optional "band_wavelengths"}
//   cube.f32     H*W*B little-endian float32, band-major then row-major
//   labels.u16   H*W little-endian uint16, row-major; 0 = unlabelled

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgdsc/error.hpp"

namespace sgdsc {

struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::size_t classes = 0;
  std::vector<float> reflectance;      // [bands][height][width]
  std::vector<std::uint16_t> labels;   // [height][width]
  std::vector<std::string> class_names;
  std::vector<double> band_wavelengths;  // optional, micrometres
  std::size_t margin = 0;  // edge padding applied so far

  float value(std::size_t band, std::size_t row, std::size_t col) const {
    return reflectance[(band * height + row) * width + col];
  }
  int label(std::size_t row, std::size_t col) const { return labels[row * width + col]; }

  std::size_t labeled_count() const {
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  }

  bool operator==(const HsiCube&) const = default;
};

namespace detail {

template <class T>
inline std::vector<T> read_le_file(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  const std::size_t want = expected_count * sizeof(T);
  if (bytes != want) {
    throw DataError(path.filename().string() + " holds " + std::to_string(bytes) + " bytes but the header implies " +
                    std::to_string(want) + " bytes");
  }
  std::vector<T> out(expected_count);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(want));
  if (!in) throw IoError("short read from " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      v = std::bit_cast<T>(raw);
    }
  }
  return out;
}

template <class T>
inline void write_le_file(const std::filesystem::path& path, const std::vector<T>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (T v : values) {
      auto raw = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(raw.begin(), raw.end());
      out.write(reinterpret_cast<const char*>(raw.data()), sizeof(T));
    }
  } else {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace detail

inline HsiCube load_cube(const std::filesystem::path& dir) {
  const auto header_path = dir / "header.json";
  std::ifstream hin(header_path);
  if (!hin) throw IoError("cannot open " + header_path.string());
  nlohmann::json h;
  try {
    hin >> h;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("header.json does not parse: " + std::string(e.what()));
  }
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!h.contains(key)) throw DataError(std::string("header.json lacks required key '") + key + "'");
    return h.at(key);
  };
  if (field("version").get<int>() != 1) {
    throw DataError("unsupported container version " + field("version").dump() + " (expected 1)");
  }
  if (field("dtype").get<std::string>() != "f32le") {
    throw DataError("unsupported dtype " + field("dtype").dump() + " (expected \"f32le\")");
  }
  if (field("layout").get<std::string>() != "band-seq") {
    throw DataError("unsupported layout " + field("layout").dump() + " (expected \"band-seq\")");
  }
  HsiCube cube;
  cube.height = field("height").get<std::size_t>();
  cube.width = field("width").get<std::size_t>();
  cube.bands = field("bands").get<std::size_t>();
  cube.classes = field("classes").get<std::size_t>();
  cube.class_names = field("class_names").get<std::vector<std::string>>();
  if (h.contains("band_wavelengths")) cube.band_wavelengths = h.at("band_wavelengths").get<std::vector<double>>();
  if (cube.height == 0 || cube.width == 0 || cube.bands == 0) throw DataError("header declares an empty cube");
  if (cube.class_names.size() != cube.classes) {
    throw DataError("header lists " + std::to_string(cube.class_names.size()) + " class names for " +
                    std::to_string(cube.classes) + " classes");
  }

  const std::size_t pixels = cube.height * cube.width;
  cube.reflectance = detail::read_le_file<float>(dir / "cube.f32", pixels * cube.bands);
  cube.labels = detail::read_le_file<std::uint16_t>(dir / "labels.u16", pixels);

  for (std::size_t i = 0; i < cube.reflectance.size(); ++i) {
    if (!std::isfinite(cube.reflectance[i])) {
      const std::size_t b = i / pixels, r = (i % pixels) / cube.width, c = i % cube.width;
      throw DataError("non-finite reflectance at band " + std::to_string(b) + ", row " + std::to_string(r) +
                      ", col " + std::to_string(c));
    }
  }
  for (std::size_t i = 0; i < pixels; ++i) {
    if (cube.labels[i] > cube.classes) {
      throw DataError("label " + std::to_string(cube.labels[i]) + " at row " + std::to_string(i / cube.width) +
                      ", col " + std::to_string(i % cube.width) + " exceeds class count " +
                      std::to_string(cube.classes));
    }
  }
  return cube;
}

inline void save_cube(const HsiCube& cube, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json h = {{"version", 1},
                      {"height", cube.height},
                      {"width", cube.width},
                      {"bands", cube.bands},
                      {"classes", cube.classes},
                      {"class_names", cube.class_names},
                      {"dtype", "f32le"},
                      {"layout", "band-seq"}};
  if (!cube.band_wavelengths.empty()) h["band_wavelengths"] = cube.band_wavelengths;
  std::ofstream out(dir / "header.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "header.json").string());
  out << h.dump(2) << '\n';
  detail::write_le_file(dir / "cube.f32", cube.reflectance);
  detail::write_le_file(dir / "labels.u16", cube.labels);
}

/// Per-band z-score over every pixel. Constant bands become zero.
inline HsiCube normalize(HsiCube cube) {
  const std::size_t pixels = cube.height * cube.width;
  for (std::size_t b = 0; b < cube.bands; ++b) {
    float* band = cube.reflectance.data() + b * pixels;
    double s = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) s += band[i];
    const double mu = s / static_cast<double>(pixels);
    double ss = 0.0;
    for (std::size_t i = 0; i < pixels; ++i) ss += (band[i] - mu) * (band[i] - mu);
    const double sd = std::sqrt(ss / static_cast<double>(pixels));
    for (std::size_t i = 0; i < pixels; ++i) {
      band[i] = sd < 1e-12 ? 0.0f : static_cast<float>((band[i] - mu) / sd);
    }
  }
  return cube;
}

/// Keeps every `step`-th band starting from band 0.
inline HsiCube subsample_bands(const HsiCube& cube, std::size_t step) {
  if (step == 0) throw ConfigError("band step must be positive");
  if (step == 1) return cube;
  HsiCube out = cube;
  const std::size_t pixels = cube.height * cube.width;
  out.bands = (cube.bands + step - 1) / step;
  out.reflectance.resize(out.bands * pixels);
  out.band_wavelengths.clear();
  for (std::size_t b = 0; b < out.bands; ++b) {
    std::copy_n(cube.reflectance.begin() + static_cast<std::ptrdiff_t>(b * step * pixels), pixels,
                out.reflectance.begin() + static_cast<std::ptrdiff_t>(b * pixels));
    if (!cube.band_wavelengths.empty()) out.band_wavelengths.push_back(cube.band_wavelengths[b * step]);
  }
  return out;
}

/// Grows both spatial extents by 2 * margin, replicating edge pixels.
/// The padded border is unlabelled.
inline HsiCube pad_edges(const HsiCube& cube, std::size_t margin) {
  if (margin == 0) return cube;
  HsiCube out = cube;
  out.height = cube.height + 2 * margin;
  out.width = cube.width + 2 * margin;
  out.margin = cube.margin + margin;
  out.reflectance.assign(out.bands * out.height * out.width, 0.0f);
  out.labels.assign(out.height * out.width, 0);
  for (std::size_t b = 0; b < cube.bands; ++b)
    for (std::size_t r = 0; r < out.height; ++r) {
      const std::size_t sr = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(r) - static_cast<std::ptrdiff_t>(margin),
                                                        0, static_cast<std::ptrdiff_t>(cube.height) - 1);
      for (std::size_t c = 0; c < out.width; ++c) {
        const std::size_t sc = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(margin),
                                                          0, static_cast<std::ptrdiff_t>(cube.width) - 1);
        out.reflectance[(b * out.height + r) * out.width + c] = cube.value(b, sr, sc);
      }
    }
  for (std::size_t r = 0; r < cube.height; ++r)
    for (std::size_t c = 0; c < cube.width; ++c)
      out.labels[(r + margin) * out.width + c + margin] = cube.labels[r * cube.width + c];
  return out;
}

/// Spatial window of a neighbouring-pixel block; the spectral extent is the
/// cube's full band count.
struct PatchSpec {
  std::size_t rows = 11;
  std::size_t cols = 11;

  void validate() const {
    if (rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0) {
      throw ConfigError("patch extents must be odd and positive, got " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
  }
  std::size_t margin() const { return (std::max(rows, cols) - 1) / 2; }
};

/// Labelled pixel, coordinates in the unpadded image.
struct PixelSample {
  std::size_t row = 0;
  std::size_t col = 0;
  int label = 0;
};

struct Patch {
  std::vector<float> values;  // [bands][rows][cols]
  int label = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Labelled pixels of the original image in row-major order.
inline std::vector<PixelSample> labeled_pixels(const HsiCube& cube) {
  std::vector<PixelSample> out;
  const std::size_t m = cube.margin;
  for (std::size_t r = m; r + m < cube.height; ++r)
    for (std::size_t c = m; c + m < cube.width; ++c) {
      const int l = cube.label(r, c);
      if (l != 0) out.push_back({r - m, c - m, l});
    }
  return out;
}

inline void require_padding(const HsiCube& cube, const PatchSpec& spec) {
  spec.validate();
  if (cube.margin < spec.margin()) {
    throw ConfigError("patch " + std::to_string(spec.rows) + "x" + std::to_string(spec.cols) + " needs edge padding >= " +
                      std::to_string(spec.margin()) + " but the cube is padded by " + std::to_string(cube.margin));
  }
}

/// Copies the block centred on `s` from a padded cube into `out`
/// ([bands][rows][cols]).
inline void fill_patch(const HsiCube& padded, const PatchSpec& spec, const PixelSample& s, float* out) {
  const std::size_t r0 = s.row + padded.margin - spec.rows / 2;
  const std::size_t c0 = s.col + padded.margin - spec.cols / 2;
  for (std::size_t b = 0; b < padded.bands; ++b)
    for (std::size_t r = 0; r < spec.rows; ++r) {
      const float* src = padded.reflectance.data() + (b * padded.height + r0 + r) * padded.width + c0;
      std::copy_n(src, spec.cols, out + (b * spec.rows + r) * spec.cols);
    }
}

/// One block per labelled pixel of a padded cube.
inline std::vector<Patch> extract_patches(const HsiCube& padded, const PatchSpec& spec) {
  require_padding(padded, spec);
  std::vector<Patch> out;
  for (const auto& s : labeled_pixels(padded)) {
    Patch p;
    p.values.resize(padded.bands * spec.rows * spec.cols);
    fill_patch(padded, spec, s, p.values.data());
    p.label = s.label;
    p.row = s.row;
    p.col = s.col;
    out.push_back(std::move(p));
  }
  return out;
}

struct SplitSpec {
  std::size_t train = 6;
  std::size_t val = 1;
  std::size_t test = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (train == 0 || val == 0 || test == 0) throw ConfigError("split ratios must all be positive");
  }
  std::string str() const {
    return std::to_string(train) + ":" + std::to_string(val) + ":" + std::to_string(test);
  }
};

/// Parses "a:b:c".
inline SplitSpec parse_split(const std::string& text) {
  SplitSpec s;
  std::size_t a = 0, b = 0, c = 0;
  char x = 0, y = 0;
  std::istringstream in(text);
  if (!(in >> a >> x >> b >> y >> c) || x != ':' || y != ':' || !in.eof()) {
    throw ConfigError("split must look like 6:1:3, got '" + text + "'");
  }
  s.train = a;
  s.val = b;
  s.test = c;
  s.validate();
  return s;
}

/// Per-class counts under largest-remainder rounding of n * r_i / sum(r).
/// Ties go to the earlier part (train, then val, then test).
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitSpec& spec) {
  const std::array<std::size_t, 3> ratio{spec.train, spec.val, spec.test};
  const std::size_t total = spec.train + spec.val + spec.test;
  std::array<std::size_t, 3> count{}, rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    count[i] = n * ratio[i] / total;
    rem[i] = n * ratio[i] % total;
    assigned += count[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++count[order[k % 3]];
  return count;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Stratified partition of sample indices. `labels[i]` is the 1-based class of
/// sample i; every class 1..classes must occur.
inline Split stratified_split(std::span<const int> labels, std::size_t classes, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || static_cast<std::size_t>(labels[i]) > classes) {
      throw DataError("sample " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " outside 1.." +
                      std::to_string(classes));
    }
    by_class[static_cast<std::size_t>(labels[i] - 1)].push_back(i);
  }
  Split out;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) throw DataError("class " + std::to_string(c + 1) + " has no samples to split");
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = split_counts(idx.size(), spec);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n[0]));
    out.val.insert(out.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n[0]),
                   idx.begin() + static_cast<std::ptrdiff_t>(n[0] + n[1]));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n[0] + n[1]), idx.end());
  }
  for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
  return out;
}

}  // namespace sgdsc
