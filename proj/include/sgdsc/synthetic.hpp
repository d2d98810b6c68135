#pragma once

// Synthetic scenes in the container layout, for tests and smoke runs when no
// real data is at hand.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sgdsc/hsidata.hpp"

namespace sgdsc {

struct SyntheticSceneSpec {
  std::size_t height = 24;
  std::size_t width = 24;
  std::size_t bands = 200;
  std::size_t classes = 16;
  std::size_t labeled_per_class = 5;
  float noise = 0.02f;
  std::uint64_t seed = 2024;
};

/// Scene tiled into one rectangular region per class, laid out on the
/// smallest square grid that fits. Each class has a smooth reflectance curve
/// (a few Gaussian absorption features over a sloped baseline); pixels get
/// that curve scaled by a brightness factor plus white noise. The first
/// `labeled_per_class` pixels of each region, in a fixed scatter, carry the
/// class label; all others are unlabelled.
inline HsiCube make_synthetic_scene(const SyntheticSceneSpec& spec) {
  if (spec.classes == 0 || spec.bands == 0) throw ConfigError("synthetic scene needs bands and classes");
  std::size_t grid = 1;
  while (grid * grid < spec.classes) ++grid;
  if (spec.height < grid || spec.width < grid) throw ConfigError("synthetic scene too small for its class grid");
  const std::size_t cell_h = spec.height / grid, cell_w = spec.width / grid;
  if (cell_h * cell_w < spec.labeled_per_class) throw ConfigError("class regions too small for the labelled count");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, spec.noise);

  HsiCube cube;
  cube.height = spec.height;
  cube.width = spec.width;
  cube.bands = spec.bands;
  cube.classes = spec.classes;
  for (std::size_t c = 0; c < spec.classes; ++c) cube.class_names.push_back("synthetic-" + std::to_string(c + 1));
  for (std::size_t b = 0; b < spec.bands; ++b) {
    cube.band_wavelengths.push_back(0.4 + 2.1 * static_cast<double>(b) / static_cast<double>(spec.bands));
  }

  std::vector<std::vector<float>> curves(spec.classes, std::vector<float>(spec.bands));
  for (auto& curve : curves) {
    const float base = 0.2f + 0.4f * u(rng), slope = u(rng) - 0.5f;
    struct Feature {
      float centre, width, depth;
    };
    std::vector<Feature> features(3);
    for (auto& f : features) f = {u(rng), 0.03f + 0.1f * u(rng), 0.3f * u(rng)};
    for (std::size_t b = 0; b < spec.bands; ++b) {
      const float t = static_cast<float>(b) / static_cast<float>(spec.bands);
      float v = base + 0.3f * slope * t;
      for (const auto& f : features) v -= f.depth * std::exp(-0.5f * std::pow((t - f.centre) / f.width, 2.0f));
      curve[b] = v;
    }
  }

  cube.reflectance.resize(spec.bands * spec.height * spec.width);
  cube.labels.assign(spec.height * spec.width, 0);
  std::vector<std::size_t> labeled(spec.classes, 0);
  for (std::size_t r = 0; r < spec.height; ++r)
    for (std::size_t c = 0; c < spec.width; ++c) {
      const std::size_t gr = std::min(r / cell_h, grid - 1), gc = std::min(c / cell_w, grid - 1);
      const std::size_t region = gr * grid + gc;
      const std::size_t cls = region % spec.classes;
      const float gain = 0.9f + 0.2f * u(rng);
      for (std::size_t b = 0; b < spec.bands; ++b) {
        cube.reflectance[(b * spec.height + r) * spec.width + c] = gain * curves[cls][b] + noise(rng);
      }
      // Scatter: every other pixel of the region interior, row-major.
      const std::size_t lr = r - gr * cell_h, lc = c - gc * cell_w;
      const bool interior = lr > 0 && lc > 0 && lr + 1 < cell_h && lc + 1 < cell_w;
      if (region < spec.classes && interior && (lr + lc) % 2 == 0 && labeled[cls] < spec.labeled_per_class) {
        cube.labels[r * spec.width + c] = static_cast<std::uint16_t>(cls + 1);
        ++labeled[cls];
      }
    }
  for (std::size_t c = 0; c < spec.classes; ++c) {
    if (labeled[c] < spec.labeled_per_class) throw ConfigError("class regions too small for the labelled count");
  }
  return cube;
}

}  // namespace sgdsc
