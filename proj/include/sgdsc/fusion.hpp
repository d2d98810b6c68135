#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sgdsc/ops_conv.hpp"
#include "sgdsc/snake.hpp"
#include "sgdsc/tensor.hpp"

namespace sgdsc {

struct FusionConfig {
  std::size_t m = 4;
  double p = 0.5;
  std::uint64_t seed = 0;

  /// floor(m * p), tolerant of binary rounding in the product.
  std::size_t retained() const { return static_cast<std::size_t>(std::floor(static_cast<double>(m) * p + 1e-9)); }

  void validate() const {
    if (m < 1) throw ConfigError("fusion: m must be >= 1");
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("fusion: p must lie in (0, 1], got " + std::to_string(p));
    if (retained() < 1) {
      throw ConfigError("fusion: floor(m * p) = 0 for m = " + std::to_string(m) + ", p = " + std::to_string(p) +
                        "; at least one template must be retained");
    }
  }
};

/// Plain (non-deformed) grouped 3x3x3 kernel used as the straight template.
struct StraightConv {
  Tensor weight;  // [Cout, Cin / groups, 3, 3, 3]
  std::size_t groups = 1;

  static StraightConv make(std::size_t in_channels, std::size_t out_channels, std::size_t groups,
                           std::mt19937_64& rng) {
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ConfigError("straight template: groups = " + std::to_string(groups) + " must divide in = " +
                        std::to_string(in_channels) + " and out = " + std::to_string(out_channels));
    }
    StraightConv conv;
    conv.groups = groups;
    const std::size_t cig = in_channels / groups;
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(cig * 27)));
    conv.weight = Tensor::zeros({out_channels, cig, 3, 3, 3});
    for (auto& v : conv.weight.mutable_data()) v = dist(rng);
    conv.weight.set_requires_grad();
    return conv;
  }
};

using TemplateBranch = std::variant<SnakeConvLayer, StraightConv>;

/// One morphological view. Its feature map is the sum of its branches, so an
/// (x-axis, y-axis) snake pair yields f(K_x) + f(K_y).
struct TemplateView {
  std::vector<TemplateBranch> branches;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& b : branches) {
      if (const auto* s = std::get_if<SnakeConvLayer>(&b)) {
        auto ps = s->parameters();
        out.insert(out.end(), ps.begin(), ps.end());
      } else {
        out.push_back(std::get<StraightConv>(b).weight);
      }
    }
    return out;
  }
};

struct TemplateSet {
  std::vector<Tensor> templates;
  std::size_t m() const { return templates.size(); }
};

inline Tensor apply_branch(const Tensor& x, const TemplateBranch& branch) {
  if (const auto* s = std::get_if<SnakeConvLayer>(&branch)) return snake_conv_forward(x, *s);
  const auto& c = std::get<StraightConv>(branch);
  Conv3dOptions opt;
  opt.groups = c.groups;
  opt.padding = {1, 1, 1};
  return conv3d(x, c.weight, opt);
}

inline Tensor apply_view(const Tensor& x, const TemplateView& view) {
  if (view.branches.empty()) throw ConfigError("template view has no branches");
  std::vector<Tensor> parts;
  parts.reserve(view.branches.size());
  for (const auto& b : view.branches) parts.push_back(apply_branch(x, b));
  if (parts.size() == 1) return parts[0];
  return add_n(parts);
}

namespace detail {
inline void check_template_shapes(const std::vector<Tensor>& ts) {
  for (std::size_t t = 1; t < ts.size(); ++t) {
    if (ts[t].shape() != ts[0].shape()) {
      throw ShapeError("build_templates: template " + std::to_string(t) + " has shape " + shape_str(ts[t].shape()) +
                       " but template 0 has " + shape_str(ts[0].shape()));
    }
  }
}
}  // namespace detail

/// Evaluates every view on x.
inline TemplateSet build_templates(const Tensor& x, std::span<const TemplateView> views) {
  if (views.empty()) throw ConfigError("build_templates: need at least one view");
  TemplateSet set;
  for (const auto& v : views) set.templates.push_back(apply_view(x, v));
  detail::check_template_shapes(set.templates);
  return set;
}

/// One template per snake layer.
inline TemplateSet build_templates(const Tensor& x, std::span<const SnakeConvLayer> layers) {
  std::vector<TemplateView> views;
  for (const auto& l : layers) views.push_back(TemplateView{{l}});
  return build_templates(x, std::span<const TemplateView>(views));
}

/// Uniform size-`keep` subset of {0..m-1} without replacement, ascending.
inline std::vector<std::size_t> sample_template_subset(std::size_t m, std::size_t keep, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Training-time fusion: the sum of floor(m * p) templates drawn uniformly
/// without replacement. Dropped templates get no gradient.
inline Tensor fuse_train(const TemplateSet& ts, const FusionConfig& cfg, std::mt19937_64& rng,
                         std::vector<std::size_t>* chosen = nullptr) {
  cfg.validate();
  if (ts.m() != cfg.m) {
    throw ConfigError("fuse_train: template set has " + std::to_string(ts.m()) + " templates, config m = " +
                      std::to_string(cfg.m));
  }
  const auto subset = sample_template_subset(cfg.m, cfg.retained(), rng);
  std::vector<Tensor> kept;
  for (std::size_t i : subset) kept.push_back(ts.templates[i]);
  if (chosen) *chosen = subset;
  return kept.size() == 1 ? kept[0] : add_n(kept);
}

/// Deterministic test-time fusion matching the training expectation: p times
/// the sum of all templates.
inline Tensor fuse_eval(const TemplateSet& ts, const FusionConfig& cfg) {
  cfg.validate();
  if (ts.m() != cfg.m) {
    throw ConfigError("fuse_eval: template set has " + std::to_string(ts.m()) + " templates, config m = " +
                      std::to_string(cfg.m));
  }
  if (cfg.p == 1.0) return ts.m() == 1 ? ts.templates[0] : add_n(ts.templates);
  return scale(ts.m() == 1 ? ts.templates[0] : add_n(ts.templates), static_cast<float>(cfg.p));
}

/// Network path: in training only the retained views are evaluated at all.
inline Tensor multi_view_fusion(const Tensor& x, std::span<const TemplateView> views, const FusionConfig& cfg,
                                bool training, std::mt19937_64* rng) {
  cfg.validate();
  if (views.size() != cfg.m) {
    throw ConfigError("multi_view_fusion: " + std::to_string(views.size()) + " views but m = " + std::to_string(cfg.m));
  }
  if (!training) return fuse_eval(build_templates(x, views), cfg);
  if (!rng) throw ConfigError("multi_view_fusion: training mode needs an RNG");
  const auto subset = sample_template_subset(cfg.m, cfg.retained(), *rng);
  std::vector<Tensor> kept;
  for (std::size_t i : subset) kept.push_back(apply_view(x, views[i]));
  detail::check_template_shapes(kept);
  return kept.size() == 1 ? kept[0] : add_n(kept);
}

}  // namespace sgdsc
