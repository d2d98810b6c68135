#pragma once

// Fully dense 3D-DenseNet with multi-view snake fusion layers.
//
// The graph is a flat list of nodes: a stem convolution on the raw patch,
// then for each stage its dense layers, with a transition node between
// stages. Every node after the stem consumes the channel concatenation of
// ALL earlier nodes, each average-pooled down to the consumer's resolution.
// Stage s layers emit 2^s * k0 channels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgdsc/fusion.hpp"
#include "sgdsc/ops_conv.hpp"
#include "sgdsc/ops_nn.hpp"
#include "sgdsc/snake.hpp"
#include "sgdsc/tensor.hpp"

namespace sgdsc {

/// Patch extents in tensor order: bands (L), rows (M), columns (N).
struct PatchShape {
  std::size_t bands = 200;
  std::size_t rows = 11;
  std::size_t cols = 11;
  bool operator==(const PatchShape&) const = default;
};

struct NetworkConfig {
  std::vector<std::size_t> stage_blocks{4, 6, 8};
  std::size_t k0 = 8;
  std::size_t groups = 4;
  std::size_t compression = 16;
  std::size_t bottleneck_factor = 4;
  std::size_t snake_length = 9;
  FusionConfig fusion{};
  std::size_t num_classes = 16;
  PatchShape input_patch{};
  std::uint64_t seed = 0;

  static NetworkConfig base() { return NetworkConfig{}; }
  static NetworkConfig large() {
    NetworkConfig cfg;
    cfg.stage_blocks = {14, 14, 14};
    return cfg;
  }

  /// Growth rate of stage m (0-based) is 2^m * k0.
  std::vector<std::size_t> growth_rates() const {
    std::vector<std::size_t> k;
    for (std::size_t m = 0; m < stage_blocks.size(); ++m) k.push_back((std::size_t{1} << m) * k0);
    return k;
  }

  std::size_t stem_channels() const { return 2 * k0; }
};

enum class NodeKind { Stem, Dense, Transition };

struct NodeInfo {
  NodeKind kind = NodeKind::Dense;
  std::size_t stage = 0;        // resolution of this node's output
  std::size_t input_stage = 0;  // resolution at which sources are concatenated
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<std::size_t> sources;  // node indices; the stem reads the raw patch
  std::string name;
};

struct DenseLayerParams {
  BatchNorm norm;
  Tensor bottleneck;  // [4k, in/groups, 1, 1, 1]
  std::vector<TemplateView> views;
};

struct TransitionParams {
  BatchNorm norm;
  Tensor conv;  // [out, in, 1, 1, 1]
};

struct ModelParams {
  NetworkConfig config;
  std::vector<NodeInfo> nodes;
  std::vector<Extent3> stage_extents;  // (bands, rows, cols) per stage
  std::vector<Extent3> pool_windows;   // window from stage s to s + 1
  Tensor stem_weight;
  std::vector<DenseLayerParams> dense;
  std::vector<TransitionParams> transitions;
  std::vector<std::size_t> slot;  // node -> index into dense / transitions
  BatchNorm head_norm;
  Tensor fc_weight;
  Tensor fc_bias;

  std::vector<Tensor> parameters() const;
  /// Every persistent tensor (parameters and running statistics) by stable name.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  for (auto& v : t.mutable_data()) v = dist(rng);
  t.set_requires_grad();
  return t;
}

inline std::size_t round_up(std::size_t v, std::size_t multiple) { return (v + multiple - 1) / multiple * multiple; }

inline void append_bn(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const BatchNorm& bn) {
  out.emplace_back(prefix + ".gamma", bn.gamma);
  out.emplace_back(prefix + ".beta", bn.beta);
  out.emplace_back(prefix + ".running_mean", bn.running_mean);
  out.emplace_back(prefix + ".running_var", bn.running_var);
}

}  // namespace detail

inline void validate(const NetworkConfig& cfg) {
  if (cfg.stage_blocks.empty()) throw ConfigError("network: stage_blocks must not be empty");
  for (std::size_t b : cfg.stage_blocks) {
    if (b == 0) throw ConfigError("network: every stage needs at least one dense layer");
  }
  if (cfg.k0 == 0) throw ConfigError("network: k0 must be positive");
  if (cfg.groups == 0) throw ConfigError("network: groups must be positive");
  if (cfg.k0 % cfg.groups != 0) {
    throw ConfigError("network: groups = " + std::to_string(cfg.groups) + " must divide k0 = " + std::to_string(cfg.k0) +
                      " (growth rates and the stem width are multiples of k0)");
  }
  if (cfg.compression == 0) throw ConfigError("network: compression must be positive");
  if (cfg.bottleneck_factor == 0) throw ConfigError("network: bottleneck_factor must be positive");
  if (cfg.num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
  if (cfg.input_patch.bands == 0 || cfg.input_patch.rows == 0 || cfg.input_patch.cols == 0) {
    throw ConfigError("network: input patch extents must be positive");
  }
  cfg.fusion.validate();
  if (cfg.fusion.m > 4) {
    throw ConfigError("network: fusion m = " + std::to_string(cfg.fusion.m) +
                      " exceeds the template roster {x snake, y snake, spectral snake, straight}");
  }
  SnakeKernelSpec probe;
  probe.length = cfg.snake_length;
  probe.validate();
}

/// Builds the full graph and draws initial weights from cfg.seed.
inline ModelParams build_model(const NetworkConfig& cfg) {
  validate(cfg);
  ModelParams model;
  model.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  const auto growth = cfg.growth_rates();
  const std::size_t stages = cfg.stage_blocks.size();

  Extent3 ext{cfg.input_patch.bands, cfg.input_patch.rows, cfg.input_patch.cols};
  model.stage_extents.push_back(ext);
  for (std::size_t s = 0; s + 1 < stages; ++s) {
    Extent3 win{}, next{};
    for (int d = 0; d < 3; ++d) {
      win[d] = ext[d] < 2 ? 1 : 2;
      next[d] = (ext[d] - win[d]) / win[d] + 1;
    }
    model.pool_windows.push_back(win);
    model.stage_extents.push_back(next);
    ext = next;
  }

  std::size_t accumulated = 0;
  auto all_sources = [&](std::size_t upto) {
    std::vector<std::size_t> s(upto);
    for (std::size_t i = 0; i < upto; ++i) s[i] = i;
    return s;
  };

  NodeInfo stem;
  stem.kind = NodeKind::Stem;
  stem.in_channels = 1;
  stem.out_channels = cfg.stem_channels();
  stem.name = "stem";
  model.nodes.push_back(stem);
  model.slot.push_back(0);
  model.stem_weight = detail::he_normal({stem.out_channels, 1, 3, 3, 3}, 27, rng);
  accumulated = stem.out_channels;

  for (std::size_t s = 0; s < stages; ++s) {
    if (s > 0) {
      NodeInfo tr;
      tr.kind = NodeKind::Transition;
      tr.stage = s;
      tr.input_stage = s - 1;
      tr.in_channels = accumulated;
      tr.out_channels = detail::round_up(std::max(accumulated / cfg.compression, growth[s]), cfg.groups);
      tr.sources = all_sources(model.nodes.size());
      tr.name = "node" + std::to_string(model.nodes.size());
      TransitionParams tp;
      tp.norm = BatchNorm::make(accumulated);
      tp.conv = detail::he_normal({tr.out_channels, accumulated, 1, 1, 1}, accumulated, rng);
      model.slot.push_back(model.transitions.size());
      model.transitions.push_back(std::move(tp));
      model.nodes.push_back(tr);
      accumulated += tr.out_channels;
    }
    const std::size_t k = growth[s];
    const std::size_t width = cfg.bottleneck_factor * k;
    for (std::size_t l = 0; l < cfg.stage_blocks[s]; ++l) {
      if (accumulated % cfg.groups != 0) {
        throw ConfigError("network: groups = " + std::to_string(cfg.groups) + " does not divide " +
                          std::to_string(accumulated) + " input channels of layer " +
                          std::to_string(model.nodes.size()));
      }
      if (width % cfg.groups != 0) {
        throw ConfigError("network: groups = " + std::to_string(cfg.groups) + " does not divide bottleneck width " +
                          std::to_string(width));
      }
      NodeInfo nd;
      nd.kind = NodeKind::Dense;
      nd.stage = s;
      nd.input_stage = s;
      nd.in_channels = accumulated;
      nd.out_channels = k;
      nd.sources = all_sources(model.nodes.size());
      nd.name = "node" + std::to_string(model.nodes.size());

      DenseLayerParams dp;
      dp.norm = BatchNorm::make(accumulated);
      dp.bottleneck = detail::he_normal({width, accumulated / cfg.groups, 1, 1, 1}, accumulated / cfg.groups, rng);
      static constexpr SnakeAxis kRoster[] = {SnakeAxis::X, SnakeAxis::Y, SnakeAxis::Spectral};
      for (std::size_t v = 0; v < cfg.fusion.m; ++v) {
        TemplateView view;
        if (v < 3) {
          SnakeKernelSpec spec;
          spec.length = cfg.snake_length;
          spec.axis = kRoster[v];
          spec.in_channels = width;
          spec.out_channels = k;
          view.branches.emplace_back(SnakeConvLayer::make(spec, rng));
        } else {
          view.branches.emplace_back(StraightConv::make(width, k, cfg.groups, rng));
        }
        dp.views.push_back(std::move(view));
      }
      model.slot.push_back(model.dense.size());
      model.dense.push_back(std::move(dp));
      model.nodes.push_back(nd);
      accumulated += k;
    }
  }

  model.head_norm = BatchNorm::make(accumulated);
  model.fc_weight = Tensor::zeros({cfg.num_classes, accumulated});
  {
    std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(static_cast<float>(accumulated)));
    for (auto& v : model.fc_weight.mutable_data()) v = dist(rng);
  }
  model.fc_weight.set_requires_grad();
  model.fc_bias = Tensor::zeros({cfg.num_classes}).set_requires_grad();
  return model;
}

inline std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("stem.weight", stem_weight);
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const std::string p = nodes[i].name;
    if (nodes[i].kind == NodeKind::Transition) {
      const auto& t = transitions[slot[i]];
      detail::append_bn(out, p + ".norm", t.norm);
      out.emplace_back(p + ".conv", t.conv);
      continue;
    }
    const auto& d = dense[slot[i]];
    detail::append_bn(out, p + ".norm", d.norm);
    out.emplace_back(p + ".bottleneck", d.bottleneck);
    for (std::size_t v = 0; v < d.views.size(); ++v) {
      for (std::size_t b = 0; b < d.views[v].branches.size(); ++b) {
        const std::string q = p + ".view" + std::to_string(v) + ".branch" + std::to_string(b);
        if (const auto* s = std::get_if<SnakeConvLayer>(&d.views[v].branches[b])) {
          out.emplace_back(q + ".kernel", s->kernel_weights);
          out.emplace_back(q + ".offset_weight", s->offset_weight);
          out.emplace_back(q + ".offset_bias", s->offset_bias);
        } else {
          out.emplace_back(q + ".straight", std::get<StraightConv>(d.views[v].branches[b]).weight);
        }
      }
    }
  }
  detail::append_bn(out, "head.norm", head_norm);
  out.emplace_back("head.fc.weight", fc_weight);
  out.emplace_back("head.fc.bias", fc_bias);
  return out;
}

inline std::vector<Tensor> ModelParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

inline std::size_t count_params(const ModelParams& model) {
  const auto params = model.parameters();
  return count_params(std::span<const Tensor>(params));
}

/// Average-pools a stage-`from` feature map down to stage `to` resolution.
inline Tensor pool_to_stage(const ModelParams& model, Tensor x, std::size_t from, std::size_t to) {
  for (std::size_t s = from; s < to; ++s) {
    const Extent3 w = model.pool_windows.at(s);
    if (w != Extent3{1, 1, 1}) x = avg_pool3d(x, w, w);
  }
  return x;
}

/// Logits [N, num_classes] for a batch of patches [N, 1, L, M, N].
/// Training mode samples fusion subsets from `rng` and updates normalisation
/// statistics.
inline Tensor forward(ModelParams& model, const Tensor& batch, bool training, std::mt19937_64* rng = nullptr) {
  const auto& cfg = model.config;
  const Shape want{batch.dim() == 5 ? batch.size(0) : 0, 1, cfg.input_patch.bands, cfg.input_patch.rows,
                   cfg.input_patch.cols};
  if (batch.dim() != 5 || batch.shape() != want) {
    throw ShapeError("forward: batch " + shape_str(batch.shape()) + " does not match expected [N,1," +
                     std::to_string(cfg.input_patch.bands) + "," + std::to_string(cfg.input_patch.rows) + "," +
                     std::to_string(cfg.input_patch.cols) + "]");
  }
  if (batch.size(0) == 0) throw ShapeError("forward: empty batch");

  const std::size_t count = model.nodes.size();
  // resolved[i][s - stage(i)] is node i's output pooled to stage s.
  std::vector<std::vector<Tensor>> resolved(count);
  auto at_stage = [&](std::size_t i, std::size_t s) -> const Tensor& {
    auto& chain = resolved[i];
    const std::size_t base = model.nodes[i].stage;
    while (chain.size() <= s - base) {
      chain.push_back(pool_to_stage(model, chain.back(), base + chain.size() - 1, base + chain.size()));
    }
    return chain[s - base];
  };
  auto gather = [&](const NodeInfo& nd) {
    std::vector<Tensor> parts;
    parts.reserve(nd.sources.size());
    for (std::size_t src : nd.sources) parts.push_back(at_stage(src, nd.input_stage));
    return concat_channels(std::span<const Tensor>(parts));
  };

  Conv3dOptions same;
  same.padding = {1, 1, 1};
  resolved[0].push_back(conv3d(batch, model.stem_weight, same));

  for (std::size_t i = 1; i < count; ++i) {
    const NodeInfo& nd = model.nodes[i];
    const Tensor in = gather(nd);
    if (nd.kind == NodeKind::Transition) {
      auto& tp = model.transitions[model.slot[i]];
      Tensor h = relu(batch_norm(in, tp.norm, training));
      h = conv3d(h, tp.conv);
      resolved[i].push_back(pool_to_stage(model, h, nd.input_stage, nd.stage));
      continue;
    }
    auto& dp = model.dense[model.slot[i]];
    Tensor h = relu(batch_norm(in, dp.norm, training));
    Conv3dOptions grouped;
    grouped.groups = cfg.groups;
    h = conv3d(h, dp.bottleneck, grouped);
    resolved[i].push_back(multi_view_fusion(h, dp.views, cfg.fusion, training, rng));
  }

  const std::size_t last = model.stage_extents.size() - 1;
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < count; ++i) parts.push_back(at_stage(i, last));
  Tensor feats = concat_channels(std::span<const Tensor>(parts));
  feats = global_avg_pool(relu(batch_norm(feats, model.head_norm, training)));
  return linear(feats, model.fc_weight, model.fc_bias);
}

/// Eval-mode logits without recording a tape.
inline Tensor forward_eval(ModelParams& model, const Tensor& batch) {
  NoGradGuard guard;
  return forward(model, batch, false, nullptr);
}

/// Row-wise argmax (0-based class).
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.size(0), c = logits.size(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace sgdsc
