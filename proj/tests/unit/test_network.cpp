#include <gtest/gtest.h>

#include <chrono>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sgdsc/network.hpp"
#include "sgdsc/optim.hpp"
#include "sgdsc/testing/oracles.hpp"

using namespace sgdsc;
using sgdsc::testing::random_tensor;

namespace {

NetworkConfig small_config(std::uint64_t seed = 0) {
  NetworkConfig c;
  c.stage_blocks = {2, 2, 1};
  c.k0 = 4;
  c.groups = 2;
  c.snake_length = 5;
  c.num_classes = 3;
  c.input_patch = {8, 7, 7};
  c.seed = seed;
  return c;
}

Tensor patch_batch(const NetworkConfig& c, std::size_t n, std::mt19937_64& rng) {
  return random_tensor({n, 1, c.input_patch.bands, c.input_patch.rows, c.input_patch.cols}, rng);
}

}  // namespace

TEST(NetworkConfig, BaseGrowthRates) {
  const auto base = NetworkConfig::base();
  EXPECT_EQ(base.stage_blocks, (std::vector<std::size_t>{4, 6, 8}));
  EXPECT_EQ(base.growth_rates(), (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_EQ(base.groups, 4u);
  EXPECT_EQ(base.compression, 16u);
  EXPECT_EQ(base.fusion.m, 4u);
  EXPECT_EQ(NetworkConfig::large().stage_blocks, (std::vector<std::size_t>{14, 14, 14}));
}

TEST(NetworkConfig, ValidationNamesFailingConstraint) {
  auto c = small_config();
  c.groups = 3;
  try {
    validate(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("groups = 3 must divide k0 = 4"), std::string::npos) << e.what();
  }
  c = small_config();
  c.fusion.m = 5;
  EXPECT_THROW(validate(c), ConfigError);
  c = small_config();
  c.snake_length = 4;
  EXPECT_THROW(validate(c), ConfigError);
  c = small_config();
  c.stage_blocks = {};
  EXPECT_THROW(validate(c), ConfigError);
  c = small_config();
  c.fusion.p = 0.1;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(BuildModel, BaseStructure) {
  const auto model = build_model(NetworkConfig::base());
  const auto growth = model.config.growth_rates();
  std::vector<std::size_t> per_stage(3, 0);
  for (std::size_t i = 0; i < model.nodes.size(); ++i) {
    const auto& nd = model.nodes[i];
    // Full density: sources are exactly the nodes before this one.
    std::vector<std::size_t> want(i);
    std::iota(want.begin(), want.end(), std::size_t{0});
    EXPECT_EQ(nd.sources, want) << nd.name;
    std::size_t in = 0;
    for (std::size_t s : nd.sources) in += model.nodes[s].out_channels;
    if (nd.kind != NodeKind::Stem) EXPECT_EQ(nd.in_channels, in) << nd.name;
    if (nd.kind == NodeKind::Dense) {
      EXPECT_EQ(nd.out_channels, growth[nd.stage]) << nd.name;
      ++per_stage[nd.stage];
    }
  }
  EXPECT_EQ(per_stage, (std::vector<std::size_t>{4, 6, 8}));
  EXPECT_EQ(model.nodes.front().kind, NodeKind::Stem);
  EXPECT_EQ(model.nodes.front().out_channels, 16u);
}

TEST(BuildModel, StageExtentsAndTransitions) {
  const auto model = build_model(NetworkConfig::base());
  ASSERT_EQ(model.stage_extents.size(), 3u);
  EXPECT_EQ(model.stage_extents[0], (Extent3{200, 11, 11}));
  EXPECT_EQ(model.stage_extents[1], (Extent3{100, 5, 5}));
  EXPECT_EQ(model.stage_extents[2], (Extent3{50, 2, 2}));
  std::size_t transitions = 0;
  for (const auto& nd : model.nodes) {
    if (nd.kind != NodeKind::Transition) continue;
    ++transitions;
    EXPECT_EQ(nd.input_stage + 1, nd.stage);
    EXPECT_GE(nd.out_channels, model.config.growth_rates()[nd.stage]);
    EXPECT_EQ(nd.out_channels % model.config.groups, 0u);
  }
  EXPECT_EQ(transitions, 2u);
}

TEST(BuildModel, BlockChannelArithmetic) {
  // Inputs to the first layer after a block of n layers of growth k grew by n * k.
  const auto model = build_model(NetworkConfig::base());
  const auto& nodes = model.nodes;
  // Stage 0: stem (16) then 4 layers of 8 -> the first transition sees 16 + 4 * 8.
  std::size_t first_transition = 0;
  while (nodes[first_transition].kind != NodeKind::Transition) ++first_transition;
  EXPECT_EQ(nodes[first_transition].in_channels, 16u + 4u * 8u);
  EXPECT_EQ(nodes[1].in_channels, 16u);
  EXPECT_EQ(nodes[4].in_channels, 16u + 3u * 8u);
}

TEST(BuildModel, LastStageLayerReadsEarlierStagesDownsampled) {
  const auto model = build_model(small_config());
  const auto& last = model.nodes.back();
  ASSERT_EQ(last.kind, NodeKind::Dense);
  ASSERT_EQ(last.stage, 2u);
  std::vector<bool> seen(3, false);
  for (std::size_t s : last.sources) seen[model.nodes[s].stage] = true;
  EXPECT_TRUE(seen[0] && seen[1] && seen[2]);
  // Pooling a stage-0 map down to stage 2 lands on the stage-2 extents.
  Tensor x = Tensor::zeros({1, 2, 8, 7, 7});
  const Tensor pooled = pool_to_stage(model, x, 0, 2);
  const Extent3 e = model.stage_extents[2];
  EXPECT_EQ(pooled.shape(), (Shape{1, 2, e[0], e[1], e[2]}));
}

TEST(CountParams, SmallCases) {
  const std::vector<Tensor> one{Tensor::zeros({1, 1, 1, 1, 1})};
  EXPECT_EQ(count_params(std::span<const Tensor>(one)), 1u);

  const auto base = count_params(build_model(NetworkConfig::base()));
  const auto large = count_params(build_model(NetworkConfig::large()));
  EXPECT_GT(large, base);
  auto wide = NetworkConfig::base();
  wide.k0 = 16;
  EXPECT_GT(count_params(build_model(wide)), 2 * base);
}

TEST(CountParams, MatchesNamedTensorSum) {
  const auto model = build_model(small_config());
  std::size_t total = 0;
  for (const auto& [name, t] : model.named_tensors()) {
    if (t.requires_grad()) total += t.numel();
  }
  EXPECT_EQ(count_params(model), total);
}

TEST(Forward, BaseConfigLogitShape) {
  auto model = build_model(NetworkConfig::base());
  std::mt19937_64 rng(1);
  const Tensor logits = forward_eval(model, patch_batch(model.config, 1, rng));
  EXPECT_EQ(logits.shape(), (Shape{1, 16}));
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, EvalIsDeterministicAndRowwise) {
  auto model = build_model(small_config(3));
  std::mt19937_64 rng(2);
  const Tensor one = patch_batch(model.config, 1, rng);
  std::vector<float> twice = one.values();
  twice.insert(twice.end(), one.values().begin(), one.values().end());
  const Tensor batch({2, 1, 8, 7, 7}, twice);
  const Tensor a = forward_eval(model, batch);
  const Tensor b = forward_eval(model, batch);
  EXPECT_EQ(a.values(), b.values());
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a[j], a[3 + j]);
}

TEST(Forward, RejectsWrongPatchShape) {
  auto model = build_model(small_config());
  EXPECT_THROW(forward_eval(model, Tensor::zeros({1, 1, 8, 7, 6})), ShapeError);
  EXPECT_THROW(forward_eval(model, Tensor::zeros({1, 8, 7, 7})), ShapeError);
}

TEST(Forward, TrainingRequiresFusionRng) {
  auto model = build_model(small_config());
  std::mt19937_64 rng(3);
  EXPECT_THROW(forward(model, patch_batch(model.config, 2, rng), true, nullptr), ConfigError);
}

TEST(Forward, OneAdamStepReducesLossOnFixedBatch) {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = build_model(small_config(seed));
    std::mt19937_64 rng(100 + seed);
    const Tensor batch = patch_batch(model.config, 6, rng);
    const std::vector<int> labels{0, 1, 2, 0, 1, 2};
    auto loss_at = [&](bool step) {
      std::mt19937_64 fusion(seed);  // same template subsets before and after the step
      Tensor loss = softmax_cross_entropy(forward(model, batch, true, &fusion), labels);
      if (step) {
        auto params = model.parameters();
        AdamState adam;
        backward(loss);
        adam_step(params, adam);
        zero_grads(params);
      }
      return loss.item();
    };
    const float before = loss_at(true);
    const float after = loss_at(false);
    decreased += after < before ? 1 : 0;
  }
  EXPECT_GE(decreased, 9);
}

TEST(Forward, TapeCoversEveryParameterKind) {
  auto cfg = small_config(4);
  cfg.fusion.p = 1.0;  // every view contributes
  auto model = build_model(cfg);
  std::mt19937_64 rng(5);
  const std::vector<int> labels{0, 1};
  backward(softmax_cross_entropy(forward(model, patch_batch(cfg, 2, rng), true, &rng), labels));
  for (const auto& [name, t] : model.named_tensors()) {
    if (t.requires_grad()) EXPECT_TRUE(t.has_grad()) << name;
  }
}
