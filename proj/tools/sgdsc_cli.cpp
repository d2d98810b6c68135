// Command-line front end: train, eval, map, selftest, synth.
//
// Exit status is 0 on success, the ErrorCategory value for library errors,
// 1 when selftest finds a failing check and 64 on unexpected exceptions.
// Malformed arguments exit with the configuration code.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "sgdsc/sgdsc.hpp"
#include "sgdsc/synthetic.hpp"
#include "sgdsc/testing/oracles.hpp"

using namespace sgdsc;
namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::optional<fs::path> config, data;
  std::optional<std::size_t> patch, epochs, band_step, batch;
  std::optional<std::string> split;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  fs::path out;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config ? load_train_config(*a.config) : TrainConfig{};
  if (a.data) cfg.data_dir = *a.data;
  if (cfg.data_dir.empty()) throw ConfigError("train: --data or a config with a \"data\" entry is required");
  if (a.split) cfg.split = parse_split(*a.split);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (a.band_step) cfg.band_step = *a.band_step;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.lr) cfg.lr = *a.lr;
  const HsiCube cube = load_cube(cfg.data_dir);
  if (a.patch) {
    cfg.patch = {*a.patch, *a.patch};
  } else if (!a.config) {
    const std::size_t p = default_patch_size(cube);
    cfg.patch = {p, p};
  }
  cfg.validate();
  std::cerr << "training on " << cfg.data_dir << ": " << cube.height << "x" << cube.width << "x" << cube.bands
            << ", patch " << cfg.patch.rows << "x" << cfg.patch.cols << ", split " << cfg.split.str() << ", seed "
            << cfg.seed << '\n';
  const auto result = train(cube, cfg, a.out, [](const EpochLog& e) {
    std::fprintf(stderr, "epoch %3zu  loss %.6f  train OA %.4f  val OA %.4f  %.1f s\n", e.epoch, e.train_loss,
                 e.train_oa, e.val_oa, e.seconds);
  });
  std::cout << to_json(result).dump(2) << '\n';
  return 0;
}

int run_eval(const fs::path& ckpt, const std::string& part, const std::optional<fs::path>& json,
             const std::optional<fs::path>& data) {
  const auto report = evaluate(ckpt, parse_split_part(part), data);
  const std::string text = to_json(report).dump(2);
  if (json) {
    if (json->has_parent_path()) fs::create_directories(json->parent_path());
    std::ofstream out(*json);
    if (!out) throw IoError("cannot write " + json->string());
    out << text << '\n';
  }
  std::cout << text << '\n';
  return 0;
}

int run_map(const fs::path& ckpt, const fs::path& out, const std::optional<fs::path>& data) {
  Checkpoint ck = load_checkpoint(ckpt);
  const TrainConfig cfg = checkpoint_train_config(ck);
  const auto map = predict_map(ck, load_cube(data.value_or(cfg.data_dir)));
  write_ppm(map, out);
  std::cout << "wrote " << map.width << "x" << map.height << " class map to " << out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// selftest

bool check(const std::string& name, double value, double tol) {
  const bool ok = value < tol;
  std::printf("%s %-48s %.2e (< %.0e)\n", ok ? "PASS" : "FAIL", name.c_str(), value, tol);
  return ok;
}

Tensor probe(const Tensor& y) {
  std::mt19937_64 rng(97);
  return sum(mul(y, testing::random_tensor(y.shape(), rng)));
}

SnakeKernelSpec spec_for(SnakeAxis axis, std::size_t length, std::size_t cin, std::size_t cout) {
  SnakeKernelSpec s;
  s.axis = axis;
  s.length = length;
  s.in_channels = cin;
  s.out_channels = cout;
  return s;
}

int run_selftest() {
  bool ok = true;
  std::mt19937_64 rng(1);
  const SnakeAxis axes[] = {SnakeAxis::X, SnakeAxis::Y, SnakeAxis::Spectral};

  {
    std::vector<Tensor> in{testing::random_tensor({2, 4, 3, 4, 4}, rng), testing::random_tensor({4, 2, 3, 3, 3}, rng)};
    Conv3dOptions opt{2, {1, 1, 2}, {1, 1, 1}};
    ok &= check("grad conv3d", grad_check([&] { return probe(conv3d(in[0], in[1], opt)); }, in).max_rel_error, 1e-3);
  }
  {
    BatchNorm bn = BatchNorm::make(2);
    std::vector<Tensor> in{testing::random_tensor({3, 2, 2, 2, 2}, rng), bn.gamma, bn.beta};
    ok &= check("grad batch_norm", grad_check([&] { return probe(batch_norm(in[0], bn, true)); }, in).max_rel_error,
                1e-3);
  }
  {
    const std::vector<int> labels{1, 0, 2};
    ok &= check("grad softmax_cross_entropy",
                grad_check([&](const Tensor& x) { return softmax_cross_entropy(x, labels); },
                           testing::random_tensor({3, 3}, rng))
                    .max_rel_error,
                1e-3);
  }
  for (SnakeAxis axis : axes) {
    const auto s = spec_for(axis, 5, 2, 2);
    const Tensor off = testing::random_tensor({1, s.offset_channels(), 3, 4, 4}, rng);
    std::vector<Tensor> in{testing::random_tensor({1, 2, 3, 4, 4}, rng),
                           testing::random_tensor({2, 2, s.spectral_taps(), 5}, rng)};
    ok &= check(std::string("grad snake sampling ") + to_string(axis),
                grad_check([&] { return probe(snake_sample_conv(in[0], off, in[1], s)); }, in, 1e-2).max_rel_error,
                1e-3);
  }

  float oracle = 0, straight = 0, conv = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const auto s = spec_for(axes[trial % 3], 2 * (1 + rng() % 4) + 1, 1 + rng() % 3, 1 + rng() % 3);
    const std::size_t d = 1 + rng() % 5, h = 1 + rng() % 5, w = 1 + rng() % 5;
    const Tensor x = testing::random_tensor({1, s.in_channels, d, h, w}, rng);
    const Tensor wt = testing::random_tensor({s.out_channels, s.in_channels, s.spectral_taps(), s.length}, rng);
    const Tensor off = testing::random_tensor({1, s.offset_channels(), d, h, w}, rng);
    oracle = std::max(oracle, testing::max_abs_diff(snake_sample_conv(x, off, wt, s),
                                                    testing::snake_conv_oracle(x, off, wt, s)));
    const Tensor zero = Tensor::zeros({1, s.offset_channels(), d, h, w});
    straight = std::max(straight, testing::max_abs_diff(snake_sample_conv(x, zero, wt, s),
                                                        testing::straight_conv_reference(x, wt, s)));
    const Tensor k = testing::random_tensor({2, s.in_channels, 3, 3, 3}, rng);
    Conv3dOptions opt;
    opt.padding = {1, 1, 1};
    conv = std::max(conv, testing::max_abs_diff(conv3d(x, k, opt), testing::conv3d_oracle(x, k, 1, {1, 1, 1},
                                                                                           {1, 1, 1})));
  }
  ok &= check("oracle snake sampling (30 cases)", oracle, 1e-5);
  ok &= check("oracle zero-offset straight kernel (30 cases)", straight, 1e-5);
  ok &= check("oracle conv3d (30 cases)", conv, 1e-5);
  std::puts(ok ? "selftest passed" : "selftest FAILED");
  return ok ? 0 : 1;
}

int run_synth(const fs::path& out, const SyntheticSceneSpec& spec) {
  save_cube(make_synthetic_scene(spec), out);
  std::cout << "wrote " << spec.height << "x" << spec.width << "x" << spec.bands << " synthetic scene with "
            << spec.classes << " classes to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Snake-convolution DenseNet for hyperspectral patch classification"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write the best-validation checkpoint");
  train_cmd->add_option("--config", ta.config, "TrainConfig JSON; flags below override its fields")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", ta.data, "Dataset container directory");
  train_cmd->add_option("--patch", ta.patch, "Odd spatial patch size (default depends on the scene)");
  train_cmd->add_option("--split", ta.split, "train:val:test ratios, e.g. 6:1:3");
  train_cmd->add_option("--epochs", ta.epochs, "Maximum epochs");
  train_cmd->add_option("--seed", ta.seed, "Run seed");
  train_cmd->add_option("--band-step", ta.band_step, "Keep every n-th band");
  train_cmd->add_option("--batch", ta.batch, "Mini-batch size");
  train_cmd->add_option("--lr", ta.lr, "Adam learning rate");
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();

  fs::path ckpt, map_out;
  std::string part = "test";
  std::optional<fs::path> json, data;
  auto* eval_cmd = app.add_subcommand("eval", "Report OA, AA, kappa and per-class accuracy");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", part, "Split part: train, val or test");
  eval_cmd->add_option("--json", json, "Write the report to this file as well");
  eval_cmd->add_option("--data", data, "Dataset directory (default: the one used for training)");

  auto* map_cmd = app.add_subcommand("map", "Write a PPM class map of all labelled pixels");
  map_cmd->add_option("--ckpt", ckpt, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  map_cmd->add_option("--out", map_out, "Output image (.ppm)")->required();
  map_cmd->add_option("--data", data, "Dataset directory (default: the one used for training)");

  auto* selftest_cmd = app.add_subcommand("selftest", "Run gradient checks and oracle comparisons");

  fs::path synth_out;
  SyntheticSceneSpec synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic scene in container form");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--height", synth.height);
  synth_cmd->add_option("--width", synth.width);
  synth_cmd->add_option("--bands", synth.bands);
  synth_cmd->add_option("--classes", synth.classes);
  synth_cmd->add_option("--labeled-per-class", synth.labeled_per_class);
  synth_cmd->add_option("--seed", synth.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version exit 0; malformed arguments count as configuration errors.
    return app.exit(e) == 0 ? 0 : static_cast<int>(ErrorCategory::Config);
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*eval_cmd) return run_eval(ckpt, part, json, data);
    if (*map_cmd) return run_map(ckpt, map_out, data);
    if (*selftest_cmd) return run_selftest();
    if (*synth_cmd) return run_synth(synth_out, synth);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 64;
  }
  return 0;
}
