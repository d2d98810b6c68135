#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "sgdsc/hsidata.hpp"

using namespace sgdsc;
namespace fs = std::filesystem;

namespace {

HsiCube make_cube(std::size_t h, std::size_t w, std::size_t b, std::size_t classes, std::uint64_t seed) {
  HsiCube c;
  c.height = h;
  c.width = w;
  c.bands = b;
  c.classes = classes;
  for (std::size_t i = 0; i < classes; ++i) c.class_names.push_back("class" + std::to_string(i + 1));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 5.0f);
  c.reflectance.resize(h * w * b);
  for (auto& v : c.reflectance) v = u(rng);
  c.labels.resize(h * w);
  for (std::size_t i = 0; i < h * w; ++i) c.labels[i] = static_cast<std::uint16_t>(i % (classes + 1));
  return c;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("sgdsc_hsidata_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void rewrite_header(const fs::path& dir, const std::string& key, const nlohmann::json& value) {
  nlohmann::json h;
  std::ifstream(dir / "header.json") >> h;
  if (value.is_null()) {
    h.erase(key);
  } else {
    h[key] = value;
  }
  std::ofstream(dir / "header.json", std::ios::trunc) << h.dump();
}

template <class E>
std::string message_of(const fs::path& dir) {
  try {
    load_cube(dir);
  } catch (const E& e) {
    return e.what();
  }
  return "<no error>";
}

}  // namespace

TEST(Container, RoundTripIsExact) {
  TempDir tmp;
  auto cube = make_cube(4, 5, 3, 2, 1);
  cube.band_wavelengths = {0.4, 0.5, 0.6};
  save_cube(cube, tmp.path());
  EXPECT_EQ(load_cube(tmp.path()), cube);
  EXPECT_EQ(fs::file_size(tmp.path() / "cube.f32"), 4u * 5u * 3u * 4u);
  EXPECT_EQ(fs::file_size(tmp.path() / "labels.u16"), 4u * 5u * 2u);
}

TEST(Container, PayloadIsLittleEndianBandSequential) {
  TempDir tmp;
  auto cube = make_cube(2, 3, 2, 1, 2);
  save_cube(cube, tmp.path());
  std::ifstream in(tmp.path() / "cube.f32", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  // Element (band 1, row 1, col 2) sits at offset (1 * 6 + 1 * 3 + 2) * 4.
  const std::size_t off = (1 * 6 + 1 * 3 + 2) * 4;
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | bytes[off + static_cast<std::size_t>(i)];
  EXPECT_EQ(std::bit_cast<float>(bits), cube.value(1, 1, 2));
}

TEST(Container, TruncatedPayloadReportsByteCounts) {
  TempDir tmp;
  save_cube(make_cube(3, 3, 2, 1, 3), tmp.path());
  fs::resize_file(tmp.path() / "cube.f32", 70);
  const auto msg = message_of<DataError>(tmp.path());
  EXPECT_NE(msg.find("70 bytes"), std::string::npos) << msg;
  EXPECT_NE(msg.find("72 bytes"), std::string::npos) << msg;
}

TEST(Container, DistinctDiagnostics) {
  TempDir tmp;
  const auto cube = make_cube(3, 3, 2, 2, 4);
  save_cube(cube, tmp.path());
  rewrite_header(tmp.path(), "version", 2);
  EXPECT_NE(message_of<DataError>(tmp.path()).find("version"), std::string::npos);

  save_cube(cube, tmp.path());
  rewrite_header(tmp.path(), "dtype", "f64le");
  EXPECT_NE(message_of<DataError>(tmp.path()).find("dtype"), std::string::npos);

  save_cube(cube, tmp.path());
  rewrite_header(tmp.path(), "bands", nullptr);
  EXPECT_NE(message_of<DataError>(tmp.path()).find("'bands'"), std::string::npos);

  auto bad = cube;
  bad.reflectance[1 * 9 + 2 * 3 + 1] = std::nanf("");
  save_cube(bad, tmp.path());
  EXPECT_NE(message_of<DataError>(tmp.path()).find("band 1, row 2, col 1"), std::string::npos);

  bad = cube;
  bad.labels[4] = 3;
  save_cube(bad, tmp.path());
  EXPECT_NE(message_of<DataError>(tmp.path()).find("label 3"), std::string::npos);

  EXPECT_THROW(load_cube(tmp.path() / "missing"), IoError);
}

TEST(Container, IndianPinesShapeWhenAvailable) {
  const char* dir = std::getenv("SGDSC_INDIAN_PINES_DIR");
  if (!dir) GTEST_SKIP() << "SGDSC_INDIAN_PINES_DIR not set";
  const auto cube = load_cube(dir);
  EXPECT_EQ(cube.height, 145u);
  EXPECT_EQ(cube.width, 145u);
  EXPECT_EQ(cube.bands, 200u);
  EXPECT_EQ(cube.classes, 16u);
  EXPECT_EQ(cube.labeled_count(), 10249u);
  const PatchSpec spec{11, 11};
  EXPECT_EQ(extract_patches(pad_edges(cube, spec.margin()), spec).size(), 10249u);
}

TEST(Normalize, ZeroMeanUnitStdAndIdempotent) {
  auto cube = make_cube(6, 7, 4, 2, 5);
  // Band 2 constant.
  std::fill_n(cube.reflectance.begin() + 2 * 42, 42, 3.25f);
  const auto once = normalize(cube);
  for (std::size_t b = 0; b < 4; ++b) {
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < 42; ++i) s += once.reflectance[b * 42 + i];
    const double mu = s / 42;
    for (std::size_t i = 0; i < 42; ++i) ss += std::pow(once.reflectance[b * 42 + i] - mu, 2);
    EXPECT_NEAR(mu, 0.0, 1e-4);
    if (b == 2) {
      for (std::size_t i = 0; i < 42; ++i) EXPECT_EQ(once.reflectance[b * 42 + i], 0.0f);
    } else {
      EXPECT_NEAR(std::sqrt(ss / 42), 1.0, 1e-4);
    }
  }
  const auto twice = normalize(once);
  for (std::size_t i = 0; i < once.reflectance.size(); ++i) EXPECT_NEAR(twice.reflectance[i], once.reflectance[i], 1e-4);
  EXPECT_EQ(once.labels, cube.labels);
}

TEST(PadEdges, ExtentsAndReplication) {
  const auto cube = make_cube(145, 145, 1, 3, 6);
  const auto padded = pad_edges(cube, 5);
  EXPECT_EQ(padded.height, 155u);
  EXPECT_EQ(padded.width, 155u);
  EXPECT_EQ(padded.value(0, 0, 0), cube.value(0, 0, 0));
  EXPECT_EQ(padded.value(0, 154, 154), cube.value(0, 144, 144));
  EXPECT_EQ(padded.value(0, 2, 100), cube.value(0, 0, 95));
  EXPECT_EQ(padded.label(0, 0), 0);
  EXPECT_EQ(padded.label(5, 6), cube.label(0, 1));
  EXPECT_EQ(padded.labeled_count(), cube.labeled_count());
  EXPECT_EQ(pad_edges(cube, 0), cube);
}

TEST(PadEdges, MarginsCompose) {
  const auto cube = make_cube(5, 4, 2, 2, 7);
  EXPECT_EQ(pad_edges(pad_edges(cube, 2), 3), pad_edges(cube, 5));
}

TEST(Patches, OnePerLabelledPixelCentredOnIt) {
  const auto cube = make_cube(6, 5, 3, 4, 8);
  const PatchSpec spec{5, 3};
  const auto padded = pad_edges(cube, spec.margin());
  const auto patches = extract_patches(padded, spec);
  EXPECT_EQ(patches.size(), cube.labeled_count());
  for (const auto& p : patches) {
    EXPECT_EQ(p.label, cube.label(p.row, p.col));
    EXPECT_NE(p.label, 0);
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(p.values[(b * 5 + 2) * 3 + 1], cube.value(b, p.row, p.col));
    }
  }
}

TEST(Patches, CornerPatchDrawsReplicatedBorder) {
  HsiCube c;
  c.height = c.width = 3;
  c.bands = 1;
  c.classes = 1;
  c.class_names = {"a"};
  c.reflectance = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  c.labels = {1, 0, 0, 0, 0, 0, 0, 0, 0};
  const auto patches = extract_patches(pad_edges(c, 1), PatchSpec{3, 3});
  ASSERT_EQ(patches.size(), 1u);
  EXPECT_EQ(patches[0].values, (std::vector<float>{1, 1, 2, 1, 1, 2, 4, 4, 5}));
}

TEST(Patches, AllOnesCubeAndInsufficientPadding) {
  auto cube = make_cube(4, 4, 2, 1, 9);
  std::fill(cube.reflectance.begin(), cube.reflectance.end(), 1.0f);
  for (const auto& p : extract_patches(pad_edges(cube, 3), PatchSpec{7, 7}))
    for (float v : p.values) EXPECT_EQ(v, 1.0f);
  EXPECT_THROW(extract_patches(pad_edges(cube, 2), PatchSpec{7, 7}), ConfigError);
  EXPECT_THROW(PatchSpec({4, 5}).validate(), ConfigError);
}

TEST(Split, CountsFollowLargestRemainder) {
  const SplitSpec s;
  EXPECT_EQ(split_counts(100, s), (std::array<std::size_t, 3>{60, 10, 30}));
  EXPECT_EQ(split_counts(10, s), (std::array<std::size_t, 3>{6, 1, 3}));
  // 7 * 6/10 = 4.2, 7 * 1/10 = 0.7, 7 * 3/10 = 2.1: floors 4,0,2 and the one
  // remaining sample goes to the largest remainder (val).
  EXPECT_EQ(split_counts(7, s), (std::array<std::size_t, 3>{4, 1, 2}));
  // A lone sample goes to the part with the largest remainder, train (6/10).
  EXPECT_EQ(split_counts(1, s), (std::array<std::size_t, 3>{1, 0, 0}));
}

TEST(Split, ParseSplit) {
  const auto s = parse_split("8:1:1");
  EXPECT_EQ(s.train, 8u);
  EXPECT_EQ(s.str(), "8:1:1");
  EXPECT_THROW(parse_split("6-1-3"), ConfigError);
  EXPECT_THROW(parse_split("6:0:3"), ConfigError);
  EXPECT_THROW(parse_split("6:1:3:1"), ConfigError);
}

TEST(Split, DisjointExhaustiveStratifiedReproducible) {
  std::mt19937_64 rng(10);
  std::vector<int> labels(503);
  for (auto& l : labels) l = static_cast<int>(rng() % 5) + 1;
  SplitSpec spec;
  spec.seed = 42;
  const auto a = stratified_split(labels, 5, spec);
  const auto b = stratified_split(labels, 5, spec);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);

  std::set<std::size_t> all;
  for (const auto* part : {&a.train, &a.val, &a.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), labels.size());
  EXPECT_EQ(a.train.size() + a.val.size() + a.test.size(), labels.size());

  for (int c = 1; c <= 5; ++c) {
    const auto n = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
    auto in = [&](const std::vector<std::size_t>& part) {
      return static_cast<std::size_t>(
          std::count_if(part.begin(), part.end(), [&](std::size_t i) { return labels[i] == c; }));
    };
    EXPECT_EQ((std::array<std::size_t, 3>{in(a.train), in(a.val), in(a.test)}), split_counts(n, spec)) << c;
  }
  spec.seed = 43;
  EXPECT_NE(stratified_split(labels, 5, spec).train, a.train);
}

TEST(Split, EmptyClassIsNamed) {
  const std::vector<int> labels{1, 1, 3};
  try {
    stratified_split(labels, 3, SplitSpec{});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 2"), std::string::npos) << e.what();
  }
}

TEST(SubsampleBands, KeepsEveryStepBand) {
  auto cube = make_cube(2, 2, 7, 1, 11);
  cube.band_wavelengths = {1, 2, 3, 4, 5, 6, 7};
  const auto s = subsample_bands(cube, 3);
  EXPECT_EQ(s.bands, 3u);
  EXPECT_EQ(s.band_wavelengths, (std::vector<double>{1, 4, 7}));
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(s.value(b, 1, 0), cube.value(b * 3, 1, 0));
  EXPECT_EQ(subsample_bands(cube, 1), cube);
  EXPECT_THROW(subsample_bands(cube, 0), ConfigError);
}
