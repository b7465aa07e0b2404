#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "xsub/data.hpp"

using namespace xsub;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("xsub_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8)
    b.push_back(static_cast<unsigned char>(v >> s));
}

void write(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  be32(b, magic);
  be32(b, n);
  be32(b, rows);
  be32(b, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i)
    b.push_back(static_cast<unsigned char>(i % 256));
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t n, std::uint32_t magic = 0x801) {
  std::vector<unsigned char> b;
  be32(b, magic);
  be32(b, n);
  for (std::uint32_t i = 0; i < n; ++i)
    b.push_back(static_cast<unsigned char>(i % 10));
  return b;
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no xsub::Error thrown";
  return ErrorKind::invalid_argument;
}

/// Plain batch-gradient logistic regression, kept separate from the library
/// trainer. Returns training accuracy.
double logistic_fit_accuracy(const Dataset& ds) {
  const std::size_t d = ds.samples.front().data.size();
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (const auto& s : ds.samples) {
      double z = b;
      for (std::size_t j = 0; j < d; ++j)
        z += w[j] * s.data[j];
      const double err = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(s.label);
      for (std::size_t j = 0; j < d; ++j)
        gw[j] += err * s.data[j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j)
      w[j] -= 0.1 * gw[j] / static_cast<double>(ds.size());
    b -= 0.1 * gb / static_cast<double>(ds.size());
  }
  std::size_t hits = 0;
  for (const auto& s : ds.samples) {
    double z = b;
    for (std::size_t j = 0; j < d; ++j)
      z += w[j] * s.data[j];
    hits += static_cast<std::size_t>(z > 0) == s.label;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

}  // namespace

TEST(Idx, LoadsTwoImages) {
  TempDir dir;
  write(dir / "img", idx_images(2, 28, 28));
  write(dir / "lab", idx_labels(2));
  const auto ds = load_idx(dir / "img", dir / "lab");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.samples[0].data.shape(), (Shape{28, 28, 1}));
  EXPECT_EQ(ds.samples[1].label, 1u);
}

TEST(Idx, ScalesBytesToUnitInterval) {
  TempDir dir;
  write(dir / "img", idx_images(1, 16, 16));  // bytes 0..255 in order
  write(dir / "lab", idx_labels(1));
  const auto ds = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(ds.samples[0].data[0], 0.0);
  EXPECT_EQ(ds.samples[0].data[255], 1.0);
  for (double v : ds.samples[0].data.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Idx, CountMismatchIsFormatError) {
  TempDir dir;
  write(dir / "img", idx_images(2, 28, 28));
  write(dir / "lab", idx_labels(3));
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab"); }), ErrorKind::format);
}

TEST(Idx, BadMagicIsFormatError) {
  TempDir dir;
  write(dir / "img", idx_images(2, 28, 28, 0x802));
  write(dir / "lab", idx_labels(2));
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab"); }), ErrorKind::format);
  write(dir / "img", idx_images(2, 28, 28));
  write(dir / "lab", idx_labels(2, 0x803));
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab"); }), ErrorKind::format);
}

TEST(Idx, TruncatedIsFormatError) {
  TempDir dir;
  auto img = idx_images(2, 28, 28);
  img.resize(img.size() - 10);
  write(dir / "img", img);
  write(dir / "lab", idx_labels(2));
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab"); }), ErrorKind::format);
  write(dir / "img", {0, 0, 8});
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab"); }), ErrorKind::format);
}

TEST(Idx, SameBytesSameDataset) {
  TempDir dir;
  write(dir / "img", idx_images(3, 4, 4));
  write(dir / "lab", idx_labels(3));
  const auto a = load_idx(dir / "img", dir / "lab");
  const auto b = load_idx(dir / "img", dir / "lab");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].data, b.samples[i].data);
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
  }
}

TEST(Idx, MissingFileIsFileError) {
  EXPECT_EQ(kind_of([] { load_idx("/nonexistent/img", "/nonexistent/lab"); }), ErrorKind::file);
}

namespace {

std::vector<unsigned char> cifar_records(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  for (auto l : labels) {
    b.push_back(l);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p)
        b.push_back(static_cast<unsigned char>(c == 0 ? 255 : c == 1 ? p % 256 : 0));
  }
  return b;
}

}  // namespace

TEST(Cifar, TwoRecords) {
  TempDir dir;
  const auto bytes = cifar_records({7, 2});
  ASSERT_EQ(bytes.size(), 6146u);
  write(dir / "batch.bin", bytes);
  const auto ds = load_cifar10_binary(dir / "batch.bin");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.samples[0].data.shape(), (Shape{32, 32, 3}));
  EXPECT_EQ(ds.samples[0].label, 7u);
  EXPECT_EQ(ds.samples[1].label, 2u);
}

TEST(Cifar, PlanarToInterleaved) {
  TempDir dir;
  write(dir / "batch.bin", cifar_records({0}));
  const auto& x = load_cifar10_binary(dir / "batch.bin").samples[0].data;
  // pixel 5: R plane 255, G plane 5, B plane 0
  EXPECT_EQ(x[5 * 3 + 0], 1.0);
  EXPECT_DOUBLE_EQ(x[5 * 3 + 1], 5.0 / 255.0);
  EXPECT_EQ(x[5 * 3 + 2], 0.0);
}

TEST(Cifar, ShortFileIsFormatError) {
  TempDir dir;
  write(dir / "batch.bin", std::vector<unsigned char>(3072, 0));
  EXPECT_EQ(kind_of([&] { load_cifar10_binary(dir / "batch.bin"); }), ErrorKind::format);
}

TEST(Cifar, LabelAboveNineIsFormatError) {
  TempDir dir;
  write(dir / "batch.bin", cifar_records({10}));
  EXPECT_EQ(kind_of([&] { load_cifar10_binary(dir / "batch.bin"); }), ErrorKind::format);
}

TEST(Normalize, CifarRedMeanMapsToZero) {
  const auto desc = presets::cifar10();
  std::vector<double> v(32 * 32 * 3, 0.5);
  v[0] = 0.4914;
  const auto n = normalize(Tensor({32, 32, 3}, v), desc);
  EXPECT_NEAR(n[0], 0.0, 1e-12);
  EXPECT_NEAR(n[1], (0.5 - 0.4822) / 0.1994, 1e-12);
}

TEST(Normalize, HalfMeanHalfStd) {
  const DatasetDescriptor desc{"t", {1, 1, 1}, 2, {0.5}, {0.5}};
  EXPECT_DOUBLE_EQ(normalize(Tensor({1, 1, 1}, {1.0}), desc)[0], 1.0);
}

TEST(Normalize, RoundTrip) {
  RngStream rng(11, "roundtrip");
  for (const auto& desc : {presets::cifar10(), presets::imagenette(), presets::mnist()}) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> v(shape_size(desc.shape));
      for (auto& x : v)
        x = rng.uniform();
      const Tensor x(desc.shape, v);
      const auto back = denormalize(normalize(x, desc), desc);
      for (std::size_t i = 0; i < x.size(); ++i)
        ASSERT_NEAR(back[i], x[i], 1e-6);
    }
  }
}

TEST(Normalize, ShapeMismatch) {
  EXPECT_EQ(kind_of([] { normalize(Tensor({4}, {0, 0, 0, 0}), presets::mnist()); }), ErrorKind::invalid_argument);
}

TEST(Synth, SizesAndDeterminism) {
  const auto a = synth_gaussians(100, 8, 2, 4.0, 7);
  const auto b = synth_gaussians(100, 8, 2, 4.0, 7);
  ASSERT_EQ(a.size(), 200u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a.samples[i].data, b.samples[i].data);
    ASSERT_EQ(a.samples[i].label, b.samples[i].label);
  }
  const auto c = synth_gaussians(100, 8, 2, 4.0, 8);
  EXPECT_NE(a.samples[0].data, c.samples[0].data);
}

TEST(Synth, LinearlySeparable) {
  const auto ds = synth_gaussians(100, 8, 2, 4.0, 7);
  EXPECT_GE(logistic_fit_accuracy(ds), 0.99);
}

TEST(Synth, ZeroSeparationRejected) {
  EXPECT_EQ(kind_of([] { synth_gaussians(10, 8, 2, 0.0, 1); }), ErrorKind::invalid_argument);
}

TEST(Synth, SplitIsEightyTwenty) {
  const auto ds = synth_gaussians(250, Shape{8, 8, 1}, 4, 4.0, 1);
  const auto [train, test] = split_train_test(ds);
  EXPECT_EQ(train.size(), 800u);
  EXPECT_EQ(test.size(), 200u);
  EXPECT_EQ(train.samples.front().data, ds.samples.front().data);
  EXPECT_EQ(test.samples.front().data, ds.samples[800].data);
}

TEST(Pnm, WritesHeaderAndBytes) {
  TempDir dir;
  const DatasetDescriptor desc{"t", {2, 2, 1}, 2, {0.0}, {1.0}};
  write_pnm(dir / "x.pgm", Tensor({2, 2, 1}, {0.0, 1.0, 2.0, -1.0}), desc);
  std::ifstream in(dir / "x.pgm", std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(content.substr(0, 11), "P5\n2 2\n255\n");
  ASSERT_EQ(content.size(), 15u);
  EXPECT_EQ(static_cast<unsigned char>(content[11]), 0);
  EXPECT_EQ(static_cast<unsigned char>(content[12]), 255);
  EXPECT_EQ(static_cast<unsigned char>(content[13]), 255);
  EXPECT_EQ(static_cast<unsigned char>(content[14]), 0);
}
