#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"

namespace xsub {

struct DatasetDescriptor {
  std::string name;
  Shape shape;  // [H,W,C]
  std::size_t classes = 0;
  std::vector<double> means;
  std::vector<double> stds;

  std::size_t channels() const { return shape.size() == 3 ? shape[2] : 1; }
  std::size_t features() const { return shape_size(shape); }

  void validate() const {
    require(classes >= 2, "dataset needs at least two classes");
    require(means.size() == channels() && stds.size() == channels(),
            "descriptor needs one mean and one std per channel");
    for (double s : stds)
      require(s > 0.0 && std::isfinite(s), "descriptor stds must be strictly positive");
  }

  friend bool operator==(const DatasetDescriptor&, const DatasetDescriptor&) = default;
};

namespace presets {

inline DatasetDescriptor cifar10() {
  return {"cifar10", {32, 32, 3}, 10, {0.4914, 0.4822, 0.4465}, {0.2023, 0.1994, 0.2010}};
}

inline DatasetDescriptor imagenette() {
  return {"imagenette", {128, 128, 3}, 10, {0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};
}

/// Raw [0,1] pixels, no standardization.
inline DatasetDescriptor mnist() { return {"mnist", {28, 28, 1}, 10, {0.0}, {1.0}}; }

}  // namespace presets

enum class Split { train, test };

struct Dataset {
  std::vector<Sample> samples;
  DatasetDescriptor descriptor;
  Split split = Split::train;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline Tensor normalize(const Tensor& x, const DatasetDescriptor& desc) {
  require(x.shape() == desc.shape,
          "normalize: tensor shape " + shape_string(x.shape()) + " vs descriptor " + shape_string(desc.shape));
  const std::size_t c = desc.channels();
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (x[i] - desc.means[i % c]) / desc.stds[i % c];
  return out;
}

inline Tensor denormalize(const Tensor& x, const DatasetDescriptor& desc) {
  require(x.shape() == desc.shape,
          "denormalize: tensor shape " + shape_string(x.shape()) + " vs descriptor " + shape_string(desc.shape));
  const std::size_t c = desc.channels();
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] * desc.stds[i % c] + desc.means[i % c];
  return out;
}

inline Dataset normalize(const Dataset& ds) {
  Dataset out{{}, ds.descriptor, ds.split};
  out.samples.reserve(ds.size());
  for (const auto& s : ds.samples)
    out.samples.push_back({normalize(s.data, ds.descriptor), s.label});
  return out;
}

// ---------------------------------------------------------------------------
// Binary loaders
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::file, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off, const std::string& what) {
  if (off + 4 > buf.size()) fail(ErrorKind::format, what + ": truncated header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
         std::uint32_t{buf[off + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair. Pixels are scaled to [0,1]; the class
/// count is inferred from the labels unless `classes` is given.
inline Dataset load_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path,
                        std::size_t classes = 0) {
  const auto img = detail::read_file(image_path);
  const auto lab = detail::read_file(label_path);

  if (detail::read_be32(img, 0, image_path.string()) != kIdxImageMagic)
    fail(ErrorKind::format, image_path.string() + ": bad IDX image magic");
  if (detail::read_be32(lab, 0, label_path.string()) != kIdxLabelMagic)
    fail(ErrorKind::format, label_path.string() + ": bad IDX label magic");

  const std::size_t count = detail::read_be32(img, 4, image_path.string());
  const std::size_t rows = detail::read_be32(img, 8, image_path.string());
  const std::size_t cols = detail::read_be32(img, 12, image_path.string());
  const std::size_t label_count = detail::read_be32(lab, 4, label_path.string());

  if (label_count != count)
    fail(ErrorKind::format, "IDX image count " + std::to_string(count) + " != label count " +
                                std::to_string(label_count));
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + count * pixels) fail(ErrorKind::format, image_path.string() + ": truncated payload");
  if (lab.size() < 8 + count) fail(ErrorKind::format, label_path.string() + ": truncated payload");

  std::size_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i)
    max_label = std::max<std::size_t>(max_label, lab[8 + i]);
  if (classes == 0) classes = std::max<std::size_t>(2, max_label + 1);
  if (max_label >= classes) fail(ErrorKind::format, "IDX label " + std::to_string(max_label) + " out of range");

  Dataset ds;
  ds.descriptor = {"idx", {rows, cols, 1}, classes, {0.0}, {1.0}};
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(pixels);
    const unsigned char* p = img.data() + 16 + i * pixels;
    for (std::size_t j = 0; j < pixels; ++j)
      v[j] = p[j] / 255.0;
    ds.samples.push_back({Tensor({rows, cols, 1}, std::move(v)), lab[8 + i]});
  }
  return ds;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads a CIFAR-10 binary batch. Planar R,G,B records become [32,32,3].
inline Dataset load_cifar10_binary(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  if (buf.empty() || buf.size() % kCifarRecordBytes != 0)
    fail(ErrorKind::format, path.string() + ": size " + std::to_string(buf.size()) + " is not a multiple of 3073");

  Dataset ds;
  ds.descriptor = presets::cifar10();
  const std::size_t n = buf.size() / kCifarRecordBytes;
  ds.samples.reserve(n);
  constexpr std::size_t plane = 32 * 32;
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = buf.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) fail(ErrorKind::format, "record " + std::to_string(r) + ": label byte " + std::to_string(rec[0]));
    std::vector<double> v(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        v[p * 3 + c] = rec[1 + c * plane + p] / 255.0;
    ds.samples.push_back({Tensor({32, 32, 3}, std::move(v)), rec[0]});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Isotropic unit-variance Gaussian classes centred at `separation` times an
/// orthonormal direction per class. Directions are drawn from the seed, so
/// class evidence is spread over all features rather than a few axes.
/// Samples are interleaved by class.
inline Dataset synth_gaussians(std::size_t n_per_class, const Shape& shape, std::size_t classes, double separation,
                               std::uint64_t seed) {
  const std::size_t d = shape_size(shape);
  require(d >= 1, "synthetic feature count must be >= 1");
  require(classes >= 2, "synthetic data needs at least two classes");
  require(classes <= d, "synthetic data needs classes <= features for orthonormal centres");
  require(separation > 0.0 && std::isfinite(separation), "separation must be > 0");

  RngStream dir_rng(seed, "synth/directions");
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < classes) {
    std::vector<double> v(d);
    for (auto& x : v)
      x = dir_rng.normal();
    for (const auto& u : dirs) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        dot += v[i] * u[i];
      for (std::size_t i = 0; i < d; ++i)
        v[i] -= dot * u[i];
    }
    double norm = 0.0;
    for (double x : v)
      norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : v)
      x /= norm;
    dirs.push_back(std::move(v));
  }

  Dataset ds;
  std::vector<double> zeros(shape.size() == 3 ? shape[2] : 1, 0.0);
  std::vector<double> ones(zeros.size(), 1.0);
  ds.descriptor = {"synthetic", shape, classes, zeros, ones};
  ds.samples.reserve(n_per_class * classes);
  RngStream rng(seed, "synth/samples");
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> v(d);
      for (std::size_t j = 0; j < d; ++j)
        v[j] = separation * dirs[c][j] + rng.normal();
      ds.samples.push_back({Tensor(shape, std::move(v)), c});
    }
  }
  return ds;
}

inline Dataset synth_gaussians(std::size_t n_per_class, std::size_t d, std::size_t classes, double separation,
                               std::uint64_t seed) {
  return synth_gaussians(n_per_class, Shape{d}, classes, separation, seed);
}

/// Deterministic split by stream order: the first `train_fraction` of the
/// samples become the training set.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double train_fraction = 0.8) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "train fraction must lie in (0,1)");
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ds.size())));
  Dataset train{{ds.samples.begin(), ds.samples.begin() + static_cast<std::ptrdiff_t>(cut)}, ds.descriptor, Split::train};
  Dataset test{{ds.samples.begin() + static_cast<std::ptrdiff_t>(cut), ds.samples.end()}, ds.descriptor, Split::test};
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Image export
// ---------------------------------------------------------------------------

/// Writes a normalized tensor as binary PGM (1 channel) or PPM (3 channels)
/// after denormalizing and clipping to [0,255].
inline void write_pnm(const std::filesystem::path& path, const Tensor& x, const DatasetDescriptor& desc) {
  require(desc.shape.size() == 3, "image export needs an [H,W,C] descriptor");
  const std::size_t h = desc.shape[0], w = desc.shape[1], c = desc.shape[2];
  require(c == 1 || c == 3, "image export supports 1 or 3 channels");
  const Tensor raw = denormalize(x, desc);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::file, "cannot write " + path.string());
  out << (c == 1 ? "P5\n" : "P6\n") << w << " " << h << "\n255\n";
  std::vector<char> bytes(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(raw[i] * 255.0, 0.0, 255.0))));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::file, "short write to " + path.string());
}

}  // namespace xsub
