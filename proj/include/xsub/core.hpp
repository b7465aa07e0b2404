#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xsub {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorKind {
  invalid_argument,
  format,
  capacity,
  numerical,
  training,
  empty_class,
  config,
  file,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::format: return "format-error";
    case ErrorKind::capacity: return "capacity-error";
    case ErrorKind::numerical: return "numerical-error";
    case ErrorKind::training: return "training-error";
    case ErrorKind::empty_class: return "empty-class-error";
    case ErrorKind::config: return "config-error";
    case ErrorKind::file: return "file-error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major tensor of doubles. Image data is laid out as [H,W,C] so
/// that the channels of one pixel are contiguous.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    require(values_.size() == shape_size(shape_),
            "tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                shape_string(shape_));
    for (double v : values_)
      require(std::isfinite(v), "tensor values must be finite");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& vec() const noexcept { return values_; }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  /// Channels per spatial position: the last extent of a rank-3 tensor, 1 otherwise.
  std::size_t channels() const noexcept { return shape_.size() == 3 ? shape_[2] : 1; }
  std::size_t positions() const noexcept { return channels() ? size() / channels() : 0; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

struct Sample {
  Tensor data;
  std::size_t label = 0;
};

/// Flat index into the channel-aggregated grid. One position covers every
/// channel of a pixel.
struct Position {
  std::size_t index = 0;
  friend auto operator<=>(const Position&, const Position&) = default;
};

/// Sparse-support tensor used by the substitution arithmetic.
class Mask {
 public:
  explicit Mask(Shape shape) : values_(std::move(shape)) {}

  /// Copies every channel of `src` at position `from` into this mask at `to`.
  void set_from(std::size_t to, const Tensor& src, std::size_t from) {
    const std::size_t c = values_.channels();
    require(src.channels() == c, "mask and source channel counts differ");
    require(to < values_.positions() && from < src.positions(), "mask position out of range");
    for (std::size_t ch = 0; ch < c; ++ch)
      values_[to * c + ch] = src[from * c + ch];
    if (std::find(support_.begin(), support_.end(), Position{to}) == support_.end())
      support_.push_back(Position{to});
  }

  const Tensor& tensor() const noexcept { return values_; }
  const std::vector<Position>& support() const noexcept { return support_; }

 private:
  Tensor values_;
  std::vector<Position> support_;
};

// ---------------------------------------------------------------------------
// Attack configuration
// ---------------------------------------------------------------------------

enum class PlacementMode { paired, literal };

inline const char* to_string(PlacementMode m) { return m == PlacementMode::paired ? "paired" : "literal"; }

inline PlacementMode parse_placement(std::string_view s) {
  if (s == "paired") return PlacementMode::paired;
  if (s == "literal") return PlacementMode::literal;
  fail(ErrorKind::invalid_argument, "unknown placement mode '" + std::string(s) + "'");
}

struct AttackConfig {
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t k = 1;
  PlacementMode placement = PlacementMode::paired;
  bool clamp = false;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  std::size_t golden_set_size = 32;
  std::uint64_t seed = 1;
  double poison_fraction = 0.10;
  /// Backdoor only: train poisoned copies with the substitute class as label.
  bool flip_poison_labels = false;

  void validate(std::size_t position_count) const {
    require(std::isfinite(alpha) && alpha >= 0.0, "alpha must be >= 0");
    require(std::isfinite(beta) && beta >= 0.0, "beta must be >= 0");
    require(k >= 1, "k must be positive");
    require(k <= position_count,
            "k=" + std::to_string(k) + " exceeds position count " + std::to_string(position_count));
    require(golden_set_size >= 1, "golden_set_size must be >= 1");
    require(poison_fraction >= 0.0 && poison_fraction <= 1.0, "poison_fraction must lie in [0,1]");
    require(clamp_lo <= clamp_hi, "clamp range is empty");
  }
};

// ---------------------------------------------------------------------------
// Deterministic RNG streams
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// xoshiro256** generator keyed by (master seed, label). Distribution code
/// is local so sequences do not depend on the standard library vendor.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view label) : seed_(seed), label_(label) {
    std::uint64_t sm = seed;
    sm = splitmix64(sm) ^ fnv1a(label);
    for (auto& s : s_)
      s = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }

  RngStream substream(std::string_view child) const {
    return RngStream(seed_, label_ + "/" + std::string(child));
  }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection.
  std::size_t below(std::size_t n) {
    require(n > 0, "below(0)");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return static_cast<std::size_t>(r % bound);
  }

  /// Standard normal via Box-Muller (no cached second value).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0)
      u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[below(i)]);
  }

  /// `k` distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    require(k <= n, "cannot draw more items than available");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i)
      std::swap(idx[i], idx[i + below(n - i)]);
    idx.resize(k);
    return idx;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::string label_;
  std::uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// Ranking and mask arithmetic
// ---------------------------------------------------------------------------

/// The `k` largest entries of `agg` in descending order; ties go to the
/// lower flat index.
inline std::vector<Position> top_k_positions(std::span<const double> agg, std::size_t k) {
  require(k <= agg.size(), "k=" + std::to_string(k) + " exceeds " + std::to_string(agg.size()) + " positions");
  for (double v : agg)
    require(std::isfinite(v), "aggregated explanation contains non-finite values");
  std::vector<std::size_t> order(agg.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) { return agg[a] > agg[b] || (agg[a] == agg[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  std::vector<Position> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(Position{order[i]});
  return out;
}

inline std::vector<Position> top_k_positions(const Tensor& agg, std::size_t k) {
  return top_k_positions(agg.values(), k);
}

/// x - alpha * subtract + beta * add. Clipping into [lo, hi] touches only the
/// entries inside the mask supports.
inline Tensor apply_mask_arithmetic(const Tensor& x, const Tensor& subtract, const Tensor& add, double alpha,
                                    double beta, bool clamp, double lo = 0.0, double hi = 1.0) {
  require(x.shape() == subtract.shape() && x.shape() == add.shape(),
          "mask arithmetic shape mismatch: " + shape_string(x.shape()) + " vs " + shape_string(subtract.shape()) +
              " / " + shape_string(add.shape()));
  Tensor out = x;
  if (alpha == 0.0 && beta == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (subtract[i] == 0.0 && add[i] == 0.0) continue;
    double v = x[i] - alpha * subtract[i] + beta * add[i];
    if (clamp) v = std::clamp(v, lo, hi);
    out[i] = v;
  }
  return out;
}

}  // namespace xsub
