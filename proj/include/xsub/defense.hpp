#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "core.hpp"
#include "model.hpp"

namespace xsub {

inline constexpr double kMadFloor = 1e-9;
inline constexpr double kDetectionQuantile = 0.99;
inline constexpr std::size_t kMinCalibration = 100;

/// Robust statistics of Gram entries for the samples predicted as one class.
struct ClassStatistics {
  std::vector<double> median;
  std::vector<double> mad;
  std::size_t count = 0;

  friend bool operator==(const ClassStatistics&, const ClassStatistics&) = default;
};

struct CleanReference {
  std::map<std::size_t, ClassStatistics> classes;
  std::size_t calibration_size = 0;
  double threshold = 0.0;
  double epsilon = kMadFloor;

  friend bool operator==(const CleanReference&, const CleanReference&) = default;
};

struct DetectionResult {
  double score = 0.0;
  bool flagged = false;
  std::size_t sample = 0;
};

/// Upper triangle (row-major, diagonal included) of the first-order Gram
/// matrix h h^T of one activation vector.
inline std::vector<double> gram_entries(std::span<const double> h) {
  std::vector<double> out;
  out.reserve(h.size() * (h.size() + 1) / 2);
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = i; j < h.size(); ++j)
      out.push_back(h[i] * h[j]);
  return out;
}

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Nearest-rank percentile: the ceil(q*n)-th smallest value.
inline double nearest_rank(std::vector<double> v, double q) {
  require(!v.empty(), "percentile of an empty set");
  require(q > 0.0 && q <= 1.0, "quantile must lie in (0,1]");
  std::sort(v.begin(), v.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()) - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

/// max_e |entry_e - median_e| / (MAD_e + epsilon)
inline double deviation_score(const ClassStatistics& stats, std::span<const double> entries, double epsilon = kMadFloor) {
  require(entries.size() == stats.median.size(), "Gram entry count does not match the reference");
  double score = 0.0;
  for (std::size_t e = 0; e < entries.size(); ++e)
    score = std::max(score, std::abs(entries[e] - stats.median[e]) / (stats.mad[e] + epsilon));
  return score;
}

/// Calibrates from precomputed Gram entries, one vector per sample, grouped
/// by `classes`. The threshold is the nearest-rank 99th percentile of the
/// calibration samples' own scores.
inline CleanReference calibrate_entries(const std::vector<std::vector<double>>& entries,
                                        const std::vector<std::size_t>& classes) {
  require(entries.size() == classes.size(), "one class per calibration sample is required");
  require(entries.size() >= kMinCalibration,
          "calibration needs at least " + std::to_string(kMinCalibration) + " clean samples, got " +
              std::to_string(entries.size()));
  const std::size_t width = entries.front().size();
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    require(entries[i].size() == width, "calibration Gram entries have inconsistent widths");
    groups[classes[i]].push_back(i);
  }

  CleanReference ref;
  ref.calibration_size = entries.size();
  std::vector<double> column;
  for (const auto& [cls, members] : groups) {
    ClassStatistics st;
    st.count = members.size();
    st.median.resize(width);
    st.mad.resize(width);
    for (std::size_t e = 0; e < width; ++e) {
      column.clear();
      for (auto i : members)
        column.push_back(entries[i][e]);
      const double med = median_of(column);
      for (auto& v : column)
        v = std::abs(v - med);
      st.median[e] = med;
      st.mad[e] = median_of(column);
    }
    ref.classes.emplace(cls, std::move(st));
  }

  std::vector<double> scores(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i)
    scores[i] = deviation_score(ref.classes.at(classes[i]), entries[i], ref.epsilon);
  ref.threshold = nearest_rank(std::move(scores), kDetectionQuantile);
  return ref;
}

inline std::vector<std::vector<double>> activation_gram_entries(const Classifier& f, const std::vector<Sample>& samples) {
  std::vector<std::vector<double>> out;
  if (samples.empty()) return out;
  const Matrix h = f.penultimate(stack_rows(samples));
  out.reserve(samples.size());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const Vector row = h.row(i).transpose();
    out.push_back(gram_entries(std::span<const double>(row.data(), static_cast<std::size_t>(row.size()))));
  }
  return out;
}

/// Per predicted class statistics of penultimate-activation Gram entries.
inline CleanReference calibrate(const Classifier& f, const std::vector<Sample>& clean) {
  require(clean.size() >= kMinCalibration, "calibration needs at least " + std::to_string(kMinCalibration) +
                                               " clean samples, got " + std::to_string(clean.size()));
  return calibrate_entries(activation_gram_entries(f, clean), predict_labels(f, clean));
}

inline DetectionResult score_entries(const CleanReference& ref, std::span<const double> entries, std::size_t cls,
                                     std::size_t sample = 0) {
  auto it = ref.classes.find(cls);
  require(it != ref.classes.end(), "class " + std::to_string(cls) + " has no calibration statistics");
  DetectionResult r;
  r.score = deviation_score(it->second, entries, ref.epsilon);
  r.flagged = r.score > ref.threshold;
  r.sample = sample;
  return r;
}

/// Scores one input against the statistics of its predicted class.
inline DetectionResult score(const CleanReference& ref, const Classifier& f, const Tensor& x, std::size_t sample = 0) {
  const auto pred = predict(f, x);
  const Matrix h = f.penultimate(as_row(x).transpose());
  const auto entries = gram_entries(std::span<const double>(h.data(), static_cast<std::size_t>(h.size())));
  return score_entries(ref, entries, pred.label, sample);
}

inline double detection_rate(const std::vector<DetectionResult>& results) {
  require(!results.empty(), "detection rate of an empty result list");
  const auto flagged = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.flagged; });
  return static_cast<double>(flagged) / static_cast<double>(results.size());
}

inline constexpr char kReferenceMagic[9] = "XSUBREF\0";
inline constexpr std::uint32_t kReferenceVersion = 1;

inline void save_reference(const CleanReference& ref, std::ostream& out) {
  using namespace detail;
  out.write(kReferenceMagic, 8);
  put(out, kReferenceVersion);
  put<std::uint64_t>(out, ref.calibration_size);
  put(out, ref.threshold);
  put(out, ref.epsilon);
  put<std::uint64_t>(out, ref.classes.size());
  for (const auto& [cls, st] : ref.classes) {
    put<std::uint64_t>(out, cls);
    put<std::uint64_t>(out, st.count);
    put<std::uint64_t>(out, st.median.size());
    put_doubles(out, st.median.data(), st.median.size());
    put_doubles(out, st.mad.data(), st.mad.size());
  }
}

inline CleanReference load_reference(std::istream& in, const std::string& what = "clean reference") {
  using namespace detail;
  check_magic(in, kReferenceMagic, kReferenceVersion, what);
  CleanReference ref;
  ref.calibration_size = get<std::uint64_t>(in, what);
  ref.threshold = get<double>(in, what);
  ref.epsilon = get<double>(in, what);
  const auto n = get<std::uint64_t>(in, what);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto cls = get<std::uint64_t>(in, what);
    ClassStatistics st;
    st.count = get<std::uint64_t>(in, what);
    const auto width = get<std::uint64_t>(in, what);
    if (width > (1U << 26)) fail(ErrorKind::format, what + ": implausible entry count");
    st.median.resize(width);
    st.mad.resize(width);
    get_doubles(in, st.median.data(), width, what);
    get_doubles(in, st.mad.data(), width, what);
    ref.classes.emplace(cls, std::move(st));
  }
  return ref;
}

inline void save_reference(const CleanReference& ref, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::file, "cannot write " + path.string());
  save_reference(ref, out);
  if (!out) fail(ErrorKind::file, "short write to " + path.string());
}

inline CleanReference load_reference(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::file, "missing clean reference " + path.string());
  return load_reference(in, path.string());
}

}  // namespace xsub
