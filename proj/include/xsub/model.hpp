#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "core.hpp"
#include "data.hpp"

namespace xsub {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Counts of user-visible service queries. `model_evals` tracks forward
/// passes spent inside the explainer; it is bookkeeping, not a query.
struct QueryLog {
  std::uint64_t predict_count = 0;
  std::uint64_t explain_count = 0;
  std::uint64_t model_evals = 0;

  QueryLog& operator+=(const QueryLog& o) {
    predict_count += o.predict_count;
    explain_count += o.explain_count;
    model_evals += o.model_evals;
    return *this;
  }
  friend QueryLog operator+(QueryLog a, const QueryLog& b) { return a += b; }
  friend bool operator==(const QueryLog&, const QueryLog&) = default;
};

/// Fully connected ReLU network with a softmax output.
class Classifier {
 public:
  Classifier() = default;

  /// `dims` = {inputs, hidden..., classes}. Parameters start at zero.
  Classifier(Shape input_shape, std::vector<std::size_t> dims) : input_shape_(std::move(input_shape)), dims_(std::move(dims)) {
    require(dims_.size() >= 2, "classifier needs at least input and output layers");
    require(dims_.front() == shape_size(input_shape_), "first layer width must equal the input feature count");
    require(dims_.back() >= 2, "classifier needs at least two classes");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      require(dims_[l] > 0 && dims_[l + 1] > 0, "layer widths must be positive");
      weights_.push_back(Matrix::Zero(static_cast<Eigen::Index>(dims_[l + 1]), static_cast<Eigen::Index>(dims_[l])));
      biases_.push_back(Vector::Zero(static_cast<Eigen::Index>(dims_[l + 1])));
    }
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t inputs() const noexcept { return dims_.front(); }
  std::size_t classes() const noexcept { return dims_.back(); }
  std::size_t layers() const noexcept { return weights_.size(); }

  std::vector<Matrix>& weights() noexcept { return weights_; }
  std::vector<Vector>& biases() noexcept { return biases_; }
  const std::vector<Matrix>& weights() const noexcept { return weights_; }
  const std::vector<Vector>& biases() const noexcept { return biases_; }

  /// Logits for a batch; one sample per row.
  Matrix logits(const Matrix& x) const {
    Matrix a = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix z = (a * weights_[l].transpose()).rowwise() + biases_[l].transpose();
      a = l + 1 < weights_.size() ? Matrix(z.cwiseMax(0.0)) : z;
    }
    return a;
  }

  Matrix probabilities(const Matrix& x) const { return softmax_rows(logits(x)); }

  /// Activations of the last hidden layer (the input itself for a
  /// single-layer model).
  Matrix penultimate(const Matrix& x) const {
    Matrix a = x;
    for (std::size_t l = 0; l + 1 < weights_.size(); ++l)
      a = ((a * weights_[l].transpose()).rowwise() + biases_[l].transpose()).cwiseMax(0.0);
    return a;
  }

  bool parameters_finite() const {
    for (std::size_t l = 0; l < weights_.size(); ++l)
      if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
    return true;
  }

  static Matrix softmax_rows(const Matrix& z) {
    Matrix p = z.colwise() - z.rowwise().maxCoeff();
    p = p.array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    return p;
  }

  friend bool operator==(const Classifier& a, const Classifier& b) {
    if (a.input_shape_ != b.input_shape_ || a.dims_ != b.dims_) return false;
    for (std::size_t l = 0; l < a.weights_.size(); ++l)
      if (a.weights_[l] != b.weights_[l] || a.biases_[l] != b.biases_[l]) return false;
    return true;
  }

 private:
  Shape input_shape_;
  std::vector<std::size_t> dims_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

inline Vector as_row(const Tensor& x) {
  return Eigen::Map<const Vector>(x.values().data(), static_cast<Eigen::Index>(x.size()));
}

inline Matrix stack_rows(const std::vector<Sample>& samples) {
  require(!samples.empty(), "cannot stack an empty sample list");
  const auto d = static_cast<Eigen::Index>(samples.front().data.size());
  Matrix x(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = as_row(samples[i].data).transpose();
  return x;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

struct Prediction {
  std::vector<double> probs;
  std::size_t label = 0;
};

/// First index of the maximum; lower index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline Prediction predict(const Classifier& f, const Tensor& x) {
  require(x.shape() == f.input_shape(),
          "predict: input shape " + shape_string(x.shape()) + " vs model " + shape_string(f.input_shape()));
  const Matrix p = f.probabilities(as_row(x).transpose());
  Prediction out;
  out.probs.assign(p.data(), p.data() + p.size());
  out.label = argmax(out.probs);
  return out;
}

/// Black-box query: counts one prediction against `log`.
inline Prediction predict(const Classifier& f, const Tensor& x, QueryLog& log) {
  auto out = predict(f, x);
  ++log.predict_count;
  return out;
}

inline std::vector<std::size_t> predict_labels(const Classifier& f, const std::vector<Sample>& samples) {
  if (samples.empty()) return {};
  const Matrix z = f.logits(stack_rows(samples));
  std::vector<std::size_t> labels(samples.size());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Vector row = z.row(i).transpose();
    labels[static_cast<std::size_t>(i)] = argmax(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return labels;
}

/// Samples the classifier labels correctly, in their original order.
inline std::vector<Sample> filter_correct(const Classifier& f, const std::vector<Sample>& samples) {
  const auto labels = predict_labels(f, samples);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (labels[i] == samples[i].label) out.push_back(samples[i]);
  return out;
}

inline std::vector<Sample> filter_correct(const Classifier& f, const Dataset& ds) { return filter_correct(f, ds.samples); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::size_t hidden = 64;
  std::uint64_t seed = 1;
  /// Rescales each batch gradient to at most this global L2 norm; 0 disables.
  double clip_norm = 0.0;

  void validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning rate must be > 0");
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch size must be >= 1");
    require(hidden >= 1, "hidden width must be >= 1");
    require(clip_norm >= 0.0 && std::isfinite(clip_norm), "clip norm must be >= 0");
  }
};

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

/// Mean cross-entropy over the batch and its parameter gradients.
inline double loss_and_gradients(const Classifier& f, const Matrix& x, std::span<const std::size_t> labels, Gradients* grad) {
  const std::size_t layers = f.layers();
  const auto n = x.rows();
  std::vector<Matrix> acts{x};
  acts.reserve(layers + 1);
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = (acts.back() * f.weights()[l].transpose()).rowwise() + f.biases()[l].transpose();
    acts.push_back(l + 1 < layers ? Matrix(z.cwiseMax(0.0)) : z);
  }
  const Matrix& z = acts.back();
  const Vector zmax = z.rowwise().maxCoeff();
  const Vector lse = ((z.colwise() - zmax).array().exp().rowwise().sum().log()).matrix() + zmax;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    loss += lse(i) - z(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]));
  loss /= static_cast<double>(n);
  if (!grad) return loss;

  Matrix delta = (z.colwise() - lse).array().exp();
  for (Eigen::Index i = 0; i < n; ++i)
    delta(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)])) -= 1.0;
  delta /= static_cast<double>(n);

  grad->weights.assign(layers, Matrix());
  grad->biases.assign(layers, Vector());
  for (std::size_t l = layers; l-- > 0;) {
    grad->weights[l] = delta.transpose() * acts[l];
    grad->biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix back = delta * f.weights()[l];
      delta = back.array() * (acts[l].array() > 0.0).cast<double>();
    }
  }
  return loss;
}

inline void init_parameters(Classifier& f, std::uint64_t seed) {
  RngStream rng(seed, "init");
  for (std::size_t l = 0; l < f.layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(f.dims()[l]));
    auto& w = f.weights()[l];
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        w(r, c) = rng.uniform(-bound, bound);
    for (Eigen::Index r = 0; r < f.biases()[l].size(); ++r)
      f.biases()[l](r) = rng.uniform(-bound, bound);
  }
}

/// Mini-batch SGD on mean cross-entropy, one hidden layer of `cfg.hidden`
/// units. `epoch_losses` receives the mean batch loss of each epoch.
inline Classifier train(const Dataset& ds, const TrainConfig& cfg, std::vector<double>* epoch_losses = nullptr) {
  cfg.validate();
  require(!ds.empty(), "training set is empty");
  require(ds.split == Split::train, "train() needs a training split");
  const Shape& shape = ds.samples.front().data.shape();
  for (const auto& s : ds.samples) {
    require(s.data.shape() == shape, "training samples have inconsistent shapes");
    require(s.label < ds.descriptor.classes, "training label out of range");
  }

  Classifier f(shape, {shape_size(shape), cfg.hidden, ds.descriptor.classes});
  init_parameters(f, cfg.seed);

  const Matrix x = stack_rows(ds.samples);
  std::vector<std::size_t> labels(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    labels[i] = ds.samples[i].label;

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream shuffle_rng(cfg.seed, "train/shuffle");
  Gradients g;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Matrix xb(static_cast<Eigen::Index>(end - start), x.cols());
      std::vector<std::size_t> yb(end - start);
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Eigen::Index>(i - start)) = x.row(static_cast<Eigen::Index>(order[i]));
        yb[i - start] = labels[order[i]];
      }
      const double loss = loss_and_gradients(f, xb, yb, &g);
      if (!std::isfinite(loss))
        fail(ErrorKind::training, "loss diverged at epoch " + std::to_string(epoch));
      double step = cfg.learning_rate;
      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (std::size_t l = 0; l < f.layers(); ++l)
          sq += g.weights[l].squaredNorm() + g.biases[l].squaredNorm();
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) step *= cfg.clip_norm / norm;
      }
      for (std::size_t l = 0; l < f.layers(); ++l) {
        f.weights()[l] -= step * g.weights[l];
        f.biases()[l] -= step * g.biases[l];
      }
      total += loss;
      ++batches;
    }
    if (!f.parameters_finite()) fail(ErrorKind::training, "parameters became non-finite");
    if (epoch_losses) epoch_losses->push_back(total / static_cast<double>(batches));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::format, what + ": truncated record");
  return v;
}

inline void put_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void get_doubles(std::istream& in, double* p, std::size_t n, const std::string& what) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) fail(ErrorKind::format, what + ": truncated record");
}

inline void put_shape(std::ostream& out, const Shape& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  for (auto e : s)
    put<std::uint64_t>(out, e);
}

inline Shape get_shape(std::istream& in, const std::string& what) {
  const auto rank = get<std::uint32_t>(in, what);
  if (rank > 8) fail(ErrorKind::format, what + ": implausible rank");
  Shape s(rank);
  for (auto& e : s)
    e = get<std::uint64_t>(in, what);
  return s;
}

inline void check_magic(std::istream& in, const char (&magic)[9], std::uint32_t version, const std::string& what) {
  char buf[8];
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) fail(ErrorKind::format, what + ": bad magic");
  const auto v = get<std::uint32_t>(in, what);
  if (v != version) fail(ErrorKind::format, what + ": unsupported version " + std::to_string(v));
}

}  // namespace detail

inline constexpr char kModelMagic[9] = "XSUBMDL\0";
inline constexpr std::uint32_t kModelVersion = 1;

/// Little-endian binary record: magic, version, input shape, layer dims,
/// then each layer's weights (column-major) and biases as raw doubles.
inline void save_classifier(const Classifier& f, std::ostream& out) {
  out.write(kModelMagic, 8);
  detail::put(out, kModelVersion);
  detail::put_shape(out, f.input_shape());
  detail::put_shape(out, f.dims());
  for (std::size_t l = 0; l < f.layers(); ++l) {
    detail::put_doubles(out, f.weights()[l].data(), static_cast<std::size_t>(f.weights()[l].size()));
    detail::put_doubles(out, f.biases()[l].data(), static_cast<std::size_t>(f.biases()[l].size()));
  }
}

inline Classifier load_classifier(std::istream& in, const std::string& what = "checkpoint") {
  detail::check_magic(in, kModelMagic, kModelVersion, what);
  Shape input = detail::get_shape(in, what);
  std::vector<std::size_t> dims = detail::get_shape(in, what);
  Classifier f;
  try {
    f = Classifier(input, dims);
  } catch (const Error& e) {
    fail(ErrorKind::format, what + ": " + e.what());
  }
  for (std::size_t l = 0; l < f.layers(); ++l) {
    detail::get_doubles(in, f.weights()[l].data(), static_cast<std::size_t>(f.weights()[l].size()), what);
    detail::get_doubles(in, f.biases()[l].data(), static_cast<std::size_t>(f.biases()[l].size()), what);
  }
  return f;
}

inline void save_classifier(const Classifier& f, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::file, "cannot write " + path.string());
  save_classifier(f, out);
  if (!out) fail(ErrorKind::file, "short write to " + path.string());
}

inline Classifier load_classifier(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::file, "missing checkpoint " + path.string());
  return load_classifier(in, path.string());
}

}  // namespace xsub
