#pragma once

#include <Eigen/Dense>

#include <bit>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "model.hpp"

namespace xsub {

/// Shapley attributions of one sample for one class. `base_value` is the
/// expected class score over the background, so that
/// sum(values) == f_class(x) - base_value.
struct ExplanationVector {
  std::vector<double> values;
  std::size_t target_class = 0;
  double base_value = 0.0;
  Shape shape;

  double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
  friend bool operator==(const ExplanationVector&, const ExplanationVector&) = default;
};

/// A batch scorer maps input rows to one class score per row.
template <class F>
concept BatchScorer = requires(const F& f, const Matrix& rows) {
  { f(rows) } -> std::convertible_to<Vector>;
};

/// Probability of one class under a classifier, counting every row as an
/// internal model evaluation.
struct ClassScorer {
  const Classifier* model;
  std::size_t cls;
  std::uint64_t* evals = nullptr;

  Vector operator()(const Matrix& rows) const {
    if (evals) *evals += static_cast<std::uint64_t>(rows.rows());
    return model->probabilities(rows).col(static_cast<Eigen::Index>(cls));
  }
};

enum class ExplainerMode { exact, kernel };

inline ExplainerMode parse_explainer_mode(std::string_view s) {
  if (s == "exact") return ExplainerMode::exact;
  if (s == "kernel") return ExplainerMode::kernel;
  fail(ErrorKind::invalid_argument, "unknown explainer mode '" + std::string(s) + "'");
}

struct ExplainerConfig {
  ExplainerMode mode = ExplainerMode::kernel;
  std::size_t coalitions = 1024;
  std::size_t background_size = 16;
  std::uint64_t seed = 1;
};

inline constexpr std::size_t kExactMaxFeatures = 20;
inline constexpr double kRidge = 1e-8;

namespace detail {

/// Coalition values v(S) = mean_b f(x_S, b_{~S}) for each row of `present`
/// (1 = feature taken from x). Evaluated in bounded chunks.
template <BatchScorer F>
Vector coalition_values(const F& f, const Vector& x, const Matrix& background,
                        const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>& present) {
  const Eigen::Index m = present.rows(), d = x.size(), nb = background.rows();
  const Eigen::Index chunk = std::max<Eigen::Index>(1, 16384 / nb);
  Vector v(m);
  for (Eigen::Index start = 0; start < m; start += chunk) {
    const Eigen::Index rows = std::min(chunk, m - start);
    Matrix batch(rows * nb, d);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index b = 0; b < nb; ++b) {
        auto out = batch.row(r * nb + b);
        for (Eigen::Index j = 0; j < d; ++j)
          out(j) = present(start + r, j) ? x(j) : background(b, j);
      }
    const Vector scores = f(batch);
    for (Eigen::Index r = 0; r < rows; ++r)
      v(start + r) = scores.segment(r * nb, nb).mean();
  }
  return v;
}

inline double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i)
    r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

inline void check_inputs(const Vector& x, const Matrix& background) {
  require(background.rows() > 0, "background set is empty");
  require(background.cols() == x.size(), "background width does not match the sample");
  require(x.allFinite() && background.allFinite(), "explainer inputs must be finite");
}

}  // namespace detail

/// Exact Shapley values by enumerating all 2^d coalitions.
template <BatchScorer F>
ExplanationVector exact_shapley(const F& f, const Vector& x, const Matrix& background, std::size_t target_class = 0) {
  detail::check_inputs(x, background);
  const auto d = static_cast<std::size_t>(x.size());
  if (d > kExactMaxFeatures)
    fail(ErrorKind::capacity, "exact Shapley enumeration is limited to " + std::to_string(kExactMaxFeatures) +
                                  " features, got " + std::to_string(d));
  require(d >= 1, "cannot explain an empty sample");

  const std::size_t subsets = std::size_t{1} << d;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> present(static_cast<Eigen::Index>(subsets), static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < subsets; ++s)
    for (std::size_t j = 0; j < d; ++j)
      present(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) = (s >> j) & 1U;
  const Vector v = detail::coalition_values(f, x, background, present);

  // weight(|S|) = |S|! (d-|S|-1)! / d! = 1 / (d * C(d-1, |S|))
  std::vector<double> weight(d);
  for (std::size_t s = 0; s < d; ++s)
    weight[s] = 1.0 / (static_cast<double>(d) * detail::binomial(d - 1, s));

  ExplanationVector ev;
  ev.values.assign(d, 0.0);
  ev.target_class = target_class;
  ev.base_value = v(0);
  ev.shape = {d};
  for (std::size_t s = 0; s < subsets; ++s) {
    const auto size = static_cast<std::size_t>(std::popcount(s));
    for (std::size_t j = 0; j < d; ++j) {
      if ((s >> j) & 1U) continue;
      ev.values[j] += weight[size] * (v(static_cast<Eigen::Index>(s | (std::size_t{1} << j))) - v(static_cast<Eigen::Index>(s)));
    }
  }
  return ev;
}

/// Kernel SHAP: weighted least squares over binary coalitions with the
/// Shapley kernel, efficiency imposed as an equality constraint. When the
/// budget covers every proper non-empty coalition they are enumerated with
/// their kernel weights; otherwise coalition sizes are drawn in proportion to
/// their total kernel mass and sampled in complementary pairs with unit weight.
template <BatchScorer F>
ExplanationVector kernel_shapley(const F& f, const Vector& x, const Matrix& background, std::size_t coalitions,
                                 RngStream rng, std::size_t target_class = 0) {
  detail::check_inputs(x, background);
  const auto d = static_cast<std::size_t>(x.size());
  require(d >= 1, "cannot explain an empty sample");
  require(coalitions >= d + 2,
          "kernel mode needs at least d+2=" + std::to_string(d + 2) + " coalitions, got " + std::to_string(coalitions));
  const auto di = static_cast<Eigen::Index>(d);

  using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
  BoolMatrix ends(2, di);
  ends.row(0).setConstant(false);
  ends.row(1).setConstant(true);
  const Vector end_values = detail::coalition_values(f, x, background, ends);
  const double base = end_values(0), full = end_values(1);
  const double delta = full - base;

  ExplanationVector ev;
  ev.target_class = target_class;
  ev.base_value = base;
  ev.shape = {d};
  if (d == 1) {
    ev.values = {delta};
    return ev;
  }

  BoolMatrix z;
  Vector w;
  const bool exhaustive = d < 63 && coalitions >= (std::size_t{1} << d) - 2;
  if (exhaustive) {
    const std::size_t m = (std::size_t{1} << d) - 2;
    z.resize(static_cast<Eigen::Index>(m), di);
    w.resize(static_cast<Eigen::Index>(m));
    for (std::size_t s = 1; s <= m; ++s) {
      const auto r = static_cast<Eigen::Index>(s - 1);
      for (std::size_t j = 0; j < d; ++j)
        z(r, static_cast<Eigen::Index>(j)) = (s >> j) & 1U;
      const auto size = static_cast<std::size_t>(std::popcount(s));
      w(r) = static_cast<double>(d - 1) /
             (detail::binomial(d, size) * static_cast<double>(size) * static_cast<double>(d - size));
    }
  } else {
    std::vector<double> cdf(d - 1);
    double total = 0.0;
    for (std::size_t s = 1; s < d; ++s) {
      total += 1.0 / (static_cast<double>(s) * static_cast<double>(d - s));
      cdf[s - 1] = total;
    }
    z.resize(static_cast<Eigen::Index>(coalitions), di);
    w.setOnes(static_cast<Eigen::Index>(coalitions));
    for (std::size_t r = 0; r < coalitions; r += 2) {
      const double u = rng.uniform() * total;
      const std::size_t size = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin()) + 1;
      const auto chosen = rng.sample_without_replacement(d, size);
      z.row(static_cast<Eigen::Index>(r)).setConstant(false);
      for (auto j : chosen)
        z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = true;
      if (r + 1 < coalitions)
        z.row(static_cast<Eigen::Index>(r + 1)) = z.row(static_cast<Eigen::Index>(r)).unaryExpr([](bool b) { return !b; });
    }
  }
  w /= w.sum();

  const Vector v = detail::coalition_values(f, x, background, z);

  // Eliminate the last feature through sum(phi) = delta:
  //   y - z_last * delta = sum_{j<last} phi_j (z_j - z_last)
  const Eigen::Index m = z.rows(), last = di - 1;
  Matrix a(m, last);
  Vector t(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double zl = z(r, last) ? 1.0 : 0.0;
    for (Eigen::Index j = 0; j < last; ++j)
      a(r, j) = (z(r, j) ? 1.0 : 0.0) - zl;
    t(r) = v(r) - base - zl * delta;
  }
  Matrix normal = a.transpose() * w.asDiagonal() * a;
  normal.diagonal().array() += kRidge;
  const Vector rhs = a.transpose() * (w.asDiagonal() * t);
  const Eigen::LDLT<Matrix> ldlt(normal);
  const Vector phi = ldlt.solve(rhs);
  if (ldlt.info() != Eigen::Success || !phi.allFinite() || !(ldlt.rcond() > 1e-14)) {
    fail(ErrorKind::numerical, "Shapley regression is singular (rcond=" + std::to_string(ldlt.rcond()) +
                                   ", coalitions=" + std::to_string(m) + ", features=" + std::to_string(d) + ")");
  }

  ev.values.resize(d);
  for (Eigen::Index j = 0; j < last; ++j)
    ev.values[static_cast<std::size_t>(j)] = phi(j);
  ev.values[d - 1] = delta - phi.sum();
  return ev;
}

/// Sums attributions over channels at each spatial position. For shapes that
/// are not [H,W,C] the values are copied unchanged.
inline Tensor aggregate_channels(const ExplanationVector& ev, const Shape& shape) {
  require(ev.values.size() == shape_size(shape), "explanation length " + std::to_string(ev.values.size()) +
                                                     " does not match shape " + shape_string(shape));
  const std::size_t c = shape.size() == 3 ? shape[2] : 1;
  const std::size_t positions = ev.values.size() / c;
  std::vector<double> agg(positions, 0.0);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t ch = 0; ch < c; ++ch)
      agg[p] += ev.values[p * c + ch];
  return Tensor({positions}, std::move(agg));
}

inline nlohmann::json to_json(const ExplanationVector& ev) {
  return {{"class", ev.target_class}, {"base_value", ev.base_value}, {"values", ev.values}, {"shape", ev.shape}};
}

inline ExplanationVector explanation_from_json(const nlohmann::json& j) {
  ExplanationVector ev;
  ev.target_class = j.at("class").get<std::size_t>();
  ev.base_value = j.at("base_value").get<double>();
  ev.values = j.at("values").get<std::vector<double>>();
  ev.shape = j.at("shape").get<Shape>();
  return ev;
}

/// `size` training samples drawn without replacement from the "background"
/// stream, one per row.
inline Matrix make_background(const std::vector<Sample>& pool, std::size_t size, std::uint64_t seed) {
  require(!pool.empty(), "background pool is empty");
  require(size >= 1, "background size must be >= 1");
  size = std::min(size, pool.size());
  RngStream rng(seed, "background");
  const auto idx = rng.sample_without_replacement(pool.size(), size);
  std::vector<Sample> chosen;
  chosen.reserve(size);
  for (auto i : idx)
    chosen.push_back(pool[i]);
  return stack_rows(chosen);
}

inline std::uint64_t hash_tensor(const Tensor& x) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double v : x.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFU;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

/// The explanation service an attacker queries: one call is one explain
/// query. Results are a pure function of (x, class), so repeated requests
/// are served from a memo; they are still counted as queries.
class Explainer {
 public:
  Explainer(const Classifier& f, Matrix background, ExplainerConfig cfg)
      : model_(&f), background_(std::move(background)), cfg_(cfg) {
    require(background_.rows() > 0, "background set is empty");
    require(static_cast<std::size_t>(background_.cols()) == f.inputs(), "background width does not match the model");
    if (cfg_.mode == ExplainerMode::exact && f.inputs() > kExactMaxFeatures)
      fail(ErrorKind::capacity, "exact mode supports at most " + std::to_string(kExactMaxFeatures) + " features");
    if (cfg_.mode == ExplainerMode::kernel)
      require(cfg_.coalitions >= f.inputs() + 2, "kernel mode needs coalitions >= d+2");
  }

  Explainer(const Explainer& o) : model_(o.model_), background_(o.background_), cfg_(o.cfg_) {}

  const ExplainerConfig& config() const noexcept { return cfg_; }
  const Matrix& background() const noexcept { return background_; }

  ExplanationVector explain(const Tensor& x, std::size_t cls, QueryLog& log) const {
    require(x.shape() == model_->input_shape(), "explain: input shape mismatch");
    require(cls < model_->classes(), "explain: class out of range");
    ++log.explain_count;
    const auto key = std::make_pair(hash_tensor(x), cls);
    {
      std::lock_guard lock(mu_);
      if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    std::uint64_t evals = 0;
    ClassScorer scorer{model_, cls, &evals};
    ExplanationVector ev;
    if (cfg_.mode == ExplainerMode::exact) {
      ev = exact_shapley(scorer, as_row(x), background_, cls);
    } else {
      char label[64];
      std::snprintf(label, sizeof label, "explain/%zu/%016llx", cls, static_cast<unsigned long long>(key.first));
      ev = kernel_shapley(scorer, as_row(x), background_, cfg_.coalitions, RngStream(cfg_.seed, label), cls);
    }
    ev.shape = x.shape();
    log.model_evals += evals;
    std::lock_guard lock(mu_);
    memo_.emplace(key, ev);
    return ev;
  }

 private:
  const Classifier* model_;
  Matrix background_;
  ExplainerConfig cfg_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<std::uint64_t, std::size_t>, ExplanationVector> memo_;
};

}  // namespace xsub
