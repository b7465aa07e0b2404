#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "xsub/data.hpp"
#include "xsub/explainer.hpp"

using namespace xsub;

namespace {

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

/// Wraps a per-row function as a batch scorer.
template <class G>
auto rowwise(G g) {
  return [g](const Matrix& rows) {
    Vector out(rows.rows());
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
      out(r) = g(Vector(rows.row(r).transpose()));
    return out;
  };
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

Matrix zeros_background(Eigen::Index d) { return Matrix::Zero(1, d); }

/// Shapley values by averaging marginal contributions over every feature
/// ordering; independent of the subset-weight formula.
template <class G>
std::vector<double> permutation_shapley(G g, const Vector& x, const Matrix& bg) {
  const auto d = static_cast<std::size_t>(x.size());
  auto value = [&](const std::vector<bool>& present) {
    double s = 0;
    for (Eigen::Index b = 0; b < bg.rows(); ++b) {
      Vector z = bg.row(b).transpose();
      for (std::size_t j = 0; j < d; ++j)
        if (present[j]) z(static_cast<Eigen::Index>(j)) = x(static_cast<Eigen::Index>(j));
      s += g(z);
    }
    return s / static_cast<double>(bg.rows());
  };
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> phi(d, 0.0);
  double count = 0;
  do {
    std::vector<bool> present(d, false);
    double prev = value(present);
    for (auto j : order) {
      present[j] = true;
      const double now = value(present);
      phi[j] += now - prev;
      prev = now;
    }
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& p : phi)
    p /= count;
  return phi;
}

double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Classifier random_mlp(std::size_t d, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  Classifier f(Shape{d}, {d, hidden, classes});
  RngStream rng(seed, "test/mlp");
  for (std::size_t l = 0; l < f.layers(); ++l) {
    for (Eigen::Index i = 0; i < f.weights()[l].size(); ++i)
      f.weights()[l].data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < f.biases()[l].size(); ++i)
      f.biases()[l].data()[i] = rng.normal() * 0.5;
  }
  return f;
}

}  // namespace

TEST(ExactShapley, LinearModel) {
  auto f = rowwise([](const Vector& z) { return 2 * z(0) + 3 * z(1); });
  const auto ev = exact_shapley(f, vec({1, 1}), zeros_background(2));
  EXPECT_NEAR(ev.values[0], 2.0, 1e-12);
  EXPECT_NEAR(ev.values[1], 3.0, 1e-12);
  EXPECT_NEAR(ev.base_value, 0.0, 1e-12);
}

TEST(ExactShapley, ProductSplitsEvenly) {
  auto f = rowwise([](const Vector& z) { return z(0) * z(1); });
  const auto ev = exact_shapley(f, vec({1, 1}), zeros_background(2));
  EXPECT_NEAR(ev.values[0], 0.5, 1e-12);
  EXPECT_NEAR(ev.values[1], 0.5, 1e-12);
}

TEST(ExactShapley, DummyFeatureGetsZero) {
  auto f = rowwise([](const Vector& z) { return std::sin(z(0)) * z(2) + z(3) * z(3); });
  const Vector x = vec({0.7, 5.0, -1.2, 0.4});
  Matrix bg(3, 4);
  bg << 0.1, 2.0, 0.3, -0.5, -0.4, -1.0, 0.9, 0.2, 0.0, 0.5, 0.1, 0.0;
  const auto ev = exact_shapley(f, x, bg);
  EXPECT_NEAR(ev.values[1], 0.0, 1e-9);
}

TEST(ExactShapley, SymmetricFeaturesShareEqually) {
  auto f = rowwise([](const Vector& z) { return std::tanh(z(0) + z(1)) + 0.3 * z(2); });
  const Vector x = vec({0.8, 0.8, -0.6});
  Matrix bg(2, 3);
  bg << 0.1, 0.1, 0.4, -0.3, -0.3, 0.2;
  const auto ev = exact_shapley(f, x, bg);
  EXPECT_NEAR(ev.values[0], ev.values[1], 1e-9);
}

TEST(ExactShapley, Efficiency) {
  const auto model = random_mlp(6, 5, 3, 2);
  ClassScorer s{&model, 1};
  RngStream rng(3, "eff");
  Vector x(6);
  Matrix bg(4, 6);
  for (Eigen::Index i = 0; i < 6; ++i)
    x(i) = rng.normal();
  for (Eigen::Index i = 0; i < bg.size(); ++i)
    bg.data()[i] = rng.normal();
  const auto ev = exact_shapley(s, x, bg, 1);
  EXPECT_NEAR(ev.sum(), s(x.transpose())(0) - ev.base_value, 1e-6);
}

TEST(ExactShapley, MatchesPermutationOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const std::size_t d = 2 + seed % 4;
    const auto model = random_mlp(d, 4, 2, seed);
    auto g = [&](const Vector& z) { return model.probabilities(z.transpose())(0, 0); };
    RngStream rng(seed, "perm");
    Vector x(static_cast<Eigen::Index>(d));
    Matrix bg(3, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x(i) = rng.normal();
    for (Eigen::Index i = 0; i < bg.size(); ++i)
      bg.data()[i] = rng.normal();
    const auto ev = exact_shapley(ClassScorer{&model, 0}, x, bg);
    EXPECT_LE(linf(ev.values, permutation_shapley(g, x, bg)), 1e-12) << "seed " << seed;
  }
}

TEST(ExactShapley, TooManyFeaturesIsCapacityError) {
  auto f = rowwise([](const Vector& z) { return z.sum(); });
  EXPECT_EQ(kind_of([&] { exact_shapley(f, Vector::Zero(21), zeros_background(21)); }), ErrorKind::capacity);
}

TEST(KernelShapley, ExhaustiveMatchesExact) {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const std::size_t d = 1 + seed;
    const auto model = random_mlp(d, 6, 3, seed);
    ClassScorer s{&model, seed % 3};
    RngStream rng(seed, "exh");
    Vector x(static_cast<Eigen::Index>(d));
    Matrix bg(5, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x(i) = rng.normal();
    for (Eigen::Index i = 0; i < bg.size(); ++i)
      bg.data()[i] = rng.normal();
    const auto exact = exact_shapley(s, x, bg);
    const auto kernel = kernel_shapley(s, x, bg, std::size_t{1} << d, RngStream(seed, "k"));
    EXPECT_LE(linf(exact.values, kernel.values), 1e-6) << "d=" << d;
  }
}

TEST(KernelShapley, SampledLinearModelNearAnalytic) {
  const std::size_t d = 10;
  RngStream rng(5, "linear");
  Vector w(d), x(d);
  Matrix bg(8, d);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d); ++i) {
    w(i) = rng.uniform(-2, 2);
    x(i) = rng.normal();
  }
  for (Eigen::Index i = 0; i < bg.size(); ++i)
    bg.data()[i] = rng.normal();
  auto f = [&](const Matrix& rows) -> Vector { return rows * w; };
  const auto ev = kernel_shapley(f, x, bg, 4096, RngStream(1, "kernel"));
  const Vector mean_bg = bg.colwise().mean().transpose();
  for (std::size_t j = 0; j < d; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    EXPECT_NEAR(ev.values[j], w(jj) * (x(jj) - mean_bg(jj)), 0.05);
  }
}

TEST(KernelShapley, EfficiencyHoldsWhenSampled) {
  const auto model = random_mlp(30, 8, 4, 4);
  ClassScorer s{&model, 2};
  RngStream rng(1, "eff");
  Vector x(30);
  Matrix bg(4, 30);
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x(i) = rng.normal();
  for (Eigen::Index i = 0; i < bg.size(); ++i)
    bg.data()[i] = rng.normal();
  const auto ev = kernel_shapley(s, x, bg, 200, RngStream(1, "k"));
  EXPECT_NEAR(ev.sum(), s(x.transpose())(0) - ev.base_value, 1e-6);
}

TEST(KernelShapley, DeterministicForFixedStream) {
  const auto model = random_mlp(12, 8, 2, 9);
  ClassScorer s{&model, 0};
  const Vector x = Vector::LinSpaced(12, -1, 1);
  const Matrix bg = Matrix::Zero(2, 12);
  const auto a = kernel_shapley(s, x, bg, 300, RngStream(4, "same"));
  const auto b = kernel_shapley(s, x, bg, 300, RngStream(4, "same"));
  EXPECT_EQ(a, b);
}

TEST(KernelShapley, NanScoresAreNumericalError) {
  auto f = [](const Matrix& rows) -> Vector { return Vector::Constant(rows.rows(), std::nan("")); };
  EXPECT_EQ(kind_of([&] { kernel_shapley(f, Vector::Ones(12), Matrix::Zero(1, 12), 100, RngStream(1, "nan")); }),
            ErrorKind::numerical);
}

TEST(KernelShapley, TooFewCoalitions) {
  auto f = [](const Matrix& rows) -> Vector { return rows.rowwise().sum(); };
  EXPECT_EQ(kind_of([&] { kernel_shapley(f, Vector::Ones(10), Matrix::Zero(1, 10), 11, RngStream(1, "few")); }),
            ErrorKind::invalid_argument);
}

TEST(Aggregate, SumsChannels) {
  ExplanationVector ones{std::vector<double>(12, 1.0), 0, 0.0, {2, 2, 3}};
  const auto a = aggregate_channels(ones, {2, 2, 3});
  ASSERT_EQ(a.size(), 4u);
  for (double v : a.values())
    EXPECT_DOUBLE_EQ(v, 3.0);

  ExplanationVector one_pos{{0.1, 0.2, -0.05}, 0, 0.0, {1, 1, 3}};
  EXPECT_NEAR(aggregate_channels(one_pos, {1, 1, 3})[0], 0.25, 1e-12);

  ExplanationVector gray{{0.4, -0.2, 0.1, 0.0}, 0, 0.0, {2, 2, 1}};
  EXPECT_EQ(aggregate_channels(gray, {2, 2, 1}).vec(), gray.values);
}

TEST(Aggregate, LengthMismatch) {
  ExplanationVector ev{{1, 2, 3}, 0, 0.0, {3}};
  EXPECT_EQ(kind_of([&] { aggregate_channels(ev, {2, 2, 1}); }), ErrorKind::invalid_argument);
}

TEST(Json, RoundTrip) {
  ExplanationVector ev{{0.5, -0.25, 1.0, 0.0}, 3, 0.125, {2, 2, 1}};
  const auto j = to_json(ev);
  EXPECT_EQ(j.at("class").get<int>(), 3);
  EXPECT_EQ(explanation_from_json(nlohmann::json::parse(j.dump())), ev);
}

TEST(ExplainerService, CountsEveryCallAndMemoizes) {
  const auto [train_set, test_set] = split_train_test(synth_gaussians(20, Shape{3, 3, 1}, 2, 3.0, 1));
  TrainConfig tc;
  tc.hidden = 8;
  tc.epochs = 3;
  const auto f = train(train_set, tc);
  Explainer g(f, make_background(train_set.samples, 4, 1), ExplainerConfig{ExplainerMode::kernel, 64, 4, 1});
  QueryLog log;
  const auto a = g.explain(test_set.samples[0].data, 1, log);
  const auto evals = log.model_evals;
  const auto b = g.explain(test_set.samples[0].data, 1, log);
  EXPECT_EQ(a, b);
  EXPECT_EQ(log.explain_count, 2u);
  EXPECT_EQ(log.predict_count, 0u);
  EXPECT_EQ(log.model_evals, evals);
  EXPECT_GT(evals, 0u);
  EXPECT_NEAR(a.sum(), predict(f, test_set.samples[0].data).probs[1] - a.base_value, 1e-6);

  Explainer fresh(f, make_background(train_set.samples, 4, 1), ExplainerConfig{ExplainerMode::kernel, 64, 4, 1});
  QueryLog other;
  EXPECT_EQ(fresh.explain(test_set.samples[0].data, 1, other), a);
}

TEST(ExplainerService, ExactModeCapacity) {
  const Classifier f(Shape{5, 5, 1}, {25, 4, 2});
  EXPECT_EQ(kind_of([&] { Explainer(f, Matrix::Zero(1, 25), ExplainerConfig{ExplainerMode::exact, 0, 1, 1}); }),
            ErrorKind::capacity);
}
