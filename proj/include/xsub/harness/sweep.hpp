#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "../attack.hpp"
#include "../data.hpp"
#include "../defense.hpp"
#include "../explainer.hpp"
#include "../model.hpp"
#include "config.hpp"

namespace xsub::harness {

struct MetricsRecord {
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t k = 0;
  PlacementMode mode = PlacementMode::paired;
  Scenario scenario = Scenario::adversarial;
  double accuracy = 0.0;
  double attack_sr = 0.0;
  std::optional<double> detection_rate;
  std::uint64_t queries_predict = 0;
  std::uint64_t queries_explain = 0;
  double wall_time_ms = 0.0;
};

inline constexpr const char* kCsvHeader =
    "seed,alpha,beta,k,mode,scenario,accuracy,attack_sr,detection_rate,queries_predict,queries_explain,wall_time_ms";

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string format_rate(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// One CSV line without the trailing newline.
inline std::string csv_row(const MetricsRecord& r) {
  std::string out = std::to_string(r.seed) + "," + format_number(r.alpha) + "," + format_number(r.beta) + "," +
                    std::to_string(r.k) + "," + to_string(r.mode) + "," + to_string(r.scenario) + "," +
                    format_rate(r.accuracy) + "," + format_rate(r.attack_sr) + "," +
                    (r.detection_rate ? format_rate(*r.detection_rate) : std::string()) + "," +
                    std::to_string(r.queries_predict) + "," + std::to_string(r.queries_explain) + ",";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", r.wall_time_ms);
  return out + buf;
}

/// Appends rows, writing the header first when the file is new or empty.
inline void append_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) fail(ErrorKind::file, "cannot write " + path.string());
  if (fresh) out << kCsvHeader << "\n";
  for (const auto& r : rows)
    out << csv_row(r) << "\n";
  if (!out) fail(ErrorKind::file, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Experiment context
// ---------------------------------------------------------------------------

inline std::vector<Sample> take(const std::vector<Sample>& v, std::size_t limit) {
  if (limit == 0 || limit >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(limit)};
}

/// Train and test splits in normalized space for one seed.
inline std::pair<Dataset, Dataset> load_data(const DataConfig& d, std::uint64_t seed) {
  Dataset train, test;
  if (d.source == "synth") {
    auto all = synth_gaussians(d.per_class, d.shape, d.classes, d.separation, seed);
    std::tie(train, test) = split_train_test(all, d.train_fraction);
  } else if (d.source == "idx") {
    if (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty())
      fail(ErrorKind::config, "idx data needs data.train_images, data.train_labels, data.test_images, data.test_labels");
    train = load_idx(d.train_images, d.train_labels);
    test = load_idx(d.test_images, d.test_labels);
    const auto classes = std::max(train.descriptor.classes, test.descriptor.classes);
    train.descriptor.classes = test.descriptor.classes = classes;
  } else {
    if (d.train_path.empty() || d.test_path.empty())
      fail(ErrorKind::config, "cifar10 data needs data.train_path and data.test_path");
    train = load_cifar10_binary(d.train_path);
    test = load_cifar10_binary(d.test_path);
  }
  if (!d.preset.empty() && d.preset != "none") {
    DatasetDescriptor p = d.preset == "cifar10" ? presets::cifar10()
                          : d.preset == "imagenette" ? presets::imagenette()
                                                     : presets::mnist();
    if (p.channels() != train.descriptor.channels())
      fail(ErrorKind::config, "data.preset '" + d.preset + "' does not match the data's channel count");
    train.descriptor.means = test.descriptor.means = p.means;
    train.descriptor.stds = test.descriptor.stds = p.stds;
  }
  train.samples = take(train.samples, d.limit_train);
  test.samples = take(test.samples, d.limit_test);
  train.split = Split::train;
  test.split = Split::test;
  if (d.source != "synth") {
    train = normalize(train);
    test = normalize(test);
  }
  return {std::move(train), std::move(test)};
}

inline TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.seed = seed;
  return t;
}

inline AttackConfig attack_config(const ExperimentConfig& c, std::uint64_t seed) {
  AttackConfig a = c.attack;
  a.seed = seed;
  return a;
}

inline ExplainerConfig explainer_config(const ExperimentConfig& c, std::uint64_t seed) {
  ExplainerConfig e = c.explainer;
  e.seed = seed;
  return e;
}

/// Everything a sweep cell needs for one seed: data, clean model, explainer,
/// golden cache and the filtered targets. The explainer refers to `clean`,
/// so an Experiment stays where it was built.
struct Experiment {
  Experiment() = default;
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  std::uint64_t seed = 0;
  Dataset train, test;
  Classifier clean;
  std::optional<Explainer> explainer;
  GoldenCache cache;
  std::vector<Sample> targets;
  double clean_accuracy = 0.0;
  std::optional<CleanReference> reference;

  const Explainer& g() const { return *explainer; }
};

inline std::unique_ptr<Experiment> prepare(const ExperimentConfig& c, std::uint64_t seed,
                                           const Classifier* pretrained = nullptr, const GoldenCache* cache = nullptr) {
  auto owned = std::make_unique<Experiment>();
  Experiment& e = *owned;
  e.seed = seed;
  std::tie(e.train, e.test) = load_data(c.data, seed);
  if (e.train.empty() || e.test.empty()) fail(ErrorKind::config, "training and test sets must be non-empty");
  e.clean = pretrained ? *pretrained : train(e.train, train_config(c, seed));
  e.explainer.emplace(e.clean, make_background(e.train.samples, c.explainer.background_size, seed),
                      explainer_config(c, seed));
  e.cache = cache ? *cache : build_golden_cache(e.clean, *e.explainer, e.test.samples, attack_config(c, seed));
  e.targets = take(filter_correct(e.clean, e.test), c.max_samples);
  if (e.targets.empty()) fail(ErrorKind::numerical, "the clean model classifies no test sample correctly");
  e.clean_accuracy = accuracy(e.clean, e.test.samples);
  if (c.defense) e.reference = calibrate(e.clean, take(e.train.samples, c.calibration));
  return owned;
}

inline void check_constant_budget(const std::vector<AttackOutcome>& outcomes, MetricsRecord& r) {
  r.queries_predict = outcomes.front().queries.predict_count;
  r.queries_explain = outcomes.front().queries.explain_count;
  for (const auto& o : outcomes)
    if (o.queries.predict_count != r.queries_predict || o.queries.explain_count != r.queries_explain)
      fail(ErrorKind::numerical, "per-sample query budget is not constant within a run");
}

inline double detection_over(const CleanReference& ref, const Classifier& f, const std::vector<AttackOutcome>& outcomes) {
  std::vector<DetectionResult> results;
  results.reserve(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    results.push_back(score(ref, f, outcomes[i].perturbed, i));
  return detection_rate(results);
}

struct Cell {
  Scenario scenario = Scenario::adversarial;
  PlacementMode mode = PlacementMode::paired;
  std::size_t k = 1;
  double alpha = 1.0;
  double beta = 1.0;
  std::uint64_t seed = 1;
};

inline MetricsRecord run_cell(const ExperimentConfig& c, const Experiment& e, const Cell& cell) {
  const auto start = std::chrono::steady_clock::now();
  AttackConfig a = attack_config(c, e.seed);
  a.alpha = cell.alpha;
  a.beta = cell.beta;
  a.k = cell.k;
  a.placement = cell.mode;

  MetricsRecord r;
  r.seed = e.seed;
  r.alpha = cell.alpha;
  r.beta = cell.beta;
  r.k = cell.k;
  r.mode = cell.mode;
  r.scenario = cell.scenario;
  if (cell.scenario == Scenario::adversarial) {
    const auto outcomes = run_adversarial(e.clean, e.g(), e.targets, e.cache, a);
    r.accuracy = e.clean_accuracy;
    r.attack_sr = attack_sr(outcomes);
    check_constant_budget(outcomes, r);
    if (e.reference) r.detection_rate = detection_over(*e.reference, e.clean, outcomes);
  } else {
    const auto report = backdoor_attack(train_config(c, e.seed), e.clean, e.g(), e.train, e.test, e.targets, e.cache, a);
    r.accuracy = report.backdoor_accuracy;
    r.attack_sr = report.attack_sr;
    check_constant_budget(report.outcomes, r);
    if (c.defense) {
      const auto ref = calibrate(report.model, take(e.train.samples, c.calibration));
      r.detection_rate = detection_over(ref, report.model, report.outcomes);
    }
  }
  r.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Cells in canonical order: scenario, mode, k, alpha, beta, then seed,
/// each in list order.
inline std::vector<Cell> enumerate_cells(const SweepSpec& s) {
  std::vector<Cell> cells;
  cells.reserve(s.cell_count());
  for (auto sc : s.scenarios)
    for (auto m : s.modes)
      for (auto k : s.ks)
        for (auto a : s.alphas)
          for (auto b : s.betas)
            for (auto seed : s.seeds)
              cells.push_back({sc, m, k, a, b, seed});
  return cells;
}

/// Runs every cell. Seeds are independent jobs shared out to `workers`
/// threads; the returned records follow the canonical cell order whatever
/// the completion order.
inline std::vector<MetricsRecord> run_sweep(const ExperimentConfig& c, std::size_t workers = 1) {
  validate(c);
  const auto positions = shape_size(c.data.shape) / (c.data.shape.size() == 3 ? c.data.shape[2] : 1);
  for (auto k : c.sweep.ks)
    if (c.data.source == "synth" && k > positions)
      fail(ErrorKind::config, "sweep.ks contains " + std::to_string(k) + " but the data has only " +
                                  std::to_string(positions) + " positions");
  const auto cells = enumerate_cells(c.sweep);
  std::vector<MetricsRecord> records(cells.size());
  const auto& seeds = c.sweep.seeds;

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t job = next.fetch_add(1);
      if (job >= seeds.size()) return;
      try {
        const auto e = prepare(c, seeds[job]);
        for (std::size_t i = 0; i < cells.size(); ++i)
          if (cells[i].seed == seeds[job]) records[i] = run_cell(c, *e, cells[i]);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, seeds.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w)
    pool.emplace_back(worker);
  worker();
  for (auto& t : pool)
    t.join();
  if (error) std::rethrow_exception(error);
  return records;
}

}  // namespace xsub::harness
