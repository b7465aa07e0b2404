#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "core.hpp"
#include "data.hpp"
#include "explainer.hpp"
#include "model.hpp"

namespace xsub {

// ---------------------------------------------------------------------------
// Golden samples
// ---------------------------------------------------------------------------

struct GoldenProvenance {
  std::size_t candidate_count = 0;
  std::uint64_t seed = 0;
  /// Test-set index of each candidate, in draw order.
  std::vector<std::size_t> candidates;
  /// Maximum channel-aggregated explanation of each candidate.
  std::vector<double> candidate_scores;

  friend bool operator==(const GoldenProvenance&, const GoldenProvenance&) = default;
};

struct GoldenCacheEntry {
  std::size_t cls = 0;
  Tensor sample;
  ExplanationVector explanation;
  /// Every position of the golden sample, most important first.
  std::vector<Position> positions;
  GoldenProvenance provenance;

  friend bool operator==(const GoldenCacheEntry&, const GoldenCacheEntry&) = default;
};

struct GoldenCache {
  std::map<std::size_t, GoldenCacheEntry> entries;
  std::vector<std::string> warnings;
  /// Queries spent while building; never charged to online budgets.
  QueryLog offline;

  const GoldenCacheEntry& at(std::size_t cls) const {
    auto it = entries.find(cls);
    if (it == entries.end()) fail(ErrorKind::empty_class, "golden cache has no entry for class " + std::to_string(cls));
    return it->second;
  }

  friend bool operator==(const GoldenCache&, const GoldenCache&) = default;
};

inline double max_value(const Tensor& t) { return *std::max_element(t.values().begin(), t.values().end()); }

/// Index of the largest score; the earlier candidate wins ties.
inline std::size_t golden_argmax(std::span<const double> scores) {
  require(!scores.empty(), "no candidate scores");
  return argmax(scores);
}

/// Picks the golden sample of class `cls`: candidates are drawn from test
/// samples of that class the model classifies correctly, each is explained
/// for `cls`, and the one with the highest channel-aggregated attribution
/// wins.
inline GoldenCacheEntry select_golden(const Classifier& f, const Explainer& g, const std::vector<Sample>& test,
                                      std::size_t cls, const AttackConfig& cfg, QueryLog& log) {
  require(cfg.golden_set_size >= 1, "golden_set_size must be >= 1");
  const auto predicted = predict_labels(f, test);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test[i].label == cls && predicted[i] == cls) eligible.push_back(i);
  if (eligible.empty())
    fail(ErrorKind::empty_class, "no correctly classified test sample of class " + std::to_string(cls));

  RngStream rng(cfg.seed, "golden/" + std::to_string(cls));
  const std::size_t n = std::min(cfg.golden_set_size, eligible.size());
  const auto draws = rng.sample_without_replacement(eligible.size(), n);

  GoldenProvenance prov{n, cfg.seed, {}, {}};
  std::vector<ExplanationVector> explanations;
  for (auto d : draws) {
    const auto& x = test[eligible[d]];
    predict(f, x.data, log);
    auto ev = g.explain(x.data, cls, log);
    prov.candidates.push_back(eligible[d]);
    prov.candidate_scores.push_back(max_value(aggregate_channels(ev, x.data.shape())));
    explanations.push_back(std::move(ev));
  }
  const std::size_t best = golden_argmax(prov.candidate_scores);
  const Tensor& winner = test[prov.candidates[best]].data;
  GoldenCacheEntry entry;
  entry.cls = cls;
  entry.sample = winner;
  entry.explanation = explanations[best];
  const Tensor agg = aggregate_channels(entry.explanation, winner.shape());
  entry.positions = top_k_positions(agg, agg.size());
  entry.provenance = std::move(prov);
  return entry;
}

/// One golden entry per class. Classes without eligible candidates are
/// skipped and reported in `warnings`.
inline GoldenCache build_golden_cache(const Classifier& f, const Explainer& g, const std::vector<Sample>& test,
                                      const AttackConfig& cfg) {
  GoldenCache cache;
  for (std::size_t c = 0; c < f.classes(); ++c) {
    try {
      cache.entries.emplace(c, select_golden(f, g, test, c, cfg, cache.offline));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::empty_class) throw;
      cache.warnings.push_back(e.what());
    }
  }
  return cache;
}

// Cache file: magic, version, offline log, warnings, then per entry the
// class, sample, explanation, ranked positions and provenance.
inline constexpr char kGoldenMagic[9] = "XSUBGLD\0";
inline constexpr std::uint32_t kGoldenVersion = 1;

namespace detail {

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (1U << 20)) fail(ErrorKind::format, what + ": implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) fail(ErrorKind::format, what + ": truncated record");
  return s;
}

inline void put_vector(std::ostream& out, const std::vector<double>& v) {
  put<std::uint64_t>(out, v.size());
  put_doubles(out, v.data(), v.size());
}

inline std::vector<double> get_vector(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (1U << 28)) fail(ErrorKind::format, what + ": implausible vector length");
  std::vector<double> v(n);
  get_doubles(in, v.data(), n, what);
  return v;
}

inline void put_indices(std::ostream& out, const std::vector<std::size_t>& v) {
  put<std::uint64_t>(out, v.size());
  for (auto i : v)
    put<std::uint64_t>(out, i);
}

inline std::vector<std::size_t> get_indices(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (1U << 28)) fail(ErrorKind::format, what + ": implausible index count");
  std::vector<std::size_t> v(n);
  for (auto& i : v)
    i = get<std::uint64_t>(in, what);
  return v;
}

inline void put_log(std::ostream& out, const QueryLog& log) {
  put(out, log.predict_count);
  put(out, log.explain_count);
  put(out, log.model_evals);
}

inline QueryLog get_log(std::istream& in, const std::string& what) {
  QueryLog log;
  log.predict_count = get<std::uint64_t>(in, what);
  log.explain_count = get<std::uint64_t>(in, what);
  log.model_evals = get<std::uint64_t>(in, what);
  return log;
}

}  // namespace detail

inline void save_golden_cache(const GoldenCache& cache, std::ostream& out) {
  using namespace detail;
  out.write(kGoldenMagic, 8);
  put(out, kGoldenVersion);
  put_log(out, cache.offline);
  put<std::uint64_t>(out, cache.warnings.size());
  for (const auto& w : cache.warnings)
    put_string(out, w);
  put<std::uint64_t>(out, cache.entries.size());
  for (const auto& [cls, e] : cache.entries) {
    put<std::uint64_t>(out, cls);
    put_shape(out, e.sample.shape());
    put_vector(out, e.sample.vec());
    put<std::uint64_t>(out, e.explanation.target_class);
    put(out, e.explanation.base_value);
    put_shape(out, e.explanation.shape);
    put_vector(out, e.explanation.values);
    std::vector<std::size_t> pos;
    for (auto p : e.positions)
      pos.push_back(p.index);
    put_indices(out, pos);
    put<std::uint64_t>(out, e.provenance.candidate_count);
    put(out, e.provenance.seed);
    put_indices(out, e.provenance.candidates);
    put_vector(out, e.provenance.candidate_scores);
  }
}

inline GoldenCache load_golden_cache(std::istream& in, const std::string& what = "golden cache") {
  using namespace detail;
  check_magic(in, kGoldenMagic, kGoldenVersion, what);
  GoldenCache cache;
  cache.offline = get_log(in, what);
  const auto nw = get<std::uint64_t>(in, what);
  for (std::uint64_t i = 0; i < nw; ++i)
    cache.warnings.push_back(get_string(in, what));
  const auto n = get<std::uint64_t>(in, what);
  for (std::uint64_t i = 0; i < n; ++i) {
    GoldenCacheEntry e;
    e.cls = get<std::uint64_t>(in, what);
    Shape shape = get_shape(in, what);
    auto values = get_vector(in, what);
    try {
      e.sample = Tensor(shape, std::move(values));
    } catch (const Error& err) {
      fail(ErrorKind::format, what + ": " + err.what());
    }
    e.explanation.target_class = get<std::uint64_t>(in, what);
    e.explanation.base_value = get<double>(in, what);
    e.explanation.shape = get_shape(in, what);
    e.explanation.values = get_vector(in, what);
    for (auto p : get_indices(in, what))
      e.positions.push_back(Position{p});
    e.provenance.candidate_count = get<std::uint64_t>(in, what);
    e.provenance.seed = get<std::uint64_t>(in, what);
    e.provenance.candidates = get_indices(in, what);
    e.provenance.candidate_scores = get_vector(in, what);
    cache.entries.emplace(e.cls, std::move(e));
  }
  return cache;
}

inline void save_golden_cache(const GoldenCache& cache, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::file, "cannot write " + path.string());
  save_golden_cache(cache, out);
  if (!out) fail(ErrorKind::file, "short write to " + path.string());
}

inline GoldenCache load_golden_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::file, "missing golden cache " + path.string());
  return load_golden_cache(in, path.string());
}

/// Loads the cache at `path`, or builds and writes it when the file is absent.
inline GoldenCache load_or_build_golden_cache(const std::filesystem::path& path, const Classifier& f, const Explainer& g,
                                              const std::vector<Sample>& test, const AttackConfig& cfg) {
  if (std::filesystem::exists(path)) return load_golden_cache(path);
  GoldenCache cache = build_golden_cache(f, g, test, cfg);
  save_golden_cache(cache, path);
  return cache;
}

// ---------------------------------------------------------------------------
// Substitution
// ---------------------------------------------------------------------------

struct Substitution {
  Tensor perturbed;
  std::vector<Position> modified;
};

/// Replaces the top-K positions of `x` (ranked by `x_agg`) using the golden
/// sample's top-K positions in the same rank order.
///
/// paired:  at x's rank-r position, x - alpha*x + beta*golden[rank-r position]
/// literal: x - alpha*mask(x at x's positions) + beta*mask(golden at golden's positions)
///
/// All channels of a position move together.
inline Substitution substitute(const Tensor& x, const Tensor& x_agg, const GoldenCacheEntry& golden,
                               const AttackConfig& cfg) {
  require(x.shape() == golden.sample.shape(),
          "substitute: sample shape " + shape_string(x.shape()) + " vs golden " + shape_string(golden.sample.shape()));
  require(x_agg.size() == x.positions(), "substitute: aggregated explanation does not cover every position");
  require(cfg.k >= 1 && cfg.k <= x.positions(),
          "substitute: k=" + std::to_string(cfg.k) + " outside [1, " + std::to_string(x.positions()) + "]");
  require(golden.positions.size() >= cfg.k, "substitute: golden entry ranks fewer than k positions");

  const auto mine = top_k_positions(x_agg, cfg.k);
  Mask subtract(x.shape()), add(x.shape());
  for (std::size_t r = 0; r < cfg.k; ++r) {
    const std::size_t p = mine[r].index, q = golden.positions[r].index;
    subtract.set_from(p, x, p);
    if (cfg.placement == PlacementMode::paired)
      add.set_from(p, golden.sample, q);
    else
      add.set_from(q, golden.sample, q);
  }

  Substitution out{apply_mask_arithmetic(x, subtract.tensor(), add.tensor(), cfg.alpha, cfg.beta, cfg.clamp,
                                         cfg.clamp_lo, cfg.clamp_hi),
                   subtract.support()};
  for (auto p : add.support())
    if (std::find(out.modified.begin(), out.modified.end(), p) == out.modified.end()) out.modified.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

/// Uniform class other than `exclude`.
inline std::size_t draw_other_class(RngStream& rng, std::size_t classes, std::size_t exclude) {
  require(classes >= 2 && exclude < classes, "cannot draw a different class");
  const std::size_t c = rng.below(classes - 1);
  return c >= exclude ? c + 1 : c;
}

struct Crafted {
  Tensor perturbed;
  std::size_t clean_label = 0;
  std::size_t substitute_class = 0;
  std::vector<Position> modified;
};

/// Queries f and g once on `x`, picks a random other class from the stream
/// `stream_label` and substitutes features from that class's golden sample.
inline Crafted craft(const Classifier& f, const Explainer& g, const Sample& sample, const GoldenCache& cache,
                     const AttackConfig& cfg, const std::string& stream_label, QueryLog& log) {
  const auto pred = predict(f, sample.data, log);
  const auto ev = g.explain(sample.data, pred.label, log);
  RngStream rng(cfg.seed, stream_label);
  const std::size_t target = draw_other_class(rng, f.classes(), sample.label);
  const auto& golden = cache.at(target);
  auto sub = substitute(sample.data, aggregate_channels(ev, sample.data.shape()), golden, cfg);
  return {std::move(sub.perturbed), pred.label, target, std::move(sub.modified)};
}

struct AttackOutcome {
  Sample original;
  Tensor perturbed;
  std::size_t clean_prediction = 0;
  std::size_t attacked_prediction = 0;
  std::size_t substitute_class = 0;
  bool success = false;
  QueryLog queries;
  std::vector<Position> modified;
};

inline std::string attack_stream(std::size_t index) { return "attack/" + std::to_string(index); }

/// Adversarial attack on one sample. `victim` answers the final query; it is
/// `f` itself except when evaluating a backdoored model.
inline AttackOutcome adversarial_attack(const Classifier& f, const Explainer& g, const Sample& sample,
                                        std::size_t sample_index, const GoldenCache& cache, const AttackConfig& cfg,
                                        const Classifier* victim = nullptr) {
  cfg.validate(sample.data.positions());
  AttackOutcome out;
  auto crafted = craft(f, g, sample, cache, cfg, attack_stream(sample_index), out.queries);
  const auto after = predict(victim ? *victim : f, crafted.perturbed, out.queries);
  out.original = sample;
  out.perturbed = std::move(crafted.perturbed);
  out.clean_prediction = crafted.clean_label;
  out.attacked_prediction = after.label;
  out.substitute_class = crafted.substitute_class;
  out.success = after.label != sample.label;
  out.modified = std::move(crafted.modified);
  return out;
}

inline std::vector<AttackOutcome> run_adversarial(const Classifier& f, const Explainer& g,
                                                  const std::vector<Sample>& samples, const GoldenCache& cache,
                                                  const AttackConfig& cfg, const Classifier* victim = nullptr) {
  std::vector<AttackOutcome> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    out.push_back(adversarial_attack(f, g, samples[i], i, cache, cfg, victim));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double accuracy(const Classifier& f, const std::vector<Sample>& samples) {
  require(!samples.empty(), "accuracy of an empty sample list");
  const auto labels = predict_labels(f, samples);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    hits += labels[i] == samples[i].label;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

inline double attack_sr(const std::vector<AttackOutcome>& outcomes) {
  require(!outcomes.empty(), "attack success rate of an empty outcome list");
  std::size_t flips = 0;
  for (const auto& o : outcomes)
    flips += o.attacked_prediction != o.original.label;
  return static_cast<double>(flips) / static_cast<double>(outcomes.size());
}

// ---------------------------------------------------------------------------
// Backdoor
// ---------------------------------------------------------------------------

struct PoisonedDataset {
  Dataset data;
  std::vector<bool> poisoned;
  /// Index into the clean training set of each poisoned copy.
  std::vector<std::size_t> sources;
  double fraction = 0.0;

  std::size_t poisoned_count() const { return sources.size(); }
};

inline std::size_t poison_count(double fraction, std::size_t n) {
  require(fraction > 0.0 && fraction <= 1.0, "poison fraction must lie in (0,1]");
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  require(count >= 1, "poison fraction selects no training sample");
  return count;
}

/// D plus round(p*|D|) substituted copies of distinct training samples.
inline PoisonedDataset poison_training_set(const Classifier& f, const Explainer& g, const Dataset& train,
                                           const GoldenCache& cache, const AttackConfig& cfg, QueryLog& log) {
  require(!train.empty(), "training set is empty");
  const std::size_t count = poison_count(cfg.poison_fraction, train.size());
  RngStream rng(cfg.seed, "poison/select");
  auto chosen = rng.sample_without_replacement(train.size(), count);
  std::sort(chosen.begin(), chosen.end());

  PoisonedDataset out;
  out.fraction = cfg.poison_fraction;
  out.data = train;
  out.poisoned.assign(train.size(), false);
  for (auto i : chosen) {
    const auto& s = train.samples[i];
    auto crafted = craft(f, g, s, cache, cfg, "poison/" + std::to_string(i), log);
    const std::size_t label = cfg.flip_poison_labels ? crafted.substitute_class : s.label;
    out.data.samples.push_back({std::move(crafted.perturbed), label});
    out.poisoned.push_back(true);
    out.sources.push_back(i);
  }
  return out;
}

struct BackdoorReport {
  Classifier model;
  PoisonedDataset poisoned;
  double clean_accuracy = 0.0;
  double backdoor_accuracy = 0.0;
  double attack_sr = 0.0;
  std::vector<AttackOutcome> outcomes;
};

/// Poisons the training set with substitutions crafted against the clean
/// reference model `f`, retrains from scratch on D and D_p, then measures
/// the backdoored model's clean accuracy on `test` and its Attack SR on
/// triggered copies of `targets` (samples `f` classifies correctly).
inline BackdoorReport backdoor_attack(const TrainConfig& train_cfg, const Classifier& f, const Explainer& g,
                                      const Dataset& train, const Dataset& test, const std::vector<Sample>& targets,
                                      const GoldenCache& cache, const AttackConfig& cfg) {
  cfg.validate(train.samples.empty() ? 0 : train.samples.front().data.positions());
  QueryLog offline;
  BackdoorReport report;
  report.poisoned = poison_training_set(f, g, train, cache, cfg, offline);
  report.model = xsub::train(report.poisoned.data, train_cfg);
  report.clean_accuracy = accuracy(f, test.samples);
  report.backdoor_accuracy = accuracy(report.model, test.samples);
  report.outcomes = run_adversarial(f, g, targets, cache, cfg, &report.model);
  report.attack_sr = attack_sr(report.outcomes);
  return report;
}

}  // namespace xsub
