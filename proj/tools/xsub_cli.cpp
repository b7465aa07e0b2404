// Command-line front end: train, golden, attack, backdoor, defend, sweep,
// export-images, plot-data.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xsub/xsub.hpp"

namespace fs = std::filesystem;
using namespace xsub;
using namespace xsub::harness;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
  std::string csv;
  std::size_t count = 8;
};

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
    case ErrorKind::invalid_argument:
    case ErrorKind::capacity: return 2;
    case ErrorKind::file:
    case ErrorKind::format: return 3;
    case ErrorKind::numerical:
    case ErrorKind::training:
    case ErrorKind::empty_class: return 4;
  }
  return 1;
}

fs::path out_dir(const Options& o) {
  std::string dir = o.out;
  if (dir.empty())
    if (const char* env = std::getenv("XSUB_OUT")) dir = env;
  if (dir.empty()) dir = "xsub_out";
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  validate(c);
  return c;
}

/// Data, model and explainer for the configured seed. The model comes from
/// the checkpoint in the output directory.
struct Context {
  ExperimentConfig cfg;
  fs::path dir;
  Dataset train, test;
  Classifier model;
  std::optional<Explainer> explainer;
};

std::unique_ptr<Context> open_context(const Options& o) {
  auto ctx = std::make_unique<Context>();
  ctx->cfg = load(o);
  ctx->dir = out_dir(o);
  std::tie(ctx->train, ctx->test) = load_data(ctx->cfg.data, ctx->cfg.seed);
  ctx->model = load_classifier(ctx->dir / "model.bin");
  if (ctx->model.input_shape() != ctx->train.samples.front().data.shape())
    fail(ErrorKind::config, "checkpoint input shape does not match the configured data");
  ctx->explainer.emplace(ctx->model,
                         make_background(ctx->train.samples, ctx->cfg.explainer.background_size, ctx->cfg.seed),
                         explainer_config(ctx->cfg, ctx->cfg.seed));
  return ctx;
}

GoldenCache golden_for(const Context& ctx) {
  return load_or_build_golden_cache(ctx.dir / "golden.bin", ctx.model, *ctx.explainer, ctx.test.samples,
                                    attack_config(ctx.cfg, ctx.cfg.seed));
}

MetricsRecord base_record(const ExperimentConfig& c, Scenario s) {
  MetricsRecord r;
  r.seed = c.seed;
  r.alpha = c.attack.alpha;
  r.beta = c.attack.beta;
  r.k = c.attack.k;
  r.mode = c.attack.placement;
  r.scenario = s;
  return r;
}

int cmd_train(const Options& o) {
  const auto c = load(o);
  const auto dir = out_dir(o);
  const auto [train_set, test_set] = load_data(c.data, c.seed);
  std::vector<double> losses;
  const auto model = train(train_set, train_config(c, c.seed), &losses);
  save_classifier(model, dir / "model.bin");
  std::cout << "final loss " << losses.back() << "\n";
  std::cout << "test accuracy " << accuracy(model, test_set.samples) << "\n";
  std::cout << "wrote " << (dir / "model.bin").string() << "\n";
  return 0;
}

int cmd_golden(const Options& o) {
  const auto ctx = open_context(o);
  const auto cache = build_golden_cache(ctx->model, *ctx->explainer, ctx->test.samples, attack_config(ctx->cfg, ctx->cfg.seed));
  save_golden_cache(cache, ctx->dir / "golden.bin");
  for (const auto& [cls, e] : cache.entries)
    std::cout << "class " << cls << ": test sample " << e.provenance.candidates[golden_argmax(e.provenance.candidate_scores)]
              << " (best of " << e.provenance.candidate_count << " candidates), top position "
              << e.positions.front().index << "\n";
  for (const auto& w : cache.warnings)
    std::cerr << "warning: " << w << "\n";
  std::cout << "offline queries: predict " << cache.offline.predict_count << ", explain " << cache.offline.explain_count
            << "\n";
  return 0;
}

int cmd_attack(const Options& o) {
  const auto ctx = open_context(o);
  const auto cache = golden_for(*ctx);
  const auto targets = take(filter_correct(ctx->model, ctx->test), ctx->cfg.max_samples);
  if (targets.empty()) fail(ErrorKind::numerical, "the model classifies no test sample correctly");
  const auto start = std::chrono::steady_clock::now();
  const auto outcomes = run_adversarial(ctx->model, *ctx->explainer, targets, cache, attack_config(ctx->cfg, ctx->cfg.seed));
  auto r = base_record(ctx->cfg, Scenario::adversarial);
  r.accuracy = accuracy(ctx->model, ctx->test.samples);
  r.attack_sr = attack_sr(outcomes);
  check_constant_budget(outcomes, r);
  if (fs::exists(ctx->dir / "reference.bin"))
    r.detection_rate = detection_over(load_reference(ctx->dir / "reference.bin"), ctx->model, outcomes);
  r.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  append_csv(ctx->dir / "results.csv", {r});
  std::cout << kCsvHeader << "\n" << csv_row(r) << "\n";
  return 0;
}

int cmd_backdoor(const Options& o) {
  const auto ctx = open_context(o);
  const auto cache = golden_for(*ctx);
  const auto targets = take(filter_correct(ctx->model, ctx->test), ctx->cfg.max_samples);
  if (targets.empty()) fail(ErrorKind::numerical, "the model classifies no test sample correctly");
  const auto start = std::chrono::steady_clock::now();
  const auto report = backdoor_attack(train_config(ctx->cfg, ctx->cfg.seed), ctx->model, *ctx->explainer, ctx->train,
                                      ctx->test, targets, cache, attack_config(ctx->cfg, ctx->cfg.seed));
  auto r = base_record(ctx->cfg, Scenario::backdoor);
  r.accuracy = report.backdoor_accuracy;
  r.attack_sr = report.attack_sr;
  check_constant_budget(report.outcomes, r);
  if (ctx->cfg.defense) {
    const auto ref = calibrate(report.model, take(ctx->train.samples, ctx->cfg.calibration));
    r.detection_rate = detection_over(ref, report.model, report.outcomes);
  }
  r.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  save_classifier(report.model, ctx->dir / "backdoored.bin");
  append_csv(ctx->dir / "results.csv", {r});
  std::cout << "poisoned samples " << report.poisoned.poisoned_count() << "\n";
  std::cout << "clean accuracy " << report.clean_accuracy << ", backdoored accuracy " << report.backdoor_accuracy << "\n";
  std::cout << kCsvHeader << "\n" << csv_row(r) << "\n";
  return 0;
}

int cmd_defend(const Options& o) {
  const auto ctx = open_context(o);
  const auto ref = calibrate(ctx->model, take(ctx->train.samples, ctx->cfg.calibration));
  save_reference(ref, ctx->dir / "reference.bin");
  std::cout << "calibrated on " << ref.calibration_size << " samples, threshold " << ref.threshold << "\n";
  std::vector<DetectionResult> clean;
  const auto& test = ctx->test.samples;
  for (std::size_t i = 0; i < test.size(); ++i)
    clean.push_back(score(ref, ctx->model, test[i].data, i));
  std::cout << "clean test flag rate " << detection_rate(clean) << "\n";
  const auto cache = golden_for(*ctx);
  const auto targets = take(filter_correct(ctx->model, ctx->test), ctx->cfg.max_samples);
  const auto outcomes = run_adversarial(ctx->model, *ctx->explainer, targets, cache, attack_config(ctx->cfg, ctx->cfg.seed));
  std::cout << "detection rate on perturbed samples " << detection_over(ref, ctx->model, outcomes) << "\n";
  return 0;
}

int cmd_sweep(const Options& o) {
  const auto c = load(o);
  const auto dir = out_dir(o);
  const auto records = run_sweep(c, o.workers);
  const auto path = dir / "results.csv";
  fs::remove(path);
  append_csv(path, records);
  std::cout << "wrote " << records.size() << " rows to " << path.string() << "\n";
  return 0;
}

int cmd_export(const Options& o) {
  const auto ctx = open_context(o);
  const auto cache = golden_for(*ctx);
  auto targets = filter_correct(ctx->model, ctx->test);
  targets = take(targets, o.count);
  if (targets.empty()) fail(ErrorKind::numerical, "the model classifies no test sample correctly");
  const auto outcomes = run_adversarial(ctx->model, *ctx->explainer, targets, cache, attack_config(ctx->cfg, ctx->cfg.seed));
  const auto& desc = ctx->test.descriptor;
  const auto images = ctx->dir / "images";
  fs::create_directories(images);
  const std::string ext = desc.channels() == 1 ? ".pgm" : ".ppm";
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    write_pnm(images / ("sample_" + std::to_string(i) + "_clean" + ext), outcomes[i].original.data, desc);
    write_pnm(images / ("sample_" + std::to_string(i) + "_perturbed" + ext), outcomes[i].perturbed, desc);
  }
  for (const auto& [cls, e] : cache.entries)
    write_pnm(images / ("golden_" + std::to_string(cls) + ext), e.sample, desc);
  std::cout << "wrote " << 2 * outcomes.size() + cache.entries.size() << " images to " << images.string() << "\n";
  return 0;
}

int cmd_plot(const Options& o) {
  const auto dir = out_dir(o);
  const fs::path csv = o.csv.empty() ? dir / "results.csv" : fs::path(o.csv);
  for (const auto& p : emit_plot_data(csv, dir))
    std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explanation-guided feature substitution attacks"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "Configuration file (key = value lines)");
  app.add_option("--out", o.out, "Output directory (default: $XSUB_OUT or ./xsub_out)");
  app.add_option("--seed-override", o.seed, "Replace run.seed");

  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Entry entries[] = {
      {"train", "Train the classifier and write model.bin", cmd_train},
      {"golden", "Select one golden sample per class and write golden.bin", cmd_golden},
      {"attack", "Run the adversarial attack and append to results.csv", cmd_attack},
      {"backdoor", "Poison, retrain and evaluate the trigger", cmd_backdoor},
      {"defend", "Calibrate the activation-Gram detector and write reference.bin", cmd_defend},
      {"sweep", "Run the configured parameter sweep and write results.csv", cmd_sweep},
      {"export-images", "Write clean, perturbed and golden images", cmd_export},
      {"plot-data", "Summarize results.csv into per-series plot files", cmd_plot},
  };
  int (*chosen)(const Options&) = nullptr;
  for (const auto& e : entries) {
    auto* sub = app.add_subcommand(e.name, e.help);
    if (std::string(e.name) == "sweep") sub->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
    if (std::string(e.name) == "export-images") sub->add_option("--count", o.count, "Samples to export");
    if (std::string(e.name) == "plot-data") sub->add_option("--csv", o.csv, "Results file (default: <out>/results.csv)");
    sub->callback([&chosen, run = e.run] { chosen = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    return chosen(o);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
