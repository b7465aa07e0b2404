#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "xsub/harness/config.hpp"
#include "xsub/harness/plot.hpp"
#include "xsub/harness/sweep.hpp"

using namespace xsub;
using namespace xsub::harness;

namespace {

template <class F>
std::string config_error(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    return e.what();
  }
  ADD_FAILURE() << "no xsub::Error thrown";
  return {};
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

const char* kTiny = R"(
data.shape = 4,4,1
data.classes = 3
data.per_class = 50
train.hidden = 8
train.epochs = 30
explainer.coalitions = 48
explainer.background = 4
attack.golden_set_size = 4
attack.max_samples = 10
sweep.alphas = 1, 100
sweep.betas = 1, 100
sweep.ks = 2
sweep.seeds = 1, 2, 3
)";

/// Drops the trailing wall_time_ms column of every line.
std::string without_wall_time(const std::vector<MetricsRecord>& rows) {
  std::string out;
  for (const auto& r : rows) {
    const auto line = csv_row(r);
    out += line.substr(0, line.rfind(',')) + "\n";
  }
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("xsub_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Config, DefaultsWhenEmpty) {
  const auto c = parse_config_string("# nothing\n\n");
  EXPECT_EQ(c.data.source, "synth");
  EXPECT_EQ(c.sweep.seeds.size(), 10u);
  EXPECT_EQ(c.attack.k, AttackConfig{}.k);
}

TEST(Config, ParsesValuesAndLists) {
  const auto c = parse_config_string(kTiny);
  EXPECT_EQ(c.data.shape, (Shape{4, 4, 1}));
  EXPECT_EQ(c.sweep.alphas, (std::vector<double>{1, 100}));
  EXPECT_EQ(c.sweep.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(c.max_samples, 10u);
  EXPECT_EQ(c.sweep.cell_count(), 12u);
}

TEST(Config, UnknownKeyIsNamed) {
  const auto msg = config_error([] { parse_config_string("attack.gamma = 3\n"); });
  EXPECT_NE(msg.find("attack.gamma"), std::string::npos) << msg;
}

TEST(Config, RepeatedKeyIsNamed) {
  const auto msg = config_error([] { parse_config_string("attack.k = 3\nattack.k = 4\n"); });
  EXPECT_NE(msg.find("attack.k"), std::string::npos) << msg;
}

TEST(Config, MalformedValues) {
  config_error([] { parse_config_string("attack.alpha = lots\n"); });
  config_error([] { parse_config_string("attack.k = -1\n"); });
  config_error([] { parse_config_string("attack.mode = diagonal\n"); });
  config_error([] { parse_config_string("sweep.alphas = ,\n"); });
  config_error([] { parse_config_string("just words\n"); });
}

TEST(Config, ValidationRejectsBadCombinations) {
  config_error([] { parse_config_string("sweep.seeds = 1, 1\n"); });
  config_error([] { parse_config_string("train.epochs = 0\n"); });
  config_error([] { parse_config_string("attack.poison_fraction = 0\n"); });
  config_error([] { parse_config_string("data.train_fraction = 1\n"); });
}

TEST(Config, MissingFileIsFileError) {
  EXPECT_EQ(kind_of([] { load_config("/nonexistent/run.conf"); }), ErrorKind::file);
}

TEST(Config, KeysAreListed) {
  const auto keys = config_keys();
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  EXPECT_NE(std::find(keys.begin(), keys.end(), "sweep.ks"), keys.end());
}

TEST(Csv, HeaderAndRowFormat) {
  EXPECT_STREQ(kCsvHeader,
               "seed,alpha,beta,k,mode,scenario,accuracy,attack_sr,detection_rate,queries_predict,queries_explain,"
               "wall_time_ms");
  MetricsRecord r;
  r.seed = 3;
  r.alpha = 0.5;
  r.beta = 100;
  r.k = 5;
  r.accuracy = 0.975;
  r.attack_sr = 0.25;
  r.queries_predict = 2;
  r.queries_explain = 1;
  r.wall_time_ms = 12.3456;
  EXPECT_EQ(csv_row(r), "3,0.5,100,5,paired,adversarial,0.975000,0.250000,,2,1,12.346");
  r.detection_rate = 1.0;
  r.scenario = Scenario::backdoor;
  r.mode = PlacementMode::literal;
  EXPECT_EQ(csv_row(r), "3,0.5,100,5,literal,backdoor,0.975000,0.250000,1.000000,2,1,12.346");
}

TEST(Csv, AppendWritesHeaderOnce) {
  const auto dir = scratch("append");
  const auto path = dir / "results.csv";
  MetricsRecord r;
  append_csv(path, {r});
  append_csv(path, {r, r});
  std::ifstream in(path);
  const auto rows = read_results_csv(in);
  EXPECT_EQ(rows.size(), 3u);
  std::filesystem::remove_all(dir);
}

TEST(Cells, CanonicalOrder) {
  SweepSpec s;
  s.alphas = {1, 2};
  s.betas = {3};
  s.ks = {1, 5};
  s.seeds = {7, 8};
  const auto cells = enumerate_cells(s);
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].seed, 7u);
  EXPECT_EQ(cells[1].seed, 8u);
  EXPECT_EQ(cells[2].alpha, 2.0);
  EXPECT_EQ(cells[4].k, 5u);
}

TEST(Sweep, RowCountBudgetAndWorkerInvariance) {
  const auto c = parse_config_string(kTiny);
  const auto serial = run_sweep(c, 1);
  ASSERT_EQ(serial.size(), 12u);
  for (const auto& r : serial) {
    EXPECT_EQ(r.queries_predict, 2u);
    EXPECT_EQ(r.queries_explain, 1u);
    EXPECT_GE(r.attack_sr, 0.0);
    EXPECT_LE(r.attack_sr, 1.0);
    EXPECT_FALSE(r.detection_rate.has_value());
  }
  const auto parallel = run_sweep(c, 2);
  EXPECT_EQ(without_wall_time(serial), without_wall_time(parallel));
}

TEST(Sweep, KBeyondPositionsIsConfigError) {
  auto c = parse_config_string(kTiny);
  c.sweep.ks = {17};
  config_error([&] { run_sweep(c); });
}

TEST(Sweep, DefenseFillsDetectionColumn) {
  auto c = parse_config_string(kTiny);
  c.defense = true;
  c.sweep.alphas = {1};
  c.sweep.betas = {1};
  c.sweep.seeds = {1};
  const auto rows = run_sweep(c);
  ASSERT_EQ(rows.size(), 1u);
  ASSERT_TRUE(rows[0].detection_rate.has_value());
  EXPECT_GE(*rows[0].detection_rate, 0.0);
  EXPECT_LE(*rows[0].detection_rate, 1.0);
}

TEST(Plot, MeanAndStdOverSeeds) {
  std::vector<MetricsRecord> rows;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    MetricsRecord r;
    r.seed = seed;
    r.alpha = r.beta = 10;
    r.k = 5;
    r.attack_sr = seed <= 5 ? 0.2 : 0.4;
    r.detection_rate = 0.5;
    rows.push_back(r);
  }
  MetricsRecord lone;
  lone.alpha = lone.beta = 1;
  lone.k = 5;
  lone.attack_sr = 0.7;
  lone.detection_rate = 0.1;
  rows.push_back(lone);

  const auto dir = scratch("plot");
  append_csv(dir / "results.csv", rows);
  const auto written = emit_plot_data(dir / "results.csv", dir);
  ASSERT_EQ(written.size(), 1u);
  EXPECT_EQ(written[0].filename(), "plot_adversarial_k5_paired.csv");
  std::ifstream in(written[0]);
  std::stringstream body;
  body << in.rdbuf();
  EXPECT_EQ(body.str(),
            "alpha,beta,n,mean_attack_sr,std_attack_sr,mean_detection_rate,std_detection_rate\n"
            "1,1,1,0.700000,0.000000,0.100000,0.000000\n"
            "10,10,10,0.300000,0.100000,0.500000,0.000000\n");
  std::filesystem::remove_all(dir);
}

TEST(Plot, DetectionLeftBlankWhenMissing) {
  std::vector<CsvRow> rows(2);
  rows[0].attack_sr = 0.5;
  rows[1].attack_sr = 0.5;
  rows[1].seed = 1;
  rows[1].detection_rate = 0.3;
  const auto series = summarize(rows);
  ASSERT_EQ(series.size(), 1u);
  ASSERT_EQ(series[0].points.size(), 1u);
  EXPECT_FALSE(series[0].points[0].mean_detection.has_value());
}

TEST(Plot, MalformedInputs) {
  std::istringstream empty("");
  EXPECT_EQ(kind_of([&] { read_results_csv(empty); }), ErrorKind::format);
  std::istringstream header("seed,alpha\n1,2\n");
  EXPECT_EQ(kind_of([&] { read_results_csv(header); }), ErrorKind::format);
  std::istringstream no_rows(std::string(kCsvHeader) + "\n");
  EXPECT_EQ(kind_of([&] { read_results_csv(no_rows); }), ErrorKind::format);
  std::istringstream short_row(std::string(kCsvHeader) + "\n1,2,3\n");
  EXPECT_EQ(kind_of([&] { read_results_csv(short_row); }), ErrorKind::format);
  std::istringstream bad_num(std::string(kCsvHeader) + "\n1,x,1,1,paired,adversarial,1,0,,2,1,0\n");
  EXPECT_EQ(kind_of([&] { read_results_csv(bad_num); }), ErrorKind::format);
  EXPECT_EQ(kind_of([] { emit_plot_data("/nonexistent/results.csv", "/tmp"); }), ErrorKind::file);
}
