#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "testing.hpp"

namespace fedstar {
namespace {

namespace fs = std::filesystem;

ExperimentSpec parse(const std::string& text) {
  std::istringstream is(text);
  return parse_spec(is);
}

std::size_t parse_error_line(const std::string& text) {
  try {
    parse(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  ADD_FAILURE() << "expected a parse error for:\n" << text;
  return 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("fedstar_test_" + name);
  fs::remove_all(dir);
  return dir;
}

// Small enough to run several times per test.
const std::string kTiny = R"(
[experiment]
trials = 2
seed = 5

[dataset]
n = 300
classes = 4
dim = 6

[split]
L = 0.2

[federation]
N = 3
R = 3
q = 0.67
batch_size = 16
hidden = 12
)";

TEST(SpecParsing, DefaultsAndRequiredKeys) {
  auto spec = parse("[federation]\nN = 5\nR = 7\n[split]\nL = 0.1\n");
  EXPECT_EQ(spec.federation.num_clients, 5u);
  EXPECT_EQ(spec.federation.rounds, 7u);
  EXPECT_EQ(spec.split.labeled_fraction, 0.1);
  EXPECT_EQ(spec.federation.selftrain.beta, 0.5);
  EXPECT_EQ(spec.federation.selftrain.temperature, 4.0);
  EXPECT_EQ(spec.federation.participation, 0.8);
  EXPECT_THROW(parse("[federation]\nN = 5\n[split]\nL = 0.1\n"), ParseError);
  EXPECT_THROW(parse("[federation]\nR = 5\n[split]\nL = 0.1\n"), ParseError);
  EXPECT_THROW(parse("[federation]\nN = 5\nR = 5\n"), ParseError);
}

TEST(SpecParsing, ErrorsCarryLineNumbers) {
  EXPECT_EQ(parse_error_line("[federation]\nN = 5\nR = 5\nq = 0\n[split]\nL = 0.1\n"), 4u);
  EXPECT_EQ(parse_error_line("[federation]\nN = 5\nR = 5\nq = 1.5\n[split]\nL = 0.1\n"), 4u);
  EXPECT_EQ(parse_error_line("[federation]\nN = 5\nR = 5\nbogus = 1\n"), 4u);
  EXPECT_EQ(parse_error_line("[federation]\nN = 5\nN = 6\n"), 3u);
  EXPECT_EQ(parse_error_line("[split]\nL = 0.1\nU = 0\n"), 3u);
  EXPECT_EQ(parse_error_line("[federation]\nN = five\n"), 2u);
  EXPECT_EQ(parse_error_line("[federation\n"), 1u);
  EXPECT_EQ(parse_error_line("# header\n\n[federation]\nT = 0\n"), 4u);
  EXPECT_EQ(parse_error_line("[partition]\nsigma = 0.6\n"), 2u);
  EXPECT_EQ(parse_error_line("[federation]\nconfidence = maybe\n"), 2u);
}

TEST(SpecParsing, CrossFieldChecks) {
  EXPECT_THROW(parse("[federation]\nN = 5\nR = 5\ntau_min = 0.9\ntau_max = 0.5\n[split]\nL = 0.1\n"), ParseError);
  EXPECT_THROW(parse("[federation]\nN = 5\nR = 5\n[split]\nL = 0.1\n[partition]\nclass_mu = 11\n"), ParseError);
  EXPECT_THROW(parse("[federation]\nN = 5\nR = 5\n[split]\nL = 0.1\n[dataset]\nfile = /no/such/file.csv\n"),
               ParseError);
}

TEST(SpecParsing, WriteParseRoundTrip) {
  auto spec = parse(kTiny);
  spec.partition.class_mu = 3;
  spec.partition.class_sigma_c = 0.25;
  spec.federation.selftrain.confidence = ConfidenceSource::kUnscaled;
  spec.federation.selftrain.learning_rate = 0.1 + 0.2;  // not exactly representable in short form
  spec.modes = {TrainingMode::kFedStar};
  spec.pretrain.enabled = true;
  std::ostringstream first;
  write_spec(first, spec);
  auto reparsed = parse(first.str());
  std::ostringstream second;
  write_spec(second, reparsed);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(reparsed.federation.selftrain.learning_rate, spec.federation.selftrain.learning_rate);
  EXPECT_EQ(reparsed.partition.class_mu, spec.partition.class_mu);
  EXPECT_EQ(reparsed.modes, spec.modes);
}

TEST(SpecParsing, MissingFileIsIoError) { EXPECT_THROW(load_spec("/no/such/spec.ini"), IoError); }

TEST(SpecParsing, OutputDirOverrideFromEnvironment) {
  auto spec = parse(kTiny);
  ::setenv("FEDSTAR_OUTPUT_DIR", "/tmp/elsewhere", 1);
  apply_env_overrides(spec);
  ::unsetenv("FEDSTAR_OUTPUT_DIR");
  EXPECT_EQ(spec.output_dir, "/tmp/elsewhere");
  auto untouched = parse(kTiny);
  apply_env_overrides(untouched);
  EXPECT_EQ(untouched.output_dir, "fedstar_out");
}

TEST(SetParameter, KnownAndUnknownNames) {
  auto spec = parse(kTiny);
  set_parameter(spec, "q", "0.4");
  EXPECT_EQ(spec.federation.participation, 0.4);
  set_parameter(spec, "class_sigma_c", "0.3");
  EXPECT_EQ(spec.partition.class_sigma_c, 0.3);
  EXPECT_THROW(set_parameter(spec, "hidden", "8"), ParameterError);
  EXPECT_THROW(set_parameter(spec, "q", "0"), ParseError);
}

TEST(RunExperiment, FilesAreByteIdenticalAcrossRuns) {
  auto spec = parse(kTiny);
  spec.output_dir = scratch_dir("repeat_a").string();
  run_experiment(spec);
  auto other = spec;
  other.output_dir = scratch_dir("repeat_b").string();
  run_experiment(other);
  for (const auto* rel : {"summary.csv", "trial_0/fedstar.csv", "trial_1/supervised_fl.csv"}) {
    ASSERT_TRUE(fs::exists(fs::path(spec.output_dir) / rel)) << rel;
    EXPECT_EQ(slurp(fs::path(spec.output_dir) / rel), slurp(fs::path(other.output_dir) / rel)) << rel;
  }
  fs::remove_all(spec.output_dir);
  fs::remove_all(other.output_dir);
}

TEST(RunExperiment, ModesDoNotInfluenceEachOther) {
  auto both = parse(kTiny);
  auto only = both;
  only.modes = {TrainingMode::kFedStar};
  auto a = run_experiment(both, false);
  auto b = run_experiment(only, false);
  ASSERT_EQ(a.trials.size(), b.trials.size());
  for (std::size_t t = 0; t < a.trials.size(); ++t) {
    EXPECT_EQ(a.trials[t].partition_hash, b.trials[t].partition_hash);
    EXPECT_EQ(a.trials[t].histories[1].records, b.trials[t].histories[0].records);
    EXPECT_EQ(a.trials[t].histories[1].final_params, b.trials[t].histories[0].final_params);
  }
}

TEST(RunExperiment, SummaryStatisticsMatchTrials) {
  auto spec = parse(kTiny);
  spec.trials = 3;
  auto report = run_experiment(spec, false);
  ASSERT_EQ(report.modes.size(), 2u);
  for (std::size_t m = 0; m < report.modes.size(); ++m) {
    const auto& s = report.modes[m];
    ASSERT_EQ(s.trial_accuracies.size(), 3u);
    double sum = 0.0;
    for (std::size_t t = 0; t < 3; ++t) {
      EXPECT_EQ(s.trial_accuracies[t], report.trials[t].histories[m].final_accuracy());
      sum += s.trial_accuracies[t];
    }
    const double mean = sum / 3.0;
    double ss = 0.0;
    for (double a : s.trial_accuracies) ss += (a - mean) * (a - mean);
    EXPECT_NEAR(s.mean_accuracy, mean, 1e-9);
    EXPECT_NEAR(s.variance_accuracy, ss / 2.0, 1e-12);
    EXPECT_NEAR(s.std_accuracy, std::sqrt(ss / 2.0), 1e-12);
    EXPECT_NEAR(report.mean_accuracy_at(s.mode, 2), mean, 1e-12);
  }
  // Trials use different seeds and partitions.
  EXPECT_NE(report.trials[0].partition_hash, report.trials[1].partition_hash);
}

TEST(RunExperiment, ZeroRoundsReportsInitialAccuracy) {
  auto spec = parse(kTiny);
  spec.federation.rounds = 0;
  auto report = run_experiment(spec, false);
  for (const auto& t : report.trials) {
    for (const auto& h : t.histories) EXPECT_TRUE(h.records.empty());
  }
  EXPECT_EQ(report.modes[0].trial_accuracies, report.modes[1].trial_accuracies);
}

TEST(RunExperiment, DatasetFileWithUnlabeledRows) {
  const auto dir = scratch_dir("file_input");
  fs::create_directories(dir);
  Dataset d = make_blobs(200, 3, 4, 0.4, 21);
  {
    std::ofstream os(dir / "data.csv");
    write_dataset(os, d, testing::random_matrix(40, 4, 22));
  }
  auto spec = parse(kTiny);
  spec.dataset.file = (dir / "data.csv").string();
  auto task = prepare_task(spec);
  EXPECT_EQ(task.train.size() + task.test.size(), 200u);
  EXPECT_EQ(task.extra_unlabeled.rows(), 40u);
  auto clients = build_clients(spec, task, 1);
  std::size_t unlabeled = 0;
  for (const auto& c : clients) unlabeled += c.num_unlabeled();
  EXPECT_EQ(unlabeled, task.train.size() - task.train.size() / 5 + 40u);
  EXPECT_NO_THROW(run_experiment(spec, false));
  fs::remove_all(dir);
}

TEST(Sweep, ParticipationKeepsDatasetFixed) {
  auto spec = parse(kTiny);
  spec.trials = 1;
  spec.output_dir = scratch_dir("sweep").string();
  auto reports = sweep(spec, "q", {"0.2", "0.4", "0.8"});
  ASSERT_EQ(reports.size(), 3u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.dataset_hash, reports[0].dataset_hash);
    EXPECT_EQ(r.trials[0].partition_hash, reports[0].trials[0].partition_hash);
  }
  EXPECT_EQ(reports[0].trials[0].histories[0].records[0].participating.size(), 1u);
  EXPECT_EQ(reports[2].trials[0].histories[0].records[0].participating.size(), 2u);
  EXPECT_TRUE(fs::exists(fs::path(spec.output_dir) / "q=0.4" / "summary.csv"));
  EXPECT_THROW(sweep(spec, "hidden", {"8"}, false), ParameterError);
  fs::remove_all(spec.output_dir);
}

TEST(Sweep, LabeledFractionChangesOnlyTheSplit) {
  auto spec = parse(kTiny);
  spec.trials = 1;
  auto reports = sweep(spec, "L", {"0.1", "0.3"}, false);
  EXPECT_EQ(reports[0].dataset_hash, reports[1].dataset_hash);
  EXPECT_NE(reports[0].trials[0].partition_hash, reports[1].trials[0].partition_hash);
  EXPECT_EQ(reports[1].labeled_fraction, 0.3);
}

TEST(EmitCsv, HistoryFilesAreStable) {
  const auto dir = scratch_dir("emit");
  fs::create_directories(dir);
  emit_csv(FederationHistory{}, dir / "empty.csv");
  EXPECT_EQ(slurp(dir / "empty.csv"), "round,tau,accuracy,loss,acceptance_rate,participants\n");

  auto report = run_experiment(parse(kTiny), false);
  const auto& history = report.trials[0].histories[0];
  emit_csv(history, dir / "a.csv");
  emit_csv(history, dir / "b.csv");
  const auto text = slurp(dir / "a.csv");
  EXPECT_EQ(text, slurp(dir / "b.csv"));
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), history.records.size() + 1);

  emit_csv(report, dir / "summary.csv");
  const auto summary = slurp(dir / "summary.csv");
  EXPECT_EQ(summary.rfind("mode,labeled_fraction,trials,mean_accuracy,std_accuracy,variance_accuracy,", 0), 0u);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 3);
  EXPECT_THROW(emit_csv(history, dir / "missing" / "x.csv"), IoError);
  fs::remove_all(dir);
}

TEST(ParamsIo, RoundTripIsExact) {
  auto params = init_params(ArchSpec{5, {7, 3}, 4}, 8);
  params.layers[0].weight(0, 0) = 0.1 + 0.2;
  std::stringstream ss;
  write_params(ss, params);
  EXPECT_EQ(read_params(ss), params);
  std::istringstream bad("not a params file\n");
  EXPECT_ANY_THROW(read_params(bad));
}

TEST(InitialParams, PretrainingAndInitFile) {
  auto spec = parse(kTiny);
  auto task = prepare_task(spec);
  auto arch = experiment_arch(spec, task);
  EXPECT_EQ(initial_params(spec, arch, 3), init_params(arch, derive_seed(3, "init")));

  spec.pretrain.enabled = true;
  spec.pretrain.corpus_n = 128;
  spec.pretrain.contrastive.epochs = 1;
  auto pretrained = initial_params(spec, arch, 3);
  EXPECT_EQ(pretrained.arch, arch);
  EXPECT_NE(pretrained, init_params(arch, derive_seed(3, "init")));

  const auto dir = scratch_dir("init_file");
  fs::create_directories(dir);
  save_params(dir / "p.params", pretrained);
  spec.pretrain.enabled = false;
  spec.pretrain.init_file = (dir / "p.params").string();
  EXPECT_EQ(initial_params(spec, arch, 99), pretrained);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace fedstar
