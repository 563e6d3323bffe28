#pragma once

// Experiment files, trial orchestration and report output.
//
// Experiment files are flat `key = value` lines grouped under `[section]`
// headers; `#` starts a comment. Every knob has a default except the
// required keys N, R (section [federation]) and L (section [split]).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedstar/data.hpp"
#include "fedstar/error.hpp"
#include "fedstar/federation.hpp"
#include "fedstar/nn.hpp"
#include "fedstar/params_io.hpp"
#include "fedstar/pretrain.hpp"
#include "fedstar/seed.hpp"
#include "fedstar/selftrain.hpp"

namespace fedstar {

struct DatasetSpec {
  std::size_t n = 5000;
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  double spread = 0.7;  // centralized accuracy lands a little under 0.9
  double test_fraction = 0.2;
  std::string file;  // when set, replaces the generated blobs
};

struct PretrainSpec {
  bool enabled = false;
  // Views differ by about one within-cluster standard deviation, so the
  // encoder learns the invariance a class actually has.
  ContrastiveConfig contrastive{.augment_noise = 0.7};
  std::size_t corpus_n = 2000;
  std::size_t corpus_classes = 20;
  double corpus_spread = 0.7;
  std::string init_file;  // load initial weights instead of pretraining
};

struct ExperimentSpec {
  DatasetSpec dataset;
  SplitSpec split;
  PartitionSpec partition;
  FederationConfig federation;
  std::vector<std::size_t> hidden_dims{64, 32};
  std::vector<TrainingMode> modes{TrainingMode::kSupervisedFl, TrainingMode::kFedStar};
  PretrainSpec pretrain;
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  std::string output_dir = "fedstar_out";
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto next = s.find(',', pos);
    if (next == std::string_view::npos) next = s.size();
    auto item = trim(s.substr(pos, next - pos));
    if (!item.empty()) out.push_back(item);
    pos = next + 1;
  }
  return out;
}

inline double parse_real(const std::string& v, std::size_t line, std::string_view key) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ParseError(line, std::string(key) + ": '" + v + "' is not a number");
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& v, std::size_t line, std::string_view key) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ParseError(line, std::string(key) + ": '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline bool parse_bool(const std::string& v, std::size_t line, std::string_view key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError(line, std::string(key) + ": expected true or false");
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
std::string join(const std::vector<T>& items, char sep = ',') {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) os << sep;
    os << items[i];
  }
  return os.str();
}

struct Range {
  double lo;
  double hi;
  bool lo_open;
  bool hi_open;
  bool contains(double v) const {
    return (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  }
  std::string describe() const {
    std::ostringstream os;
    os << (lo_open ? '(' : '[') << lo << ", " << hi << (hi_open ? ')' : ']');
    return os.str();
  }
};

inline constexpr double kInf = 1e300;

struct KeyDescriptor {
  std::string section;
  std::string key;
  std::function<void(ExperimentSpec&, const std::string&, std::size_t)> set;
  std::function<std::string(const ExperimentSpec&)> get;
};

template <typename Access>
KeyDescriptor real_key(std::string section, std::string key, Access access, Range range) {
  KeyDescriptor d{section, key, {}, {}};
  d.set = [access, range, key](ExperimentSpec& s, const std::string& v, std::size_t line) {
    const double x = parse_real(v, line, key);
    if (!range.contains(x)) {
      throw ParseError(line, key + " = " + v + " is outside " + range.describe());
    }
    access(s) = x;
  };
  d.get = [access](const ExperimentSpec& s) {
    return format_real(access(const_cast<ExperimentSpec&>(s)));
  };
  return d;
}

template <typename Access>
KeyDescriptor count_key(std::string section, std::string key, Access access, std::uint64_t min_value) {
  KeyDescriptor d{section, key, {}, {}};
  d.set = [access, min_value, key](ExperimentSpec& s, const std::string& v, std::size_t line) {
    const auto x = parse_uint(v, line, key);
    if (x < min_value) {
      throw ParseError(line, key + " = " + v + " must be >= " + std::to_string(min_value));
    }
    access(s) = static_cast<std::remove_reference_t<decltype(access(s))>>(x);
  };
  d.get = [access](const ExperimentSpec& s) {
    return std::to_string(access(const_cast<ExperimentSpec&>(s)));
  };
  return d;
}

inline const std::vector<KeyDescriptor>& key_table() {
  static const std::vector<KeyDescriptor> table = [] {
    std::vector<KeyDescriptor> t;
    const Range unit_open_closed{0.0, 1.0, true, false};
    const Range positive{0.0, kInf, true, false};
    const Range non_negative{0.0, kInf, false, false};

    // [experiment]
    t.push_back(count_key("experiment", "trials", [](ExperimentSpec& s) -> std::size_t& { return s.trials; }, 1));
    t.push_back(count_key("experiment", "seed", [](ExperimentSpec& s) -> std::uint64_t& { return s.seed; }, 0));
    t.push_back({"experiment", "output_dir",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   if (v.empty()) throw ParseError(line, "output_dir must not be empty");
                   s.output_dir = v;
                 },
                 [](const ExperimentSpec& s) { return s.output_dir; }});
    t.push_back({"experiment", "modes",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   s.modes.clear();
                   for (const auto& m : split_list(v)) {
                     try {
                       s.modes.push_back(parse_mode(m));
                     } catch (const ParameterError& e) {
                       throw ParseError(line, e.what());
                     }
                   }
                   if (s.modes.empty()) throw ParseError(line, "modes must list at least one mode");
                 },
                 [](const ExperimentSpec& s) {
                   std::vector<std::string> names;
                   for (auto m : s.modes) names.emplace_back(to_string(m));
                   return join(names);
                 }});

    // [dataset]
    t.push_back(count_key("dataset", "n", [](ExperimentSpec& s) -> std::size_t& { return s.dataset.n; }, 2));
    t.push_back(count_key("dataset", "classes", [](ExperimentSpec& s) -> std::size_t& { return s.dataset.num_classes; }, 2));
    t.push_back(count_key("dataset", "dim", [](ExperimentSpec& s) -> std::size_t& { return s.dataset.dim; }, 2));
    t.push_back(real_key("dataset", "spread", [](ExperimentSpec& s) -> double& { return s.dataset.spread; }, non_negative));
    t.push_back(real_key("dataset", "test_fraction", [](ExperimentSpec& s) -> double& { return s.dataset.test_fraction; },
                         Range{0.0, 1.0, true, true}));
    t.push_back({"dataset", "file",
                 [](ExperimentSpec& s, const std::string& v, std::size_t) { s.dataset.file = v; },
                 [](const ExperimentSpec& s) { return s.dataset.file; }});

    // [split]
    t.push_back(real_key("split", "L", [](ExperimentSpec& s) -> double& { return s.split.labeled_fraction; }, unit_open_closed));
    t.push_back(real_key("split", "U", [](ExperimentSpec& s) -> double& { return s.split.unlabeled_fraction; }, unit_open_closed));

    // [partition]
    t.push_back(real_key("partition", "sigma", [](ExperimentSpec& s) -> double& { return s.partition.sigma; },
                         Range{0.0, 0.5, false, false}));
    t.push_back({"partition", "class_mu",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   if (v == "none") {
                     s.partition.class_mu.reset();
                     return;
                   }
                   const auto x = parse_uint(v, line, "class_mu");
                   if (x < 1) throw ParseError(line, "class_mu must be >= 1 or none");
                   s.partition.class_mu = static_cast<std::size_t>(x);
                 },
                 [](const ExperimentSpec& s) {
                   return s.partition.class_mu ? std::to_string(*s.partition.class_mu) : std::string("none");
                 }});
    t.push_back(real_key("partition", "class_sigma_c", [](ExperimentSpec& s) -> double& { return s.partition.class_sigma_c; },
                         Range{0.0, 0.5, false, false}));

    // [federation]
    t.push_back(count_key("federation", "N", [](ExperimentSpec& s) -> std::size_t& { return s.federation.num_clients; }, 1));
    t.push_back(count_key("federation", "R", [](ExperimentSpec& s) -> std::size_t& { return s.federation.rounds; }, 0));
    t.push_back(count_key("federation", "E", [](ExperimentSpec& s) -> std::size_t& { return s.federation.selftrain.local_epochs; }, 1));
    t.push_back(real_key("federation", "q", [](ExperimentSpec& s) -> double& { return s.federation.participation; }, unit_open_closed));
    t.push_back(real_key("federation", "beta", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.beta; }, non_negative));
    t.push_back(real_key("federation", "T", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.temperature; }, positive));
    t.push_back(real_key("federation", "tau_min", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.tau_min; },
                         Range{0.0, 1.0, true, true}));
    t.push_back(real_key("federation", "tau_max", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.tau_max; },
                         unit_open_closed));
    t.push_back(count_key("federation", "batch_size", [](ExperimentSpec& s) -> std::size_t& { return s.federation.selftrain.batch_size; }, 1));
    t.push_back(real_key("federation", "learning_rate", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.learning_rate; }, positive));
    t.push_back(real_key("federation", "weight_decay", [](ExperimentSpec& s) -> double& { return s.federation.selftrain.weight_decay; }, non_negative));
    t.push_back({"federation", "hidden",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   s.hidden_dims.clear();
                   for (const auto& h : split_list(v)) {
                     const auto x = parse_uint(h, line, "hidden");
                     if (x < 1) throw ParseError(line, "hidden layer widths must be >= 1");
                     s.hidden_dims.push_back(static_cast<std::size_t>(x));
                   }
                 },
                 [](const ExperimentSpec& s) { return join(s.hidden_dims); }});
    t.push_back({"federation", "confidence",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   if (v == "scaled") {
                     s.federation.selftrain.confidence = ConfidenceSource::kScaled;
                   } else if (v == "unscaled") {
                     s.federation.selftrain.confidence = ConfidenceSource::kUnscaled;
                   } else {
                     throw ParseError(line, "confidence must be scaled or unscaled");
                   }
                 },
                 [](const ExperimentSpec& s) {
                   return std::string(s.federation.selftrain.confidence == ConfidenceSource::kScaled ? "scaled"
                                                                                                     : "unscaled");
                 }});

    // [pretrain]
    t.push_back({"pretrain", "enabled",
                 [](ExperimentSpec& s, const std::string& v, std::size_t line) {
                   s.pretrain.enabled = parse_bool(v, line, "enabled");
                 },
                 [](const ExperimentSpec& s) { return std::string(s.pretrain.enabled ? "true" : "false"); }});
    t.push_back(count_key("pretrain", "batch_size", [](ExperimentSpec& s) -> std::size_t& { return s.pretrain.contrastive.batch_size; }, 2));
    t.push_back(count_key("pretrain", "epochs", [](ExperimentSpec& s) -> std::size_t& { return s.pretrain.contrastive.epochs; }, 1));
    t.push_back(count_key("pretrain", "embedding_dim", [](ExperimentSpec& s) -> std::size_t& { return s.pretrain.contrastive.embedding_dim; }, 2));
    t.push_back(real_key("pretrain", "noise", [](ExperimentSpec& s) -> double& { return s.pretrain.contrastive.augment_noise; }, non_negative));
    t.push_back(real_key("pretrain", "learning_rate", [](ExperimentSpec& s) -> double& { return s.pretrain.contrastive.learning_rate; }, positive));
    t.push_back(count_key("pretrain", "corpus_n", [](ExperimentSpec& s) -> std::size_t& { return s.pretrain.corpus_n; }, 2));
    t.push_back(count_key("pretrain", "corpus_classes", [](ExperimentSpec& s) -> std::size_t& { return s.pretrain.corpus_classes; }, 2));
    t.push_back(real_key("pretrain", "corpus_spread", [](ExperimentSpec& s) -> double& { return s.pretrain.corpus_spread; }, non_negative));
    t.push_back({"pretrain", "init_file",
                 [](ExperimentSpec& s, const std::string& v, std::size_t) { s.pretrain.init_file = v; },
                 [](const ExperimentSpec& s) { return s.pretrain.init_file; }});
    return t;
  }();
  return table;
}

inline const KeyDescriptor* find_key(std::string_view section, std::string_view key) {
  for (const auto& d : key_table()) {
    if (d.section == section && d.key == key) return &d;
  }
  return nullptr;
}

}  // namespace detail

/// Cross-field checks and file existence; per-key ranges are enforced while
/// parsing.
inline void validate_spec(const ExperimentSpec& spec) {
  auto fail = [](const std::string& what) { throw ParseError(0, what); };
  if (spec.trials < 1) fail("trials must be >= 1");
  if (spec.modes.empty()) fail("modes must list at least one mode");
  try {
    spec.split.validate();
    spec.partition.validate();
    spec.federation.validate();
    spec.pretrain.contrastive.validate();
  } catch (const ParameterError& e) {
    fail(e.what());
  }
  if (spec.partition.class_mu && *spec.partition.class_mu > spec.dataset.num_classes &&
      spec.dataset.file.empty()) {
    fail("class_mu exceeds the number of classes");
  }
  if (!spec.dataset.file.empty() && !std::filesystem::exists(spec.dataset.file)) {
    fail("dataset file '" + spec.dataset.file + "' does not exist");
  }
  if (!spec.pretrain.init_file.empty() && !std::filesystem::exists(spec.pretrain.init_file)) {
    fail("init_file '" + spec.pretrain.init_file + "' does not exist");
  }
  if (spec.dataset.file.empty() && spec.dataset.n < spec.dataset.num_classes) {
    fail("dataset n must be >= classes");
  }
}

inline ExperimentSpec parse_spec(std::istream& is) {
  ExperimentSpec spec;
  std::string section;
  std::string raw;
  std::size_t line_no = 0;
  bool seen_n = false, seen_r = false, seen_l = false;
  std::vector<std::string> seen;
  while (std::getline(is, raw)) {
    ++line_no;
    auto hash = raw.find('#');
    std::string line = detail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "malformed section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    const auto* desc = detail::find_key(section, key);
    if (!desc) {
      throw ParseError(line_no, "unknown key '" + key + "' in section [" + section + "]");
    }
    const std::string qualified = section + "." + key;
    if (std::find(seen.begin(), seen.end(), qualified) != seen.end()) {
      throw ParseError(line_no, "duplicate key '" + key + "'");
    }
    seen.push_back(qualified);
    desc->set(spec, value, line_no);
    seen_n = seen_n || qualified == "federation.N";
    seen_r = seen_r || qualified == "federation.R";
    seen_l = seen_l || qualified == "split.L";
  }
  if (!seen_n) throw ParseError(0, "missing required key N in [federation]");
  if (!seen_r) throw ParseError(0, "missing required key R in [federation]");
  if (!seen_l) throw ParseError(0, "missing required key L in [split]");
  validate_spec(spec);
  return spec;
}

inline ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read experiment file " + path.string());
  return parse_spec(is);
}

/// Writes every key, grouped by section, in a form `parse_spec` accepts.
inline void write_spec(std::ostream& os, const ExperimentSpec& spec) {
  std::string section;
  for (const auto& d : detail::key_table()) {
    if (d.section != section) {
      if (!section.empty()) os << '\n';
      section = d.section;
      os << '[' << section << "]\n";
    }
    os << d.key << " = " << d.get(spec) << '\n';
  }
  if (!os) throw IoError("write_spec: stream failure");
}

/// Applies FEDSTAR_OUTPUT_DIR when set.
inline void apply_env_overrides(ExperimentSpec& spec) {
  if (const char* dir = std::getenv("FEDSTAR_OUTPUT_DIR"); dir && *dir) spec.output_dir = dir;
}

inline const std::vector<std::string>& sweepable_parameters() {
  static const std::vector<std::string> names{"q", "E", "N", "sigma", "L", "U", "tau_max", "class_sigma_c"};
  return names;
}

/// Sets one sweepable parameter from its textual value.
inline void set_parameter(ExperimentSpec& spec, std::string_view name, const std::string& value) {
  const auto& names = sweepable_parameters();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw ParameterError("cannot sweep '" + std::string(name) + "'; sweepable: " + detail::join(names));
  }
  for (const auto& d : detail::key_table()) {
    if (d.key == name) {
      d.set(spec, value, 0);
      return;
    }
  }
  throw ParameterError("unknown parameter '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Running experiments

struct TrialResult {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::uint64_t partition_hash = 0;
  std::vector<FederationHistory> histories;  // one per spec.modes entry
};

struct ModeSummary {
  TrainingMode mode = TrainingMode::kFedStar;
  std::vector<double> trial_accuracies;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;       // sample standard deviation across trials
  double variance_accuracy = 0.0;  // sample variance across trials
};

struct ComparisonReport {
  double labeled_fraction = 0.0;
  std::uint64_t dataset_hash = 0;
  std::vector<ModeSummary> modes;
  std::vector<TrialResult> trials;

  const ModeSummary& summary(TrainingMode mode) const {
    for (const auto& m : modes) {
      if (m.mode == mode) return m;
    }
    throw ParameterError("report has no mode " + std::string(to_string(mode)));
  }

  /// Mean over trials of the test accuracy recorded after round `round`.
  double mean_accuracy_at(TrainingMode mode, std::size_t round) const {
    std::size_t slot = 0;
    while (slot < modes.size() && modes[slot].mode != mode) ++slot;
    if (slot == modes.size()) throw ParameterError("report has no mode " + std::string(to_string(mode)));
    double total = 0.0;
    for (const auto& t : trials) total += t.histories[slot].records.at(round).global_test_accuracy;
    return total / static_cast<double>(trials.size());
  }
};

/// The train/test task an experiment runs on; identical for every trial.
struct PreparedTask {
  Dataset train;
  Dataset test;
  Matrix extra_unlabeled;  // rows marked -1 in a dataset file
};

inline PreparedTask prepare_task(const ExperimentSpec& spec) {
  Dataset full;
  Matrix extra;
  if (!spec.dataset.file.empty()) {
    std::ifstream is(spec.dataset.file);
    if (!is) throw IoError("cannot read dataset file " + spec.dataset.file);
    auto loaded = read_dataset(is);
    full = std::move(loaded.labeled);
    extra = std::move(loaded.unlabeled);
  } else {
    full = make_blobs(spec.dataset.n, spec.dataset.num_classes, spec.dataset.dim, spec.dataset.spread,
                      derive_seed(spec.seed, "dataset"));
  }
  full.validate();
  auto parts = train_test_split(full, spec.dataset.test_fraction, derive_seed(spec.seed, "holdout"));
  return {std::move(parts.labeled), std::move(parts.unlabeled), std::move(extra)};
}

inline std::uint64_t partition_hash(const std::vector<ClientDataset>& clients) {
  std::uint64_t h = 0;
  for (const auto& c : clients) {
    Dataset unl{c.unlabeled_features, std::vector<int>(c.unlabeled_features.rows(), 0), 1};
    h = derive_seed(h, dataset_hash(c.labeled), dataset_hash(unl));
  }
  return h;
}

/// Client datasets for one trial.
inline std::vector<ClientDataset> build_clients(const ExperimentSpec& spec, const PreparedTask& task,
                                                std::uint64_t trial_seed) {
  auto split = split_labeled(task.train, spec.split, derive_seed(trial_seed, "split"));
  Matrix unlabeled = split.unlabeled.features;
  if (unlabeled.cols() == 0) unlabeled = Matrix(0, task.train.dim());
  for (std::size_t i = 0; i < task.extra_unlabeled.rows(); ++i) unlabeled.append_row(task.extra_unlabeled.row(i));

  PartitionSpec part = spec.partition;
  part.num_clients = spec.federation.num_clients;
  part.seed = derive_seed(trial_seed, "partition");
  if (part.class_mu) {
    auto labeled_parts = partition_class_availability(split.labeled, part);
    Dataset none{Matrix(0, task.train.dim()), {}, task.train.num_classes};
    auto unlabeled_parts = partition_quantity_skew(none, unlabeled, part);
    return merge_partitions(std::move(labeled_parts), unlabeled_parts);
  }
  return partition_quantity_skew(split.labeled, unlabeled, part);
}

inline ArchSpec experiment_arch(const ExperimentSpec& spec, const PreparedTask& task) {
  return {task.train.dim(), spec.hidden_dims, task.train.num_classes};
}

inline ContrastiveConfig trial_contrastive_config(const ExperimentSpec& spec, std::uint64_t trial_seed) {
  ContrastiveConfig cfg = spec.pretrain.contrastive;
  cfg.seed = derive_seed(trial_seed, "pretrain");
  return cfg;
}

/// Server-side pretraining on a separate blob corpus whose cluster means
/// differ from the downstream task.
inline PretrainResult pretrain_for_trial(const ExperimentSpec& spec, const ArchSpec& arch,
                                         std::uint64_t trial_seed) {
  Dataset corpus = make_blobs(spec.pretrain.corpus_n, spec.pretrain.corpus_classes, arch.input_dim,
                              spec.pretrain.corpus_spread, derive_seed(spec.seed, "corpus"));
  ContrastiveConfig cfg = trial_contrastive_config(spec, trial_seed);
  auto init = make_encoder_with_head(arch, cfg.embedding_dim, derive_seed(cfg.seed, "init"));
  return contrastive_pretrain(corpus.features, cfg, std::move(init), arch.num_classes);
}

inline ModelParams initial_params(const ExperimentSpec& spec, const ArchSpec& arch, std::uint64_t trial_seed) {
  if (!spec.pretrain.init_file.empty()) {
    ModelParams p = load_params(spec.pretrain.init_file);
    if (!(p.arch == arch)) throw ShapeError("init_file architecture does not match the experiment");
    return p;
  }
  if (spec.pretrain.enabled) return pretrain_for_trial(spec, arch, trial_seed).classifier;
  return init_params(arch, derive_seed(trial_seed, "init"));
}

inline void emit_csv(const FederationHistory& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  write_history_csv(os, history);
}

inline void write_report_csv(std::ostream& os, const ComparisonReport& report) {
  os << "mode,labeled_fraction,trials,mean_accuracy,std_accuracy,variance_accuracy,trial_accuracies\n";
  for (const auto& m : report.modes) {
    os << to_string(m.mode) << ',' << detail::fixed6(report.labeled_fraction) << ','
       << m.trial_accuracies.size() << ',' << detail::fixed6(m.mean_accuracy) << ','
       << detail::fixed6(m.std_accuracy) << ',' << detail::fixed6(m.variance_accuracy) << ',';
    for (std::size_t i = 0; i < m.trial_accuracies.size(); ++i) {
      if (i) os << ';';
      os << detail::fixed6(m.trial_accuracies[i]);
    }
    os << '\n';
  }
  if (!os) throw IoError("write_report_csv: stream failure");
}

inline void emit_csv(const ComparisonReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  write_report_csv(os, report);
}

inline ModeSummary summarize(TrainingMode mode, std::vector<double> accuracies) {
  ModeSummary s{mode, std::move(accuracies), 0.0, 0.0, 0.0};
  const auto n = static_cast<double>(s.trial_accuracies.size());
  double sum = 0.0;
  for (double a : s.trial_accuracies) sum += a;
  s.mean_accuracy = sum / n;
  if (s.trial_accuracies.size() > 1) {
    double sq = 0.0;
    for (double a : s.trial_accuracies) sq += (a - s.mean_accuracy) * (a - s.mean_accuracy);
    s.variance_accuracy = sq / (n - 1.0);
    s.std_accuracy = std::sqrt(s.variance_accuracy);
  }
  return s;
}

/// Runs every trial and mode. With `write_files`, per-round CSVs go to
/// <output_dir>/trial_<t>/<mode>.csv and the summary to
/// <output_dir>/summary.csv.
inline ComparisonReport run_experiment(const ExperimentSpec& spec, bool write_files = true) {
  validate_spec(spec);
  const PreparedTask task = prepare_task(spec);
  const ArchSpec arch = experiment_arch(spec, task);
  const std::filesystem::path out_dir(spec.output_dir);
  if (write_files) std::filesystem::create_directories(out_dir);

  ComparisonReport report;
  report.labeled_fraction = spec.split.labeled_fraction;
  report.dataset_hash = dataset_hash(task.train);
  std::vector<std::vector<double>> accuracies(spec.modes.size());

  for (std::size_t t = 0; t < spec.trials; ++t) {
    const std::uint64_t trial_seed = derive_seed(spec.seed, "trial", t);
    TrialResult trial{t, trial_seed, 0, {}};
    std::vector<ClientDataset> clients;
    try {
      clients = build_clients(spec, task, trial_seed);
    } catch (const std::exception& e) {
      throw DataError("trial " + std::to_string(t) + ": partitioning failed: " + e.what());
    }
    trial.partition_hash = partition_hash(clients);
    const ModelParams init = initial_params(spec, arch, trial_seed);

    for (std::size_t m = 0; m < spec.modes.size(); ++m) {
      FederationConfig cfg = spec.federation;
      cfg.mode = spec.modes[m];
      cfg.seed = derive_seed(trial_seed, "federation");
      FederationHistory history;
      try {
        history = run_federation(cfg, clients, task.test, init);
      } catch (const std::exception& e) {
        throw DataError("trial " + std::to_string(t) + ", mode " + std::string(to_string(cfg.mode)) +
                        ": " + e.what());
      }
      accuracies[m].push_back(history.records.empty() ? evaluate(init, task.test) : history.final_accuracy());
      if (write_files) {
        const auto dir = out_dir / ("trial_" + std::to_string(t));
        std::filesystem::create_directories(dir);
        emit_csv(history, dir / (std::string(to_string(cfg.mode)) + ".csv"));
      }
      trial.histories.push_back(std::move(history));
    }
    report.trials.push_back(std::move(trial));
  }
  for (std::size_t m = 0; m < spec.modes.size(); ++m) {
    report.modes.push_back(summarize(spec.modes[m], std::move(accuracies[m])));
  }
  if (write_files) emit_csv(report, out_dir / "summary.csv");
  return report;
}

/// One report per value with everything else (seeds included) held fixed.
/// Outputs land in <output_dir>/<param>=<value>/.
inline std::vector<ComparisonReport> sweep(const ExperimentSpec& spec, std::string_view parameter,
                                           const std::vector<std::string>& values,
                                           bool write_files = true) {
  std::vector<ExperimentSpec> points;
  for (const auto& v : values) {
    ExperimentSpec point = spec;
    set_parameter(point, parameter, v);
    point.output_dir = (std::filesystem::path(spec.output_dir) / (std::string(parameter) + "=" + v)).string();
    validate_spec(point);
    points.push_back(std::move(point));
  }
  std::vector<ComparisonReport> reports;
  for (const auto& p : points) reports.push_back(run_experiment(p, write_files));
  return reports;
}

}  // namespace fedstar
