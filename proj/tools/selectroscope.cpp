// SPDX-License-Identifier: Apache-2.0
// selectroscope: train, ablate, si, cka, balance and report subcommands.

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "selectroscope/ablation.hpp"
#include "selectroscope/cka.hpp"
#include "selectroscope/csv.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/model.hpp"
#include "selectroscope/selectivity.hpp"
#include "selectroscope/trainer.hpp"

namespace fs = std::filesystem;
using namespace selectroscope;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

/// Usage problem detected by the front end itself.
class UsageError : public Error {
 public:
  using Error::Error;
};

std::size_t thread_cap() {
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SELECTROSCOPE_THREADS")) {
    try {
      const long value = std::stol(env);
      if (value >= 1) threads = std::min(threads, static_cast<std::size_t>(value));
    } catch (const std::logic_error&) {
      throw UsageError(std::string("SELECTROSCOPE_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return threads;
}

/// Runs fn(i) for i in [0, n) on up to thread_cap() workers; the first
/// exception is rethrown on the calling thread.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min(n, thread_cap());
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<fs::path> expand_checkpoints(const std::string& pattern) {
  std::vector<fs::path> paths;
  if (fs::is_directory(pattern)) {
    for (const auto& entry : fs::directory_iterator(pattern)) {
      if (entry.path().extension() == ".selckpt") paths.push_back(entry.path());
    }
  } else {
    glob_t matches{};
    if (::glob(pattern.c_str(), 0, nullptr, &matches) == 0) {
      for (std::size_t i = 0; i < matches.gl_pathc; ++i) paths.emplace_back(matches.gl_pathv[i]);
    }
    ::globfree(&matches);
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw UsageError("no checkpoints match '" + pattern + "'");
  return paths;
}

struct LoadedCheckpoint {
  CheckpointModel entry;
  ExperimentConfig config;
};

LoadedCheckpoint load_entry(const fs::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  std::vector<std::pair<std::string, std::string>> config_entries;
  for (const auto& [key, value] : ckpt.manifest.entries()) {
    if (key.rfind("config.", 0) == 0) config_entries.emplace_back(key.substr(7), value);
  }
  LoadedCheckpoint out{{CheckpointInfo{path.stem().string(), 0, 0}, std::move(ckpt.model)}, {}};
  try {
    out.entry.info.epoch = std::stoul(ckpt.manifest.get("epoch"));
    out.entry.info.batch_index = std::stoul(ckpt.manifest.get("batch_index"));
  } catch (const std::logic_error&) {
    throw CheckpointError(path.string() + ": malformed epoch/batch_index");
  }
  out.config = config_entries.empty() ? ExperimentConfig{} : parse_config_entries(config_entries);
  out.config.architecture = out.entry.model.spec();
  return out;
}

std::vector<LoadedCheckpoint> load_entries(const std::vector<fs::path>& paths) {
  std::vector<LoadedCheckpoint> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(load_entry(p));
  return out;
}

/// Evaluation split from --config when given, else from the first checkpoint.
Dataset eval_set_for(const std::vector<LoadedCheckpoint>& ckpts, const std::string& config_path) {
  if (!config_path.empty()) return load_data(load_config(config_path)).second;
  return load_data(ckpts.front().config).second;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  return out;
}

void check_module(const std::vector<LoadedCheckpoint>& ckpts, std::size_t module) {
  for (const auto& c : ckpts) {
    if (module >= c.entry.model.spec().num_modules()) {
      throw UsageError("module " + std::to_string(module) + " out of range: " + c.entry.info.id + " has " +
                       std::to_string(c.entry.model.spec().num_modules()) + " modules (0-based)");
    }
  }
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& args) {
  const ExperimentConfig config = load_config(args.config);
  const fs::path out = args.out;
  TrainOptions options;
  options.out_dir = out;
  if (!args.resume.empty()) options.resume_from = fs::path(args.resume);
  fs::remove(out / "abort.json");
  try {
    const RunMetrics metrics = train(config, options);
    std::cout << "trained " << config.optimizer.epochs << " epochs, " << metrics.records.size()
              << " records -> " << (out / "metrics.jsonl").string() << '\n';
  } catch (const TrainingAborted& e) {
    fs::remove_all(out / "checkpoints");
    fs::remove_all(out / "si");
    fs::remove(out / "metrics.jsonl");
    nlohmann::ordered_json report;
    report["epoch"] = e.epoch();
    report["batch"] = e.batch();
    report["error"] = e.what();
    open_output(out / "abort.json") << report.dump(2) << '\n';
    throw;
  }
  return 0;
}

// ---- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::string checkpoints;
  std::size_t module = 0;
  std::string ordering = "selective";
  std::size_t seeds = 3;
  std::size_t steps = 10;
  std::string out;
  std::string config;
};

std::string curve_file_name(const AblationCurve& c) {
  std::string name = c.checkpoint_id + "_m" + std::to_string(c.module) + "_" + to_string(c.ordering);
  if (c.ordering == Ordering::kRandom) name += "_s" + std::to_string(c.seed);
  return name + ".csv";
}

int run_ablate(const AblateArgs& args) {
  const Ordering ordering = parse_ordering(args.ordering);
  if (ordering == Ordering::kRandom && args.seeds == 0) throw UsageError("--seeds must be at least 1");
  const auto ckpts = load_entries(expand_checkpoints(args.checkpoints));
  check_module(ckpts, args.module);
  const Dataset eval_set = eval_set_for(ckpts, args.config);

  AucOptions options;
  options.module = args.module;
  options.steps = args.steps;
  options.selective = ordering == Ordering::kSelective;
  options.random_seeds.clear();
  if (ordering == Ordering::kRandom) {
    for (std::size_t s = 0; s < args.seeds; ++s) options.random_seeds.push_back(s);
  }

  std::vector<AucTable> tables(ckpts.size());
  parallel_for(ckpts.size(), [&](std::size_t i) {
    tables[i] = auc_over_epochs(std::span(&ckpts[i].entry, 1), eval_set, options);
  });

  std::vector<AucRow> rows;
  std::vector<AblationCurve> curves;
  for (auto& t : tables) {
    rows.insert(rows.end(), t.rows.begin(), t.rows.end());
    curves.insert(curves.end(), t.curves.begin(), t.curves.end());
  }
  require_common_grid(curves);
  std::stable_sort(rows.begin(), rows.end(), [](const AucRow& a, const AucRow& b) {
    return std::tie(a.epoch, a.batch_index) < std::tie(b.epoch, b.batch_index);
  });

  const fs::path out = args.out;
  for (const auto& c : curves) {
    auto file = open_output(out / "curves" / curve_file_name(c));
    write_curve_csv(file, std::span(&c, 1));
  }
  auto auc_file = open_output(out / ("auc_m" + std::to_string(args.module) + "_" + args.ordering + ".csv"));
  write_auc_csv(auc_file, rows);
  std::cout << curves.size() << " curves, " << rows.size() << " AUC rows -> " << out.string() << '\n';
  return 0;
}

// ---- si --------------------------------------------------------------------

struct CommonArgs {
  std::string checkpoints;
  std::string out;
  std::string config;
};

int run_si(const CommonArgs& args) {
  const auto ckpts = load_entries(expand_checkpoints(args.checkpoints));
  const Dataset eval_set = eval_set_for(ckpts, args.config);
  std::vector<SelectivityMap> maps(ckpts.size());
  parallel_for(ckpts.size(), [&](std::size_t i) {
    ClassMeanAccumulator acc(ckpts[i].entry.model.spec().num_classes);
    evaluate(ckpts[i].entry.model, eval_set, {}, 256, &acc);
    maps[i] = selectivity_index(acc);
  });
  auto file = open_output(args.out);
  write_si_csv_header(file);
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    write_si_csv_rows(file, ckpts[i].entry.info.epoch, ckpts[i].entry.info.batch_index, maps[i]);
  }
  return 0;
}

// ---- cka -------------------------------------------------------------------

struct CkaRow {
  std::size_t epoch;
  std::size_t batch_index;
  std::string a;
  std::string b;
  double value;
};

std::vector<Site> parse_sites(const std::string& list, const Model& model) {
  std::vector<Site> sites;
  if (list.empty() || list == "taps") {
    for (TapId t : model.taps()) sites.push_back(Site{Site::Kind::kTap, t.module, t.block});
  } else if (list == "modules") {
    for (std::size_t m = 0; m < model.spec().num_modules(); ++m) sites.push_back(Site{Site::Kind::kModuleOutput, m, 0});
    sites.push_back(Site{Site::Kind::kLogits, 0, 0});
  } else {
    std::stringstream in(list);
    for (std::string item; std::getline(in, item, ',');) sites.push_back(Site::parse(item));
  }
  return sites;
}

/// Pairwise CKA rows (i < j) for one checkpoint; degenerate pairs become NaN.
std::vector<CkaRow> cka_rows(const LoadedCheckpoint& ckpt, const Dataset& eval_set, const std::vector<Site>& sites,
                             const CkaOptions& options, std::vector<std::string>& warnings) {
  const auto reps = collect_representations(ckpt.entry.model, eval_set, sites, options);
  std::vector<CkaRow> rows;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    for (std::size_t j = i + 1; j < sites.size(); ++j) {
      double value = std::nan("");
      try {
        value = linear_cka(reps[i], reps[j]);
      } catch (const DegenerateError& e) {
        warnings.push_back(ckpt.entry.info.id + " " + sites[i].label() + "/" + sites[j].label() + ": " + e.what());
      }
      rows.push_back({ckpt.entry.info.epoch, ckpt.entry.info.batch_index, sites[i].label(), sites[j].label(), value});
    }
  }
  return rows;
}

void write_cka_csv(std::ostream& out, const std::vector<CkaRow>& rows) {
  out << "epoch,tap_a,tap_b,cka\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.a << ',' << r.b << ',' << (std::isnan(r.value) ? "nan" : format_double(r.value)) << '\n';
  }
}

std::vector<CkaRow> cka_over(const std::vector<LoadedCheckpoint>& ckpts, const Dataset& eval_set,
                             const std::string& site_list, const CkaOptions& options) {
  std::vector<std::vector<CkaRow>> per(ckpts.size());
  std::vector<std::vector<std::string>> warnings(ckpts.size());
  parallel_for(ckpts.size(), [&](std::size_t i) {
    per[i] = cka_rows(ckpts[i], eval_set, parse_sites(site_list, ckpts[i].entry.model), options, warnings[i]);
  });
  std::vector<CkaRow> rows;
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    for (const auto& w : warnings[i]) std::cerr << "warning: " << w << '\n';
    rows.insert(rows.end(), per[i].begin(), per[i].end());
  }
  return rows;
}

struct CkaArgs {
  CommonArgs common;
  std::string sites;
  bool flatten = false;
};

int run_cka(const CkaArgs& args) {
  const auto ckpts = load_entries(expand_checkpoints(args.common.checkpoints));
  const Dataset eval_set = eval_set_for(ckpts, args.common.config);
  CkaOptions options;
  options.flatten = args.flatten;
  auto file = open_output(args.common.out);
  write_cka_csv(file, cka_over(ckpts, eval_set, args.sites, options));
  return 0;
}

// ---- balance ---------------------------------------------------------------

struct BalanceArgs {
  CommonArgs common;
  std::size_t k = 5;
};

int run_balance(const BalanceArgs& args) {
  const auto ckpts = load_entries(expand_checkpoints(args.common.checkpoints));
  const Dataset eval_set = eval_set_for(ckpts, args.common.config);
  std::vector<EvalResult> results(ckpts.size());
  parallel_for(ckpts.size(), [&](std::size_t i) { results[i] = evaluate(ckpts[i].entry.model, eval_set); });
  auto file = open_output(args.common.out);
  file << "checkpoint_id,epoch,batch_index,eval_acc,top_k,mean_top_k_count";
  const std::size_t classes = ckpts.front().entry.model.spec().num_classes;
  for (std::size_t c = 0; c < classes; ++c) file << ",count_" << c;
  file << '\n';
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const auto& info = ckpts[i].entry.info;
    file << info.id << ',' << info.epoch << ',' << info.batch_index << ',' << format_double(results[i].accuracy) << ','
         << args.k << ',' << format_double(class_balance(results[i].counts, args.k));
    for (std::size_t c = 0; c < classes; ++c) file << ',' << (c < results[i].counts.size() ? results[i].counts[c] : 0);
    file << '\n';
  }
  return 0;
}

// ---- report ----------------------------------------------------------------

struct ReportArgs {
  std::string run;
  std::string out;
  std::vector<std::size_t> modules;
  std::size_t seeds = 3;
  std::size_t steps = 10;
  bool sub_epoch = false;
};

std::string optional_number(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

int run_report(const ReportArgs& args) {
  const fs::path run = args.run;
  const fs::path metrics_path = run / "metrics.jsonl";
  const fs::path ckpt_dir = run / "checkpoints";
  if (!fs::exists(metrics_path) || !fs::is_directory(ckpt_dir) || fs::is_empty(ckpt_dir)) {
    throw UsageError("run directory " + run.string() + " has no metrics.jsonl or no checkpoints");
  }
  const RunMetrics metrics = read_metrics(metrics_path);
  if (metrics.records.empty()) throw UsageError(metrics_path.string() + " is empty");
  const fs::path out = args.out;

  {
    auto file = open_output(out / "accuracy_trace.csv");
    file << "epoch,batch_index,train_loss,train_acc,eval_acc,top5_class_count,regularizer_active\n";
    for (const auto& r : metrics.records) {
      file << r.epoch << ',' << r.batch << ',' << optional_number(r.train_loss) << ','
           << optional_number(r.train_acc) << ',' << format_double(r.eval_acc) << ','
           << format_double(r.top5_class_count) << ',' << (r.regularizer_active ? 1 : 0) << '\n';
    }
  }
  {
    auto file = open_output(out / "selectivity_vs_epoch.csv");
    file << "epoch,batch_index,module,mu_si\n";
    for (const auto& r : metrics.records) {
      for (std::size_t m = 0; m < r.mu_si.size(); ++m) {
        file << r.epoch << ',' << r.batch << ',' << m << ',' << format_double(r.mu_si[m]) << '\n';
      }
    }
  }

  std::vector<fs::path> paths;
  for (const auto& p : expand_checkpoints(ckpt_dir.string())) {
    const auto entry = load_checkpoint(p).manifest;
    if (args.sub_epoch || entry.get("batch_index") == "0") paths.push_back(p);
  }
  if (paths.empty()) throw UsageError("no epoch checkpoints under " + ckpt_dir.string());
  const auto ckpts = load_entries(paths);
  const Dataset eval_set = load_data(ckpts.front().config).second;

  std::vector<std::size_t> modules = args.modules;
  if (modules.empty()) {
    for (std::size_t m = 0; m < ckpts.front().entry.model.spec().num_modules(); ++m) modules.push_back(m);
  }
  check_module(ckpts, *std::max_element(modules.begin(), modules.end()));

  std::vector<AucRow> auc_rows;
  for (std::size_t module : modules) {
    AucOptions options;
    options.module = module;
    options.steps = args.steps;
    options.random_seeds.clear();
    for (std::size_t s = 0; s < args.seeds; ++s) options.random_seeds.push_back(s);
    std::vector<AucTable> tables(ckpts.size());
    parallel_for(ckpts.size(), [&](std::size_t i) {
      tables[i] = auc_over_epochs(std::span(&ckpts[i].entry, 1), eval_set, options);
    });
    for (const auto& t : tables) auc_rows.insert(auc_rows.end(), t.rows.begin(), t.rows.end());
  }
  {
    auto file = open_output(out / "auc_vs_epoch.csv");
    write_auc_csv(file, auc_rows);
  }
  {
    auto file = open_output(out / "cka_vs_epoch.csv");
    write_cka_csv(file, cka_over(ckpts, eval_set, "modules", {}));
  }
  std::cout << "report for " << ckpts.size() << " checkpoints -> " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-selectivity instrumentation for small residual networks"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model and log metrics, checkpoints and SI reports");
  train_cmd->add_option("--config", train_args.config, "Experiment config file")->required();
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to continue from");

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Progressive ablation curves and AUC table");
  ablate_cmd->add_option("--checkpoints", ablate_args.checkpoints, "Checkpoint glob or directory")->required();
  ablate_cmd->add_option("--module", ablate_args.module, "Target module (0-based)")->required();
  ablate_cmd->add_option("--ordering", ablate_args.ordering, "selective or random")
      ->check(CLI::IsMember({"selective", "random"}));
  ablate_cmd->add_option("--seeds", ablate_args.seeds, "Random permutations per checkpoint");
  ablate_cmd->add_option("--steps", ablate_args.steps, "Ablation intervals between 0 and 1");
  ablate_cmd->add_option("--out", ablate_args.out, "Output directory")->required();
  ablate_cmd->add_option("--config", ablate_args.config, "Config providing the evaluation set");

  CommonArgs si_args;
  auto* si_cmd = app.add_subcommand("si", "Per-unit selectivity of each checkpoint");
  si_cmd->add_option("--checkpoints", si_args.checkpoints, "Checkpoint glob or directory")->required();
  si_cmd->add_option("--out", si_args.out, "Output CSV")->required();
  si_cmd->add_option("--config", si_args.config, "Config providing the evaluation set");

  CkaArgs cka_args;
  auto* cka_cmd = app.add_subcommand("cka", "Pairwise linear CKA between sites");
  cka_cmd->add_option("--checkpoints", cka_args.common.checkpoints, "Checkpoint glob or directory")->required();
  cka_cmd->add_option("--out", cka_args.common.out, "Output CSV")->required();
  cka_cmd->add_option("--config", cka_args.common.config, "Config providing the evaluation set");
  cka_cmd->add_option("--sites", cka_args.sites, "taps (default), modules, or a list like m0,m1.b0,fc");
  cka_cmd->add_flag("--flatten", cka_args.flatten, "Use flattened activations instead of pooled channels");

  BalanceArgs balance_args;
  auto* balance_cmd = app.add_subcommand("balance", "Predicted-class histogram and top-k balance");
  balance_cmd->add_option("--checkpoints", balance_args.common.checkpoints, "Checkpoint glob or directory")->required();
  balance_cmd->add_option("--out", balance_args.common.out, "Output CSV")->required();
  balance_cmd->add_option("--config", balance_args.common.config, "Config providing the evaluation set");
  balance_cmd->add_option("--k", balance_args.k, "Number of largest counts to average");

  ReportArgs report_args;
  auto* report_cmd = app.add_subcommand("report", "Plot-ready data files for a training run");
  report_cmd->add_option("--run", report_args.run, "Training output directory")->required();
  report_cmd->add_option("--out", report_args.out, "Output directory")->required();
  report_cmd->add_option("--modules", report_args.modules, "Modules to ablate, comma separated (default all)")->delimiter(',');
  report_cmd->add_option("--seeds", report_args.seeds, "Random permutations per checkpoint");
  report_cmd->add_option("--steps", report_args.steps, "Ablation intervals between 0 and 1");
  report_cmd->add_flag("--sub-epoch", report_args.sub_epoch, "Include sub-epoch checkpoints");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*ablate_cmd) return run_ablate(ablate_args);
    if (*si_cmd) return run_si(si_args);
    if (*cka_cmd) return run_cka(cka_args);
    if (*balance_cmd) return run_balance(balance_args);
    if (*report_cmd) return run_report(report_args);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NormalizationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const StatisticsError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
