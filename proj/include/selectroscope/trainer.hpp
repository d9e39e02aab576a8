// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selectroscope/data.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/model.hpp"
#include "selectroscope/selectivity.hpp"

namespace selectroscope {

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - learning_rate * v
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum, double weight_decay)
      : learning_rate_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {}

  /// Applies one update using each parameter's grad slot (absent = zero).
  void step(std::vector<NamedTensor>& params);

  const std::vector<Tensor>& velocity() const noexcept { return velocity_; }
  void set_velocity(std::vector<Tensor> velocity) { velocity_ = std::move(velocity); }

  double learning_rate() const noexcept { return learning_rate_; }
  double momentum() const noexcept { return momentum_; }
  double weight_decay() const noexcept { return weight_decay_; }

 private:
  double learning_rate_;
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

/// When and where the selectivity regularizer is switched on. Epochs count
/// from 0 (the first pass over the data).
struct RegularizerSchedule {
  double alpha = 0.0;
  std::size_t start_epoch = 0;
  std::optional<std::size_t> stop_epoch;
  /// Empty means every module except the last.
  std::set<std::size_t> targeted_modules;

  bool active(std::size_t epoch) const {
    return start_epoch <= epoch && (!stop_epoch || epoch < *stop_epoch);
  }

  bool operator==(const RegularizerSchedule&) const = default;
};

struct OptimizerConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;

  bool operator==(const OptimizerConfig&) const = default;
};

struct IdxSource {
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path eval_images;
  std::filesystem::path eval_labels;

  bool operator==(const IdxSource&) const = default;
};

struct ExperimentConfig {
  ArchitectureSpec architecture;
  /// Image shape and class count are taken from `architecture`.
  SyntheticSpec synthetic;
  std::optional<IdxSource> idx;
  OptimizerConfig optimizer;
  std::optional<RegularizerSchedule> schedule;
  std::uint64_t seed = 0;
  /// Sub-epoch checkpoint cadence in batches; 0 disables.
  std::size_t sub_epoch_every = 50;
  std::size_t eval_batch_size = 256;

  /// Flat "section.key" -> value pairs; parse_config_entries inverts this.
  std::vector<std::pair<std::string, std::string>> to_entries() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Parses the sectioned key = value text format. Errors name the line and field.
ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config_entries(const std::vector<std::pair<std::string, std::string>>& entries);
std::string format_config(const ExperimentConfig& config);

/// (train, eval) datasets described by the config.
std::pair<Dataset, Dataset> load_data(const ExperimentConfig& config);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> counts;  // predicted-class histogram
};

/// Top-1 accuracy and predicted-class histogram. If `selectivity` is given,
/// every tap is accumulated into it during the same pass.
EvalResult evaluate(const Model& model, const Dataset& eval_set, const AblationMask& masks = {},
                    std::size_t batch_size = 256, ClassMeanAccumulator* selectivity = nullptr);

/// Mean of the k largest counts.
double class_balance(std::span<const std::size_t> counts, std::size_t k = 5);

struct MetricsRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  /// Running means over the batches since the previous record; absent for
  /// the record taken before training starts.
  std::optional<double> train_loss;
  std::optional<double> train_acc;
  double eval_acc = 0.0;
  /// Eval-set selectivity per module (full-set class means, not batch-local).
  std::vector<double> mu_si;
  double top5_class_count = 0.0;
  /// Whether the regularizer term was part of the loss since the previous record.
  bool regularizer_active = false;

  bool operator==(const MetricsRecord&) const = default;
};

struct RunMetrics {
  std::vector<MetricsRecord> records;
};

std::string to_json_line(const MetricsRecord& record);
MetricsRecord parse_metrics_line(const std::string& line);
RunMetrics read_metrics(const std::filesystem::path& path);

/// Non-finite loss during training.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(std::size_t epoch, std::size_t batch, const std::string& detail)
      : NumericError("training aborted at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " +
                     detail),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct TrainOptions {
  /// Receives metrics.jsonl, checkpoints/ and si/. Empty = keep nothing on disk.
  std::filesystem::path out_dir;
  /// Continue from a checkpoint written by an earlier run of the same config.
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const MetricsRecord&)> on_record;
};

/// Checkpoint file name for a (epoch, batch) point.
std::string checkpoint_name(std::size_t epoch, std::size_t batch);

/// Runs the configured training and returns every logged record.
RunMetrics train(const ExperimentConfig& config, const TrainOptions& options = {});

}  // namespace selectroscope
