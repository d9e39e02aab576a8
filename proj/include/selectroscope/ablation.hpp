// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "selectroscope/data.hpp"
#include "selectroscope/model.hpp"
#include "selectroscope/selectivity.hpp"

namespace selectroscope {

enum class Ordering { kSelective, kRandom };

std::string to_string(Ordering ordering);
/// "selective" or "random"; anything else is a ConfigError.
Ordering parse_ordering(const std::string& text);

/// One channel of one block inside the target module.
struct Unit {
  std::size_t block = 0;
  std::size_t channel = 0;
  auto operator<=>(const Unit&) const = default;
};

struct AblationPlan {
  std::size_t target_module = 0;
  Ordering ordering = Ordering::kSelective;
  std::vector<Unit> units;  // ablation order
  std::vector<double> fraction_steps;
  std::uint64_t seed = 0;  // RANDOM only
};

/// SELECTIVE sorts units by SI, highest first, ties by (block, channel).
/// RANDOM draws a seeded permutation. `steps` is the number of intervals:
/// fractions are {0, 1/steps, ..., 1}.
AblationPlan make_plan(const ArchitectureSpec& spec, const SelectivityMap* si, std::size_t module, Ordering ordering,
                       std::size_t steps, std::uint64_t seed = 0);

/// Number of plan units ablated at a given fraction (floor, robust to rounding).
std::size_t ablated_count(double fraction, std::size_t total);

struct AblationStep {
  std::size_t ablated = 0;
  double fraction = 0.0;
  double raw_acc = 0.0;
  double norm_acc = 0.0;  // 100 * raw_acc / raw_acc at step 0
};

struct AblationCurve {
  std::string checkpoint_id;
  std::size_t epoch = 0;
  std::size_t batch_index = 0;
  std::size_t module = 0;
  Ordering ordering = Ordering::kSelective;
  std::uint64_t seed = 0;
  std::vector<AblationStep> steps;
};

/// Where a model came from, for labeling curves and tables.
struct CheckpointInfo {
  std::string id;
  std::size_t epoch = 0;
  std::size_t batch_index = 0;
};

/// Evaluates the model with the first floor(fraction * total) plan units
/// ablated, for each fraction step. Zero baseline accuracy is a NormalizationError.
AblationCurve run_curve(const Model& model, const AblationPlan& plan, const Dataset& eval_set,
                        const CheckpointInfo& info = {}, std::size_t batch_size = 256);

/// Plain sum of normalized accuracies over the steps of one curve.
double auc(const AblationCurve& curve);

/// Mean with a two-sided 95% Student-t confidence interval of the mean.
struct MeanInterval {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};
MeanInterval mean_ci95(std::span<const double> values);

struct AucRow {
  std::size_t epoch = 0;
  std::size_t batch_index = 0;
  std::size_t module = 0;
  Ordering ordering = Ordering::kSelective;
  double auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;

  bool operator==(const AucRow&) const = default;
};

struct CheckpointModel {
  CheckpointInfo info;
  Model model;
};

struct AucTable {
  std::vector<AucRow> rows;          // sorted by (epoch, batch_index, ordering)
  std::vector<AblationCurve> curves;  // same order as rows, seeds ascending
};

struct AucOptions {
  std::size_t module = 0;
  std::size_t steps = 10;
  bool selective = true;
  /// One RANDOM curve per seed; empty disables the random control.
  std::vector<std::uint64_t> random_seeds{0, 1, 2};
  std::size_t batch_size = 256;
};

/// For each checkpoint: SELECTIVE curve from SI computed on `eval_set` at that
/// checkpoint, and RANDOM curves averaged over seeds.
AucTable auc_over_epochs(std::span<const CheckpointModel> checkpoints, const Dataset& eval_set,
                         const AucOptions& options);

/// Throws PlanError unless every curve uses the same fraction grid.
void require_common_grid(std::span<const AblationCurve> curves);

void write_curve_csv(std::ostream& out, std::span<const AblationCurve> curves);
void write_auc_csv(std::ostream& out, std::span<const AucRow> rows);

}  // namespace selectroscope
