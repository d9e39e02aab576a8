// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "selectroscope/autodiff.hpp"
#include "selectroscope/model.hpp"

namespace selectroscope {

/// Keeps SI finite for dead units (all class means zero).
inline constexpr double kSelectivityEpsilon = 1e-6;

struct SelectivityRecord {
  double si = 0.0;
  double mu_max = 0.0;
  double mu_neg_max = 0.0;  // mean over the non-argmax classes
  std::size_t argmax_class = 0;
};

using SelectivityMap = std::map<TapId, std::vector<SelectivityRecord>>;

/// SI of one unit from its class-conditional means. Ties for the maximum go
/// to the lowest class index.
SelectivityRecord selectivity_from_means(std::span<const double> class_means);

/// Streaming per-class sums of spatially averaged tap activations.
class ClassMeanAccumulator {
 public:
  explicit ClassMeanAccumulator(std::size_t num_classes) : num_classes_(num_classes) {}

  std::size_t num_classes() const noexcept { return num_classes_; }

  void accumulate(const TapCapture& capture);
  void accumulate(TapId tap, const Tensor& activations, std::span<const int> labels);
  /// Entrywise sum with another accumulator over the same taps and classes.
  void merge(const ClassMeanAccumulator& other);

  std::vector<TapId> taps() const;
  const Eigen::MatrixXd& sums(TapId tap) const;  // [classes x channels]
  const std::vector<std::int64_t>& counts(TapId tap) const;
  /// Throws StatisticsError if any class has no samples.
  Eigen::MatrixXd class_means(TapId tap) const;

 private:
  struct TapStats {
    Eigen::MatrixXd sums;
    std::vector<std::int64_t> counts;
  };

  const TapStats& stats(TapId tap) const;

  std::size_t num_classes_;
  std::map<TapId, TapStats> stats_;
};

/// Per-tap, per-channel SI over everything accumulated so far.
SelectivityMap selectivity_index(const ClassMeanAccumulator& acc);

/// Mean SI of each module: mean over blocks of the mean over channels.
/// Modules without taps in `si` are reported as 0.
std::vector<double> module_mean_si(const SelectivityMap& si, std::size_t num_modules);

/// Differentiable batch-local mean SI over the targeted modules: mean over
/// modules of the mean over blocks of the mean over channels. Class means use
/// only the classes present in the batch.
Var regularizer_mu_si(std::span<const std::pair<TapId, Var>> taps, std::span<const int> labels,
                      const std::set<std::size_t>& targeted_modules);

/// cross_entropy - alpha * mu_si. With alpha == 0 the regularizer is not
/// touched and `cross_entropy` is returned unchanged.
Var regularized_loss(Var cross_entropy, Var mu_si, double alpha);
Var regularized_loss(Var logits, std::span<const int> labels, Var mu_si, double alpha);

/// CSV: epoch,batch_index,module,block,channel,si,mu_max,argmax_class
void write_si_csv_header(std::ostream& out);
void write_si_csv_rows(std::ostream& out, std::size_t epoch, std::size_t batch_index, const SelectivityMap& si);

}  // namespace selectroscope
