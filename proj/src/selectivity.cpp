// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/selectivity.hpp"

#include <algorithm>
#include <ostream>
#include <string>

#include "selectroscope/csv.hpp"
#include "selectroscope/error.hpp"

namespace selectroscope {

SelectivityRecord selectivity_from_means(std::span<const double> class_means) {
  if (class_means.size() < 2) throw StatisticsError("selectivity needs at least two classes");
  SelectivityRecord r;
  for (std::size_t k = 1; k < class_means.size(); ++k) {
    if (class_means[k] > class_means[r.argmax_class]) r.argmax_class = k;
  }
  double total = 0.0;
  for (double m : class_means) total += m;
  r.mu_max = class_means[r.argmax_class];
  r.mu_neg_max = (total - r.mu_max) / static_cast<double>(class_means.size() - 1);
  r.si = (r.mu_max - r.mu_neg_max) / (r.mu_max + r.mu_neg_max + kSelectivityEpsilon);
  return r;
}

void ClassMeanAccumulator::accumulate(const TapCapture& capture) {
  accumulate(capture.tap, capture.activations, capture.labels);
}

void ClassMeanAccumulator::accumulate(TapId tap, const Tensor& activations, std::span<const int> labels) {
  if (activations.rank() != 4) {
    throw DimensionError("accumulate: expected NCHW activations, got " + to_string(activations.shape()));
  }
  const std::size_t batch = activations.dim(0);
  const std::size_t channels = activations.dim(1);
  const std::size_t area = activations.dim(2) * activations.dim(3);
  if (labels.size() != batch) {
    throw DimensionError("accumulate: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  auto [it, inserted] = stats_.try_emplace(tap);
  TapStats& s = it->second;
  if (inserted) {
    s.sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_classes_), static_cast<Eigen::Index>(channels));
    s.counts.assign(num_classes_, 0);
  } else if (static_cast<std::size_t>(s.sums.cols()) != channels) {
    throw DimensionError("accumulate: tap " + tap.label() + " has " + std::to_string(s.sums.cols()) +
                         " channels, capture has " + std::to_string(channels));
  }
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes_) {
      throw IndexError("accumulate: label " + std::to_string(label) + " out of range");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const double* plane = activations.data().data() + (n * channels + c) * area;
      double total = 0.0;
      for (std::size_t i = 0; i < area; ++i) {
        if (plane[i] < 0.0) throw ContractError("accumulate: negative activation at tap " + tap.label());
        total += plane[i];
      }
      s.sums(label, static_cast<Eigen::Index>(c)) += total / static_cast<double>(area);
    }
    ++s.counts[static_cast<std::size_t>(label)];
  }
}

void ClassMeanAccumulator::merge(const ClassMeanAccumulator& other) {
  if (other.num_classes_ != num_classes_) throw DimensionError("merge: class counts differ");
  for (const auto& [tap, theirs] : other.stats_) {
    auto [it, inserted] = stats_.try_emplace(tap, theirs);
    if (inserted) continue;
    TapStats& mine = it->second;
    if (mine.sums.cols() != theirs.sums.cols()) throw DimensionError("merge: channel counts differ at " + tap.label());
    mine.sums += theirs.sums;
    for (std::size_t k = 0; k < num_classes_; ++k) mine.counts[k] += theirs.counts[k];
  }
}

std::vector<TapId> ClassMeanAccumulator::taps() const {
  std::vector<TapId> out;
  for (const auto& [tap, s] : stats_) out.push_back(tap);
  return out;
}

const ClassMeanAccumulator::TapStats& ClassMeanAccumulator::stats(TapId tap) const {
  auto it = stats_.find(tap);
  if (it == stats_.end()) throw ConfigError("accumulator has no data for tap " + tap.label());
  return it->second;
}

const Eigen::MatrixXd& ClassMeanAccumulator::sums(TapId tap) const { return stats(tap).sums; }

const std::vector<std::int64_t>& ClassMeanAccumulator::counts(TapId tap) const { return stats(tap).counts; }

Eigen::MatrixXd ClassMeanAccumulator::class_means(TapId tap) const {
  const TapStats& s = stats(tap);
  Eigen::MatrixXd means = s.sums;
  for (std::size_t k = 0; k < num_classes_; ++k) {
    if (s.counts[k] == 0) {
      throw StatisticsError("class " + std::to_string(k) + " has no samples at tap " + tap.label() +
                            "; selectivity is undefined");
    }
    means.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(s.counts[k]);
  }
  return means;
}

SelectivityMap selectivity_index(const ClassMeanAccumulator& acc) {
  SelectivityMap out;
  for (TapId tap : acc.taps()) {
    const Eigen::MatrixXd means = acc.class_means(tap);
    auto& records = out[tap];
    records.reserve(static_cast<std::size_t>(means.cols()));
    std::vector<double> column(static_cast<std::size_t>(means.rows()));
    for (Eigen::Index c = 0; c < means.cols(); ++c) {
      for (Eigen::Index k = 0; k < means.rows(); ++k) column[static_cast<std::size_t>(k)] = means(k, c);
      records.push_back(selectivity_from_means(column));
    }
  }
  return out;
}

std::vector<double> module_mean_si(const SelectivityMap& si, std::size_t num_modules) {
  std::vector<double> total(num_modules, 0.0);
  std::vector<std::size_t> blocks(num_modules, 0);
  for (const auto& [tap, records] : si) {
    if (tap.module >= num_modules || records.empty()) continue;
    double s = 0.0;
    for (const auto& r : records) s += r.si;
    total[tap.module] += s / static_cast<double>(records.size());
    ++blocks[tap.module];
  }
  for (std::size_t m = 0; m < num_modules; ++m) {
    if (blocks[m] > 0) total[m] /= static_cast<double>(blocks[m]);
  }
  return total;
}

namespace {

// Mean over channels of batch-local SI at one tap.
Var tap_mean_si(Var activations, const Tensor& class_weights, std::size_t present) {
  Tape& tape = activations.tape();
  Var pooled = global_avg_pool(activations);                       // [N, C]
  Var means = matmul(tape.constant(class_weights), pooled);         // [K', C]
  Var top = max_over(means, 0);                                     // [C]
  Var rest = scalar_mul(sub(sum_over(means, {0}), top), 1.0 / static_cast<double>(present - 1));
  Var si = div(sub(top, rest), add_scalar(add(top, rest), kSelectivityEpsilon));
  return mean(si);
}

}  // namespace

Var regularizer_mu_si(std::span<const std::pair<TapId, Var>> taps, std::span<const int> labels,
                      const std::set<std::size_t>& targeted_modules) {
  if (targeted_modules.empty()) throw ContractError("regularizer_mu_si: no targeted modules");
  if (labels.empty()) throw ContractError("regularizer_mu_si: empty batch");

  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) {
    throw StatisticsError("regularizer_mu_si: batch contains fewer than 2 distinct classes");
  }
  std::vector<std::size_t> row_of(static_cast<std::size_t>(classes.back()) + 1, 0);
  std::vector<double> count(classes.size(), 0.0);
  for (std::size_t k = 0; k < classes.size(); ++k) row_of[static_cast<std::size_t>(classes[k])] = k;
  for (int label : labels) {
    if (label < 0) throw IndexError("regularizer_mu_si: negative label");
    count[row_of[static_cast<std::size_t>(label)]] += 1.0;
  }
  Tensor weights(Shape{classes.size(), labels.size()}, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const std::size_t k = row_of[static_cast<std::size_t>(labels[n])];
    weights[k * labels.size() + n] = 1.0 / count[k];
  }

  std::map<std::size_t, std::vector<Var>> by_module;
  for (const auto& [tap, var] : taps) {
    if (targeted_modules.count(tap.module) != 0) by_module[tap.module].push_back(var);
  }
  Var total;
  for (std::size_t module : targeted_modules) {
    auto it = by_module.find(module);
    if (it == by_module.end()) {
      throw ConfigError("regularizer_mu_si: no taps for targeted module " + std::to_string(module));
    }
    Var module_sum;
    for (Var activations : it->second) {
      Var s = tap_mean_si(activations, weights, classes.size());
      module_sum = module_sum.valid() ? add(module_sum, s) : s;
    }
    Var module_mean = scalar_mul(module_sum, 1.0 / static_cast<double>(it->second.size()));
    total = total.valid() ? add(total, module_mean) : module_mean;
  }
  return scalar_mul(total, 1.0 / static_cast<double>(targeted_modules.size()));
}

Var regularized_loss(Var cross_entropy, Var mu_si, double alpha) {
  if (alpha == 0.0) return cross_entropy;
  return add(cross_entropy, scalar_mul(mu_si, -alpha));
}

Var regularized_loss(Var logits, std::span<const int> labels, Var mu_si, double alpha) {
  return regularized_loss(softmax_cross_entropy(logits, labels), mu_si, alpha);
}

void write_si_csv_header(std::ostream& out) {
  out << "epoch,batch_index,module,block,channel,si,mu_max,argmax_class\n";
}

void write_si_csv_rows(std::ostream& out, std::size_t epoch, std::size_t batch_index, const SelectivityMap& si) {
  for (const auto& [tap, records] : si) {
    for (std::size_t c = 0; c < records.size(); ++c) {
      const auto& r = records[c];
      out << epoch << ',' << batch_index << ',' << tap.module << ',' << tap.block << ',' << c << ','
          << format_double(r.si) << ',' << format_double(r.mu_max) << ',' << r.argmax_class << '\n';
    }
  }
}

}  // namespace selectroscope
