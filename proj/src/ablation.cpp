// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>

#include "selectroscope/csv.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/trainer.hpp"

namespace selectroscope {

std::string to_string(Ordering ordering) {
  return ordering == Ordering::kSelective ? "selective" : "random";
}

Ordering parse_ordering(const std::string& text) {
  if (text == "selective") return Ordering::kSelective;
  if (text == "random") return Ordering::kRandom;
  throw ConfigError("ordering must be 'selective' or 'random', got '" + text + "'");
}

AblationPlan make_plan(const ArchitectureSpec& spec, const SelectivityMap* si, std::size_t module, Ordering ordering,
                       std::size_t steps, std::uint64_t seed) {
  if (module >= spec.num_modules()) {
    throw PlanError("module " + std::to_string(module) + " out of range (network has " +
                    std::to_string(spec.num_modules()) + ")");
  }
  if (steps == 0) throw PlanError("an ablation plan needs at least one step after the unablated baseline");

  AblationPlan plan;
  plan.target_module = module;
  plan.ordering = ordering;
  plan.seed = seed;
  const std::size_t channels = spec.channels_per_module[module];
  for (std::size_t b = 0; b < spec.blocks_per_module[module]; ++b) {
    for (std::size_t c = 0; c < channels; ++c) plan.units.push_back({b, c});
  }

  if (ordering == Ordering::kSelective) {
    if (si == nullptr) throw PlanError("selective ordering needs selectivity records");
    std::vector<double> score(plan.units.size());
    for (std::size_t i = 0; i < plan.units.size(); ++i) {
      const Unit u = plan.units[i];
      auto it = si->find(TapId{module, u.block});
      if (it == si->end() || it->second.size() != channels) {
        throw PlanError("missing selectivity for tap " + TapId{module, u.block}.label());
      }
      score[i] = it->second[u.channel].si;
    }
    std::vector<std::size_t> order(plan.units.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Units start in (block, channel) order, so a stable sort keeps that order for ties.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    std::vector<Unit> sorted;
    sorted.reserve(order.size());
    for (std::size_t i : order) sorted.push_back(plan.units[i]);
    plan.units = std::move(sorted);
  } else {
    std::mt19937_64 rng(seed);
    std::shuffle(plan.units.begin(), plan.units.end(), rng);
  }

  for (std::size_t i = 0; i <= steps; ++i) {
    plan.fraction_steps.push_back(static_cast<double>(i) / static_cast<double>(steps));
  }
  return plan;
}

std::size_t ablated_count(double fraction, std::size_t total) {
  const double exact = fraction * static_cast<double>(total);
  // Absorb representation error such as 0.3 * 10 = 2.9999999999999996.
  const auto count = static_cast<std::size_t>(std::floor(exact + 1e-9));
  return std::min(count, total);
}

namespace {

void validate_plan(const AblationPlan& plan, const Model& model) {
  const auto& spec = model.spec();
  if (plan.target_module >= spec.num_modules()) throw PlanError("plan targets a module the model does not have");
  const auto& f = plan.fraction_steps;
  if (f.size() < 2 || f.front() != 0.0 || f.back() != 1.0) {
    throw PlanError("fraction steps must start at 0 and end at 1");
  }
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (!(f[i] > f[i - 1])) throw PlanError("fraction steps must be strictly increasing");
  }
  std::vector<Unit> sorted = plan.units;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t channels = spec.channels_per_module[plan.target_module];
  const std::size_t blocks = spec.blocks_per_module[plan.target_module];
  if (sorted.size() != blocks * channels) throw PlanError("plan does not cover every unit of the module");
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != Unit{i / channels, i % channels}) throw PlanError("plan units are not a permutation");
  }
}

}  // namespace

AblationCurve run_curve(const Model& model, const AblationPlan& plan, const Dataset& eval_set,
                        const CheckpointInfo& info, std::size_t batch_size) {
  validate_plan(plan, model);
  if (eval_set.size() == 0) throw ConfigError("evaluation set is empty");
  AblationCurve curve;
  curve.checkpoint_id = info.id;
  curve.epoch = info.epoch;
  curve.batch_index = info.batch_index;
  curve.module = plan.target_module;
  curve.ordering = plan.ordering;
  curve.seed = plan.seed;

  const std::size_t channels = model.spec().channels_per_module[plan.target_module];
  double baseline = 0.0;
  for (double fraction : plan.fraction_steps) {
    const std::size_t count = ablated_count(fraction, plan.units.size());
    AblationMask mask;
    for (std::size_t i = 0; i < count; ++i) {
      mask.ablate(TapId{plan.target_module, plan.units[i].block}, plan.units[i].channel, channels);
    }
    const double acc = evaluate(model, eval_set, mask, batch_size).accuracy;
    if (curve.steps.empty()) {
      if (acc == 0.0) throw NormalizationError("baseline accuracy is 0; normalized accuracy is undefined");
      baseline = acc;
    }
    curve.steps.push_back({count, fraction, acc, 100.0 * acc / baseline});
  }
  return curve;
}

double auc(const AblationCurve& curve) {
  double total = 0.0;
  for (const auto& s : curve.steps) total += s.norm_acc;
  return total;
}

MeanInterval mean_ci95(std::span<const double> values) {
  if (values.empty()) throw ContractError("mean_ci95 of an empty sample");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, mean, mean};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  const double half = boost::math::quantile(dist, 0.975) * sd / std::sqrt(n);
  return {mean, mean - half, mean + half};
}

void require_common_grid(std::span<const AblationCurve> curves) {
  for (const auto& c : curves) {
    if (c.steps.size() != curves.front().steps.size()) throw PlanError("curves use different step grids");
    for (std::size_t i = 0; i < c.steps.size(); ++i) {
      if (c.steps[i].fraction != curves.front().steps[i].fraction) {
        throw PlanError("curves use different step grids");
      }
    }
  }
}

AucTable auc_over_epochs(std::span<const CheckpointModel> checkpoints, const Dataset& eval_set,
                         const AucOptions& options) {
  if (checkpoints.empty()) throw ConfigError("auc_over_epochs needs at least one checkpoint");
  std::vector<std::size_t> order(checkpoints.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = checkpoints[a].info;
    const auto& y = checkpoints[b].info;
    return std::tie(x.epoch, x.batch_index, x.id) < std::tie(y.epoch, y.batch_index, y.id);
  });

  std::vector<std::uint64_t> seeds = options.random_seeds;
  std::sort(seeds.begin(), seeds.end());

  AucTable table;
  for (std::size_t idx : order) {
    const CheckpointModel& ckpt = checkpoints[idx];
    if (options.selective) {
      ClassMeanAccumulator acc(ckpt.model.spec().num_classes);
      evaluate(ckpt.model, eval_set, {}, options.batch_size, &acc);
      const SelectivityMap si = selectivity_index(acc);
      const AblationPlan plan =
          make_plan(ckpt.model.spec(), &si, options.module, Ordering::kSelective, options.steps);
      table.curves.push_back(run_curve(ckpt.model, plan, eval_set, ckpt.info, options.batch_size));
      const double value = auc(table.curves.back());
      table.rows.push_back({ckpt.info.epoch, ckpt.info.batch_index, options.module, Ordering::kSelective, value,
                            value, value});
    }
    if (!seeds.empty()) {
      std::vector<double> values;
      for (std::uint64_t seed : seeds) {
        const AblationPlan plan =
            make_plan(ckpt.model.spec(), nullptr, options.module, Ordering::kRandom, options.steps, seed);
        table.curves.push_back(run_curve(ckpt.model, plan, eval_set, ckpt.info, options.batch_size));
        values.push_back(auc(table.curves.back()));
      }
      const MeanInterval ci = mean_ci95(values);
      table.rows.push_back({ckpt.info.epoch, ckpt.info.batch_index, options.module, Ordering::kRandom, ci.mean, ci.low,
                            ci.high});
    }
  }
  require_common_grid(table.curves);
  return table;
}

void write_curve_csv(std::ostream& out, std::span<const AblationCurve> curves) {
  out << "checkpoint_id,epoch,batch_index,module,ordering,seed,step_fraction,raw_acc,norm_acc\n";
  for (const auto& c : curves) {
    for (const auto& s : c.steps) {
      out << c.checkpoint_id << ',' << c.epoch << ',' << c.batch_index << ',' << c.module << ','
          << to_string(c.ordering) << ',' << c.seed << ',' << format_double(s.fraction) << ','
          << format_double(s.raw_acc) << ',' << format_double(s.norm_acc) << '\n';
    }
  }
}

void write_auc_csv(std::ostream& out, std::span<const AucRow> rows) {
  out << "epoch,module,ordering,auc,ci_low,ci_high\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.module << ',' << to_string(r.ordering) << ',' << format_double(r.auc) << ','
        << format_double(r.ci_low) << ',' << format_double(r.ci_high) << '\n';
  }
}

}  // namespace selectroscope
