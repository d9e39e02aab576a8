// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/cka.hpp"

#include <algorithm>
#include <numeric>

#include "selectroscope/autodiff.hpp"

namespace selectroscope {

std::string Site::label() const {
  switch (kind) {
    case Kind::kTap:
      return TapId{module, block}.label();
    case Kind::kModuleOutput:
      return "m" + std::to_string(module);
    case Kind::kLogits:
      return "fc";
  }
  return {};
}

Site Site::parse(const std::string& text) {
  if (text == "fc") return Site{Kind::kLogits, 0, 0};
  auto number = [&](std::size_t begin, std::size_t end) {
    if (begin >= end) throw ConfigError("malformed site '" + text + "'");
    std::size_t value = 0;
    for (std::size_t i = begin; i < end; ++i) {
      if (text[i] < '0' || text[i] > '9') throw ConfigError("malformed site '" + text + "'");
      value = value * 10 + static_cast<std::size_t>(text[i] - '0');
    }
    return value;
  };
  if (text.size() < 2 || text[0] != 'm') throw ConfigError("malformed site '" + text + "' (expected mM, mM.bB or fc)");
  const auto dot = text.find(".b");
  if (dot == std::string::npos) return Site{Kind::kModuleOutput, number(1, text.size()), 0};
  return Site{Kind::kTap, number(1, dot), number(dot + 2, text.size())};
}

std::vector<Site> default_sites(const Model& model) {
  std::vector<Site> sites;
  for (TapId tap : model.taps()) sites.push_back(Site{Site::Kind::kTap, tap.module, tap.block});
  for (std::size_t m = 0; m < model.spec().num_modules(); ++m) sites.push_back(Site{Site::Kind::kModuleOutput, m, 0});
  sites.push_back(Site{Site::Kind::kLogits, 0, 0});
  return sites;
}

namespace {

Var site_value(const Model& model, const ForwardPass& pass, const Site& site) {
  switch (site.kind) {
    case Site::Kind::kTap:
      model.check_tap(TapId{site.module, site.block});
      return pass.tap(TapId{site.module, site.block});
    case Site::Kind::kModuleOutput:
      if (site.module >= pass.module_outputs.size()) throw ConfigError("unknown site " + site.label());
      return pass.module_outputs[site.module];
    case Site::Kind::kLogits:
      return pass.logits;
  }
  throw ConfigError("unknown site kind");
}

// One row per sample: pooled channels, or the whole flattened activation.
void append_rows(const Tensor& value, bool flatten, std::size_t row_offset, Eigen::MatrixXd& out) {
  const std::size_t batch = value.dim(0);
  const std::size_t per_sample = value.size() / batch;
  const bool pool = !flatten && value.rank() == 4;
  const std::size_t area = pool ? value.dim(2) * value.dim(3) : 1;
  const std::size_t features = per_sample / area;
  if (out.cols() == 0) out.resize(out.rows(), static_cast<Eigen::Index>(features));
  for (std::size_t n = 0; n < batch; ++n) {
    const double* sample = value.data().data() + n * per_sample;
    for (std::size_t f = 0; f < features; ++f) {
      const double* chunk = sample + f * area;
      out(static_cast<Eigen::Index>(row_offset + n), static_cast<Eigen::Index>(f)) =
          std::accumulate(chunk, chunk + area, 0.0) / static_cast<double>(area);
    }
  }
}

}  // namespace

std::vector<Eigen::MatrixXd> collect_representations(const Model& model, const Dataset& eval_set,
                                                     const std::vector<Site>& sites, const CkaOptions& options) {
  if (eval_set.size() == 0) throw ConfigError("CKA needs a nonempty evaluation set");
  if (options.batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Eigen::MatrixXd> reps(sites.size(), Eigen::MatrixXd(static_cast<Eigen::Index>(eval_set.size()), 0));
  for (std::size_t begin = 0; begin < eval_set.size(); begin += options.batch_size) {
    const std::size_t count = std::min(options.batch_size, eval_set.size() - begin);
    Tape tape(Tape::Mode::kInference);
    const ForwardPass pass = model.forward(tape, eval_set.slice(begin, count));
    for (std::size_t s = 0; s < sites.size(); ++s) {
      append_rows(site_value(model, pass, sites[s]).value(), options.flatten, begin, reps[s]);
    }
  }
  return reps;
}

Eigen::MatrixXd cka_matrix(const Model& model, const Dataset& eval_set, const std::vector<Site>& sites,
                           const CkaOptions& options) {
  const auto reps = collect_representations(model, eval_set, sites, options);
  const auto count = static_cast<Eigen::Index>(sites.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(count, count);
  for (Eigen::Index i = 0; i < count; ++i) {
    for (Eigen::Index j = i + 1; j < count; ++j) {
      out(i, j) = linear_cka(reps[static_cast<std::size_t>(i)], reps[static_cast<std::size_t>(j)]);
      out(j, i) = out(i, j);
    }
  }
  return out;
}

}  // namespace selectroscope
