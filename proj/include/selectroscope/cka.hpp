// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "selectroscope/data.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/model.hpp"

namespace selectroscope {

/// Linear CKA between two representations of the same n samples (rows).
///
///   CKA = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)
///
/// with Xc, Yc column-centered. Invariant to orthogonal transforms and
/// isotropic scaling of either side.
template <typename DerivedX, typename DerivedY>
double linear_cka(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
  if (x.rows() != y.rows()) {
    throw DimensionError("linear_cka: sample counts differ (" + std::to_string(x.rows()) + " vs " +
                         std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2) throw DimensionError("linear_cka: need at least 2 samples");
  if (!x.allFinite() || !y.allFinite()) throw NumericError("linear_cka: non-finite representation");

  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  if (xc.isZero(0.0) || yc.isZero(0.0)) throw DegenerateError("linear_cka: representation has zero variance");

  const double cross = (yc.transpose() * xc).squaredNorm();
  const double self_x = (xc.transpose() * xc).norm();
  const double self_y = (yc.transpose() * yc).norm();
  return cross / (self_x * self_y);
}

/// Where a representation is read from.
struct Site {
  enum class Kind { kTap, kModuleOutput, kLogits };

  Kind kind = Kind::kTap;
  std::size_t module = 0;
  std::size_t block = 0;

  /// "m<M>.b<B>" for a tap, "m<M>" for a module output, "fc" for logits.
  std::string label() const;
  static Site parse(const std::string& text);

  bool operator==(const Site&) const = default;
};

/// Every block tap, then every module output, then the logits.
std::vector<Site> default_sites(const Model& model);

struct CkaOptions {
  /// Use full C*H*W activations instead of spatially pooled channels.
  bool flatten = false;
  std::size_t batch_size = 256;
};

/// Representation matrices [samples x features] for each site, over the whole set.
std::vector<Eigen::MatrixXd> collect_representations(const Model& model, const Dataset& eval_set,
                                                     const std::vector<Site>& sites, const CkaOptions& options = {});

/// Symmetric matrix of pairwise linear CKA between sites.
Eigen::MatrixXd cka_matrix(const Model& model, const Dataset& eval_set, const std::vector<Site>& sites,
                           const CkaOptions& options = {});

}  // namespace selectroscope
