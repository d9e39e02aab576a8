// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "selectroscope/cka.hpp"
#include "selectroscope/data.hpp"
#include "selectroscope/error.hpp"

using namespace selectroscope;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  Eigen::MatrixXd m(n, p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Eigen::MatrixXd orthogonal(Eigen::Index p, std::uint64_t seed) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(p, p, seed));
  return qr.householderQ();
}

Dataset eval_subset() {
  SyntheticSpec spec;
  spec.train_per_class = 1;
  spec.eval_per_class = 6;
  return generate(spec).second;
}

}  // namespace

TEST(LinearCka, SelfSimilarityIsOne) {
  const Eigen::MatrixXd x = gaussian(50, 7, 1);
  EXPECT_NEAR(linear_cka(x, x), 1.0, 1e-10);
}

TEST(LinearCka, OrthogonalAndScalingInvariance) {
  const Eigen::MatrixXd x = gaussian(40, 6, 2);
  const Eigen::MatrixXd y = gaussian(40, 9, 3);
  EXPECT_NEAR(linear_cka(x, x * orthogonal(6, 4)), 1.0, 1e-10);
  const double base = linear_cka(x, y);
  EXPECT_NEAR(linear_cka(2.5 * x * orthogonal(6, 5), 0.1 * y * orthogonal(9, 6)), base, 1e-10);
  EXPECT_NEAR(linear_cka(y, x), base, 1e-15);
}

TEST(LinearCka, MatchesHsicOracle) {
  const Eigen::MatrixXd x = gaussian(64, 8, 10);
  const Eigen::MatrixXd y = gaussian(64, 8, 11);
  EXPECT_NEAR(linear_cka(x, y), oracle::hsic_cka(x, y), 1e-12);
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(1000 + s);
    const auto n = static_cast<Eigen::Index>(2 + rng() % 127);
    const auto p = static_cast<Eigen::Index>(1 + rng() % 32);
    const auto q = static_cast<Eigen::Index>(1 + rng() % 32);
    const Eigen::MatrixXd a = gaussian(n, p, 2 * s);
    const Eigen::MatrixXd b = gaussian(n, q, 2 * s + 1);
    const double value = linear_cka(a, b);
    EXPECT_NEAR(value, oracle::hsic_cka(a, b), 1e-10) << n << "x" << p << " vs " << q;
    EXPECT_GE(value, 0.0);
    EXPECT_LE(value, 1.0 + 1e-12);
  }
}

TEST(LinearCka, Errors) {
  EXPECT_THROW(linear_cka(gaussian(5, 2, 1), gaussian(6, 2, 2)), DimensionError);
  EXPECT_THROW(linear_cka(gaussian(1, 2, 1), gaussian(1, 2, 2)), DimensionError);
  const Eigen::MatrixXd constant = Eigen::MatrixXd::Ones(5, 3);
  EXPECT_THROW(linear_cka(constant, gaussian(5, 2, 3)), DegenerateError);
  Eigen::MatrixXd bad = gaussian(5, 2, 4);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(linear_cka(bad, gaussian(5, 2, 5)), NumericError);
}

TEST(Site, ParseAndLabel) {
  EXPECT_EQ(Site::parse("m2.b1"), (Site{Site::Kind::kTap, 2, 1}));
  EXPECT_EQ(Site::parse("m3"), (Site{Site::Kind::kModuleOutput, 3, 0}));
  EXPECT_EQ(Site::parse("fc").kind, Site::Kind::kLogits);
  EXPECT_EQ(Site::parse("m10.b0").label(), "m10.b0");
  EXPECT_THROW(Site::parse("x1"), ConfigError);
  EXPECT_THROW(Site::parse("m"), ConfigError);
  EXPECT_THROW(Site::parse("m1.b"), ConfigError);
}

TEST(CkaMatrix, SingleSiteAndSymmetry) {
  const Model model = Model::build(ArchitectureSpec{}, 1);
  const Dataset eval = eval_subset();
  const Eigen::MatrixXd one = cka_matrix(model, eval, {Site{Site::Kind::kTap, 1, 0}});
  ASSERT_EQ(one.rows(), 1);
  EXPECT_EQ(one(0, 0), 1.0);

  const Eigen::MatrixXd m = cka_matrix(model, eval, default_sites(model));
  EXPECT_EQ(m.rows(), 13);
  EXPECT_LT((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(cka_matrix(model, eval, {Site{Site::Kind::kTap, 9, 0}}), ConfigError);
}

TEST(CkaMatrix, BatchingDoesNotChangeRepresentations) {
  const Model model = Model::build(ArchitectureSpec{}, 2);
  const Dataset eval = eval_subset();
  CkaOptions small;
  small.batch_size = 7;
  const auto a = collect_representations(model, eval, default_sites(model), small);
  const auto b = collect_representations(model, eval, default_sites(model));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].isApprox(b[i], 1e-14));
  CkaOptions flat;
  flat.flatten = true;
  const auto f = collect_representations(model, eval, {Site{Site::Kind::kTap, 0, 0}}, flat);
  EXPECT_EQ(f[0].cols(), 8 * 16 * 16);
}

TEST(CkaMatrix, IdentityModuleGivesOne) {
  ArchitectureSpec spec;
  spec.blocks_per_module = {1, 1};
  spec.channels_per_module = {4, 4};
  spec.strides_per_module = {1, 1};
  Model model = Model::build(spec, 3);
  model.zero_conv_paths(1);
  const std::vector<Site> sites{Site{Site::Kind::kModuleOutput, 0, 0}, Site{Site::Kind::kModuleOutput, 1, 0}};
  const Eigen::MatrixXd m = cka_matrix(model, eval_subset(), sites);
  EXPECT_NEAR(m(0, 1), 1.0, 1e-10);
}
