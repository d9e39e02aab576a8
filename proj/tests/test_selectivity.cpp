// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"
#include "selectroscope/autodiff.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/model.hpp"
#include "selectroscope/selectivity.hpp"

using namespace selectroscope;

namespace {

ArchitectureSpec tiny_spec() {
  ArchitectureSpec s;
  s.blocks_per_module = {1, 2};
  s.channels_per_module = {2, 3};
  s.strides_per_module = {1, 2};
  s.input_height = 6;
  s.input_width = 6;
  s.num_classes = 3;
  return s;
}

std::vector<int> cyclic_labels(std::size_t n, int classes) {
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  return out;
}

/// Capture of one tap for the given rows of a forward pass.
std::vector<std::pair<TapId, Tensor>> tap_values(const ForwardPass& pass) {
  std::vector<std::pair<TapId, Tensor>> out;
  for (const auto& [tap, v] : pass.taps) out.emplace_back(tap, v.value());
  return out;
}

}  // namespace

TEST(SelectivityFromMeans, HandExamples) {
  const std::vector<double> flat{0.5, 0.5, 0.5};
  EXPECT_NEAR(selectivity_from_means(flat).si, 0.0, 1e-12);
  const std::vector<double> one{1.0, 0.0, 0.0};
  EXPECT_NEAR(selectivity_from_means(one).si, 1.0 / (1.0 + 1e-6), 1e-12);
  const std::vector<double> mixed{0.6, 0.2, 0.2};
  const SelectivityRecord r = selectivity_from_means(mixed);
  EXPECT_NEAR(r.mu_max, 0.6, 1e-15);
  EXPECT_NEAR(r.mu_neg_max, 0.2, 1e-15);
  EXPECT_NEAR(r.si, 0.4 / (0.8 + 1e-6), 1e-12);
  EXPECT_NEAR(r.si, 0.4999994, 1e-6);
  EXPECT_EQ(r.argmax_class, 0u);
}

TEST(SelectivityFromMeans, TiesGoToLowestClassAndDeadUnitIsZero) {
  const std::vector<double> tie{0.1, 0.7, 0.7};
  EXPECT_EQ(selectivity_from_means(tie).argmax_class, 1u);
  const std::vector<double> dead{0.0, 0.0, 0.0};
  EXPECT_EQ(selectivity_from_means(dead).si, 0.0);
}

TEST(ClassMeanAccumulator, SingleSample) {
  ClassMeanAccumulator acc(3);
  const int label = 2;
  acc.accumulate(TapId{0, 0}, Tensor({1, 2, 2, 2}, 3.0), std::span(&label, 1));
  const auto& sums = acc.sums(TapId{0, 0});
  EXPECT_DOUBLE_EQ(sums(2, 0), 3.0);
  EXPECT_DOUBLE_EQ(sums(2, 1), 3.0);
  EXPECT_EQ(acc.counts(TapId{0, 0}), (std::vector<std::int64_t>{0, 0, 1}));
  EXPECT_THROW(acc.class_means(TapId{0, 0}), StatisticsError);
}

TEST(ClassMeanAccumulator, RejectsBadInput) {
  ClassMeanAccumulator acc(3);
  const std::vector<int> labels{0, 1};
  EXPECT_THROW(acc.accumulate(TapId{0, 0}, Tensor({2, 1, 1, 1}, -1.0), labels), ContractError);
  const std::vector<int> bad{0, 7};
  EXPECT_THROW(acc.accumulate(TapId{0, 0}, Tensor({2, 1, 1, 1}, 1.0), bad), IndexError);
  acc.accumulate(TapId{0, 0}, Tensor({2, 1, 1, 1}, 1.0), labels);
  EXPECT_THROW(acc.accumulate(TapId{0, 0}, Tensor({2, 2, 1, 1}, 1.0), labels), DimensionError);
}

TEST(ClassMeanAccumulator, BatchEqualsSampleBySample) {
  const Tensor act = oracle::random_tensor({6, 3, 2, 2}, 4, 0.0, 2.0);
  const auto labels = cyclic_labels(6, 3);
  ClassMeanAccumulator whole(3);
  whole.accumulate(TapId{0, 0}, act, labels);
  ClassMeanAccumulator single(3);
  for (std::size_t i = 0; i < 6; ++i) {
    Tensor one({1, 3, 2, 2}, std::vector<double>(act.values().begin() + i * 12, act.values().begin() + (i + 1) * 12));
    single.accumulate(TapId{0, 0}, one, std::span(&labels[i], 1));
  }
  EXPECT_TRUE(whole.sums(TapId{0, 0}).isApprox(single.sums(TapId{0, 0}), 1e-14));
  EXPECT_EQ(whole.counts(TapId{0, 0}), single.counts(TapId{0, 0}));
}

TEST(SelectivityIndex, StreamingMatchesOneShotOracle) {
  const Model model = Model::build(tiny_spec(), 3);
  const std::size_t n = 41;
  const Tensor images = oracle::random_tensor({n, 1, 6, 6}, 5, 0.0, 1.0);
  const auto labels = cyclic_labels(n, 3);

  // Seven uneven mini-batches.
  const std::vector<std::size_t> cuts{0, 3, 9, 10, 18, 27, 33, n};
  ClassMeanAccumulator acc(3);
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    const std::size_t begin = cuts[k], count = cuts[k + 1] - cuts[k];
    Tensor batch({count, 1, 6, 6}, std::vector<double>(images.values().begin() + begin * 36,
                                                       images.values().begin() + (begin + count) * 36));
    Tape tape(Tape::Mode::kInference);
    const ForwardPass pass = model.forward(tape, batch);
    for (const auto& c : capture(model, pass, model.taps(), std::span(labels).subspan(begin, count))) {
      acc.accumulate(c);
    }
  }
  const SelectivityMap streamed = selectivity_index(acc);

  Tape tape(Tape::Mode::kInference);
  const ForwardPass full = model.forward(tape, images);
  for (const auto& [tap, act] : tap_values(full)) {
    const auto means = oracle::class_means(act, labels);
    ASSERT_EQ(streamed.at(tap).size(), means.size());
    for (std::size_t ch = 0; ch < means.size(); ++ch) {
      const double si = streamed.at(tap)[ch].si;
      EXPECT_NEAR(si, oracle::selectivity(means[ch]), 1e-10);
      EXPECT_GE(si, 0.0);
      EXPECT_LT(si, 1.0);
    }
  }
}

TEST(SelectivityIndex, MergeEqualsSequential) {
  const Tensor a = oracle::random_tensor({6, 2, 1, 1}, 1, 0.0, 1.0);
  const Tensor b = oracle::random_tensor({6, 2, 1, 1}, 2, 0.0, 1.0);
  const auto labels = cyclic_labels(6, 3);
  ClassMeanAccumulator left(3), right(3), both(3);
  left.accumulate(TapId{0, 0}, a, labels);
  right.accumulate(TapId{0, 0}, b, labels);
  both.accumulate(TapId{0, 0}, a, labels);
  both.accumulate(TapId{0, 0}, b, labels);
  left.merge(right);
  EXPECT_TRUE(left.sums(TapId{0, 0}).isApprox(both.sums(TapId{0, 0}), 1e-15));
}

TEST(ModuleMeanSi, AveragesBlocksThenChannels) {
  SelectivityMap si;
  si[TapId{0, 0}] = {{0.2, 0, 0, 0}, {0.4, 0, 0, 0}};
  si[TapId{0, 1}] = {{0.6, 0, 0, 0}, {0.6, 0, 0, 0}};
  si[TapId{1, 0}] = {{0.5, 0, 0, 0}};
  const auto m = module_mean_si(si, 3);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_NEAR(m[0], 0.45, 1e-15);
  EXPECT_NEAR(m[1], 0.5, 1e-15);
  EXPECT_EQ(m[2], 0.0);
}

TEST(Regularizer, SingleUnitHandExample) {
  Tape tape(Tape::Mode::kInference);
  const Tensor act({3, 1, 1, 1}, std::vector<double>{0.6, 0.2, 0.2});
  const std::vector<int> labels{0, 1, 2};
  const std::vector<std::pair<TapId, Var>> taps{{TapId{0, 0}, tape.constant(act)}};
  const double mu = regularizer_mu_si(taps, labels, {0}).value().item();
  EXPECT_NEAR(mu, 0.4 / (0.8 + 1e-6), 1e-12);
}

TEST(Regularizer, MatchesBatchRestrictedOracle) {
  const Model model = Model::build(tiny_spec(), 11);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor batch = oracle::random_tensor({9, 1, 6, 6}, 100 + seed, 0.0, 1.0);
    // Seeds 3 and 4 leave class 2 out of the batch.
    std::vector<int> labels = cyclic_labels(9, seed < 3 ? 3 : 2);
    Tape tape(Tape::Mode::kInference);
    const ForwardPass pass = model.forward(tape, batch);
    const std::set<std::size_t> modules{0, 1};
    const double got = regularizer_mu_si(pass.taps, labels, modules).value().item();
    EXPECT_NEAR(got, oracle::batch_mu_si(tap_values(pass), labels, modules), 1e-12) << seed;
    if (seed < 3) {
      ClassMeanAccumulator acc(3);
      for (const auto& c : capture(model, pass, model.taps(), labels)) acc.accumulate(c);
      const auto per_module = module_mean_si(selectivity_index(acc), 2);
      EXPECT_NEAR(got, (per_module[0] + per_module[1]) / 2.0, 1e-12);
    }
  }
}

TEST(Regularizer, ErrorsOnDegenerateInput) {
  Tape tape;
  const Tensor act({2, 1, 1, 1}, 1.0);
  const std::vector<std::pair<TapId, Var>> taps{{TapId{0, 0}, tape.constant(act)}};
  const std::vector<int> same{1, 1};
  EXPECT_THROW(regularizer_mu_si(taps, same, {0}), StatisticsError);
  const std::vector<int> two{0, 1};
  EXPECT_THROW(regularizer_mu_si(taps, two, {3}), ConfigError);
}

TEST(Regularizer, SymmetricActivationsGiveZeroAndZeroGradient) {
  Tensor w({2, 1}, std::vector<double>{0.7, 1.3});
  w.set_requires_grad(true);
  Tape tape;
  // Every sample sees the same input, so every class mean is identical.
  const Tensor x({4, 1}, 1.0);
  Var h = relu(matmul(tape.constant(x), transpose(tape.parameter(w))));
  Var act = tape.record(Tensor(Shape{4, 2, 1, 1}, h.value().values()), {h},
                        [h](Tape& t, std::span<const double> g) {
                          auto dst = t.adjoint_buffer(h);
                          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                        });
  const std::vector<int> labels{0, 1, 2, 0};
  const std::vector<std::pair<TapId, Var>> taps{{TapId{0, 0}, act}};
  Var mu = regularizer_mu_si(taps, labels, {0});
  EXPECT_NEAR(mu.value().item(), 0.0, 1e-15);
  tape.backward(mu);
  for (double g : w.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(Regularizer, GradientMatchesFiniteDifferences) {
  Model model = Model::build(tiny_spec(), 21);
  const Tensor batch = oracle::random_tensor({6, 1, 6, 6}, 22, 0.0, 1.0);
  const auto labels = cyclic_labels(6, 3);
  const std::set<std::size_t> modules{0, 1};
  model.zero_grad();
  {
    Tape tape;
    tape.backward(regularizer_mu_si(model.forward(tape, batch).taps, labels, modules));
  }
  const Model& frozen = model;
  auto value = [&] {
    Tape tape(Tape::Mode::kInference);
    return regularizer_mu_si(frozen.forward(tape, batch).taps, labels, modules).value().item();
  };
  const auto numeric = oracle::numeric_parameter_grads(model, value, 1e-6);
  double worst = 0.0;
  for (std::size_t p = 0; p < numeric.size(); ++p) {
    const Tensor& t = model.parameters()[p].tensor;
    for (std::size_t i = 0; i < numeric[p].size(); ++i) {
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      worst = std::max(worst, oracle::relative_error(analytic, numeric[p][i], 1e-6));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(RegularizedLoss, Arithmetic) {
  Tape tape(Tape::Mode::kInference);
  Var ce = tape.constant(Tensor::scalar(2.0));
  Var mu = tape.constant(Tensor::scalar(0.5));
  EXPECT_DOUBLE_EQ(regularized_loss(ce, mu, -20.0).value().item(), 12.0);
  EXPECT_DOUBLE_EQ(regularized_loss(ce, mu, 1.0).value().item(), 1.5);
  EXPECT_EQ(regularized_loss(ce, mu, 0.0).id(), ce.id());
}

TEST(RegularizedLoss, ZeroAlphaIsPlainCrossEntropy) {
  const Tensor logits = oracle::normal_tensor({4, 3}, 8);
  const std::vector<int> labels{0, 2, 1, 1};
  Tape tape(Tape::Mode::kInference);
  Var l = tape.constant(logits);
  const double plain = softmax_cross_entropy(l, labels).value().item();
  const double reg = regularized_loss(l, labels, tape.constant(Tensor::scalar(0.9)), 0.0).value().item();
  EXPECT_EQ(plain, reg);
}

TEST(SiCsv, HeaderAndRows) {
  SelectivityMap si;
  si[TapId{1, 0}] = {{0.25, 0.5, 0.1, 2}};
  std::ostringstream out;
  write_si_csv_header(out);
  write_si_csv_rows(out, 3, 7, si);
  EXPECT_EQ(out.str(), "epoch,batch_index,module,block,channel,si,mu_max,argmax_class\n3,7,1,0,0,0.25,0.5,2\n");
}
