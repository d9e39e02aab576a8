// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "oracles.hpp"
#include "selectroscope/autodiff.hpp"
#include "selectroscope/error.hpp"
#include "selectroscope/tensor.hpp"

using namespace selectroscope;

namespace {

std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

TEST(Tensor, ConstructionValidatesCountAndFiniteness) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({1}, std::vector<double>{std::nan("")}), NumericError);
  EXPECT_THROW(Tensor({1}, std::vector<double>{std::numeric_limits<double>::infinity()}), NumericError);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(t.item(), ContractError);
}

TEST(Tensor, BinaryRoundTripIsExact) {
  const Tensor t = oracle::normal_tensor({2, 3, 4}, 7);
  std::stringstream buf;
  write_tensor(buf, t);
  EXPECT_EQ(read_tensor(buf), t);
}

TEST(Tensor, TruncatedRecordReportsOffset) {
  std::stringstream buf;
  write_tensor(buf, oracle::normal_tensor({3, 3}, 1));
  const std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  try {
    read_tensor(cut);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_tensor(bad), FormatError);
}

TEST(Conv2d, OnesKernelSumsWindow) {
  Tape tape(Tape::Mode::kInference);
  Var y = conv2d(tape.constant(Tensor({1, 1, 3, 3}, 1.0)), tape.constant(Tensor({1, 1, 3, 3}, 1.0)), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Tape tape(Tape::Mode::kInference);
  const Tensor x({1, 1, 2, 2}, std::vector<double>{1, -2, 3, 4.5});
  Var y = conv2d(tape.constant(x), tape.constant(Tensor({1, 1, 1, 1}, 1.0)), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, MatchesLoopOracle) {
  const Tensor x = oracle::normal_tensor({2, 3, 5, 5}, 11);
  const Tensor k = oracle::normal_tensor({4, 3, 3, 3}, 12);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tape tape(Tape::Mode::kInference);
      const Tensor got = conv2d(tape.constant(x), tape.constant(k), stride, pad).value();
      const Tensor want = oracle::conv2d(x, k, stride, pad);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(Conv2d, RejectsBadShapes) {
  Tape tape;
  EXPECT_THROW(conv2d(tape.constant(Tensor({1, 2, 3, 3})), tape.constant(Tensor({1, 3, 3, 3})), 1, 0), DimensionError);
  EXPECT_THROW(conv2d(tape.constant(Tensor({1, 1, 2, 2})), tape.constant(Tensor({1, 1, 3, 3})), 1, 0), DimensionError);
  EXPECT_THROW(conv2d(tape.constant(Tensor({1, 1, 3, 3})), tape.constant(Tensor({1, 1, 3, 3})), 0, 0), ContractError);
}

TEST(Relu, ForwardAndGradient) {
  Tensor x({3}, std::vector<double>{-1.0, 0.0, 2.0});
  Tape tape;
  EXPECT_EQ(relu(tape.constant(x)).value(), Tensor({3}, std::vector<double>{0.0, 0.0, 2.0}));
  const Tensor pos({2}, std::vector<double>{0.5, 3.0});
  EXPECT_EQ(relu(tape.constant(pos)).value(), pos);

  Tensor p({2}, std::vector<double>{-1.0, 2.0});
  p.set_requires_grad(true);
  Tape t2;
  Var y = relu(t2.parameter(p));
  t2.backward(sum(scalar_mul(y, 5.0)));
  EXPECT_EQ(grad_of(p), (std::vector<double>{0.0, 5.0}));
}

TEST(Reductions, HandValues) {
  Tape tape(Tape::Mode::kInference);
  EXPECT_DOUBLE_EQ(mean_over(tape.constant(Tensor({1, 2}, std::vector<double>{2, 4})), {0, 1}).value().item(), 3.0);
  const Tensor x({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 0, 0, 0, 8});
  EXPECT_EQ(global_avg_pool(tape.constant(x)).value(), Tensor({1, 2}, std::vector<double>{2.5, 2.0}));
  const Tensor a = oracle::normal_tensor({3, 3}, 3);
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  EXPECT_EQ(matmul(tape.constant(a), tape.constant(eye)).value(), a);
  EXPECT_EQ(flatten(tape.constant(x)).shape(), (Shape{1, 8}));
}

TEST(SoftmaxCrossEntropy, UniformAndStable) {
  Tape tape(Tape::Mode::kInference);
  const int label = 2;
  EXPECT_NEAR(softmax_cross_entropy(tape.constant(Tensor({1, 4}, 0.0)), std::span(&label, 1)).value().item(),
              std::log(4.0), 1e-12);
  const int zero = 0;
  const double big = softmax_cross_entropy(tape.constant(Tensor({1, 2}, std::vector<double>{1000.0, 0.0})),
                                           std::span(&zero, 1))
                         .value()
                         .item();
  EXPECT_NEAR(big, 0.0, 1e-12);
  const int bad = 5;
  EXPECT_THROW(softmax_cross_entropy(tape.constant(Tensor({1, 4})), std::span(&bad, 1)), IndexError);
}

TEST(SoftmaxCrossEntropy, MatchesTwoPassReference) {
  const Tensor logits = oracle::normal_tensor({4, 10}, 5);
  const std::vector<int> labels{3, 0, 9, 4};
  Tape tape(Tape::Mode::kInference);
  EXPECT_NEAR(softmax_cross_entropy(tape.constant(logits), labels).value().item(),
              oracle::cross_entropy(logits, labels), 1e-12);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = oracle::normal_tensor({2, 3}, 9);
  x.set_requires_grad(true);
  Tape tape;
  tape.backward(sum(tape.parameter(x)));
  EXPECT_EQ(grad_of(x), std::vector<double>(6, 1.0));
}

TEST(Backward, SquareAndAccumulation) {
  Tensor x({1}, std::vector<double>{3.0});
  x.set_requires_grad(true);
  Tape tape;
  Var v = tape.parameter(x);
  Var loss = sum(v * v);
  tape.backward(loss);
  EXPECT_EQ(grad_of(x), std::vector<double>{6.0});
  tape.backward(loss);
  EXPECT_EQ(grad_of(x), std::vector<double>{12.0});
  x.zero_grad();
  EXPECT_EQ(grad_of(x), std::vector<double>{0.0});
}

TEST(Backward, RejectedInInferenceAndForNonScalar) {
  Tape inference(Tape::Mode::kInference);
  EXPECT_THROW(inference.backward(sum(inference.constant(Tensor({2}, 1.0)))), ContractError);
  Tape tape;
  EXPECT_THROW(tape.backward(tape.constant(Tensor({2}, 1.0))), ContractError);
}

TEST(GradCheck, ClosedForms) {
  const Tensor point = oracle::normal_tensor({5}, 21);
  EXPECT_LT(grad_check([](Tape&, Var x) { return sum(x * x); }, point, 1e-5), 1e-6);
  EXPECT_EQ(grad_check([](Tape& t, Var) { return t.constant(Tensor::scalar(3.0)); }, point, 1e-5), 0.0);

  // Every coordinate at least 10 steps away from the kink.
  Tensor away = point;
  for (double& v : away.mutable_data()) v = (v >= 0 ? 1.0 : -1.0) * (std::abs(v) + 1e-3);
  EXPECT_LT(grad_check([](Tape&, Var x) { return sum(relu(x) * x); }, away, 1e-5), 1e-4);
}

TEST(GradCheck, EveryOperation) {
  const double step = 1e-5;
  const Tensor m = oracle::random_tensor({2, 3}, 31, 0.5, 1.5);
  const Tensor img = oracle::normal_tensor({2, 2, 4, 4}, 32);
  const std::vector<int> labels{1, 2};
  const Tensor other = oracle::random_tensor({2, 3}, 33, 0.5, 1.5);
  const Tensor kernel = oracle::normal_tensor({3, 2, 3, 3}, 34);
  const Tensor bias = oracle::normal_tensor({2}, 35);

  auto constant = [](Tape& t, const Tensor& v) { return t.constant(Tensor(v.shape(), v.values())); };
  std::vector<std::pair<const char*, std::pair<ScalarFunction, Tensor>>> cases = {
      {"add", {[&](Tape& t, Var x) { return sum((x + constant(t, other)) * x); }, m}},
      {"sub", {[&](Tape& t, Var x) { return sum((x - constant(t, other)) * x); }, m}},
      {"mul", {[&](Tape& t, Var x) { return sum(x * constant(t, other) * x); }, m}},
      {"div", {[&](Tape& t, Var x) { return sum(constant(t, other) / x + x / constant(t, other)); }, m}},
      {"scalar_mul", {[](Tape&, Var x) { return sum(scalar_mul(x * x, -2.5)); }, m}},
      {"add_scalar", {[](Tape&, Var x) { return sum(add_scalar(x, 0.3) * x); }, m}},
      {"matmul", {[&](Tape& t, Var x) { return sum(matmul(x, transpose(constant(t, other))) * matmul(x, transpose(x))); }, m}},
      {"sum_over", {[](Tape&, Var x) { return sum(sum_over(x, {1}) * sum_over(x, {1})); }, m}},
      {"mean_over", {[](Tape&, Var x) { return sum(mean_over(x, {0}) * mean_over(x, {0})); }, m}},
      {"max_over", {[&](Tape& t, Var x) { return sum(max_over(x * constant(t, other), 1)); }, m}},
      {"mean", {[](Tape&, Var x) { return mean(x * x); }, m}},
      {"flatten", {[](Tape&, Var x) { return sum(flatten(x) * flatten(x)); }, img}},
      {"global_avg_pool", {[](Tape&, Var x) { return sum(global_avg_pool(x * x)); }, img}},
      {"add_channel_bias", {[&](Tape& t, Var x) { return sum(add_channel_bias(constant(t, img), x) * constant(t, img)); }, bias}},
      {"conv2d.input", {[&](Tape& t, Var x) { return sum(conv2d(x, constant(t, kernel), 2, 1) * conv2d(x, constant(t, kernel), 2, 1)); }, img}},
      {"conv2d.kernel", {[&](Tape& t, Var x) { return sum(conv2d(constant(t, img), x, 1, 1) * conv2d(constant(t, img), x, 1, 1)); }, kernel}},
      {"mask_channels", {[](Tape&, Var x) { return sum(mask_channels(x, {true, false}) * x); }, img}},
      {"softmax_cross_entropy", {[&](Tape&, Var x) { return softmax_cross_entropy(x, labels); }, m}},
  };
  for (const auto& [name, c] : cases) {
    EXPECT_LT(grad_check(c.first, c.second, step), 1e-6) << name;
  }
}

TEST(MaxOver, TiesRouteGradientToLowestIndex) {
  Tensor x({1, 3}, std::vector<double>{2.0, 2.0, 1.0});
  x.set_requires_grad(true);
  Tape tape;
  Var y = max_over(tape.parameter(x), 1);
  EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
  tape.backward(sum(y));
  EXPECT_EQ(grad_of(x), (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(Tape, ElementwiseShapeMismatch) {
  Tape tape;
  EXPECT_THROW(add(tape.constant(Tensor({2})), tape.constant(Tensor({3}))), DimensionError);
  EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), DimensionError);
}

TEST(Tape, NonFiniteResultIsRejected) {
  Tape tape;
  EXPECT_THROW(div(tape.constant(Tensor({1}, 1.0)), tape.constant(Tensor({1}, 0.0))), NumericError);
}
