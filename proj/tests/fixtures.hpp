// SPDX-License-Identifier: Apache-2.0
// Hand-built models and datasets with known behavior.
#pragma once

#include <vector>

#include "selectroscope/data.hpp"
#include "selectroscope/model.hpp"

namespace fixture {

using selectroscope::ArchitectureSpec;
using selectroscope::Dataset;
using selectroscope::Model;
using selectroscope::Tensor;

/// One module, one block, three channels, 3x1x1 inputs, three classes.
///
/// Input one-hot(c) passes the stem unchanged. conv1 copies channel 0 only, so
/// tap channel 0 fires for class 0 and channels 1, 2 are dead. conv2 adds twice
/// tap channel 0 back onto channel 0. The head adds bias -1.5 to class 0:
///   intact:   class 0 logits [1.5, 0, 0] -> 0, classes 1, 2 correct
///   ablated:  class 0 logits [-0.5, 0, 0] -> 1 (tie goes to the lowest index)
inline ArchitectureSpec toy_spec() {
  ArchitectureSpec s;
  s.blocks_per_module = {1};
  s.channels_per_module = {3};
  s.strides_per_module = {1};
  s.input_channels = 3;
  s.input_height = 1;
  s.input_width = 1;
  s.num_classes = 3;
  return s;
}

inline Model toy_model() {
  Model model = Model::build(toy_spec(), 0);
  for (auto& p : model.parameters()) {
    for (double& v : p.tensor.mutable_data()) v = 0.0;
  }
  // Kernel [out, in, 3, 3]; with 1x1 inputs and padding 1 only the center tap matters.
  auto center = [](std::size_t out, std::size_t in) { return (out * 3 + in) * 9 + 4; };
  auto& stem = model.parameter("stem.weight");
  for (std::size_t c = 0; c < 3; ++c) stem[center(c, c)] = 1.0;
  model.parameter("m0.b0.conv1.weight")[center(0, 0)] = 1.0;
  model.parameter("m0.b0.conv2.weight")[center(0, 0)] = 2.0;
  auto& fc = model.parameter("fc.weight");
  for (std::size_t c = 0; c < 3; ++c) fc[c * 3 + c] = 1.0;
  model.parameter("fc.bias")[0] = -1.5;
  return model;
}

/// counts[c] samples of class c, input one-hot(c).
inline Dataset toy_dataset(const std::vector<std::size_t>& counts) {
  Dataset d;
  d.num_classes = 3;
  d.split = "eval";
  std::size_t n = 0;
  for (std::size_t c : counts) n += c;
  d.images = Tensor({n, 3, 1, 1});
  std::size_t i = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t k = 0; k < counts[c]; ++k, ++i) {
      d.images[i * 3 + c] = 1.0;
      d.labels.push_back(static_cast<int>(c));
    }
  }
  return d;
}

/// Default architecture with module 0 reduced to its identity skips.
inline Model skip_only_model(std::uint64_t seed) {
  Model model = Model::build(ArchitectureSpec{}, seed);
  model.zero_conv_paths(0);
  return model;
}

}  // namespace fixture
