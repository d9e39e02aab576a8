// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selectroscope/tensor.hpp"

namespace selectroscope {

/// Template-plus-noise image classification task.
///
/// Each class owns a fixed template made of coarse random blocks; a sample is
/// clamp(template + N(0, sigma^2), 0, 1) per pixel.
struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 100;
  std::size_t eval_per_class = 50;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  /// Side length, in pixels, of one constant block in a template.
  std::size_t template_cell = 4;
  std::uint64_t template_seed = 1234;
  double noise_sigma = 0.25;

  bool operator==(const SyntheticSpec&) const = default;
};

struct Dataset {
  Tensor images;  // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  /// Copies the selected samples into a batch tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  /// Contiguous slice [begin, begin + count).
  Tensor slice(std::size_t begin, std::size_t count) const;
};

/// Class templates, [num_classes, C, H, W].
Tensor synthetic_templates(const SyntheticSpec& spec);

/// Returns (train, eval). Sample i of a split belongs to class i % num_classes.
std::pair<Dataset, Dataset> generate(const SyntheticSpec& spec);

/// Reads an IDX image file (u8, rank 3 = N,H,W or rank 4 = N,C,H,W) and a rank
/// 1 IDX label file. Pixels are mapped to value / 255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes images quantized to round(255 * v). Rank 3 layout when C == 1.
void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

}  // namespace selectroscope
