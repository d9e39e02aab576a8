// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selectroscope/autodiff.hpp"
#include "selectroscope/tensor.hpp"

namespace selectroscope {

/// Residual network layout. Module i is the i-th residual stage after the
/// stem (stage 0 is "module 4" in ResNet naming).
struct ArchitectureSpec {
  std::vector<std::size_t> blocks_per_module{2, 2, 2, 2};
  std::vector<std::size_t> channels_per_module{8, 16, 32, 64};
  /// Stride of the first block of each module.
  std::vector<std::size_t> strides_per_module{1, 2, 2, 2};
  std::size_t input_channels = 1;
  std::size_t input_height = 16;
  std::size_t input_width = 16;
  std::size_t num_classes = 10;

  std::size_t num_modules() const { return blocks_per_module.size(); }
  /// Throws ConfigError describing the first inconsistency.
  void validate() const;

  bool operator==(const ArchitectureSpec&) const = default;
};

/// A block's post-ReLU conv-path activation, where selectivity is measured
/// and ablation masks are applied.
struct TapId {
  std::size_t module = 0;
  std::size_t block = 0;

  std::string label() const;  // "m<module>.b<block>"
  auto operator<=>(const TapId&) const = default;
};

/// Per-tap channel ablation; true = channel forced to 0.
struct AblationMask {
  std::map<TapId, std::vector<bool>> channels;

  bool empty() const { return channels.empty(); }
  void ablate(TapId tap, std::size_t channel, std::size_t width);
};

/// Post-ReLU activations of one tap for one batch.
struct TapCapture {
  TapId tap;
  Tensor activations;  // [N, C, H, W]
  std::vector<int> labels;
};

/// Everything a forward pass leaves on the tape.
struct ForwardPass {
  Var logits;
  std::vector<std::pair<TapId, Var>> taps;  // network order
  std::vector<Var> module_outputs;

  Var tap(TapId id) const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  /// Fan-in scaled normal initialization, fully determined by `seed`.
  static Model build(const ArchitectureSpec& spec, std::uint64_t seed);

  const ArchitectureSpec& spec() const noexcept { return spec_; }

  std::vector<NamedTensor>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor>& parameters() const noexcept { return params_; }
  Tensor& parameter(const std::string& name);
  std::size_t parameter_count() const;

  std::vector<TapId> taps() const;
  std::size_t tap_channels(TapId tap) const;
  /// Throws ConfigError for taps that do not exist.
  void check_tap(TapId tap) const;

  /// Binds parameters as differentiable leaves (when the tape records).
  ForwardPass forward(Tape& tape, const Tensor& batch, const AblationMask& masks = {});
  /// Read-only forward; parameters enter the tape as constants.
  ForwardPass forward(Tape& tape, const Tensor& batch, const AblationMask& masks = {}) const;

  /// Inference-only logits for a batch.
  Tensor logits(const Tensor& batch, const AblationMask& masks = {}) const;

  void zero_grad();

  /// Zeroes conv-path weights of every block in `module`, so those blocks pass
  /// their input through the skip path only.
  void zero_conv_paths(std::size_t module);

 private:
  struct Block {
    std::size_t conv1 = 0;
    std::size_t conv2 = 0;
    std::optional<std::size_t> projection;
    std::size_t stride = 1;
  };

  template <typename Bind>
  ForwardPass run(Tape& tape, const Tensor& batch, const AblationMask& masks, Bind bind) const;

  ArchitectureSpec spec_;
  std::vector<NamedTensor> params_;
  std::size_t stem_ = 0;
  std::vector<std::vector<Block>> modules_;
  std::size_t fc_weight_ = 0;
  std::size_t fc_bias_ = 0;
};

/// Copies selected tap activations out of a forward pass.
std::vector<TapCapture> capture(const Model& model, const ForwardPass& pass, std::span<const TapId> taps,
                                std::span<const int> labels);

/// Ordered key=value text block at the head of a checkpoint file.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  std::optional<std::string> find(const std::string& key) const;
  /// Throws CheckpointError when missing.
  const std::string& get(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

void write_architecture(Manifest& manifest, const ArchitectureSpec& spec);
ArchitectureSpec read_architecture(const Manifest& manifest);

struct Checkpoint {
  Model model;
  Manifest manifest;
  /// Tensors stored after the parameters (optimizer state and the like).
  std::vector<NamedTensor> extras;
};

/// Layout: "SELCKPT <version>" line, key=value lines, "end" line, then one
/// tensor record per parameter followed by the extras, in manifest order.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Manifest& manifest = {},
                     std::span<const NamedTensor> extras = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save(const Model& model, const std::filesystem::path& path);
/// Loads parameters into `model`; architecture must match exactly.
void load(Model& model, const std::filesystem::path& path);

}  // namespace selectroscope
