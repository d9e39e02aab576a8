// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "selectroscope/error.hpp"

namespace selectroscope {

namespace {

constexpr std::size_t kKernel = 3;
constexpr const char* kCheckpointMagic = "SELCKPT";
constexpr int kCheckpointVersion = 1;

std::string join(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i != 0) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw CheckpointError("manifest key " + key + " has malformed list '" + text + "'");
    }
  }
  return out;
}

}  // namespace

void ArchitectureSpec::validate() const {
  const std::size_t m = blocks_per_module.size();
  if (m == 0) throw ConfigError("architecture needs at least one module");
  if (channels_per_module.size() != m || strides_per_module.size() != m) {
    throw ConfigError("blocks_per_module, channels_per_module and strides_per_module must have equal length (" +
                      std::to_string(m) + ", " + std::to_string(channels_per_module.size()) + ", " +
                      std::to_string(strides_per_module.size()) + ")");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (blocks_per_module[i] == 0) throw ConfigError("module " + std::to_string(i) + " has no blocks");
    if (channels_per_module[i] == 0) throw ConfigError("module " + std::to_string(i) + " has no channels");
    if (strides_per_module[i] == 0) throw ConfigError("module " + std::to_string(i) + " has stride 0");
    if (i > 0 && channels_per_module[i] < channels_per_module[i - 1]) {
      throw ConfigError("channels_per_module must be nondecreasing");
    }
  }
  if (input_channels == 0 || input_height == 0 || input_width == 0) {
    throw ConfigError("input shape extents must be positive");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

std::string TapId::label() const {
  return "m" + std::to_string(module) + ".b" + std::to_string(block);
}

void AblationMask::ablate(TapId tap, std::size_t channel, std::size_t width) {
  auto& bits = channels[tap];
  if (bits.empty()) bits.assign(width, false);
  if (channel >= bits.size()) {
    throw ConfigError("channel " + std::to_string(channel) + " out of range for tap " + tap.label());
  }
  bits[channel] = true;
}

Var ForwardPass::tap(TapId id) const {
  for (const auto& [tap_id, var] : taps) {
    if (tap_id == id) return var;
  }
  throw ConfigError("unknown tap " + id.label());
}

Model Model::build(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model model;
  model.spec_ = spec;
  std::mt19937_64 rng(seed);

  auto add_conv = [&](std::string name, std::size_t out_c, std::size_t in_c, std::size_t k, double gain = 1.0) {
    const double fan_in = static_cast<double>(in_c * k * k);
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    Tensor w(Shape{out_c, in_c, k, k});
    for (double& v : w.mutable_data()) v = dist(rng);
    w.set_requires_grad(true);
    model.params_.push_back({std::move(name), std::move(w)});
    return model.params_.size() - 1;
  };

  // Residual branches end with a down-scaled conv so the variance of the
  // residual stream stays bounded without normalization layers.
  std::size_t total_blocks = 0;
  for (std::size_t b : spec.blocks_per_module) total_blocks += b;
  const double branch_gain = 1.0 / std::sqrt(static_cast<double>(total_blocks));

  model.stem_ = add_conv("stem.weight", spec.channels_per_module[0], spec.input_channels, kKernel);
  std::size_t in_c = spec.channels_per_module[0];
  for (std::size_t m = 0; m < spec.num_modules(); ++m) {
    const std::size_t out_c = spec.channels_per_module[m];
    std::vector<Block> blocks;
    for (std::size_t b = 0; b < spec.blocks_per_module[m]; ++b) {
      const std::string prefix = TapId{m, b}.label() + ".";
      Block block;
      block.stride = b == 0 ? spec.strides_per_module[m] : 1;
      block.conv1 = add_conv(prefix + "conv1.weight", out_c, in_c, kKernel);
      block.conv2 = add_conv(prefix + "conv2.weight", out_c, out_c, kKernel, branch_gain);
      if (block.stride != 1 || in_c != out_c) {
        block.projection = add_conv(prefix + "proj.weight", out_c, in_c, 1);
      }
      blocks.push_back(block);
      in_c = out_c;
    }
    model.modules_.push_back(std::move(blocks));
  }

  std::normal_distribution<double> head(0.0, std::sqrt(1.0 / static_cast<double>(in_c)));
  Tensor fc(Shape{spec.num_classes, in_c});
  for (double& v : fc.mutable_data()) v = head(rng);
  fc.set_requires_grad(true);
  model.params_.push_back({"fc.weight", std::move(fc)});
  model.fc_weight_ = model.params_.size() - 1;
  Tensor bias(Shape{spec.num_classes}, 0.0);
  bias.set_requires_grad(true);
  model.params_.push_back({"fc.bias", std::move(bias)});
  model.fc_bias_ = model.params_.size() - 1;
  return model;
}

Tensor& Model::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("no parameter named " + name);
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.tensor.size();
  return total;
}

std::vector<TapId> Model::taps() const {
  std::vector<TapId> out;
  for (std::size_t m = 0; m < modules_.size(); ++m) {
    for (std::size_t b = 0; b < modules_[m].size(); ++b) out.push_back({m, b});
  }
  return out;
}

void Model::check_tap(TapId tap) const {
  if (tap.module >= modules_.size() || tap.block >= modules_[tap.module].size()) {
    throw ConfigError("unknown tap " + tap.label());
  }
}

std::size_t Model::tap_channels(TapId tap) const {
  check_tap(tap);
  return spec_.channels_per_module[tap.module];
}

template <typename Bind>
ForwardPass Model::run(Tape& tape, const Tensor& batch, const AblationMask& masks, Bind bind) const {
  if (batch.rank() != 4 || batch.dim(1) != spec_.input_channels || batch.dim(2) != spec_.input_height ||
      batch.dim(3) != spec_.input_width) {
    throw DimensionError("batch shape " + to_string(batch.shape()) + " does not match model input [N," +
                         std::to_string(spec_.input_channels) + "," + std::to_string(spec_.input_height) + "," +
                         std::to_string(spec_.input_width) + "]");
  }
  for (const auto& [tap, bits] : masks.channels) {
    check_tap(tap);
    if (bits.size() != tap_channels(tap)) {
      throw ConfigError("mask for tap " + tap.label() + " has " + std::to_string(bits.size()) + " channels, expected " +
                        std::to_string(tap_channels(tap)));
    }
  }

  ForwardPass pass;
  Var h = relu(conv2d(tape.constant(batch), bind(stem_), 1, 1));
  for (std::size_t m = 0; m < modules_.size(); ++m) {
    for (std::size_t b = 0; b < modules_[m].size(); ++b) {
      const Block& block = modules_[m][b];
      const TapId id{m, b};
      Var a = relu(conv2d(h, bind(block.conv1), block.stride, 1));
      if (auto it = masks.channels.find(id); it != masks.channels.end()) {
        if (std::find(it->second.begin(), it->second.end(), true) != it->second.end()) {
          a = mask_channels(a, it->second);
        }
      }
      pass.taps.emplace_back(id, a);
      Var path = conv2d(a, bind(block.conv2), 1, 1);
      Var skip = block.projection ? conv2d(h, bind(*block.projection), block.stride, 0) : h;
      h = relu(add(path, skip));
    }
    pass.module_outputs.push_back(h);
  }
  Var pooled = global_avg_pool(h);
  pass.logits = add_channel_bias(matmul(pooled, transpose(bind(fc_weight_))), bind(fc_bias_));
  return pass;
}

ForwardPass Model::forward(Tape& tape, const Tensor& batch, const AblationMask& masks) {
  return run(tape, batch, masks, [&](std::size_t i) { return tape.parameter(params_[i].tensor); });
}

ForwardPass Model::forward(Tape& tape, const Tensor& batch, const AblationMask& masks) const {
  return run(tape, batch, masks, [&](std::size_t i) {
    const Tensor& p = params_[i].tensor;
    return tape.constant(Tensor(p.shape(), p.values()));
  });
}

Tensor Model::logits(const Tensor& batch, const AblationMask& masks) const {
  Tape tape(Tape::Mode::kInference);
  return forward(tape, batch, masks).logits.value();
}

void Model::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Model::zero_conv_paths(std::size_t module) {
  if (module >= modules_.size()) throw ConfigError("module " + std::to_string(module) + " out of range");
  for (const Block& block : modules_[module]) {
    for (std::size_t idx : {block.conv1, block.conv2}) {
      for (double& v : params_[idx].tensor.mutable_data()) v = 0.0;
    }
  }
}

std::vector<TapCapture> capture(const Model& model, const ForwardPass& pass, std::span<const TapId> taps,
                                std::span<const int> labels) {
  std::vector<TapCapture> out;
  out.reserve(taps.size());
  for (TapId id : taps) {
    model.check_tap(id);
    Var v = pass.tap(id);
    if (v.value().dim(0) != labels.size()) {
      throw DimensionError("capture: " + std::to_string(labels.size()) + " labels for batch of " +
                           std::to_string(v.value().dim(0)));
    }
    const Tensor& act = v.value();
    out.push_back({id, Tensor(act.shape(), act.values()), std::vector<int>(labels.begin(), labels.end())});
  }
  return out;
}

void Manifest::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw ContractError("manifest entries cannot contain '=' in keys or newlines");
  }
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

std::optional<std::string> Manifest::find(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const std::string& Manifest::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw CheckpointError("manifest is missing key '" + key + "'");
}

void write_architecture(Manifest& manifest, const ArchitectureSpec& spec) {
  manifest.set("arch.num_modules", std::to_string(spec.num_modules()));
  manifest.set("arch.blocks_per_module", join(spec.blocks_per_module));
  manifest.set("arch.channels_per_module", join(spec.channels_per_module));
  manifest.set("arch.strides_per_module", join(spec.strides_per_module));
  manifest.set("arch.input_shape", join({spec.input_channels, spec.input_height, spec.input_width}));
  manifest.set("arch.num_classes", std::to_string(spec.num_classes));
}

ArchitectureSpec read_architecture(const Manifest& manifest) {
  ArchitectureSpec spec;
  spec.blocks_per_module = split_sizes(manifest.get("arch.blocks_per_module"), "arch.blocks_per_module");
  spec.channels_per_module = split_sizes(manifest.get("arch.channels_per_module"), "arch.channels_per_module");
  spec.strides_per_module = split_sizes(manifest.get("arch.strides_per_module"), "arch.strides_per_module");
  const auto input = split_sizes(manifest.get("arch.input_shape"), "arch.input_shape");
  const auto classes = split_sizes(manifest.get("arch.num_classes"), "arch.num_classes");
  const auto modules = split_sizes(manifest.get("arch.num_modules"), "arch.num_modules");
  if (input.size() != 3 || classes.size() != 1 || modules.size() != 1 || modules[0] != spec.blocks_per_module.size()) {
    throw CheckpointError("inconsistent architecture in manifest");
  }
  spec.input_channels = input[0];
  spec.input_height = input[1];
  spec.input_width = input[2];
  spec.num_classes = classes[0];
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid architecture in manifest: ") + e.what());
  }
  return spec;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Manifest& manifest,
                     std::span<const NamedTensor> extras) {
  Manifest full;
  write_architecture(full, model.spec());
  for (const auto& [k, v] : manifest.entries()) full.set(k, v);
  const auto& params = model.parameters();
  full.set("tensor.count", std::to_string(params.size() + extras.size()));
  for (std::size_t i = 0; i < params.size(); ++i) full.set("tensor." + std::to_string(i), params[i].name);
  for (std::size_t i = 0; i < extras.size(); ++i) {
    full.set("tensor." + std::to_string(params.size() + i), extras[i].name);
  }

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : full.entries()) out << k << '=' << v << '\n';
    out << "end\n";
    for (const auto& p : params) write_tensor(out, p.tensor);
    for (const auto& e : extras) write_tensor(out, e.tensor);
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path.string() + ": empty checkpoint");
  {
    std::istringstream header(line);
    std::string magic;
    int version = 0;
    header >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError(path.string() + ": not a checkpoint file");
    if (version != kCheckpointVersion) {
      throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
  }
  Manifest manifest;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      terminated = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path.string() + ": malformed manifest line '" + line + "'");
    manifest.set(line.substr(0, eq), line.substr(eq + 1));
  }
  if (!terminated) throw CheckpointError(path.string() + ": truncated manifest");

  Checkpoint ckpt{Model::build(read_architecture(manifest), 0), manifest, {}};
  std::size_t count = 0;
  try {
    count = std::stoul(manifest.get("tensor.count"));
  } catch (const std::logic_error&) {
    throw CheckpointError(path.string() + ": bad tensor.count");
  }
  auto& params = ckpt.model.parameters();
  if (count < params.size()) throw CheckpointError(path.string() + ": fewer tensors than model parameters");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& name = manifest.get("tensor." + std::to_string(i));
    Tensor t;
    try {
      t = read_tensor(in);
    } catch (const FormatError& e) {
      throw CheckpointError(path.string() + ": tensor '" + name + "': " + e.what());
    }
    if (i < params.size()) {
      if (params[i].name != name) {
        throw CheckpointError(path.string() + ": expected parameter '" + params[i].name + "', found '" + name + "'");
      }
      if (params[i].tensor.shape() != t.shape()) {
        throw CheckpointError(path.string() + ": parameter '" + name + "' has shape " + to_string(t.shape()) +
                              ", model expects " + to_string(params[i].tensor.shape()));
      }
      std::copy(t.data().begin(), t.data().end(), params[i].tensor.mutable_data().begin());
    } else {
      ckpt.extras.push_back({name, std::move(t)});
    }
  }
  return ckpt;
}

void save(const Model& model, const std::filesystem::path& path) {
  save_checkpoint(path, model);
}

void load(Model& model, const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.model.spec() == model.spec())) {
    throw CheckpointError(path.string() + ": architecture does not match the target model");
  }
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    auto src = ckpt.model.parameters()[i].tensor.data();
    std::copy(src.begin(), src.end(), model.parameters()[i].tensor.mutable_data().begin());
  }
}

}  // namespace selectroscope
