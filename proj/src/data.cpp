// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "selectroscope/error.hpp"

namespace selectroscope {

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t plane = images.size() / std::max<std::size_t>(size(), 1);
  std::vector<double> out;
  out.reserve(indices.size() * plane);
  for (std::size_t idx : indices) {
    if (idx >= size()) throw IndexError("sample index " + std::to_string(idx) + " out of range");
    auto src = images.data().subspan(idx * plane, plane);
    out.insert(out.end(), src.begin(), src.end());
  }
  Shape shape = images.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(labels.at(idx));
  return out;
}

Tensor Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size() || count == 0) throw IndexError("slice out of range");
  const std::size_t plane = images.size() / size();
  auto src = images.data().subspan(begin * plane, count * plane);
  Shape shape = images.shape();
  shape[0] = count;
  return Tensor(std::move(shape), std::vector<double>(src.begin(), src.end()));
}

Tensor synthetic_templates(const SyntheticSpec& spec) {
  if (spec.template_cell == 0) throw ConfigError("template_cell must be positive");
  std::seed_seq seq{spec.template_seed, std::uint64_t{0}};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> level(0.0, 1.0);
  const std::size_t cells_h = (spec.height + spec.template_cell - 1) / spec.template_cell;
  const std::size_t cells_w = (spec.width + spec.template_cell - 1) / spec.template_cell;
  Tensor templates(Shape{spec.num_classes, spec.channels, spec.height, spec.width});
  auto data = templates.mutable_data();
  std::vector<double> cells(cells_h * cells_w);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      for (double& v : cells) v = level(rng);
      for (std::size_t h = 0; h < spec.height; ++h) {
        for (std::size_t w = 0; w < spec.width; ++w) {
          data[((k * spec.channels + c) * spec.height + h) * spec.width + w] =
              cells[(h / spec.template_cell) * cells_w + w / spec.template_cell];
        }
      }
    }
  }
  return templates;
}

namespace {

Dataset sample_split(const SyntheticSpec& spec, const Tensor& templates, std::size_t per_class, std::uint64_t stream,
                     std::string split) {
  std::seed_seq seq{spec.template_seed, stream};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t plane = spec.channels * spec.height * spec.width;
  const std::size_t total = per_class * spec.num_classes;
  std::vector<double> pixels(total * plane);
  std::vector<int> labels(total);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t k = i % spec.num_classes;
    labels[i] = static_cast<int>(k);
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = templates[k * plane + p] + spec.noise_sigma * noise(rng);
      pixels[i * plane + p] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Dataset{Tensor(Shape{total, spec.channels, spec.height, spec.width}, std::move(pixels)), std::move(labels),
                 spec.num_classes, std::move(split)};
}

}  // namespace

std::pair<Dataset, Dataset> generate(const SyntheticSpec& spec) {
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.train_per_class == 0 || spec.eval_per_class == 0) throw ConfigError("samples_per_class must be >= 1");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) throw ConfigError("image extents must be positive");
  const Tensor templates = synthetic_templates(spec);
  return {sample_split(spec, templates, spec.train_per_class, 1, "train"),
          sample_split(spec, templates, spec.eval_per_class, 2, "eval")};
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open IDX file " + path.string(), 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
};

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& file) {
  if (offset + 4 > bytes.size()) throw FormatError(file + ": truncated IDX header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

IdxHeader parse_header(const std::vector<unsigned char>& bytes, const std::string& file) {
  const std::uint32_t magic = read_be32(bytes, 0, file);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    throw FormatError(file + ": bad IDX magic (expected unsigned byte payload)", 0);
  }
  const std::uint32_t rank = magic & 0xff;
  if (rank == 0 || rank > 4) throw FormatError(file + ": unsupported IDX rank " + std::to_string(rank), 3);
  IdxHeader h;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::size_t at = 4 + 4 * i;
    h.dims.push_back(read_be32(bytes, at, file));
    if (h.dims.back() == 0) throw FormatError(file + ": zero IDX dimension", at);
  }
  h.payload_offset = 4 + 4 * rank;
  std::size_t expected = 1;
  for (auto d : h.dims) expected *= d;
  if (bytes.size() < h.payload_offset + expected) {
    throw FormatError(file + ": truncated IDX payload, expected " + std::to_string(expected) + " bytes", bytes.size());
  }
  if (bytes.size() > h.payload_offset + expected) {
    throw FormatError(file + ": trailing bytes after IDX payload", h.payload_offset + expected);
  }
  return h;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto image_bytes = read_file(images);
  const auto label_bytes = read_file(labels);
  const IdxHeader ih = parse_header(image_bytes, images.string());
  const IdxHeader lh = parse_header(label_bytes, labels.string());
  if (ih.dims.size() != 3 && ih.dims.size() != 4) {
    throw FormatError(images.string() + ": image file must have rank 3 or 4", 3);
  }
  if (lh.dims.size() != 1) throw FormatError(labels.string() + ": label file must have rank 1", 3);
  if (ih.dims[0] != lh.dims[0]) {
    throw FormatError("image count " + std::to_string(ih.dims[0]) + " does not match label count " +
                          std::to_string(lh.dims[0]),
                      4);
  }
  Shape shape = ih.dims.size() == 3 ? Shape{ih.dims[0], 1, ih.dims[1], ih.dims[2]}
                                    : Shape{ih.dims[0], ih.dims[1], ih.dims[2], ih.dims[3]};
  const std::size_t count = element_count(shape);
  std::vector<double> pixels(count);
  for (std::size_t i = 0; i < count; ++i) pixels[i] = image_bytes[ih.payload_offset + i] / 255.0;
  Dataset out;
  out.images = Tensor(std::move(shape), std::move(pixels));
  out.labels.resize(lh.dims[0]);
  int top = 0;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    out.labels[i] = label_bytes[lh.payload_offset + i];
    top = std::max(top, out.labels[i]);
  }
  out.num_classes = static_cast<std::size_t>(top) + 1;
  out.split = images.stem().string();
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  const Shape& shape = data.images.shape();
  if (shape.size() != 4) throw DimensionError("write_idx: images must be NCHW");
  {
    std::ofstream out(images, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + images.string());
    const bool mono = shape[1] == 1;
    put_be32(out, 0x00000800u | (mono ? 3u : 4u));
    put_be32(out, static_cast<std::uint32_t>(shape[0]));
    if (!mono) put_be32(out, static_cast<std::uint32_t>(shape[1]));
    put_be32(out, static_cast<std::uint32_t>(shape[2]));
    put_be32(out, static_cast<std::uint32_t>(shape[3]));
    std::vector<char> payload(data.images.size());
    for (std::size_t i = 0; i < payload.size(); ++i) {
      const double v = std::clamp(data.images[i], 0.0, 1.0);
      payload[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  std::ofstream out(labels, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + labels.string());
  put_be32(out, 0x00000801u);
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  for (int label : data.labels) {
    if (label < 0 || label > 255) throw IndexError("write_idx: label does not fit in a byte");
    out.put(static_cast<char>(label));
  }
}

}  // namespace selectroscope
