// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/tensor.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "selectroscope/error.hpp"

namespace selectroscope {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::size_t element_count(const Shape& shape) {
  std::size_t count = 1;
  for (std::size_t extent : shape) count *= extent;
  return count;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  if (!std::isfinite(fill)) throw NumericError("non-finite fill value");
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("shape " + to_string(shape_) + " needs " +
                         std::to_string(element_count(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
  check_finite("tensor construction");
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

void Tensor::set_requires_grad(bool flag) {
  requires_grad_ = flag;
  if (!flag) grad_.clear();
}

void Tensor::accumulate_grad(std::span<const double> delta) {
  if (delta.size() != data_.size()) {
    throw DimensionError("gradient size " + std::to_string(delta.size()) + " does not match tensor size " +
                         std::to_string(data_.size()));
  }
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  for (std::size_t i = 0; i < delta.size(); ++i) grad_[i] += delta[i];
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

void Tensor::check_finite(const char* context) const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + context);
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

namespace {

constexpr std::array<char, 4> kMagic{'S', 'E', 'L', 'T'};
// Guards against absurd allocations from corrupted headers.
constexpr std::uint32_t kMaxRank = 16;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {
    auto pos = in_.tellg();
    base_ = pos < 0 ? 0 : static_cast<std::uint64_t>(pos);
  }

  void bytes(void* dst, std::size_t count, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in_.gcount()) != count) {
      throw FormatError(std::string("truncated tensor record while reading ") + what, base_ + consumed_ + in_.gcount());
    }
    consumed_ += count;
  }

  template <typename T>
  T get(const char* what) {
    T value{};
    bytes(&value, sizeof(T), what);
    return value;
  }

  std::uint64_t offset() const { return base_ + consumed_; }

 private:
  std::istream& in_;
  std::uint64_t base_ = 0;
  std::uint64_t consumed_ = 0;
};

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kTensorFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (std::size_t extent : tensor.shape()) put<std::uint64_t>(out, extent);
  out.write(reinterpret_cast<const char*>(tensor.data().data()),
            static_cast<std::streamsize>(tensor.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
  Reader reader(in);
  std::array<char, 4> magic{};
  reader.bytes(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("bad tensor magic", reader.offset() - 4);
  const auto version = reader.get<std::uint32_t>("version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version), reader.offset() - 4);
  }
  const auto rank = reader.get<std::uint32_t>("rank");
  if (rank > kMaxRank) throw FormatError("implausible tensor rank " + std::to_string(rank), reader.offset() - 4);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& extent : shape) {
    const auto value = reader.get<std::uint64_t>("extent");
    if (value == 0 || value > kMaxElements) throw FormatError("invalid tensor extent", reader.offset() - 8);
    count *= value;
    if (count > kMaxElements) throw FormatError("tensor too large", reader.offset() - 8);
    extent = static_cast<std::size_t>(value);
  }
  std::vector<double> data(count);
  reader.bytes(data.data(), count * sizeof(double), "payload");
  for (double v : data) {
    if (!std::isfinite(v)) throw FormatError("non-finite value in tensor payload", reader.offset());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace selectroscope
