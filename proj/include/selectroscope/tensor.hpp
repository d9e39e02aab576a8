// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace selectroscope {

using Shape = std::vector<std::size_t>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixMap = Eigen::Map<RowMatrix>;
using ConstRowMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Rank-0 tensors (empty shape) are scalars holding one element. Values must
/// stay finite; constructors reject NaN/Inf with NumericError.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  // Mutable access for in-place parameter updates and construction helpers.
  std::span<double> mutable_data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Element of a rank-4 NCHW tensor.
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
  double item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag);

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<const double> grad() const noexcept { return grad_; }
  void accumulate_grad(std::span<const double> delta);
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  /// Throws NumericError naming `context` if any element is NaN/Inf.
  void check_finite(const char* context) const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

/// Binary record: "SELT", u32 version, u32 rank, u64 extents, f64 payload.
/// All integers and floats are little-endian.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& tensor);
/// Reads one record; malformed or truncated input raises FormatError.
Tensor read_tensor(std::istream& in);

}  // namespace selectroscope
