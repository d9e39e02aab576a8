// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "selectroscope/error.hpp"

namespace selectroscope {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

void Tape::check_owner(Var v) const {
  if (v.tape_ != this) throw ContractError("Var belongs to a different tape");
  if (v.id_ >= nodes_.size()) throw ContractError("Var id out of range");
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor& tensor) {
  Node node{Tensor(tensor.shape(), tensor.values()), {}, &tensor, {}, recording() && tensor.requires_grad()};
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (Var in : inputs) {
    check_owner(in);
    needs = needs || nodes_[in.id_].needs_grad;
  }
  needs = needs && recording();
  nodes_.push_back(Node{std::move(value), needs ? std::move(backward) : BackwardFn{}, nullptr, {}, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (!recording()) throw ContractError("backward() on a tape in inference mode");
  check_owner(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(value(loss).shape()));
  }
  for (Node& node : nodes_) {
    if (node.needs_grad) {
      node.adjoint.assign(node.value.size(), 0.0);
    } else {
      node.adjoint.clear();
    }
  }
  if (!nodes_[loss.id_].needs_grad) return;
  nodes_[loss.id_].adjoint[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.needs_grad) continue;
    if (node.backward) node.backward(*this, node.adjoint);
    if (node.bound != nullptr) node.bound->accumulate_grad(node.adjoint);
  }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename Fn>
Var elementwise_binary(Var a, Var b, const char* op, Fn fn, Tape::BackwardFn backward) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape(x, y, op);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i], y[i]);
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a, b}, std::move(backward));
}

void accumulate(Tape& tape, Var v, std::span<const double> g, double scale = 1.0) {
  if (!tape.needs_grad(v)) return;
  auto dst = tape.adjoint_buffer(v);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

}  // namespace

Var add(Var a, Var b) {
  return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; },
                            [a, b](Tape& t, std::span<const double> g) {
                              accumulate(t, a, g);
                              accumulate(t, b, g);
                            });
}

Var sub(Var a, Var b) {
  return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; },
                            [a, b](Tape& t, std::span<const double> g) {
                              accumulate(t, a, g);
                              accumulate(t, b, g, -1.0);
                            });
}

Var mul(Var a, Var b) {
  return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; },
                            [a, b](Tape& t, std::span<const double> g) {
                              const Tensor& x = t.value(a);
                              const Tensor& y = t.value(b);
                              if (t.needs_grad(a)) {
                                auto ga = t.adjoint_buffer(a);
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                              }
                              if (t.needs_grad(b)) {
                                auto gb = t.adjoint_buffer(b);
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                              }
                            });
}

Var div(Var a, Var b) {
  return elementwise_binary(a, b, "div", [](double x, double y) { return x / y; },
                            [a, b](Tape& t, std::span<const double> g) {
                              const Tensor& x = t.value(a);
                              const Tensor& y = t.value(b);
                              if (t.needs_grad(a)) {
                                auto ga = t.adjoint_buffer(a);
                                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / y[i];
                              }
                              if (t.needs_grad(b)) {
                                auto gb = t.adjoint_buffer(b);
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
                              }
                            });
}

Var scalar_mul(Var a, double factor) {
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a},
                         [a, factor](Tape& t, std::span<const double> g) { accumulate(t, a, g, factor); });
}

Var add_scalar(Var a, double offset) {
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a},
                         [a](Tape& t, std::span<const double> g) { accumulate(t, a, g); });
}

// Subgradient at exactly 0 is 0.
Var relu(Var a) {
  const Tensor& x = a.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return a.tape().record(Tensor(x.shape(), std::move(out)), {a}, [a](Tape& t, std::span<const double> g) {
    const Tensor& x = t.value(a);
    auto ga = t.adjoint_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  const Tensor& v = x.value();
  const Tensor& b = bias.value();
  if (v.rank() < 2 || b.rank() != 1 || b.dim(0) != v.dim(1)) {
    throw DimensionError("add_channel_bias: cannot add bias " + to_string(b.shape()) + " to " + to_string(v.shape()));
  }
  const std::size_t batch = v.dim(0);
  const std::size_t channels = v.dim(1);
  const std::size_t inner = v.size() / (batch * channels);
  std::vector<double> out(v.values());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* row = out.data() + (n * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += b[c];
    }
  }
  return x.tape().record(Tensor(v.shape(), std::move(out)), {x, bias},
                         [x, bias, batch, channels, inner](Tape& t, std::span<const double> g) {
                           accumulate(t, x, g);
                           if (!t.needs_grad(bias)) return;
                           auto gb = t.adjoint_buffer(bias);
                           for (std::size_t n = 0; n < batch; ++n) {
                             for (std::size_t c = 0; c < channels; ++c) {
                               const double* row = g.data() + (n * channels + c) * inner;
                               double s = 0.0;
                               for (std::size_t i = 0; i < inner; ++i) s += row[i];
                               gb[c] += s;
                             }
                           }
                         });
}

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(x.shape()) + " and " + to_string(y.shape()));
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(y.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  RowMatrixMap(out.data(), m, n).noalias() =
      ConstRowMatrixMap(x.data().data(), m, k) * ConstRowMatrixMap(y.data().data(), k, n);
  return a.tape().record(
      Tensor(Shape{x.dim(0), y.dim(1)}, std::move(out)), {a, b}, [a, b, m, k, n](Tape& t, std::span<const double> g) {
        ConstRowMatrixMap grad(g.data(), m, n);
        if (t.needs_grad(a)) {
          RowMatrixMap(t.adjoint_buffer(a).data(), m, k).noalias() +=
              grad * ConstRowMatrixMap(t.value(b).data().data(), k, n).transpose();
        }
        if (t.needs_grad(b)) {
          RowMatrixMap(t.adjoint_buffer(b).data(), k, n).noalias() +=
              ConstRowMatrixMap(t.value(a).data().data(), m, k).transpose() * grad;
        }
      });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + to_string(x.shape()));
  const auto rows = static_cast<Eigen::Index>(x.dim(0));
  const auto cols = static_cast<Eigen::Index>(x.dim(1));
  std::vector<double> out(x.size());
  RowMatrixMap(out.data(), cols, rows) = ConstRowMatrixMap(x.data().data(), rows, cols).transpose();
  return a.tape().record(Tensor(Shape{x.dim(1), x.dim(0)}, std::move(out)), {a},
                         [a, rows, cols](Tape& t, std::span<const double> g) {
                           RowMatrixMap(t.adjoint_buffer(a).data(), rows, cols) +=
                               ConstRowMatrixMap(g.data(), cols, rows).transpose();
                         });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::span<const double> g) {
    for (double& d : t.adjoint_buffer(a)) d += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s / n), {a}, [a, n](Tape& t, std::span<const double> g) {
    for (double& d : t.adjoint_buffer(a)) d += g[0] / n;
  });
}

namespace {

struct Reduction {
  Shape out_shape;
  std::vector<std::size_t> target;  // input flat index -> output flat index
  std::size_t reduced_count = 1;
};

Reduction plan_reduction(const Shape& shape, std::vector<std::size_t> axes, const char* op) {
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
    throw DimensionError(std::string(op) + ": repeated axis");
  }
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t axis : axes) {
    if (axis >= shape.size()) {
      throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(shape));
    }
    reduced[axis] = true;
  }
  Reduction r;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) {
      r.reduced_count *= shape[i];
    } else {
      r.out_shape.push_back(shape[i]);
    }
  }
  // Output strides expressed per input axis (0 for reduced axes).
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = stride;
      stride *= shape[i];
    }
  }
  const std::size_t total = element_count(shape);
  r.target.resize(total);
  std::vector<std::size_t> index(shape.size(), 0);
  std::size_t out = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    r.target[flat] = out;
    for (std::size_t axis = shape.size(); axis-- > 0;) {
      ++index[axis];
      out += out_stride[axis];
      if (index[axis] < shape[axis]) break;
      out -= out_stride[axis] * index[axis];
      index[axis] = 0;
    }
  }
  return r;
}

}  // namespace

Var sum_over(Var a, std::vector<std::size_t> axes) {
  const Tensor& x = a.value();
  Reduction r = plan_reduction(x.shape(), std::move(axes), "sum_over");
  std::vector<double> out(element_count(r.out_shape), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[r.target[i]] += x[i];
  return a.tape().record(Tensor(r.out_shape, std::move(out)), {a},
                         [a, target = std::move(r.target)](Tape& t, std::span<const double> g) {
                           auto ga = t.adjoint_buffer(a);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[target[i]];
                         });
}

Var mean_over(Var a, std::vector<std::size_t> axes) {
  const Tensor& x = a.value();
  Reduction r = plan_reduction(x.shape(), std::move(axes), "mean_over");
  const double count = static_cast<double>(r.reduced_count);
  std::vector<double> out(element_count(r.out_shape), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[r.target[i]] += x[i];
  for (double& v : out) v /= count;
  return a.tape().record(Tensor(r.out_shape, std::move(out)), {a},
                         [a, count, target = std::move(r.target)](Tape& t, std::span<const double> g) {
                           auto ga = t.adjoint_buffer(a);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[target[i]] / count;
                         });
}

Var max_over(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  if (axis >= x.rank()) throw DimensionError("max_over: axis out of range for " + to_string(x.shape()));
  const Shape& shape = x.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> chosen(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t best = o * extent * inner + in;
      for (std::size_t j = 1; j < extent; ++j) {
        const std::size_t idx = (o * extent + j) * inner + in;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * inner + in] = x[best];
      chosen[o * inner + in] = best;
    }
  }
  return a.tape().record(Tensor(out_shape, std::move(out)), {a},
                         [a, chosen = std::move(chosen)](Tape& t, std::span<const double> g) {
                           auto ga = t.adjoint_buffer(a);
                           for (std::size_t j = 0; j < chosen.size(); ++j) ga[chosen[j]] += g[j];
                         });
}

Var flatten(Var a) {
  const Tensor& x = a.value();
  if (x.rank() < 1) throw DimensionError("flatten: scalar input");
  const std::size_t batch = x.dim(0);
  return a.tape().record(x.reshaped(Shape{batch, x.size() / batch}), {a},
                         [a](Tape& t, std::span<const double> g) { accumulate(t, a, g); });
}

Var global_avg_pool(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 4) throw DimensionError("global_avg_pool: expected NCHW, got " + to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t area = x.dim(2) * x.dim(3);
  std::vector<double> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += x[p * area + i];
    out[p] = s / static_cast<double>(area);
  }
  return a.tape().record(Tensor(Shape{x.dim(0), x.dim(1)}, std::move(out)), {a},
                         [a, planes, area](Tape& t, std::span<const double> g) {
                           auto ga = t.adjoint_buffer(a);
                           const double scale = 1.0 / static_cast<double>(area);
                           for (std::size_t p = 0; p < planes; ++p) {
                             for (std::size_t i = 0; i < area; ++i) ga[p * area + i] += g[p] * scale;
                           }
                         });
}

namespace {

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  Eigen::Index patch() const { return static_cast<Eigen::Index>(in_channels * kernel_h * kernel_w); }
  Eigen::Index positions() const { return static_cast<Eigen::Index>(out_h * out_w); }
};

void im2col(const double* image, const ConvGeometry& g, RowMatrix& cols) {
  cols.resize(g.patch(), g.positions());
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = cols.data() + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.out_h * g.out_w;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            row[oh * g.out_w + ow] = inside ? image[(c * g.height + ih) * g.width + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, const ConvGeometry& g, double* image) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = cols.data() + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.out_h * g.out_w;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            image[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  if (x.rank() != 4 || k.rank() != 4) {
    throw DimensionError("conv2d: expected NCHW input and OIHW kernel, got " + to_string(x.shape()) + " and " +
                         to_string(k.shape()));
  }
  if (x.dim(1) != k.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, kernel expects " +
                         std::to_string(k.dim(1)));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (k.dim(2) > x.dim(2) + 2 * padding || k.dim(3) > x.dim(3) + 2 * padding) {
    throw DimensionError("conv2d: kernel " + to_string(k.shape()) + " larger than padded input " + to_string(x.shape()));
  }
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), stride, padding, 0, 0};
  geo.out_h = (geo.height + 2 * padding - geo.kernel_h) / stride + 1;
  geo.out_w = (geo.width + 2 * padding - geo.kernel_w) / stride + 1;

  const auto out_c = static_cast<Eigen::Index>(geo.out_channels);
  const std::size_t in_plane = geo.in_channels * geo.height * geo.width;
  const std::size_t out_plane = geo.out_channels * geo.out_h * geo.out_w;
  std::vector<double> out(geo.batch * out_plane);
  ConstRowMatrixMap weights(k.data().data(), out_c, geo.patch());
  RowMatrix cols;
  for (std::size_t n = 0; n < geo.batch; ++n) {
    im2col(x.data().data() + n * in_plane, geo, cols);
    RowMatrixMap(out.data() + n * out_plane, out_c, geo.positions()).noalias() = weights * cols;
  }
  return input.tape().record(
      Tensor(Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w}, std::move(out)), {input, kernel},
      [input, kernel, geo, in_plane, out_plane](Tape& t, std::span<const double> g) {
        const auto out_c = static_cast<Eigen::Index>(geo.out_channels);
        ConstRowMatrixMap weights(t.value(kernel).data().data(), out_c, geo.patch());
        const bool want_input = t.needs_grad(input);
        const bool want_kernel = t.needs_grad(kernel);
        RowMatrix kernel_grad;
        if (want_kernel) kernel_grad = RowMatrix::Zero(out_c, geo.patch());
        RowMatrix cols;
        RowMatrix col_grad;
        for (std::size_t n = 0; n < geo.batch; ++n) {
          ConstRowMatrixMap grad(g.data() + n * out_plane, out_c, geo.positions());
          if (want_kernel) {
            im2col(t.value(input).data().data() + n * in_plane, geo, cols);
            kernel_grad.noalias() += grad * cols.transpose();
          }
          if (want_input) {
            col_grad.noalias() = weights.transpose() * grad;
            col2im_add(col_grad, geo, t.adjoint_buffer(input).data() + n * in_plane);
          }
        }
        if (want_kernel) {
          RowMatrixMap(t.adjoint_buffer(kernel).data(), out_c, geo.patch()) += kernel_grad;
        }
      });
}

Var mask_channels(Var x, const std::vector<bool>& ablated) {
  const Tensor& v = x.value();
  if (v.rank() < 2 || ablated.size() != v.dim(1)) {
    throw DimensionError("mask_channels: mask of " + std::to_string(ablated.size()) + " channels for tensor " +
                         to_string(v.shape()));
  }
  const std::size_t batch = v.dim(0);
  const std::size_t channels = v.dim(1);
  const std::size_t inner = v.size() / (batch * channels);
  std::vector<double> out(v.values());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      if (!ablated[c]) continue;
      std::fill_n(out.data() + (n * channels + c) * inner, inner, 0.0);
    }
  }
  return x.tape().record(Tensor(v.shape(), std::move(out)), {x},
                         [x, ablated, batch, channels, inner](Tape& t, std::span<const double> g) {
                           auto gx = t.adjoint_buffer(x);
                           for (std::size_t n = 0; n < batch; ++n) {
                             for (std::size_t c = 0; c < channels; ++c) {
                               if (ablated[c]) continue;
                               const std::size_t base = (n * channels + c) * inner;
                               for (std::size_t i = 0; i < inner; ++i) gx[base + i] += g[base + i];
                             }
                           }
                         });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be [N,C], got " + to_string(z.shape()));
  const std::size_t batch = z.dim(0);
  const std::size_t classes = z.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  std::vector<double> probs(z.size());
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = z.data().data() + n * classes;
    const double shift = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[n * classes + c] = std::exp(row[c] - shift);
      denom += probs[n * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[n * classes + c] /= denom;
    total += shift + std::log(denom) - row[label];
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(total / static_cast<double>(batch)), {logits},
      [logits, batch, classes, probs = std::move(probs), targets = std::move(targets)](Tape& t,
                                                                                       std::span<const double> g) {
        auto gz = t.adjoint_buffer(logits);
        const double scale = g[0] / static_cast<double>(batch);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < classes; ++c) {
            const double indicator = static_cast<int>(c) == targets[n] ? 1.0 : 0.0;
            gz[n * classes + c] += scale * (probs[n * classes + c] - indicator);
          }
        }
      });
}

double grad_check(const ScalarFunction& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  Tensor probe(point.shape(), point.values());
  probe.set_requires_grad(true);
  {
    Tape tape;
    Var x = tape.parameter(probe);
    Var y = f(tape, x);
    tape.backward(y);
  }
  std::vector<double> analytic(probe.size(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  auto evaluate = [&](const Tensor& at) {
    Tape tape(Tape::Mode::kInference);
    Var y = f(tape, tape.constant(at));
    const double value = y.value().item();
    if (!std::isfinite(value)) throw NumericError("grad_check: non-finite function value");
    return value;
  };

  double worst = 0.0;
  Tensor shifted(point.shape(), point.values());
  for (std::size_t i = 0; i < point.size(); ++i) {
    shifted[i] = point[i] + step;
    const double up = evaluate(shifted);
    shifted[i] = point[i] - step;
    const double down = evaluate(shifted);
    shifted[i] = point[i];
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      throw NumericError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
    }
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace selectroscope
