#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "bevfuse/common.hpp"

namespace bevfuse {

// Dense row-major tensor, 64-bit float. The universal value carrier of the
// library. Shapes are checked at every op boundary; finiteness of forward
// outputs is asserted in debug builds.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  Tensor zeros_like() const { return Tensor(shape_); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(int i) { return data_[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  double& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double& at(int i, int j, int k, int l) {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  double at(int i, int j, int k, int l) const {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(double v);
  bool all_finite() const;

  // elementwise in-place helpers
  Tensor& add_(const Tensor& o);
  Tensor& scale_(double s);

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

void check_same_shape(const Tensor& a, const Tensor& b, const char* where);
void debug_check_finite(const Tensor& t, const char* where);

// ---- differentiable primitives ------------------------------------------
// Backward functions accumulate (+=) into pre-sized gradient tensors, so a
// caller can route several paths into one buffer.

Tensor matmul(const Tensor& a, const Tensor& b);
void matmul_backward(const Tensor& gout, const Tensor& a, const Tensor& b, Tensor& ga, Tensor& gb);

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]; cross-correlation convention.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);
void conv2d_backward(const Tensor& gout, const Tensor& x, const Tensor& w, int stride, int pad,
                     Tensor& gx, Tensor& gw, Tensor& gb);

Tensor softmax(const Tensor& x, int axis);
// y is the forward output.
void softmax_backward(const Tensor& gout, const Tensor& y, int axis, Tensor& gx);

Tensor relu(const Tensor& x);
void relu_backward(const Tensor& gout, const Tensor& x, Tensor& gx);

Tensor sigmoid(const Tensor& x);
void sigmoid_backward(const Tensor& gout, const Tensor& y, Tensor& gx);

// Inference-mode batch normalization: per-channel affine with fixed unit
// statistics. x: [C,H,W], gamma/beta: [C].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
void channel_affine_backward(const Tensor& gout, const Tensor& x, const Tensor& gamma,
                             Tensor& gx, Tensor& ggamma, Tensor& gbeta);

// ---- gradient checking ----------------------------------------------------

// Central-difference check of `analytic_grad` against f around x. Returns the
// worst per-coordinate relative error with denominator
// max(|analytic|, |numeric|, 1e-8). Throws ValueError if f(x) is non-finite.
double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic_grad, double eps = 1e-5);

// ---- serialization ---------------------------------------------------------
// Little-endian binary block: u32 rank, u32 extents, raw 64-bit floats.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace bevfuse
