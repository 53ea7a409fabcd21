#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace condist {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

// Dense row-major array of doubles.
//
// Fields that carry classes (logits, probabilities) use the layout
// [batch, channel, spatial...]; the channel axis is always axis 1.
// Label maps use [batch, spatial...].
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled.
  explicit Tensor(Shape shape);
  // Throws InputError if `values` does not match `shape` or holds NaN/Inf.
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Probability fields are tensors whose channel sums are one; see
// check_prob_field.
using ProbField = Tensor;

// Class index map, [batch, spatial...].
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(Shape shape);
  LabelMap(Shape shape, std::vector<std::int32_t> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<std::int32_t> values() noexcept { return values_; }
  std::span<const std::int32_t> values() const noexcept { return values_; }
  std::int32_t& operator[](std::size_t i) noexcept { return values_[i]; }
  std::int32_t operator[](std::size_t i) const noexcept { return values_[i]; }

  // Throws InputError unless every value is in [0, num_classes).
  void check_range(int num_classes) const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  Shape shape_;
  std::vector<std::int32_t> values_;
};

// Decomposition of a channel-major tensor: element (o, c, i) lives at
// (o * channels + c) * inner + i.
struct ChannelView {
  std::size_t outer = 0;
  std::size_t channels = 0;
  std::size_t inner = 0;

  std::size_t index(std::size_t o, std::size_t c, std::size_t i) const noexcept {
    return (o * channels + c) * inner + i;
  }
  std::size_t sites() const noexcept { return outer * inner; }
};

// Throws InputError if the tensor has rank < 2.
ChannelView channel_view(const Shape& shape);

// Shape of the label map matching a [batch, channel, spatial...] field.
Shape site_shape(const Shape& field_shape);

// Field shape with the channel axis inserted into a label-map shape.
Shape field_shape(const Shape& site_shape, std::size_t channels);

// Throws InputError if any channel sum is more than `tol` from one or any
// entry is outside [0, 1].
void check_prob_field(const Tensor& probs, double tol = 1e-9);

// Per-site softmax of logits / tau along the channel axis, with the per-site
// maximum subtracted before exponentiation.
ProbField softmax_temp(const Tensor& logits, double tau);

// Backward pass of softmax_temp: given probs = softmax_temp(z, tau) and
// dL/dprobs, returns dL/dz.
Tensor softmax_temp_backward(const ProbField& probs, const Tensor& grad_probs,
                             double tau);

ProbField one_hot(const LabelMap& labels, int num_classes);

// Index of the largest channel per site; ties go to the lowest index.
LabelMap argmax_map(const Tensor& field);

// Scalar function with analytic gradient. When `grad` is non-null the
// function must resize and fill it with df/dx.
using DifferentiableFn = std::function<double(const Tensor& x, Tensor* grad)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error, so coordinates whose true
  // derivative is ~0 are judged on absolute error.
  double scale_floor = 1e-6;
  // Coordinates to probe; empty means every coordinate.
  std::vector<std::size_t> coordinates;
  // Returns true if the central difference at coordinate i straddles a
  // non-differentiable point and must be skipped.
  std::function<bool(std::size_t i)> skip;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
};

// Compares the analytic gradient of f at `point` with central differences
// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). The relative error per
// coordinate is |a - n| / max(|a|, |n|, scale_floor).
GradCheckReport grad_check(const DifferentiableFn& f, const Tensor& point,
                           const GradCheckOptions& options = {});

}  // namespace condist
