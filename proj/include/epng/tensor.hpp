#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace epng {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit floats with an optional same-shape
/// gradient accumulator. Copies are views: they share the value buffer and,
/// when tracked, the gradient buffer. Arrays are treated as immutable once
/// produced by an op; only leaf parameters are mutated (by the optimizer,
/// between tapes).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return data_ ? data_->size() : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double at(std::size_t i) const { return (*data_)[i]; }

  /// Value of a single-element tensor.
  double item() const;

  bool tracked() const { return grad_ != nullptr; }
  /// Allocate a zeroed gradient buffer if absent.
  void track();
  double* grad() { return grad_->data(); }
  const double* grad() const { return grad_->data(); }
  void zero_grad();

  /// Same buffers, new extents. Product of extents must match.
  Tensor reshaped(Shape new_shape) const;

  bool all_finite() const;

 private:
  Shape shape_{};
  std::shared_ptr<std::vector<double>> data_{};
  std::shared_ptr<std::vector<double>> grad_{};
};

/// Reverse-mode tape. Ops push one closure per recorded step; backward()
/// seeds the root gradient with 1 and replays the closures in reverse
/// creation order (a valid topological order because arrays are immutable
/// once produced). The most recently constructed Tape on a thread is active;
/// with no live Tape, ops run forward-only.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }

  /// root must be a tracked single-element tensor.
  void backward(Tensor& root);

 private:
  std::vector<std::function<void()>> steps_;
  Tape* prev_ = nullptr;
};

// ---- differentiable ops ------------------------------------------------
// Every op checks its preconditions up front and reports shape mismatches
// with both shapes in the message.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);

/// 2-D matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Row-wise softmax over the last axis, computed with max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalization over the last (channel) axis with learnable gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Rows scaled to unit L2 norm; rows with norm below eps are scaled by 1/eps.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// X (n x C) plus a length-C vector added to every row.
Tensor add_rowvec(const Tensor& x, const Tensor& v);

/// Concatenate along the last axis; all other extents must agree.
Tensor concat_last(std::span<const Tensor> parts);
/// Columns [start, start+len) of the last axis.
Tensor slice_last(const Tensor& x, int start, int len);

/// out[r] = x[ids[r]] for a 2-D x; backward scatter-adds rows.
Tensor take_rows(const Tensor& x, const std::vector<int>& ids);

/// out[i] = table[idx[i]] with out_shape extents; table is 1-D.
Tensor table_lookup(const Tensor& table, const std::vector<int>& idx,
                    Shape out_shape);

// Spatial ops on (H, W, C) arrays.
Tensor upsample_nearest(const Tensor& x, int factor);
Tensor upsample_bilinear(const Tensor& x, int factor);
Tensor avgpool2(const Tensor& x);

/// 3x3 convolution, padding 1, stride 1 or 2.
/// x: (H, W, Cin), w: (Cout, 3, 3, Cin), bias: (Cout).
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias,
               int stride);

}  // namespace epng
