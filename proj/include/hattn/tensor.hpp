#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace hattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Dense row-major tensor of doubles. Value-semantics handle over shared
// storage: copies alias the same data, which is what the tape and the
// weight-sharing contract (CAM kernel == FC weight) rely on.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return d_->shape[axis]; }
  std::size_t size() const { return d_->values.size(); }

  std::span<double> values() { return d_->values; }
  std::span<const double> values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  // Grad buffer, allocated zero-filled on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const { return defined() && !d_->grad.empty(); }
  void zero_grad();

  double item() const;

  // Identity of the underlying storage; two Tensors sharing it are the
  // same parameter for gradient-accumulation purposes.
  const std::shared_ptr<TensorData>& data() const { return d_; }

  Tensor clone() const;  // deep copy of values (grad not copied)

 private:
  std::shared_ptr<TensorData> d_;
};

void ensure_grad(TensorData& t);
bool all_finite(const Tensor& t);

// Linear record of executed differentiable operations. backward() replays
// the record once in reverse; a second call on the same tape is an error.
class Tape {
 public:
  void record(std::function<void()> backward_fn);
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor
  // reachable from the loss. loss must be scalar and produced on this tape.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

}  // namespace hattn
