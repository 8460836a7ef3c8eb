#include "hattn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hattn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("Tensor: rank-0 shapes are not supported");
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
  }
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  validate_shape(shape);
  d_ = std::make_shared<TensorData>();
  d_->values.assign(shape_numel(shape), fill);
  d_->shape = std::move(shape);
  d_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match value count " +
                                std::to_string(values.size()));
  }
  d_ = std::make_shared<TensorData>();
  d_->shape = std::move(shape);
  d_->values = std::move(values);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

std::span<double> Tensor::grad() {
  ensure_grad(*d_);
  return d_->grad;
}

std::span<const double> Tensor::grad() const {
  ensure_grad(*d_);
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(size()) + " elements");
  return d_->values[0];
}

Tensor Tensor::clone() const {
  return Tensor(d_->shape, d_->values, d_->requires_grad);
}

void ensure_grad(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
}

bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw std::logic_error("Tape: recording onto a consumed tape");
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("Tape::backward called twice on the same tape");
  if (!loss.defined() || loss.size() != 1) throw std::invalid_argument("Tape::backward: loss must be a scalar tensor");
  if (!loss.requires_grad()) throw std::invalid_argument("Tape::backward: loss was not produced on this tape");
  consumed_ = true;
  ensure_grad(*loss.data());
  loss.data()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace hattn
