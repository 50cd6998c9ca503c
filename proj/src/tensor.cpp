#include "mem4d/tensor.hpp"

#include <sstream>

namespace mem4d {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

detail::NodePtr make_node(Shape shape, std::vector<Real> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

thread_local GradientTape* g_active_tape = nullptr;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(make_node(Shape{1}, std::vector<Real>{value}, requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ArgumentError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const Real> Tensor::data() const {
  if (!node_) throw ArgumentError("undefined tensor");
  return node_->value;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw ArgumentError("undefined tensor");
  return node_->value;
}

std::vector<Real> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Real Tensor::operator[](std::size_t flat_index) const { return data()[flat_index]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_) throw ArgumentError("undefined tensor");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!node_) throw ArgumentError("undefined tensor");
  return node_->grad_buffer();
}

std::span<Real> Tensor::mutable_grad() {
  if (!node_) throw ArgumentError("undefined tensor");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), Real(0));
}

Tensor Tensor::detach() const {
  return Tensor(make_node(shape(), node_->value, false));
}

void GradientTape::record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn fn) {
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(fn)});
}

void GradientTape::backward(const Tensor& root, bool keep_tape) {
  if (!root.defined() || root.numel() != 1) {
    throw ArgumentError("backward() requires a scalar root, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  root.node()->grad_buffer()[0] += Real(1);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn();
  }
  for (auto& r : records_) {
    for (auto& in : r.inputs) {
      if (in->requires_grad) in->grad_buffer();
    }
    r.output->grad_buffer();
  }
  if (!keep_tape) clear();
}

void GradientTape::clear() { records_.clear(); }

GradientTape* active_tape() noexcept { return g_active_tape; }

TapeScope::TapeScope(GradientTape& tape) noexcept : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() noexcept : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace mem4d
