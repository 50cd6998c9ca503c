#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mem4d/errors.hpp"

namespace mem4d {

#ifdef MEM4D_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Storage shared by all handles to one tensor value. Gradient buffers are
// allocated lazily the first time something accumulates into them.
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;

  std::span<Real> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major array with optional participation in reverse-mode
/// differentiation. Copies of a Tensor share storage; every operation in
/// ops.hpp returns a fresh buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  std::vector<Real> to_vector() const;
  Real item() const;
  Real operator[](std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  /// Fresh copy of the values, disconnected from any tape.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Ordered record of primitive operations for one unit of work. Records are
/// appended in execution order, so inputs always precede their consumers.
class GradientTape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn fn);

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. Gradients sum
  /// into every requires-grad tensor reached; leaves keep accumulating across
  /// calls until zero_grad(). The tape is cleared unless keep_tape is set.
  void backward(const Tensor& root, bool keep_tape = false);

  void clear();
  std::size_t size() const noexcept { return records_.size(); }

 private:
  struct Record {
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

/// Active tape for the calling thread; nullptr when gradients are not recorded.
GradientTape* active_tape() noexcept;

/// Makes `tape` the active tape of this thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(GradientTape& tape) noexcept;
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape* previous_;
};

/// Suspends recording for the calling thread.
class NoGradScope {
 public:
  NoGradScope() noexcept;
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradientTape* previous_;
};

}  // namespace mem4d
