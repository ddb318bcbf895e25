#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fca {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded primitive application. Nodes are created in program order, so
// the ordered set of nodes reachable from a loss forms the tape: sorting by
// `seq` descending visits every node after all of its consumers.
template <typename T>
struct Node {
  int64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::weak_ptr<TensorImpl<T>> output;
  // Reads the output's accumulated gradient and pushes gradient into the
  // inputs this op cares about. Saved forward values live in the closure.
  std::function<void(const TensorImpl<T>&)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }

  void accum_grad(std::span<const T> g) {
    auto& gb = grad_buffer();
    for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
  }
};

int64_t next_node_seq();

}  // namespace detail

// Thread-local switch for recording autodiff nodes.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor with an optional tape node. Copies share storage;
// values are immutable once produced by an op. mutable_data() exists for
// parameter initialization, optimizer steps and test setup between tapes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return from_data({}, {value}); }
  static Tensor from_data(Shape shape, std::vector<T> data);
  static Tensor wrap(std::shared_ptr<detail::TensorImpl<T>> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return impl_->numel(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void clear_grad() { impl_->grad.clear(); }

  std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Reverse-mode sweep from a scalar loss. Visits every reachable node exactly
// once, in reverse creation order, accumulating dLoss/dX for every tensor on
// the tape that requires grad. Deterministic for a fixed tape.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void zero_grad(std::span<Tensor<T>> params);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward(const Tensor<float>&);
extern template void backward(const Tensor<double>&);
extern template void zero_grad(std::span<Tensor<float>>);
extern template void zero_grad(std::span<Tensor<double>>);

}  // namespace fca
