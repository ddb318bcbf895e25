#include "fca/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace fca {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

int64_t next_node_seq() {
  static std::atomic<int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(static_cast<size_t>(n), value));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data) {
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data size " +
                                std::to_string(data.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return wrap(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor<T> t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
int64_t Tensor<T>::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("tensor: axis out of range");
  return impl_->shape[static_cast<size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() requires exactly one element");
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("tensor: at() rank mismatch");
  int64_t off = 0;
  int i = 0;
  for (int64_t v : idx) {
    int64_t d = impl_->shape[static_cast<size_t>(i)];
    if (v < 0 || v >= d) throw std::invalid_argument("tensor: at() index out of range");
    off = off * d + v;
    ++i;
  }
  return impl_->data[static_cast<size_t>(off)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar");
  }
  auto root = loss.impl();
  root->grad_buffer()[0] = T(1);
  if (!root->node) return;

  // Collect the tape: all nodes reachable from the loss through input edges.
  std::vector<detail::Node<T>*> tape;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{root->node.get()};
  seen.insert(root->node.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    tape.push_back(n);
    for (auto& in : n->inputs) {
      if (in->node && seen.insert(in->node.get()).second) stack.push_back(in->node.get());
    }
  }
  // Creation order is topological by construction.
  std::sort(tape.begin(), tape.end(),
            [](const detail::Node<T>* a, const detail::Node<T>* b) { return a->seq > b->seq; });
  for (auto* n : tape) {
    auto out = n->output.lock();
    if (!out || out->grad.empty()) continue;
    n->backward(*out);
  }
}

template <typename T>
void zero_grad(std::span<Tensor<T>> params) {
  for (auto& p : params) {
    if (p.defined()) p.clear_grad();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void zero_grad(std::span<Tensor<float>>);
template void zero_grad(std::span<Tensor<double>>);

}  // namespace fca
