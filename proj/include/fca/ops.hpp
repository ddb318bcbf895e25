#pragma once

#include <span>
#include <vector>

#include "fca/tensor.hpp"

// Primitive kernels. Every op validates shapes, rejects non-finite outputs,
// and records a tape node when grad mode is on and an input requires grad.
// All kernels are deterministic: fixed loop order, no threading.
namespace fca {

// Attach an autodiff node to `out`, which already holds forward values.
// `backward_fn` receives the output impl (values + received gradient) and
// must accumulate into the inputs it is responsible for.
template <typename T>
void attach_node(Tensor<T>& out, const char* op,
                 std::vector<std::shared_ptr<detail::TensorImpl<T>>> inputs,
                 std::function<void(const detail::TensorImpl<T>&)> backward_fn);

namespace detail {
template <typename T>
void ensure_finite(std::span<const T> v, const char* op);
template <typename T>
bool any_requires_grad(std::span<const Tensor<T>> ts);
}  // namespace detail

// -- linear algebra ---------------------------------------------------------

// Batched matrix product [..,p,q] x [..,q,r] -> [..,p,r]; leading batch
// dimensions broadcast numpy-style. dA = dC.B^T, dB = A^T.dC.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// y = x.W^T (+ bias). x: [..., in] flattened to rows, W: [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr);

// -- activations / normalization --------------------------------------------

// Max-shifted softmax over the last dimension; rows sum to 1.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& t);

// Per-row (last dim) zero mean, unit variance, then affine with gamma/beta.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& t, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& t);

// -- elementwise / shape ------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);  // same shape
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);  // same shape
template <typename T>
Tensor<T> scale(const Tensor<T>& t, T c);
// x: [..., k] plus row vector b[k]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);
// every length-d row of x multiplied by s[d]
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& dims);
template <typename T>
Tensor<T> transpose(const Tensor<T>& t, int a, int b);
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis);
template <typename T>
Tensor<T> slice_axis0(const Tensor<T>& t, int64_t start, int64_t len);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& t, int axis);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& t);

// -- convolution -------------------------------------------------------------

// Per-channel 2-D cross-correlation. x: [B,C,H,W], w: [C,k,k].
template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding);

// 1x1 convolution == per-pixel channel matmul. x: [B,C,H,W], w: [C',C].
template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& x, const Tensor<T>& w);

// -- losses -------------------------------------------------------------------

// Mean label-smoothed cross entropy from raw logits [B,K].
// loss = mean_b [ -(1-s) log p[y_b] - s/K sum_k log p[k] ]
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels, T smoothing = T(0));

}  // namespace fca
