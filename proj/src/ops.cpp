#include "fca/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "fca/macs.hpp"

namespace fca {

namespace detail {

template <typename T>
void ensure_finite(std::span<const T> v, const char* op) {
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw std::runtime_error(std::string(op) + ": non-finite output");
    }
  }
}

template <typename T>
bool any_requires_grad(std::span<const Tensor<T>> ts) {
  for (const auto& t : ts) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

template void ensure_finite(std::span<const float>, const char*);
template void ensure_finite(std::span<const double>, const char*);
template bool any_requires_grad(std::span<const Tensor<float>>);
template bool any_requires_grad(std::span<const Tensor<double>>);

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  }
  return st;
}

}  // namespace
}  // namespace detail

template <typename T>
void attach_node(Tensor<T>& out, const char* op,
                 std::vector<std::shared_ptr<detail::TensorImpl<T>>> inputs,
                 std::function<void(const detail::TensorImpl<T>&)> backward_fn) {
  auto node = std::make_shared<detail::Node<T>>();
  node->seq = detail::next_node_seq();
  node->op = op;
  node->inputs = std::move(inputs);
  node->output = out.impl();
  node->backward = std::move(backward_fn);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
}

template void attach_node(Tensor<float>&, const char*,
                          std::vector<std::shared_ptr<detail::TensorImpl<float>>>,
                          std::function<void(const detail::TensorImpl<float>&)>);
template void attach_node(Tensor<double>&, const char*,
                          std::vector<std::shared_ptr<detail::TensorImpl<double>>>,
                          std::function<void(const detail::TensorImpl<double>&)>);

namespace {

template <typename T>
bool want_grad(const Tensor<T>& a) {
  return grad_enabled() && a.requires_grad();
}
template <typename T>
bool want_grad(const Tensor<T>& a, const Tensor<T>& b) {
  return grad_enabled() && (a.requires_grad() || b.requires_grad());
}
template <typename T>
bool want_grad(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  return grad_enabled() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

// Broadcast plan over leading (batch) dimensions of a matmul. Maps are
// per-output-batch-dim strides counted in matrices; 0 marks a broadcast dim.
struct BatchPlan {
  Shape out_dims;
  int64_t count = 1;
  std::vector<int64_t> out_strides, a_map, b_map;
};

BatchPlan make_batch_plan(const Shape& a, const Shape& b, const char* op) {
  int ba = static_cast<int>(a.size()) - 2;
  int bb = static_cast<int>(b.size()) - 2;
  int bd = std::max(ba, bb);
  BatchPlan plan;
  plan.out_dims.resize(static_cast<size_t>(bd));
  for (int i = 0; i < bd; ++i) {
    int ia = i - (bd - ba);
    int ib = i - (bd - bb);
    int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
    int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": batch dims not broadcastable " + shape_str(a) +
                                  " vs " + shape_str(b));
    }
    plan.out_dims[static_cast<size_t>(i)] = std::max(da, db);
  }
  plan.count = shape_numel(plan.out_dims);
  plan.out_strides = detail::row_major_strides(plan.out_dims);
  // per-operand strides in units of matrices
  auto operand_map = [&](const Shape& s, int bs) {
    std::vector<int64_t> strides(static_cast<size_t>(bs), 1);
    for (int i = bs - 2; i >= 0; --i) {
      strides[static_cast<size_t>(i)] = strides[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    }
    std::vector<int64_t> map(static_cast<size_t>(bd), 0);
    for (int i = 0; i < bd; ++i) {
      int io = i - (bd - bs);
      if (io >= 0 && s[static_cast<size_t>(io)] != 1) map[static_cast<size_t>(i)] = strides[static_cast<size_t>(io)];
    }
    return map;
  };
  plan.a_map = operand_map(a, ba);
  plan.b_map = operand_map(b, bb);
  return plan;
}

inline void decode_batch(const BatchPlan& plan, int64_t index, int64_t& a_off, int64_t& b_off) {
  a_off = 0;
  b_off = 0;
  int64_t rem = index;
  for (size_t d = 0; d < plan.out_dims.size(); ++d) {
    int64_t c = rem / plan.out_strides[d];
    rem %= plan.out_strides[d];
    a_off += c * plan.a_map[d];
    b_off += c * plan.b_map[d];
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw std::invalid_argument("matmul: operands must have rank >= 2");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  int64_t p = as[as.size() - 2], q = as[as.size() - 1];
  int64_t q2 = bs[bs.size() - 2], r = bs[bs.size() - 1];
  if (q != q2) {
    throw std::invalid_argument("matmul: inner dimensions mismatch " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);
  BatchPlan plan = make_batch_plan(a_batch, b_batch, "matmul");

  Shape out_shape = plan.out_dims;
  out_shape.push_back(p);
  out_shape.push_back(r);
  std::vector<T> out(static_cast<size_t>(plan.count * p * r), T(0));

  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t bi = 0; bi < plan.count; ++bi) {
    int64_t ao, bo;
    decode_batch(plan, bi, ao, bo);
    const T* A = ad + ao * p * q;
    const T* B = bd + bo * q * r;
    T* C = out.data() + bi * p * r;
    for (int64_t i = 0; i < p; ++i) {
      for (int64_t k = 0; k < q; ++k) {
        T av = A[i * q + k];
        const T* Bk = B + k * r;
        T* Ci = C + i * r;
        for (int64_t j = 0; j < r; ++j) Ci[j] += av * Bk[j];
      }
    }
  }
  macs::add(macs::matmul(plan.count, p, q, r));
  detail::ensure_finite<T>(out, "matmul");

  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (want_grad(a, b)) {
    auto ai = a.impl();
    auto bi_ = b.impl();
    attach_node(res, "matmul", {ai, bi_}, [ai, bi_, plan, p, q, r](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      const T* ad = ai->data.data();
      const T* bd = bi_->data.data();
      T* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
      T* gb = bi_->requires_grad ? bi_->grad_buffer().data() : nullptr;
      for (int64_t bi2 = 0; bi2 < plan.count; ++bi2) {
        int64_t ao, bo;
        decode_batch(plan, bi2, ao, bo);
        const T* G = g + bi2 * p * r;
        const T* A = ad + ao * p * q;
        const T* B = bd + bo * q * r;
        if (ga) {
          T* GA = ga + ao * p * q;
          for (int64_t i = 0; i < p; ++i) {
            for (int64_t k = 0; k < q; ++k) {
              T acc = T(0);
              const T* Gi = G + i * r;
              const T* Bk = B + k * r;
              for (int64_t j = 0; j < r; ++j) acc += Gi[j] * Bk[j];
              GA[i * q + k] += acc;
            }
          }
        }
        if (gb) {
          T* GB = gb + bo * q * r;
          for (int64_t i = 0; i < p; ++i) {
            const T* Gi = G + i * r;
            const T* Ai = A + i * q;
            for (int64_t k = 0; k < q; ++k) {
              T av = Ai[k];
              T* GBk = GB + k * r;
              for (int64_t j = 0; j < r; ++j) GBk[j] += av * Gi[j];
            }
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  if (x.rank() < 1 || w.rank() != 2) throw std::invalid_argument("linear: x rank >= 1, w rank == 2 required");
  int64_t in = x.dim(-1);
  int64_t out_w = w.dim(0);
  if (w.dim(1) != in) {
    throw std::invalid_argument("linear: weight " + shape_str(w.shape()) + " does not match input width " +
                                std::to_string(in));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_w)) {
    throw std::invalid_argument("linear: bias shape mismatch");
  }
  int64_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_w;

  std::vector<T> out(static_cast<size_t>(rows * out_w), T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* xi = xd + i * in;
    T* oi = out.data() + i * out_w;
    for (int64_t o = 0; o < out_w; ++o) {
      const T* wo = wd + o * in;
      T acc = T(0);
      for (int64_t k = 0; k < in; ++k) acc += xi[k] * wo[k];
      oi[o] = acc;
    }
    if (bias) {
      const T* bd = bias->data().data();
      for (int64_t o = 0; o < out_w; ++o) oi[o] += bd[o];
    }
  }
  macs::add(macs::linear(rows, in, out_w));
  detail::ensure_finite<T>(out, "linear");

  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  bool wants = grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()));
  if (wants) {
    auto xi_ = x.impl();
    auto wi = w.impl();
    std::shared_ptr<detail::TensorImpl<T>> bi = bias ? bias->impl() : nullptr;
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins{xi_, wi};
    if (bi) ins.push_back(bi);
    attach_node(res, "linear", std::move(ins), [xi_, wi, bi, rows, in, out_w](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      const T* xd = xi_->data.data();
      const T* wd = wi->data.data();
      if (xi_->requires_grad) {
        T* gx = xi_->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          const T* gi = g + i * out_w;
          T* gxi = gx + i * in;
          for (int64_t o = 0; o < out_w; ++o) {
            T gv = gi[o];
            const T* wo = wd + o * in;
            for (int64_t k = 0; k < in; ++k) gxi[k] += gv * wo[k];
          }
        }
      }
      if (wi->requires_grad) {
        T* gw = wi->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          const T* gi = g + i * out_w;
          const T* xi2 = xd + i * in;
          for (int64_t o = 0; o < out_w; ++o) {
            T gv = gi[o];
            T* gwo = gw + o * in;
            for (int64_t k = 0; k < in; ++k) gwo[k] += gv * xi2[k];
          }
        }
      }
      if (bi && bi->requires_grad) {
        T* gb = bi->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          const T* gi = g + i * out_w;
          for (int64_t o = 0; o < out_w; ++o) gb[o] += gi[o];
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// softmax / layernorm / gelu
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& t) {
  if (t.rank() < 1 || t.dim(-1) < 1) throw std::invalid_argument("softmax: last dimension must be >= 1");
  detail::ensure_finite<T>(t.data(), "softmax(input)");
  int64_t k = t.dim(-1);
  int64_t rows = t.numel() / k;
  std::vector<T> out(t.data().begin(), t.data().end());
  for (int64_t i = 0; i < rows; ++i) {
    T* row = out.data() + i * k;
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int64_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int64_t j = 0; j < k; ++j) row[j] /= sum;
  }
  detail::ensure_finite<T>(out, "softmax");
  Tensor<T> res = Tensor<T>::from_data(t.shape(), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "softmax", {ti}, [ti, rows, k](const detail::TensorImpl<T>& o) {
      // dx = y * (g - sum(g*y)) per row
      const T* g = o.grad.data();
      const T* y = o.data.data();
      T* gx = ti->grad_buffer().data();
      for (int64_t i = 0; i < rows; ++i) {
        const T* gi = g + i * k;
        const T* yi = y + i * k;
        T dot = T(0);
        for (int64_t j = 0; j < k; ++j) dot += gi[j] * yi[j];
        T* gxi = gx + i * k;
        for (int64_t j = 0; j < k; ++j) gxi[j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& t, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (t.rank() < 1) throw std::invalid_argument("layernorm: rank >= 1 required");
  int64_t d = t.dim(-1);
  if (d == 0) throw std::invalid_argument("layernorm: normalized dimension is zero");
  if (gamma.numel() != d || beta.numel() != d) throw std::invalid_argument("layernorm: gamma/beta width mismatch");
  if (!(eps > T(0))) throw std::invalid_argument("layernorm: eps must be positive");
  int64_t rows = t.numel() / d;

  std::vector<T> out(static_cast<size_t>(rows * d));
  std::vector<T> mean(static_cast<size_t>(rows)), inv(static_cast<size_t>(rows));
  const T* xd = t.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* xi = xd + i * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xi[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T iv = T(1) / std::sqrt(var + eps);
    mean[static_cast<size_t>(i)] = mu;
    inv[static_cast<size_t>(i)] = iv;
    T* oi = out.data() + i * d;
    for (int64_t j = 0; j < d; ++j) oi[j] = (xi[j] - mu) * iv * gd[j] + bd[j];
  }
  macs::add(macs::layernorm(rows * d));
  detail::ensure_finite<T>(out, "layernorm");

  Tensor<T> res = Tensor<T>::from_data(t.shape(), std::move(out));
  if (want_grad(t, gamma, beta)) {
    auto ti = t.impl();
    auto gi_ = gamma.impl();
    auto bi = beta.impl();
    attach_node(res, "layernorm", {ti, gi_, bi},
                [ti, gi_, bi, mean = std::move(mean), inv = std::move(inv), rows, d](const detail::TensorImpl<T>& o) {
                  const T* g = o.grad.data();
                  const T* xd = ti->data.data();
                  const T* gd = gi_->data.data();
                  T* gx = ti->requires_grad ? ti->grad_buffer().data() : nullptr;
                  T* gg = gi_->requires_grad ? gi_->grad_buffer().data() : nullptr;
                  T* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
                  for (int64_t i = 0; i < rows; ++i) {
                    const T* xi = xd + i * d;
                    const T* gi2 = g + i * d;
                    T mu = mean[static_cast<size_t>(i)];
                    T iv = inv[static_cast<size_t>(i)];
                    if (gg || gb) {
                      for (int64_t j = 0; j < d; ++j) {
                        T xhat = (xi[j] - mu) * iv;
                        if (gg) gg[j] += gi2[j] * xhat;
                        if (gb) gb[j] += gi2[j];
                      }
                    }
                    if (gx) {
                      // dx = iv * (ggam - mean(ggam) - xhat * mean(ggam*xhat))
                      T m1 = T(0), m2 = T(0);
                      for (int64_t j = 0; j < d; ++j) {
                        T ggam = gi2[j] * gd[j];
                        T xhat = (xi[j] - mu) * iv;
                        m1 += ggam;
                        m2 += ggam * xhat;
                      }
                      m1 /= static_cast<T>(d);
                      m2 /= static_cast<T>(d);
                      T* gxi = gx + i * d;
                      for (int64_t j = 0; j < d; ++j) {
                        T ggam = gi2[j] * gd[j];
                        T xhat = (xi[j] - mu) * iv;
                        gxi[j] += iv * (ggam - m1 - xhat * m2);
                      }
                    }
                  }
                });
  }
  return res;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& t) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<T> out(t.data().size());
  const T* xd = t.data().data();
  for (size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(xd[i]);
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    out[i] = static_cast<T>(x * cdf);
  }
  detail::ensure_finite<T>(out, "gelu");
  Tensor<T> res = Tensor<T>::from_data(t.shape(), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "gelu", {ti}, [ti](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      const T* xd = ti->data.data();
      T* gx = ti->grad_buffer().data();
      for (size_t i = 0; i < ti->data.size(); ++i) {
        double x = static_cast<double>(xd[i]);
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        gx[i] += g[i] * static_cast<T>(cdf + x * pdf);
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {
template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}
}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().size());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  detail::ensure_finite<T>(out, "add");
  Tensor<T> res = Tensor<T>::from_data(a.shape(), std::move(out));
  if (want_grad(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    attach_node(res, "add", {ai, bi}, [ai, bi](const detail::TensorImpl<T>& o) {
      if (ai->requires_grad) ai->accum_grad(o.grad);
      if (bi->requires_grad) bi->accum_grad(o.grad);
    });
  }
  return res;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.data().size());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  detail::ensure_finite<T>(out, "mul");
  Tensor<T> res = Tensor<T>::from_data(a.shape(), std::move(out));
  if (want_grad(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    attach_node(res, "mul", {ai, bi}, [ai, bi](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      if (ai->requires_grad) {
        T* ga = ai->grad_buffer().data();
        const T* bd = bi->data.data();
        for (size_t i = 0; i < ai->data.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (bi->requires_grad) {
        T* gb = bi->grad_buffer().data();
        const T* ad = ai->data.data();
        for (size_t i = 0; i < bi->data.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& t, T c) {
  std::vector<T> out(t.data().size());
  const T* td = t.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = td[i] * c;
  detail::ensure_finite<T>(out, "scale");
  Tensor<T> res = Tensor<T>::from_data(t.shape(), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "scale", {ti}, [ti, c](const detail::TensorImpl<T>& o) {
      T* g = ti->grad_buffer().data();
      const T* og = o.grad.data();
      for (size_t i = 0; i < ti->data.size(); ++i) g[i] += og[i] * c;
    });
  }
  return res;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 1 || b.rank() != 1 || x.dim(-1) != b.dim(0)) {
    throw std::invalid_argument("add_bias: bias width must match last dimension");
  }
  int64_t k = b.dim(0);
  int64_t rows = x.numel() / k;
  std::vector<T> out(x.data().size());
  const T* xd = x.data().data();
  const T* bd = b.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < k; ++j) out[static_cast<size_t>(i * k + j)] = xd[i * k + j] + bd[j];
  }
  detail::ensure_finite<T>(out, "add_bias");
  Tensor<T> res = Tensor<T>::from_data(x.shape(), std::move(out));
  if (want_grad(x, b)) {
    auto xi = x.impl();
    auto bi = b.impl();
    attach_node(res, "add_bias", {xi, bi}, [xi, bi, rows, k](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      if (xi->requires_grad) xi->accum_grad(o.grad);
      if (bi->requires_grad) {
        T* gb = bi->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          for (int64_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
        }
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() < 1 || s.rank() != 1 || x.dim(-1) != s.dim(0)) {
    throw std::invalid_argument("channel_scale: scale width must match last dimension");
  }
  int64_t d = s.dim(0);
  int64_t rows = x.numel() / d;
  std::vector<T> out(x.data().size());
  const T* xd = x.data().data();
  const T* sd = s.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = xd[i * d + j] * sd[j];
  }
  detail::ensure_finite<T>(out, "channel_scale");
  Tensor<T> res = Tensor<T>::from_data(x.shape(), std::move(out));
  if (want_grad(x, s)) {
    auto xi = x.impl();
    auto si = s.impl();
    attach_node(res, "channel_scale", {xi, si}, [xi, si, rows, d](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      const T* xd = xi->data.data();
      const T* sd = si->data.data();
      if (xi->requires_grad) {
        T* gx = xi->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          for (int64_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * sd[j];
        }
      }
      if (si->requires_grad) {
        T* gs = si->grad_buffer().data();
        for (int64_t i = 0; i < rows; ++i) {
          for (int64_t j = 0; j < d; ++j) gs[j] += g[i * d + j] * xd[i * d + j];
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(t.shape()) + " -> " +
                                shape_str(shape));
  }
  std::vector<T> out(t.data().begin(), t.data().end());
  Tensor<T> res = Tensor<T>::from_data(std::move(shape), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "reshape", {ti}, [ti](const detail::TensorImpl<T>& o) { ti->accum_grad(o.grad); });
  }
  return res;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& t, const std::vector<int>& dims) {
  int r = t.rank();
  if (static_cast<int>(dims.size()) != r) throw std::invalid_argument("permute: dims size mismatch");
  std::vector<bool> used(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int d = dims[static_cast<size_t>(i)];
    if (d < 0 || d >= r || used[static_cast<size_t>(d)]) throw std::invalid_argument("permute: invalid dims");
    used[static_cast<size_t>(d)] = true;
    out_shape[static_cast<size_t>(i)] = t.shape()[static_cast<size_t>(d)];
  }
  auto in_strides = detail::row_major_strides(t.shape());
  auto out_strides = detail::row_major_strides(out_shape);
  // out coordinate i corresponds to input axis dims[i]
  std::vector<int64_t> gather(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];

  int64_t n = t.numel();
  std::vector<T> out(static_cast<size_t>(n));
  const T* xd = t.data().data();
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t c = rem / out_strides[static_cast<size_t>(i)];
      rem %= out_strides[static_cast<size_t>(i)];
      src += c * gather[static_cast<size_t>(i)];
    }
    out[static_cast<size_t>(o)] = xd[src];
  }
  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "permute", {ti}, [ti, out_strides, gather, n, r](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      T* gx = ti->grad_buffer().data();
      for (int64_t o2 = 0; o2 < n; ++o2) {
        int64_t rem = o2, src = 0;
        for (int i = 0; i < r; ++i) {
          int64_t c = rem / out_strides[static_cast<size_t>(i)];
          rem %= out_strides[static_cast<size_t>(i)];
          src += c * gather[static_cast<size_t>(i)];
        }
        gx[src] += g[o2];
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& t, int a, int b) {
  int r = t.rank();
  if (a < 0) a += r;
  if (b < 0) b += r;
  std::vector<int> dims(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) dims[static_cast<size_t>(i)] = i;
  std::swap(dims[static_cast<size_t>(a)], dims[static_cast<size_t>(b)]);
  return permute(t, dims);
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i)) {
        throw std::invalid_argument("concat: operands disagree on non-concat axis");
      }
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t out_row = axis_total * inner;
  int64_t col = 0;
  std::vector<int64_t> offsets(parts.size());
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = col;
    int64_t len = parts[pi].dim(axis) * inner;
    const T* src = parts[pi].data().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * out_row + col, src + o * len, static_cast<size_t>(len) * sizeof(T));
    }
    col += len;
  }

  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (grad_enabled() && detail::any_requires_grad<T>(parts)) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
      ins.push_back(p.impl());
      lens.push_back(p.dim(axis) * inner);
    }
    attach_node(res, "concat", std::vector(ins),
                [ins, offsets, lens, outer, out_row](const detail::TensorImpl<T>& o) {
                  const T* g = o.grad.data();
                  for (size_t pi = 0; pi < ins.size(); ++pi) {
                    if (!ins[pi]->requires_grad) continue;
                    T* gp = ins[pi]->grad_buffer().data();
                    for (int64_t ot = 0; ot < outer; ++ot) {
                      const T* gsrc = g + ot * out_row + offsets[pi];
                      T* gdst = gp + ot * lens[pi];
                      for (int64_t j = 0; j < lens[pi]; ++j) gdst[j] += gsrc[j];
                    }
                  }
                });
  }
  return res;
}

template <typename T>
Tensor<T> slice_axis0(const Tensor<T>& t, int64_t start, int64_t len) {
  if (t.rank() < 1) throw std::invalid_argument("slice_axis0: rank >= 1 required");
  int64_t n0 = t.dim(0);
  if (start < 0 || len < 0 || start + len > n0) throw std::invalid_argument("slice_axis0: range out of bounds");
  int64_t block = t.numel() / std::max<int64_t>(n0, 1);
  Shape out_shape = t.shape();
  out_shape[0] = len;
  std::vector<T> out(static_cast<size_t>(len * block));
  std::memcpy(out.data(), t.data().data() + start * block, static_cast<size_t>(len * block) * sizeof(T));
  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "slice_axis0", {ti}, [ti, start, len, block](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      T* gx = ti->grad_buffer().data();
      for (int64_t i = 0; i < len * block; ++i) gx[start * block + i] += g[i];
    });
  }
  return res;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& t, int axis) {
  int r = t.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("mean_axis: axis out of range");
  int64_t k = t.dim(axis);
  if (k == 0) throw std::invalid_argument("mean_axis: empty axis");
  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= t.dim(i);
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= t.dim(i);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i != axis) out_shape.push_back(t.dim(i));
  }
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const T* xd = t.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < k; ++j) {
      const T* src = xd + (o * k + j) * inner;
      T* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out) v /= static_cast<T>(k);
  detail::ensure_finite<T>(out, "mean_axis");
  Tensor<T> res = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "mean_axis", {ti}, [ti, outer, k, inner](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      T* gx = ti->grad_buffer().data();
      T invk = T(1) / static_cast<T>(k);
      for (int64_t ot = 0; ot < outer; ++ot) {
        for (int64_t j = 0; j < k; ++j) {
          T* dst = gx + (ot * k + j) * inner;
          const T* src = g + ot * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i] * invk;
        }
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& t) {
  T acc = T(0);
  for (const T& v : t.data()) acc += v;
  if (!std::isfinite(static_cast<double>(acc))) throw std::runtime_error("sum_all: non-finite output");
  Tensor<T> res = Tensor<T>::scalar(acc);
  if (want_grad(t)) {
    auto ti = t.impl();
    attach_node(res, "sum_all", {ti}, [ti](const detail::TensorImpl<T>& o) {
      T g = o.grad[0];
      T* gx = ti->grad_buffer().data();
      for (size_t i = 0; i < ti->data.size(); ++i) gx[i] += g;
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
  if (x.rank() != 4) throw std::invalid_argument("conv2d_depthwise: input must be [B,C,H,W]");
  if (w.rank() != 3 || w.dim(1) != w.dim(2)) throw std::invalid_argument("conv2d_depthwise: weights must be [C,k,k]");
  if (stride <= 0) throw std::invalid_argument("conv2d_depthwise: stride must be positive");
  if (padding < 0) throw std::invalid_argument("conv2d_depthwise: negative padding");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(0) != C) throw std::invalid_argument("conv2d_depthwise: channel count mismatch");
  int64_t k = w.dim(1);
  if (H + 2 * padding < k || W + 2 * padding < k) {
    throw std::invalid_argument("conv2d_depthwise: kernel larger than padded input");
  }
  int64_t Ho = (H + 2 * padding - k) / stride + 1;
  int64_t Wo = (W + 2 * padding - k) / stride + 1;

  std::vector<T> out(static_cast<size_t>(B * C * Ho * Wo), T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const T* xc = xd + (b * C + c) * H * W;
      const T* wc = wd + c * k * k;
      T* oc = out.data() + (b * C + c) * Ho * Wo;
      for (int64_t ho = 0; ho < Ho; ++ho) {
        for (int64_t wo = 0; wo < Wo; ++wo) {
          T acc = T(0);
          for (int64_t ky = 0; ky < k; ++ky) {
            int64_t iy = ho * stride - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t ix = wo * stride - padding + kx;
              if (ix < 0 || ix >= W) continue;
              acc += xc[iy * W + ix] * wc[ky * k + kx];
            }
          }
          oc[ho * Wo + wo] = acc;
        }
      }
    }
  }
  macs::add(macs::conv_depthwise(B, C, Ho, Wo, k));
  detail::ensure_finite<T>(out, "conv2d_depthwise");

  Tensor<T> res = Tensor<T>::from_data({B, C, Ho, Wo}, std::move(out));
  if (want_grad(x, w)) {
    auto xi = x.impl();
    auto wi = w.impl();
    attach_node(res, "conv2d_depthwise", {xi, wi},
                [xi, wi, B, C, H, W, Ho, Wo, k, stride, padding](const detail::TensorImpl<T>& o) {
                  const T* g = o.grad.data();
                  const T* xd = xi->data.data();
                  const T* wd = wi->data.data();
                  T* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
                  T* gw = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
                  for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                      const T* xc = xd + (b * C + c) * H * W;
                      const T* wc = wd + c * k * k;
                      const T* gc = g + (b * C + c) * Ho * Wo;
                      T* gxc = gx ? gx + (b * C + c) * H * W : nullptr;
                      T* gwc = gw ? gw + c * k * k : nullptr;
                      for (int64_t ho = 0; ho < Ho; ++ho) {
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                          T gv = gc[ho * Wo + wo];
                          if (gv == T(0)) continue;
                          for (int64_t ky = 0; ky < k; ++ky) {
                            int64_t iy = ho * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = 0; kx < k; ++kx) {
                              int64_t ix = wo * stride - padding + kx;
                              if (ix < 0 || ix >= W) continue;
                              if (gxc) gxc[iy * W + ix] += gv * wc[ky * k + kx];
                              if (gwc) gwc[ky * k + kx] += gv * xc[iy * W + ix];
                            }
                          }
                        }
                      }
                    }
                  }
                });
  }
  return res;
}

template <typename T>
Tensor<T> conv2d_pointwise(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 4) throw std::invalid_argument("conv2d_pointwise: input must be [B,C,H,W]");
  if (w.rank() != 2) throw std::invalid_argument("conv2d_pointwise: weights must be [C_out,C_in]");
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(1) != C) throw std::invalid_argument("conv2d_pointwise: channel count mismatch");
  int64_t Co = w.dim(0);
  int64_t hw = H * W;

  std::vector<T> out(static_cast<size_t>(B * Co * hw), T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = xd + b * C * hw;
    T* ob = out.data() + b * Co * hw;
    for (int64_t co = 0; co < Co; ++co) {
      T* oc = ob + co * hw;
      for (int64_t c = 0; c < C; ++c) {
        T wv = wd[co * C + c];
        const T* xc = xb + c * hw;
        for (int64_t i = 0; i < hw; ++i) oc[i] += wv * xc[i];
      }
    }
  }
  macs::add(macs::conv_pointwise(B, C, Co, H, W));
  detail::ensure_finite<T>(out, "conv2d_pointwise");

  Tensor<T> res = Tensor<T>::from_data({B, Co, H, W}, std::move(out));
  if (want_grad(x, w)) {
    auto xi = x.impl();
    auto wi = w.impl();
    attach_node(res, "conv2d_pointwise", {xi, wi}, [xi, wi, B, C, Co, hw](const detail::TensorImpl<T>& o) {
      const T* g = o.grad.data();
      const T* xd = xi->data.data();
      const T* wd = wi->data.data();
      T* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
      T* gw = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
      for (int64_t b = 0; b < B; ++b) {
        const T* gb = g + b * Co * hw;
        const T* xb = xd + b * C * hw;
        for (int64_t co = 0; co < Co; ++co) {
          const T* gc = gb + co * hw;
          for (int64_t c = 0; c < C; ++c) {
            if (gx) {
              T wv = wd[co * C + c];
              T* gxc = gx + (b * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) gxc[i] += wv * gc[i];
            }
            if (gw) {
              const T* xc = xb + c * hw;
              T acc = T(0);
              for (int64_t i = 0; i < hw; ++i) acc += gc[i] * xc[i];
              gw[co * C + c] += acc;
            }
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& labels, T smoothing) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [B,K]");
  int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B) throw std::invalid_argument("cross_entropy: label count mismatch");
  if (smoothing < T(0) || smoothing >= T(1)) throw std::invalid_argument("cross_entropy: smoothing out of range");
  for (int y : labels) {
    if (y < 0 || y >= K) throw std::invalid_argument("cross_entropy: label out of range");
  }

  std::vector<T> probs(static_cast<size_t>(B * K));
  const T* xd = logits.data().data();
  double loss = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const T* row = xd + b * K;
    T mx = row[0];
    for (int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < K; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    double lse = static_cast<double>(mx) + std::log(sum);
    double row_loss = 0.0;
    for (int64_t j = 0; j < K; ++j) {
      double logp = static_cast<double>(row[j]) - lse;
      probs[static_cast<size_t>(b * K + j)] = static_cast<T>(std::exp(logp));
      double q = (j == labels[static_cast<size_t>(b)] ? 1.0 - static_cast<double>(smoothing) : 0.0) +
                 static_cast<double>(smoothing) / static_cast<double>(K);
      row_loss -= q * logp;
    }
    loss += row_loss;
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) throw std::runtime_error("cross_entropy: non-finite output");

  Tensor<T> res = Tensor<T>::scalar(static_cast<T>(loss));
  if (want_grad(logits)) {
    auto li = logits.impl();
    attach_node(res, "cross_entropy", {li},
                [li, probs = std::move(probs), labels, B, K, smoothing](const detail::TensorImpl<T>& o) {
                  // dlogits = (p - q) * g / B
                  T g = o.grad[0];
                  T* gx = li->grad_buffer().data();
                  T invb = g / static_cast<T>(B);
                  for (int64_t b = 0; b < B; ++b) {
                    for (int64_t j = 0; j < K; ++j) {
                      T q = (j == labels[static_cast<size_t>(b)] ? T(1) - smoothing : T(0)) +
                            smoothing / static_cast<T>(K);
                      gx[b * K + j] += (probs[static_cast<size_t>(b * K + j)] - q) * invb;
                    }
                  }
                });
  }
  return res;
}

// ---------------------------------------------------------------------------
// explicit instantiations
// ---------------------------------------------------------------------------

#define FCA_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                  \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                             \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);            \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                            \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                         \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                                       \
  template Tensor<T> slice_axis0(const Tensor<T>&, int64_t, int64_t);                               \
  template Tensor<T> mean_axis(const Tensor<T>&, int);                                              \
  template Tensor<T> sum_all(const Tensor<T>&);                                                     \
  template Tensor<T> conv2d_depthwise(const Tensor<T>&, const Tensor<T>&, int, int);                \
  template Tensor<T> conv2d_pointwise(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> cross_entropy_mean(const Tensor<T>&, const std::vector<int>&, T);

FCA_INSTANTIATE_OPS(float)
FCA_INSTANTIATE_OPS(double)

#undef FCA_INSTANTIATE_OPS

}  // namespace fca
