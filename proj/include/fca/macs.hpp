#pragma once

#include <cstdint>

// Multiply-accumulate accounting shared by the runtime kernels and the
// analytic cost model. One MAC is one multiply paired with one accumulate;
// kernels made of bare adds, comparisons or transcendentals (softmax, GELU,
// residuals, LSF scaling, pooling) contribute zero. Layer normalization
// contributes 2 MACs per element: the variance accumulation and the affine.
// Because cost.cpp sums exactly these formulas over the model's shape plan,
// instrumented totals and closed-form totals must agree to the last MAC.
namespace fca::macs {

void reset();
void set_enabled(bool on);
bool enabled();
int64_t total();
void add(int64_t n);

inline int64_t matmul(int64_t batch, int64_t p, int64_t q, int64_t r) {
  return batch * p * q * r;
}
inline int64_t linear(int64_t rows, int64_t in, int64_t out) {
  return rows * in * out;
}
inline int64_t conv_depthwise(int64_t b, int64_t c, int64_t out_h, int64_t out_w, int64_t k) {
  return b * c * out_h * out_w * k * k;
}
inline int64_t conv_pointwise(int64_t b, int64_t cin, int64_t cout, int64_t h, int64_t w) {
  return b * cin * cout * h * w;
}
inline int64_t layernorm(int64_t numel) { return 2 * numel; }

// Zeroes and enables the counter for one measured region.
class CounterScope {
 public:
  CounterScope();
  ~CounterScope();
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;
  int64_t count() const { return total(); }

 private:
  bool prev_;
};

}  // namespace fca::macs
