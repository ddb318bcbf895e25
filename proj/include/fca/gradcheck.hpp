#pragma once

#include <functional>
#include <span>

#include "fca/tensor.hpp"

namespace fca {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
};

// Compares reverse-mode gradients of the scalar f() against central finite
// differences, coordinate by coordinate. For each sampled coordinate:
//   rel = |ad - fd| / (|ad| + |fd| + 1e-12)
// f must be deterministic and must rebuild its graph from the current
// parameter values on every call. Parameters with more elements than
// max_coords_per_param are subsampled with the seeded generator.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, double eps,
                           int max_coords_per_param = 24, uint64_t seed = 0);

extern template GradCheckResult grad_check(const std::function<Tensor<float>()>&, std::span<Tensor<float>>,
                                           double, int, uint64_t);
extern template GradCheckResult grad_check(const std::function<Tensor<double>()>&, std::span<Tensor<double>>,
                                           double, int, uint64_t);

}  // namespace fca
