#include "fca/gradcheck.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fca/rng.hpp"

namespace fca {

template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, double eps,
                           int max_coords_per_param, uint64_t seed) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  zero_grad(params);
  Tensor<T> loss = f();
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  backward(loss);

  std::vector<std::vector<T>> ad(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) {
      ad[i].assign(params[i].grad().begin(), params[i].grad().end());
    } else {
      ad[i].assign(static_cast<size_t>(params[i].numel()), T(0));
    }
  }

  GradCheckResult result;
  SplitMix64 rng(seed);
  NoGradGuard no_grad;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    int64_t n = static_cast<int64_t>(data.size());
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int c = 0; c < max_coords_per_param; ++c) {
        coords.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
      }
    }
    for (int64_t c : coords) {
      T orig = data[static_cast<size_t>(c)];
      data[static_cast<size_t>(c)] = orig + static_cast<T>(eps);
      double fp = static_cast<double>(f().item());
      data[static_cast<size_t>(c)] = orig - static_cast<T>(eps);
      double fm = static_cast<double>(f().item());
      data[static_cast<size_t>(c)] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double adv = static_cast<double>(ad[pi][static_cast<size_t>(c)]);
      double rel = std::abs(adv - fd) / (std::abs(adv) + std::abs(fd) + 1e-12);
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.coords_checked;
    }
  }
  return result;
}

template GradCheckResult grad_check(const std::function<Tensor<float>()>&, std::span<Tensor<float>>, double,
                                    int, uint64_t);
template GradCheckResult grad_check(const std::function<Tensor<double>()>&, std::span<Tensor<double>>, double,
                                    int, uint64_t);

}  // namespace fca
