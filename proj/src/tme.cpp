#include "fca/tme.hpp"

#include <stdexcept>

namespace fca {

void validate_tme_config(const TmeConfig& cfg) {
  if (cfg.merge_stride < 1) throw std::invalid_argument("tme: merge stride must be >= 1");
  if (cfg.merge_kernel < 1 || cfg.merge_kernel % 2 == 0 || cfg.enhance_kernel < 1 || cfg.enhance_kernel % 2 == 0) {
    throw std::invalid_argument("tme: kernels must be odd");
  }
}

int64_t merged_extent(int64_t extent, int stride) { return (extent + stride - 1) / stride; }

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, int grid_h, int grid_w) {
  int64_t d = tokens.dim(1);
  Tensor<T> hw = reshape(tokens, {grid_h, grid_w, d});
  return reshape(permute(hw, {2, 0, 1}), {1, d, grid_h, grid_w});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  int64_t d = map.dim(1), h = map.dim(2), w = map.dim(3);
  Tensor<T> chw = reshape(map, {d, h, w});
  return reshape(permute(chw, {1, 2, 0}), {h * w, d});
}

template <typename T>
CrossTokenSet<T> token_merge(const TokenGrid<T>& y, const Tensor<T>& merge_weights, const TmeConfig& cfg,
                             int current_depth) {
  validate_tme_config(cfg);
  if (y.grid_h < 1 || y.grid_w < 1) throw std::invalid_argument("token_merge: empty grid");
  Tensor<T> map = tokens_to_map(y.tokens, y.grid_h, y.grid_w);
  int pad = (cfg.merge_kernel - 1) / 2;
  Tensor<T> merged = conv2d_depthwise(map, merge_weights, cfg.merge_stride, pad);
  CrossTokenSet<T> set;
  set.coarse_h = static_cast<int>(merged.dim(2));
  set.coarse_w = static_cast<int>(merged.dim(3));
  set.tokens = map_to_tokens(merged);
  set.source_depth = current_depth;
  return set;
}

template <typename T>
TokenGrid<T> token_enhance(const TokenGrid<T>& y, const Tensor<T>& enhance_weights, const TmeConfig& cfg,
                           bool residual) {
  validate_tme_config(cfg);
  Tensor<T> map = tokens_to_map(y.tokens, y.grid_h, y.grid_w);
  int pad = (cfg.enhance_kernel - 1) / 2;
  Tensor<T> mixed = conv2d_depthwise(map, enhance_weights, 1, pad);
  Tensor<T> z = map_to_tokens(mixed);
  if (residual) z = add(y.tokens, z);
  return TokenGrid<T>{z, y.grid_h, y.grid_w};
}

#define FCA_INSTANTIATE_TME(T)                                                                      \
  template Tensor<T> tokens_to_map(const Tensor<T>&, int, int);                                     \
  template Tensor<T> map_to_tokens(const Tensor<T>&);                                               \
  template CrossTokenSet<T> token_merge(const TokenGrid<T>&, const Tensor<T>&, const TmeConfig&, int); \
  template TokenGrid<T> token_enhance(const TokenGrid<T>&, const Tensor<T>&, const TmeConfig&, bool);

FCA_INSTANTIATE_TME(float)
FCA_INSTANTIATE_TME(double)

#undef FCA_INSTANTIATE_TME

}  // namespace fca
