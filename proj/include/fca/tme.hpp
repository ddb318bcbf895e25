#pragma once

#include "fca/attention.hpp"
#include "fca/tensor.hpp"

namespace fca {

// Token merge & enhancement geometry. Merge: large-kernel large-stride
// depthwise conv producing the cross tokens; enhance: 3x3 stride-1 depthwise
// conv mixing tokens locally.
struct TmeConfig {
  int merge_kernel = 7;
  int merge_stride = 4;
  int enhance_kernel = 3;
};

void validate_tme_config(const TmeConfig& cfg);

template <typename T>
struct TmeParams {
  Tensor<T> merge_weights;    // [d, merge_kernel, merge_kernel]
  Tensor<T> enhance_weights;  // [d, enhance_kernel, enhance_kernel]
};

// [n,d] tokens on an HxW grid  <->  [1,d,H,W] feature map
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, int grid_h, int grid_w);
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);

// Merge y into ceil(H/s) x ceil(W/s) cross tokens tagged with their source
// depth ("same"-style padding (k-1)/2).
template <typename T>
CrossTokenSet<T> token_merge(const TokenGrid<T>& y, const Tensor<T>& merge_weights, const TmeConfig& cfg,
                             int current_depth);

// z = y + depthwise3x3(y); grid shape preserved. `residual=false` gives the
// bare convolution output instead.
template <typename T>
TokenGrid<T> token_enhance(const TokenGrid<T>& y, const Tensor<T>& enhance_weights, const TmeConfig& cfg,
                           bool residual = true);

// Merged grid extent under "same" padding: ceil(extent / stride).
int64_t merged_extent(int64_t extent, int stride);

}  // namespace fca
