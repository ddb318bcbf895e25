#pragma once

#include <vector>

#include "fca/attention.hpp"
#include "fca/config.hpp"
#include "fca/tme.hpp"

namespace fca {

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1;  // [r*d, d], [r*d]
  Tensor<T> w2, b2;  // [d, r*d], [d]
};

template <typename T>
Tensor<T> ffn_forward(const FfnParams<T>& p, const Tensor<T>& x);

// One FcaFormer block: CMHA + TME + FFN in pre-norm arrangement. Feature
// switches mirror the ablation ladder; merge_weights exist whenever cross
// tokens are produced (fixed uniform averaging when TME is off).
template <typename T>
struct FcaBlock {
  int depth_index = 1;  // 1-based within the stage
  LayerNormParams<T> norm1, norm2;
  CmhaParams<T> cmha;
  std::vector<LsfVector<T>> lsf;  // size 1, or one per depth offset
  AttentionBias<T> bias;
  TmeParams<T> tme;
  FfnParams<T> ffn;
  TmeConfig tme_cfg;
  bool use_cross = true;
  bool use_lsf = true;
  bool use_tme = true;
  bool tme_residual = true;
};

// Cross tokens accumulated within one stage, ascending source depth.
// Cleared at stage entry; never shared across stages or samples.
template <typename T>
struct CrossTokenCache {
  std::vector<CrossTokenSet<T>> sets;
  CrossHistory policy = CrossHistory::AllPrevious;

  void push(CrossTokenSet<T> set);
  // Sets visible to the block at `depth`, newest first.
  std::vector<CrossTokenSet<T>> consume_view(int depth) const;
};

template <typename T>
struct BlockResult {
  TokenGrid<T> x_out;
  Tensor<T> attn;
};

// y = CMHA(norm1(x), cross) + x;  xbar = merge(y);  z = enhance(y);
// x_out = z + FFN(norm2(z));  cache gains xbar.
template <typename T>
BlockResult<T> fca_block_forward(const TokenGrid<T>& x, CrossTokenCache<T>& cache, const FcaBlock<T>& block);

// Optional per-block attention capture for inspection tools.
template <typename T>
struct StageTrace {
  std::vector<Tensor<T>> attn;
  std::vector<std::vector<CrossColumns>> cross_meta;
};

template <typename T>
TokenGrid<T> stage_forward(const TokenGrid<T>& x, const std::vector<FcaBlock<T>>& blocks,
                           CrossHistory policy, StageTrace<T>* trace = nullptr);

// -- ConvNet side -------------------------------------------------------------

// depthwise 7x7 -> layernorm -> pointwise 4x expand -> GELU -> pointwise ->
// per-channel layer scale -> residual
template <typename T>
struct ConvNextBlock {
  Tensor<T> dw;  // [C,7,7]
  LayerNormParams<T> norm;
  Tensor<T> pw1;          // [4C, C]
  Tensor<T> pw2;          // [C, 4C]
  Tensor<T> layer_scale;  // [C]
};

template <typename T>
Tensor<T> convnext_block_forward(const ConvNextBlock<T>& p, const Tensor<T>& x);

// Patchify stem: non-overlapping patch embedding (+ optional layernorm).
template <typename T>
struct StemParams {
  Tensor<T> w;  // [D1, 3*patch*patch]
  LayerNormParams<T> norm;
  int patch = 4;
  bool has_norm = true;
};

template <typename T>
Tensor<T> stem_forward(const StemParams<T>& p, const Tensor<T>& images);

// layernorm -> pointwise channel change -> depthwise 3x3 stride 2
template <typename T>
struct DownsampleParams {
  LayerNormParams<T> norm;
  Tensor<T> pw;  // [C_out, C_in]
  Tensor<T> dw;  // [C_out, 3, 3]
};

template <typename T>
Tensor<T> downsample_forward(const DownsampleParams<T>& p, const Tensor<T>& x);

}  // namespace fca
