#pragma once

#include <span>
#include <vector>

#include "fca/ops.hpp"
#include "fca/rng.hpp"
#include "fca/tensor.hpp"

namespace fca {

// Regular token sequence of one block with its 2-D grid metadata.
template <typename T>
struct TokenGrid {
  Tensor<T> tokens;  // [n, d]
  int grid_h = 0;
  int grid_w = 0;

  int64_t count() const { return tokens.dim(0); }
  int64_t channels() const { return tokens.dim(1); }
};

template <typename T>
TokenGrid<T> make_token_grid(Tensor<T> tokens, int grid_h, int grid_w);

// Merged cross tokens produced by an earlier block in the same stage.
template <typename T>
struct CrossTokenSet {
  Tensor<T> tokens;  // [m_j, d]
  int source_depth = 0;
  int coarse_h = 0;
  int coarse_w = 0;
};

// Per-channel calibration vector for cross tokens (one per consuming block).
template <typename T>
struct LsfVector {
  Tensor<T> alpha;  // [d]
};

template <typename T>
struct CmhaParams {
  Tensor<T> w_q, w_k, w_v, w_p;  // [d, d]; applied as x.W^T
  Tensor<T> b_q, b_k, b_v, b_p;  // optional, undefined when projections are bias-free
  int heads = 1;

  int64_t head_dim() const { return w_q.dim(0) / heads; }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  T eps = T(1e-6);
};

template <typename T>
Tensor<T> apply_layernorm(const LayerNormParams<T>& p, const Tensor<T>& x);

// (source depth, column count) of one consumed cross set, in K/V order.
struct CrossColumns {
  int source_depth = 0;
  int64_t count = 0;
};

// Attention bias tables: relative position for regular columns, relative
// depth for cross columns. pos_index maps (query, key) pairs of the n-token
// grid to slots of the (2h-1)(2w-1) offset table.
template <typename T>
struct AttentionBias {
  Tensor<T> pos_table;   // [heads, (2*grid_h-1)*(2*grid_w-1)]
  Tensor<T> depth_bias;  // [heads, max_depth_offset]
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int32_t> pos_index;  // n*n slots

  int heads() const { return static_cast<int>(pos_table.dim(0)); }
  int64_t tokens() const { return static_cast<int64_t>(grid_h) * grid_w; }
  int max_depth_offset() const { return static_cast<int>(depth_bias.dim(1)); }
};

template <typename T>
AttentionBias<T> make_attention_bias(int heads, int grid_h, int grid_w, int max_depth_offset,
                                     SplitMix64& rng, T init_std);

// Row-concatenation of the regular tokens with the LSF-scaled cross tokens,
// in the given cross order (descending source depth by convention). Queries
// are never extended; this feeds the K and V projections only.
template <typename T>
Tensor<T> assemble_kv_input(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                            const LsfVector<T>& alpha, int current_depth);

// Realized bias matrix [heads, n, n + m_total]: regular columns gather from
// pos_table, cross columns replicate depth_bias[head, depth offset].
template <typename T>
Tensor<T> build_bias(const AttentionBias<T>& bias, std::span<const CrossColumns> cross_meta,
                     int current_depth);

template <typename T>
struct CmhaResult {
  Tensor<T> y;     // [n, d]
  Tensor<T> attn;  // [heads, n, n + m_total]
};

// Hooks for embedding CMHA in a pre-norm block: `pre_norm` is applied to the
// regular tokens and to every LSF-scaled cross set before the projections;
// `residual` replaces x_prev as the tensor added after the output projection
// (the block passes the raw, un-normalized input here).
template <typename T>
struct CmhaCompose {
  const LayerNormParams<T>* pre_norm = nullptr;
  const Tensor<T>* residual = nullptr;
};

// Cross multi-head attention, Q from regular tokens only, K/V from regular
// plus calibrated cross tokens, biased logits, exactly n output tokens:
//   y = residual + W^P [ softmax(Q K^T / sqrt(head_dim) + B) V ]
// `alphas` holds one shared LSF vector, or one per depth offset when the
// per-source variant is enabled (alpha for offset o at index min(o-1, last)).
template <typename T>
CmhaResult<T> cmha_forward(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                           std::span<const LsfVector<T>> alphas, const CmhaParams<T>& params,
                           const AttentionBias<T>& bias, int current_depth,
                           const CmhaCompose<T>& compose = {});

template <typename T>
CmhaResult<T> cmha_forward(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                           const LsfVector<T>& alpha, const CmhaParams<T>& params,
                           const AttentionBias<T>& bias, int current_depth,
                           const CmhaCompose<T>& compose = {});

}  // namespace fca
