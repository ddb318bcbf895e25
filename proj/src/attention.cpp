#include "fca/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fca {

template <typename T>
TokenGrid<T> make_token_grid(Tensor<T> tokens, int grid_h, int grid_w) {
  if (tokens.rank() != 2) throw std::invalid_argument("token_grid: tokens must be [n, d]");
  if (grid_h < 1 || grid_w < 1 || tokens.dim(0) != static_cast<int64_t>(grid_h) * grid_w) {
    throw std::invalid_argument("token_grid: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                " does not match token count " + std::to_string(tokens.dim(0)));
  }
  return TokenGrid<T>{std::move(tokens), grid_h, grid_w};
}

template <typename T>
Tensor<T> apply_layernorm(const LayerNormParams<T>& p, const Tensor<T>& x) {
  return layernorm(x, p.gamma, p.beta, p.eps);
}

template <typename T>
AttentionBias<T> make_attention_bias(int heads, int grid_h, int grid_w, int max_depth_offset,
                                     SplitMix64& rng, T init_std) {
  if (heads < 1 || grid_h < 1 || grid_w < 1 || max_depth_offset < 1) {
    throw std::invalid_argument("attention_bias: invalid geometry");
  }
  AttentionBias<T> bias;
  bias.grid_h = grid_h;
  bias.grid_w = grid_w;
  int64_t table = static_cast<int64_t>(2 * grid_h - 1) * (2 * grid_w - 1);
  std::vector<T> pos(static_cast<size_t>(heads * table));
  for (auto& v : pos) v = static_cast<T>(rng.truncated_normal(static_cast<double>(init_std)));
  bias.pos_table = Tensor<T>::from_data({heads, table}, std::move(pos)).set_requires_grad(true);
  std::vector<T> dep(static_cast<size_t>(heads * max_depth_offset));
  for (auto& v : dep) v = static_cast<T>(rng.truncated_normal(static_cast<double>(init_std)));
  bias.depth_bias = Tensor<T>::from_data({heads, max_depth_offset}, std::move(dep)).set_requires_grad(true);

  // slot((qy,qx),(ky,kx)) = (qy-ky+h-1)*(2w-1) + (qx-kx+w-1)
  int64_t n = static_cast<int64_t>(grid_h) * grid_w;
  bias.pos_index.resize(static_cast<size_t>(n * n));
  for (int64_t qi = 0; qi < n; ++qi) {
    int qy = static_cast<int>(qi) / grid_w, qx = static_cast<int>(qi) % grid_w;
    for (int64_t ki = 0; ki < n; ++ki) {
      int ky = static_cast<int>(ki) / grid_w, kx = static_cast<int>(ki) % grid_w;
      int dy = qy - ky + grid_h - 1;
      int dx = qx - kx + grid_w - 1;
      bias.pos_index[static_cast<size_t>(qi * n + ki)] = static_cast<int32_t>(dy * (2 * grid_w - 1) + dx);
    }
  }
  return bias;
}

namespace {

template <typename T>
const LsfVector<T>& alpha_for_offset(std::span<const LsfVector<T>> alphas, int offset) {
  if (alphas.empty()) throw std::invalid_argument("cmha: no LSF vector supplied");
  size_t idx = std::min(static_cast<size_t>(offset > 0 ? offset - 1 : 0), alphas.size() - 1);
  return alphas[idx];
}

// Shared row assembly: regular tokens (optionally pre-normed) followed by the
// alpha-scaled (then optionally pre-normed) cross sets, in the given order.
template <typename T>
Tensor<T> assemble_rows(const Tensor<T>& regular, std::span<const CrossTokenSet<T>> cross,
                        std::span<const LsfVector<T>> alphas, int current_depth,
                        const LayerNormParams<T>* norm) {
  int64_t d = regular.dim(1);
  if (cross.empty()) return regular;
  std::vector<Tensor<T>> rows;
  rows.reserve(cross.size() + 1);
  rows.push_back(regular);
  for (const auto& set : cross) {
    if (set.tokens.dim(1) != d) {
      throw std::invalid_argument("cmha: cross token width " + std::to_string(set.tokens.dim(1)) +
                                  " does not match channel width " + std::to_string(d));
    }
    if (set.source_depth >= current_depth) {
      throw std::invalid_argument("cmha: cross set source depth " + std::to_string(set.source_depth) +
                                  " not earlier than current depth " + std::to_string(current_depth));
    }
    const LsfVector<T>& a = alpha_for_offset(alphas, current_depth - set.source_depth);
    Tensor<T> scaled = channel_scale(set.tokens, a.alpha);
    rows.push_back(norm ? apply_layernorm(*norm, scaled) : scaled);
  }
  return concat(std::span<const Tensor<T>>(rows), 0);
}

}  // namespace

template <typename T>
Tensor<T> assemble_kv_input(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                            const LsfVector<T>& alpha, int current_depth) {
  std::span<const LsfVector<T>> alphas(&alpha, 1);
  return assemble_rows(x_prev.tokens, cross, alphas, current_depth, static_cast<const LayerNormParams<T>*>(nullptr));
}

template <typename T>
Tensor<T> build_bias(const AttentionBias<T>& bias, std::span<const CrossColumns> cross_meta,
                     int current_depth) {
  int heads = bias.heads();
  int64_t n = bias.tokens();
  int64_t m_total = 0;
  for (const auto& meta : cross_meta) {
    int offset = current_depth - meta.source_depth;
    if (offset < 1 || offset >= bias.max_depth_offset()) {
      throw std::invalid_argument("build_bias: depth offset " + std::to_string(offset) +
                                  " out of table range [1, " + std::to_string(bias.max_depth_offset()) + ")");
    }
    m_total += meta.count;
  }
  int64_t cols = n + m_total;
  int64_t table = bias.pos_table.dim(1);
  int64_t depth_w = bias.depth_bias.dim(1);

  std::vector<T> out(static_cast<size_t>(heads * n * cols));
  const T* pos = bias.pos_table.data().data();
  const T* dep = bias.depth_bias.data().data();
  for (int h = 0; h < heads; ++h) {
    const T* pos_h = pos + static_cast<int64_t>(h) * table;
    const T* dep_h = dep + static_cast<int64_t>(h) * depth_w;
    for (int64_t i = 0; i < n; ++i) {
      T* row = out.data() + (static_cast<int64_t>(h) * n + i) * cols;
      const int32_t* idx = bias.pos_index.data() + i * n;
      for (int64_t j = 0; j < n; ++j) row[j] = pos_h[idx[j]];
      int64_t col = n;
      for (const auto& meta : cross_meta) {
        T v = dep_h[current_depth - meta.source_depth];
        for (int64_t j = 0; j < meta.count; ++j) row[col + j] = v;
        col += meta.count;
      }
    }
  }

  Tensor<T> res = Tensor<T>::from_data({heads, n, cols}, std::move(out));
  bool wants = grad_enabled() && (bias.pos_table.requires_grad() || bias.depth_bias.requires_grad());
  if (wants) {
    auto pi = bias.pos_table.impl();
    auto di = bias.depth_bias.impl();
    std::vector<CrossColumns> meta_copy(cross_meta.begin(), cross_meta.end());
    auto index = bias.pos_index;  // shared snapshot for the closure
    attach_node(res, "build_bias", {pi, di},
                [pi, di, meta_copy, index, heads, n, cols, table, depth_w,
                 current_depth](const detail::TensorImpl<T>& o) {
                  const T* g = o.grad.data();
                  T* gp = pi->requires_grad ? pi->grad_buffer().data() : nullptr;
                  T* gd = di->requires_grad ? di->grad_buffer().data() : nullptr;
                  for (int h = 0; h < heads; ++h) {
                    for (int64_t i = 0; i < n; ++i) {
                      const T* row = g + (static_cast<int64_t>(h) * n + i) * cols;
                      if (gp) {
                        const int32_t* idx = index.data() + i * n;
                        T* gp_h = gp + static_cast<int64_t>(h) * table;
                        for (int64_t j = 0; j < n; ++j) gp_h[idx[j]] += row[j];
                      }
                      if (gd) {
                        int64_t col = n;
                        T* gd_h = gd + static_cast<int64_t>(h) * depth_w;
                        for (const auto& meta : meta_copy) {
                          T acc = T(0);
                          for (int64_t j = 0; j < meta.count; ++j) acc += row[col + j];
                          gd_h[current_depth - meta.source_depth] += acc;
                          col += meta.count;
                        }
                      }
                    }
                  }
                });
  }
  return res;
}

template <typename T>
CmhaResult<T> cmha_forward(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                           std::span<const LsfVector<T>> alphas, const CmhaParams<T>& params,
                           const AttentionBias<T>& bias, int current_depth, const CmhaCompose<T>& compose) {
  int64_t n = x_prev.count();
  int64_t d = x_prev.channels();
  if (n < 1) throw std::invalid_argument("cmha: at least one regular token required");
  if (params.w_q.dim(0) != d || d % params.heads != 0) {
    throw std::invalid_argument("cmha: projection width or head count mismatch");
  }
  if (bias.tokens() != n) throw std::invalid_argument("cmha: bias grid does not match token count");
  int heads = params.heads;
  int64_t hd = d / heads;

  Tensor<T> x_in = compose.pre_norm ? apply_layernorm(*compose.pre_norm, x_prev.tokens) : x_prev.tokens;
  Tensor<T> kv_rows = assemble_rows(x_in, cross, alphas, current_depth, compose.pre_norm);
  int64_t m2 = kv_rows.dim(0);

  Tensor<T> q = linear(x_in, params.w_q, params.b_q.defined() ? &params.b_q : nullptr);
  Tensor<T> k = linear(kv_rows, params.w_k, params.b_k.defined() ? &params.b_k : nullptr);
  Tensor<T> v = linear(kv_rows, params.w_v, params.b_v.defined() ? &params.b_v : nullptr);

  Tensor<T> qh = permute(reshape(q, {n, heads, hd}), {1, 0, 2});
  Tensor<T> kh = permute(reshape(k, {m2, heads, hd}), {1, 0, 2});
  Tensor<T> vh = permute(reshape(v, {m2, heads, hd}), {1, 0, 2});

  Tensor<T> logits = scale(matmul(qh, transpose(kh, 1, 2)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  std::vector<CrossColumns> meta;
  meta.reserve(cross.size());
  for (const auto& set : cross) meta.push_back({set.source_depth, set.tokens.dim(0)});
  logits = add(logits, build_bias(bias, meta, current_depth));

  Tensor<T> attn = softmax_lastdim(logits);
  Tensor<T> ctx = matmul(attn, vh);                                // [heads, n, hd]
  Tensor<T> merged = reshape(permute(ctx, {1, 0, 2}), {n, d});
  Tensor<T> proj = linear(merged, params.w_p, params.b_p.defined() ? &params.b_p : nullptr);
  const Tensor<T>& residual = compose.residual ? *compose.residual : x_prev.tokens;
  return CmhaResult<T>{add(residual, proj), attn};
}

template <typename T>
CmhaResult<T> cmha_forward(const TokenGrid<T>& x_prev, std::span<const CrossTokenSet<T>> cross,
                           const LsfVector<T>& alpha, const CmhaParams<T>& params,
                           const AttentionBias<T>& bias, int current_depth, const CmhaCompose<T>& compose) {
  std::span<const LsfVector<T>> alphas(&alpha, 1);
  return cmha_forward(x_prev, cross, alphas, params, bias, current_depth, compose);
}

#define FCA_INSTANTIATE_ATTENTION(T)                                                                      \
  template TokenGrid<T> make_token_grid(Tensor<T>, int, int);                                             \
  template Tensor<T> apply_layernorm(const LayerNormParams<T>&, const Tensor<T>&);                        \
  template AttentionBias<T> make_attention_bias(int, int, int, int, SplitMix64&, T);                      \
  template Tensor<T> assemble_kv_input(const TokenGrid<T>&, std::span<const CrossTokenSet<T>>,            \
                                       const LsfVector<T>&, int);                                         \
  template Tensor<T> build_bias(const AttentionBias<T>&, std::span<const CrossColumns>, int);             \
  template CmhaResult<T> cmha_forward(const TokenGrid<T>&, std::span<const CrossTokenSet<T>>,             \
                                      std::span<const LsfVector<T>>, const CmhaParams<T>&,                \
                                      const AttentionBias<T>&, int, const CmhaCompose<T>&);               \
  template CmhaResult<T> cmha_forward(const TokenGrid<T>&, std::span<const CrossTokenSet<T>>,             \
                                      const LsfVector<T>&, const CmhaParams<T>&, const AttentionBias<T>&, \
                                      int, const CmhaCompose<T>&);

FCA_INSTANTIATE_ATTENTION(float)
FCA_INSTANTIATE_ATTENTION(double)

#undef FCA_INSTANTIATE_ATTENTION

}  // namespace fca
