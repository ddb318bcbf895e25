#include "fca/blocks.hpp"

#include <algorithm>
#include <stdexcept>

namespace fca {

template <typename T>
Tensor<T> ffn_forward(const FfnParams<T>& p, const Tensor<T>& x) {
  Tensor<T> h = gelu(linear(x, p.w1, &p.b1));
  return linear(h, p.w2, &p.b2);
}

template <typename T>
void CrossTokenCache<T>::push(CrossTokenSet<T> set) {
  if (!sets.empty() && sets.back().source_depth >= set.source_depth) {
    throw std::invalid_argument("cross_cache: source depths must be strictly increasing");
  }
  sets.push_back(std::move(set));
}

template <typename T>
std::vector<CrossTokenSet<T>> CrossTokenCache<T>::consume_view(int depth) const {
  int visible = consumed_sets(depth, policy);
  std::vector<CrossTokenSet<T>> view;
  for (auto it = sets.rbegin(); it != sets.rend(); ++it) {
    if (it->source_depth >= depth) continue;
    if (policy == CrossHistory::SkipLast && it->source_depth == depth - 1) continue;
    view.push_back(*it);
  }
  if (static_cast<int>(view.size()) > visible) view.resize(static_cast<size_t>(visible));
  return view;
}

template <typename T>
BlockResult<T> fca_block_forward(const TokenGrid<T>& x, CrossTokenCache<T>& cache, const FcaBlock<T>& block) {
  if (x.channels() != block.cmha.w_q.dim(0)) {
    throw std::invalid_argument("fca_block: token width does not match block width");
  }
  std::vector<CrossTokenSet<T>> consumed;
  if (block.use_cross) consumed = cache.consume_view(block.depth_index);

  CmhaCompose<T> compose;
  compose.pre_norm = &block.norm1;
  compose.residual = &x.tokens;
  CmhaResult<T> att = cmha_forward(x, std::span<const CrossTokenSet<T>>(consumed),
                                   std::span<const LsfVector<T>>(block.lsf), block.cmha, block.bias,
                                   block.depth_index, compose);
  TokenGrid<T> y{att.y, x.grid_h, x.grid_w};

  if (block.use_cross) {
    cache.push(token_merge(y, block.tme.merge_weights, block.tme_cfg, block.depth_index));
  }
  TokenGrid<T> z = block.use_tme ? token_enhance(y, block.tme.enhance_weights, block.tme_cfg, block.tme_residual)
                                 : y;
  Tensor<T> out = add(z.tokens, ffn_forward(block.ffn, apply_layernorm(block.norm2, z.tokens)));
  return BlockResult<T>{TokenGrid<T>{out, x.grid_h, x.grid_w}, att.attn};
}

template <typename T>
TokenGrid<T> stage_forward(const TokenGrid<T>& x, const std::vector<FcaBlock<T>>& blocks,
                           CrossHistory policy, StageTrace<T>* trace) {
  CrossTokenCache<T> cache;
  cache.policy = policy;
  TokenGrid<T> cur = x;
  for (const auto& block : blocks) {
    if (trace && block.use_cross) {
      auto consumed = cache.consume_view(block.depth_index);
      std::vector<CrossColumns> meta;
      for (const auto& set : consumed) meta.push_back({set.source_depth, set.tokens.dim(0)});
      trace->cross_meta.push_back(std::move(meta));
    } else if (trace) {
      trace->cross_meta.push_back({});
    }
    BlockResult<T> r = fca_block_forward(cur, cache, block);
    if (trace) trace->attn.push_back(r.attn);
    cur = r.x_out;
  }
  return cur;
}

template <typename T>
Tensor<T> convnext_block_forward(const ConvNextBlock<T>& p, const Tensor<T>& x) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> u = conv2d_depthwise(x, p.dw, 1, 3);
  // channel-last token view for norm and the pointwise MLP
  Tensor<T> tok = reshape(permute(u, {0, 2, 3, 1}), {B * H * W, C});
  tok = apply_layernorm(p.norm, tok);
  tok = linear(tok, p.pw1);
  tok = gelu(tok);
  tok = linear(tok, p.pw2);
  tok = channel_scale(tok, p.layer_scale);
  Tensor<T> back = permute(reshape(tok, {B, H, W, C}), {0, 3, 1, 2});
  return add(x, back);
}

template <typename T>
Tensor<T> stem_forward(const StemParams<T>& p, const Tensor<T>& images) {
  if (images.rank() != 4) throw std::invalid_argument("stem: images must be [B,3,H,W]");
  int64_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  int ps = p.patch;
  if (H % ps != 0 || W % ps != 0) throw std::invalid_argument("stem: input size not divisible by patch size");
  int64_t gh = H / ps, gw = W / ps;
  int64_t d1 = p.w.dim(0);
  // non-overlapping patches: [B,C,gh,ps,gw,ps] -> [B,gh,gw,C,ps,ps] -> rows
  Tensor<T> patches = reshape(images, {B, C, gh, ps, gw, ps});
  patches = permute(patches, {0, 2, 4, 1, 3, 5});
  Tensor<T> rows = reshape(patches, {B * gh * gw, C * ps * ps});
  Tensor<T> emb = linear(rows, p.w);
  if (p.has_norm) emb = apply_layernorm(p.norm, emb);
  return permute(reshape(emb, {B, gh, gw, d1}), {0, 3, 1, 2});
}

template <typename T>
Tensor<T> downsample_forward(const DownsampleParams<T>& p, const Tensor<T>& x) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw std::invalid_argument("downsample: spatial size not divisible by 2");
  Tensor<T> tok = reshape(permute(x, {0, 2, 3, 1}), {B * H * W, C});
  tok = apply_layernorm(p.norm, tok);
  Tensor<T> map = permute(reshape(tok, {B, H, W, C}), {0, 3, 1, 2});
  map = conv2d_pointwise(map, p.pw);
  return conv2d_depthwise(map, p.dw, 2, 1);
}

#define FCA_INSTANTIATE_BLOCKS(T)                                                                     \
  template Tensor<T> ffn_forward(const FfnParams<T>&, const Tensor<T>&);                              \
  template struct CrossTokenCache<T>;                                                                 \
  template BlockResult<T> fca_block_forward(const TokenGrid<T>&, CrossTokenCache<T>&, const FcaBlock<T>&); \
  template TokenGrid<T> stage_forward(const TokenGrid<T>&, const std::vector<FcaBlock<T>>&, CrossHistory, \
                                      StageTrace<T>*);                                                \
  template Tensor<T> convnext_block_forward(const ConvNextBlock<T>&, const Tensor<T>&);               \
  template Tensor<T> stem_forward(const StemParams<T>&, const Tensor<T>&);                            \
  template Tensor<T> downsample_forward(const DownsampleParams<T>&, const Tensor<T>&);

FCA_INSTANTIATE_BLOCKS(float)
FCA_INSTANTIATE_BLOCKS(double)

#undef FCA_INSTANTIATE_BLOCKS

}  // namespace fca
