#include "fca/model.hpp"

#include <stdexcept>

#include "fca/rng.hpp"

namespace fca {

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> trunc_normal_tensor(Shape shape, SplitMix64& rng, bool learnable = true) {
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(kInitStd));
  return Tensor<T>::from_data(std::move(shape), std::move(v)).set_requires_grad(learnable);
}

template <typename T>
Tensor<T> const_tensor(Shape shape, T value, bool learnable) {
  return Tensor<T>::full(std::move(shape), value).set_requires_grad(learnable);
}

template <typename T>
LayerNormParams<T> make_norm(int64_t d) {
  LayerNormParams<T> p;
  p.gamma = const_tensor<T>({d}, T(1), true);
  p.beta = const_tensor<T>({d}, T(0), true);
  return p;
}

template <typename T>
ConvNextBlock<T> build_convnext_block(int width, SplitMix64& rng) {
  ConvNextBlock<T> b;
  int64_t c = width;
  b.dw = trunc_normal_tensor<T>({c, 7, 7}, rng);
  b.norm = make_norm<T>(c);
  b.pw1 = trunc_normal_tensor<T>({4 * c, c}, rng);
  b.pw2 = trunc_normal_tensor<T>({c, 4 * c}, rng);
  b.layer_scale = const_tensor<T>({c}, T(1e-6), true);
  return b;
}

template <typename T>
FcaBlock<T> build_fca_block(const ModelConfig& cfg, const StageInfo& st, int depth_index,
                            int max_depth_offset, SplitMix64& rng) {
  FcaBlock<T> b;
  b.depth_index = depth_index;
  b.tme_cfg = cfg.tme;
  b.use_cross = cfg.flags.use_cross;
  b.use_lsf = cfg.flags.use_lsf;
  b.use_tme = cfg.flags.use_tme;
  b.tme_residual = cfg.tme_residual;

  int64_t d = st.width;
  b.norm1 = make_norm<T>(d);
  b.cmha.heads = st.heads;
  b.cmha.w_q = trunc_normal_tensor<T>({d, d}, rng);
  b.cmha.w_k = trunc_normal_tensor<T>({d, d}, rng);
  b.cmha.w_v = trunc_normal_tensor<T>({d, d}, rng);
  b.cmha.w_p = trunc_normal_tensor<T>({d, d}, rng);
  if (cfg.qkv_bias) {
    b.cmha.b_q = const_tensor<T>({d}, T(0), true);
    b.cmha.b_k = const_tensor<T>({d}, T(0), true);
    b.cmha.b_v = const_tensor<T>({d}, T(0), true);
    b.cmha.b_p = const_tensor<T>({d}, T(0), true);
  }
  int lsf_count = (cfg.flags.use_lsf && cfg.lsf_per_source) ? std::max(depth_index - 1, 1) : 1;
  for (int i = 0; i < lsf_count; ++i) {
    b.lsf.push_back(LsfVector<T>{const_tensor<T>({d}, T(1), cfg.flags.use_lsf)});
  }
  b.bias = make_attention_bias<T>(st.heads, st.grid_h, st.grid_w, max_depth_offset, rng, static_cast<T>(kInitStd));
  b.bias.depth_bias.set_requires_grad(cfg.flags.use_cross);
  // merge weights start as local averaging; they become learnable with TME
  int mk = cfg.tme.merge_kernel, ek = cfg.tme.enhance_kernel;
  b.tme.merge_weights = const_tensor<T>({d, mk, mk}, T(1) / static_cast<T>(mk * mk), cfg.flags.use_tme);
  b.tme.enhance_weights = const_tensor<T>({d, ek, ek}, T(0), cfg.flags.use_tme);
  b.norm2 = make_norm<T>(d);
  int64_t hidden = static_cast<int64_t>(cfg.ffn_ratio) * d;
  b.ffn.w1 = trunc_normal_tensor<T>({hidden, d}, rng);
  b.ffn.b1 = const_tensor<T>({hidden}, T(0), true);
  b.ffn.w2 = trunc_normal_tensor<T>({d, hidden}, rng);
  b.ffn.b2 = const_tensor<T>({d}, T(0), true);
  return b;
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  Model<T> m;
  m.cfg = cfg;
  m.cfg.seed = seed;
  m.plan = plan_model(m.cfg);
  SplitMix64 rng(mix_seed(seed, 0xF0CAULL));

  m.stem.patch = m.plan.patch;
  m.stem.has_norm = !m.plan.plain;
  int64_t d1 = m.cfg.widths[0];
  m.stem.w = trunc_normal_tensor<T>({d1, 3LL * m.plan.patch * m.plan.patch}, rng);
  if (m.stem.has_norm) m.stem.norm = make_norm<T>(d1);

  for (const StageInfo& st : m.plan.stages) {
    if (st.downsample_before) {
      DownsampleParams<T> ds;
      ds.norm = make_norm<T>(st.prev_width);
      ds.pw = trunc_normal_tensor<T>({st.width, st.prev_width}, rng);
      ds.dw = trunc_normal_tensor<T>({st.width, 3, 3}, rng);
      m.downsamples.push_back(std::move(ds));
    }
    if (st.is_fca) {
      FcaStage<T> stage;
      for (int l = 1; l <= st.depth; ++l) {
        stage.blocks.push_back(build_fca_block<T>(m.cfg, st, l, m.plan.max_depth_offset, rng));
      }
      m.fca_stages.push_back(std::move(stage));
    } else {
      ConvStage<T> stage;
      for (int l = 0; l < st.depth; ++l) stage.blocks.push_back(build_convnext_block<T>(st.width, rng));
      m.conv_stages.push_back(std::move(stage));
    }
  }

  m.head_norm = make_norm<T>(m.plan.head_width);
  m.head_w = trunc_normal_tensor<T>({m.cfg.num_classes, m.plan.head_width}, rng);
  m.head_b = const_tensor<T>({m.cfg.num_classes}, T(0), true);
  return m;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  return build_model<T>(cfg, cfg.seed);
}

template <typename T>
Tensor<T> model_forward(const Model<T>& m, const Tensor<T>& images, ForwardTrace<T>* trace) {
  if (images.rank() != 4 || images.dim(1) != 3) throw std::invalid_argument("forward: images must be [B,3,H,W]");
  if (images.dim(2) != m.cfg.input_size || images.dim(3) != m.cfg.input_size) {
    throw std::invalid_argument("forward: image size does not match the configured input size");
  }
  int64_t B = images.dim(0);
  Tensor<T> x = stem_forward(m.stem, images);

  size_t ds_i = 0, conv_i = 0, fca_i = 0;
  for (size_t si = 0; si < m.plan.stages.size(); ++si) {
    const StageInfo& st = m.plan.stages[si];
    if (st.downsample_before) x = downsample_forward(m.downsamples[ds_i++], x);
    if (st.is_fca) {
      const FcaStage<T>& stage = m.fca_stages[fca_i++];
      if (stage.blocks.empty()) continue;
      int abs_stage = static_cast<int>(si) + 1;
      std::vector<Tensor<T>> outs;
      outs.reserve(static_cast<size_t>(B));
      for (int64_t b = 0; b < B; ++b) {
        Tensor<T> one = B == 1 ? x : slice_axis0(x, b, 1);
        TokenGrid<T> grid = make_token_grid(map_to_tokens(one), st.grid_h, st.grid_w);
        StageTrace<T> strace;
        TokenGrid<T> out = stage_forward(grid, stage.blocks, m.cfg.cross_history, trace ? &strace : nullptr);
        if (trace) {
          for (size_t bi = 0; bi < strace.attn.size(); ++bi) {
            trace->records.push_back(AttnRecord<T>{abs_stage, static_cast<int>(bi) + 1, static_cast<int>(b),
                                                   strace.attn[bi], strace.cross_meta[bi]});
          }
        }
        outs.push_back(tokens_to_map(out.tokens, st.grid_h, st.grid_w));
      }
      x = outs.size() == 1 ? outs[0] : concat(std::span<const Tensor<T>>(outs), 0);
    } else {
      const ConvStage<T>& stage = m.conv_stages[conv_i++];
      for (const auto& block : stage.blocks) x = convnext_block_forward(block, x);
    }
  }

  int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> tok = reshape(permute(x, {0, 2, 3, 1}), {B, H * W, C});
  Tensor<T> pooled = mean_axis(tok, 1);
  pooled = apply_layernorm(m.head_norm, pooled);
  return linear(pooled, m.head_w, &m.head_b);
}

namespace {

template <typename T, typename Fn>
void visit_parameters(const Model<T>& m, Fn&& fn) {
  auto maybe = [&fn](const std::string& name, const Tensor<T>& t) {
    if (t.defined() && t.requires_grad()) fn(name, t);
  };
  maybe("stem.w", m.stem.w);
  if (m.stem.has_norm) {
    maybe("stem.norm.gamma", m.stem.norm.gamma);
    maybe("stem.norm.beta", m.stem.norm.beta);
  }
  size_t ds_i = 0, conv_i = 0, fca_i = 0;
  for (size_t si = 0; si < m.plan.stages.size(); ++si) {
    const StageInfo& st = m.plan.stages[si];
    std::string sname = "stage" + std::to_string(si + 1);
    if (st.downsample_before) {
      const auto& ds = m.downsamples[ds_i++];
      std::string p = "down" + std::to_string(si + 1);
      maybe(p + ".norm.gamma", ds.norm.gamma);
      maybe(p + ".norm.beta", ds.norm.beta);
      maybe(p + ".pw", ds.pw);
      maybe(p + ".dw", ds.dw);
    }
    if (st.is_fca) {
      const auto& stage = m.fca_stages[fca_i++];
      for (size_t bi = 0; bi < stage.blocks.size(); ++bi) {
        const FcaBlock<T>& b = stage.blocks[bi];
        std::string p = sname + ".b" + std::to_string(bi + 1);
        maybe(p + ".norm1.gamma", b.norm1.gamma);
        maybe(p + ".norm1.beta", b.norm1.beta);
        maybe(p + ".cmha.w_q", b.cmha.w_q);
        maybe(p + ".cmha.w_k", b.cmha.w_k);
        maybe(p + ".cmha.w_v", b.cmha.w_v);
        maybe(p + ".cmha.w_p", b.cmha.w_p);
        maybe(p + ".cmha.b_q", b.cmha.b_q);
        maybe(p + ".cmha.b_k", b.cmha.b_k);
        maybe(p + ".cmha.b_v", b.cmha.b_v);
        maybe(p + ".cmha.b_p", b.cmha.b_p);
        for (size_t ai = 0; ai < b.lsf.size(); ++ai) {
          maybe(p + ".lsf" + std::to_string(ai) + ".alpha", b.lsf[ai].alpha);
        }
        maybe(p + ".bias.pos_table", b.bias.pos_table);
        maybe(p + ".bias.depth_bias", b.bias.depth_bias);
        maybe(p + ".tme.merge", b.tme.merge_weights);
        maybe(p + ".tme.enhance", b.tme.enhance_weights);
        maybe(p + ".norm2.gamma", b.norm2.gamma);
        maybe(p + ".norm2.beta", b.norm2.beta);
        maybe(p + ".ffn.w1", b.ffn.w1);
        maybe(p + ".ffn.b1", b.ffn.b1);
        maybe(p + ".ffn.w2", b.ffn.w2);
        maybe(p + ".ffn.b2", b.ffn.b2);
      }
    } else {
      const auto& stage = m.conv_stages[conv_i++];
      for (size_t bi = 0; bi < stage.blocks.size(); ++bi) {
        const ConvNextBlock<T>& b = stage.blocks[bi];
        std::string p = sname + ".b" + std::to_string(bi + 1);
        maybe(p + ".dw", b.dw);
        maybe(p + ".norm.gamma", b.norm.gamma);
        maybe(p + ".norm.beta", b.norm.beta);
        maybe(p + ".pw1", b.pw1);
        maybe(p + ".pw2", b.pw2);
        maybe(p + ".layer_scale", b.layer_scale);
      }
    }
  }
  maybe("head.norm.gamma", m.head_norm.gamma);
  maybe("head.norm.beta", m.head_norm.beta);
  maybe("head.w", m.head_w);
  maybe("head.b", m.head_b);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  visit_parameters(m, [&out](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>> parameters(const Model<T>& m) {
  std::vector<Tensor<T>> out;
  visit_parameters(m, [&out](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
int64_t count_learnable_params(const Model<T>& m) {
  int64_t total = 0;
  visit_parameters(m, [&total](const std::string&, const Tensor<T>& t) { total += t.numel(); });
  return total;
}

template <typename T>
void zero_all_parameters(Model<T>& m) {
  for (auto& p : parameters(m)) {
    for (auto& v : p.mutable_data()) v = T(0);
  }
}

#define FCA_INSTANTIATE_MODEL(T)                                                           \
  template Model<T> build_model(const ModelConfig&, uint64_t);                             \
  template Model<T> build_model(const ModelConfig&);                                       \
  template Tensor<T> model_forward(const Model<T>&, const Tensor<T>&, ForwardTrace<T>*);   \
  template std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const Model<T>&); \
  template std::vector<Tensor<T>> parameters(const Model<T>&);                             \
  template int64_t count_learnable_params(const Model<T>&);                                \
  template void zero_all_parameters(Model<T>&);

FCA_INSTANTIATE_MODEL(float)
FCA_INSTANTIATE_MODEL(double)

#undef FCA_INSTANTIATE_MODEL

}  // namespace fca
