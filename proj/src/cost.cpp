#include "fca/cost.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fca/macs.hpp"
#include "fca/tme.hpp"

namespace fca {

int64_t CostReport::total_params() const {
  int64_t t = 0;
  for (const auto& l : lines) t += l.params;
  return t;
}

int64_t CostReport::total_macs() const {
  int64_t t = 0;
  for (const auto& l : lines) t += l.macs;
  return t;
}

const CostLine* CostReport::find(const std::string& component) const {
  for (const auto& l : lines) {
    if (l.component == component) return &l;
  }
  return nullptr;
}

double CostReport::share_params(const std::string& component) const {
  const CostLine* l = find(component);
  int64_t t = total_params();
  return (l && t > 0) ? 100.0 * static_cast<double>(l->params) / static_cast<double>(t) : 0.0;
}

double CostReport::share_macs(const std::string& component) const {
  const CostLine* l = find(component);
  int64_t t = total_macs();
  return (l && t > 0) ? 100.0 * static_cast<double>(l->macs) / static_cast<double>(t) : 0.0;
}

namespace {

CostLine& line(CostReport& r, const std::string& component) {
  for (auto& l : r.lines) {
    if (l.component == component) return l;
  }
  r.lines.push_back(CostLine{component, 0, 0});
  return r.lines.back();
}

struct FcaBlockShape {
  int64_t n = 0, d = 0;
  int grid_h = 0, grid_w = 0;
  int heads = 1;
  int ffn_ratio = 4;
  int64_t m_total = 0;
  TmeConfig tme;
  bool use_cross = false;
  bool use_lsf = false;
  bool use_tme = false;
  bool qkv_bias = false;
  int lsf_count = 1;
  int max_depth_offset = 1;
};

// Mirrors fca_block_forward op by op; every counted kernel appears here with
// the same macs.hpp formula it calls at runtime.
void add_fca_block(CostReport& r, const FcaBlockShape& s) {
  int64_t n = s.n, d = s.d, m = s.m_total;
  int64_t hd = d / s.heads;
  int64_t hidden = static_cast<int64_t>(s.ffn_ratio) * d;

  CostLine& norms = line(r, "norms");
  norms.macs += macs::layernorm(n * d);                        // norm1 on regular tokens
  if (s.use_cross) norms.macs += macs::layernorm(m * d);       // norm1 on consumed cross tokens
  norms.macs += macs::layernorm(n * d);                        // norm2
  norms.params += 4 * d;

  CostLine& qkv = line(r, "qkv_proj");
  qkv.macs += macs::linear(n, d, d) + 2 * macs::linear(n + m, d, d);
  qkv.params += 3 * d * d + (s.qkv_bias ? 3 * d : 0);

  CostLine& attn = line(r, "attn_matmul");
  attn.macs += macs::matmul(s.heads, n, hd, n + m) + macs::matmul(s.heads, n, n + m, hd);

  CostLine& proj = line(r, "out_proj");
  proj.macs += macs::linear(n, d, d);
  proj.params += d * d + (s.qkv_bias ? d : 0);

  CostLine& bias = line(r, "attn_bias_lsf");
  bias.params += static_cast<int64_t>(s.heads) * (2 * s.grid_h - 1) * (2 * s.grid_w - 1);
  if (s.use_cross) bias.params += static_cast<int64_t>(s.heads) * s.max_depth_offset;
  if (s.use_lsf) bias.params += static_cast<int64_t>(s.lsf_count) * d;

  if (s.use_cross) {
    CostLine& merge = line(r, "tme_merge");
    int64_t mh = merged_extent(s.grid_h, s.tme.merge_stride);
    int64_t mw = merged_extent(s.grid_w, s.tme.merge_stride);
    merge.macs += macs::conv_depthwise(1, d, mh, mw, s.tme.merge_kernel);
    if (s.use_tme) merge.params += d * s.tme.merge_kernel * s.tme.merge_kernel;
  }
  if (s.use_tme) {
    CostLine& enh = line(r, "tme_enhance");
    enh.macs += macs::conv_depthwise(1, d, s.grid_h, s.grid_w, s.tme.enhance_kernel);
    enh.params += d * s.tme.enhance_kernel * s.tme.enhance_kernel;
  }

  CostLine& ffn = line(r, "ffn");
  ffn.macs += macs::linear(n, d, hidden) + macs::linear(n, hidden, d);
  ffn.params += d * hidden + hidden + hidden * d + d;
}

void add_convnext_block(CostReport& r, int width, int grid) {
  int64_t c = width;
  int64_t n = static_cast<int64_t>(grid) * grid;
  CostLine& conv = line(r, "conv_stages");
  conv.macs += macs::conv_depthwise(1, c, grid, grid, 7);
  conv.macs += macs::layernorm(n * c);
  conv.macs += macs::linear(n, c, 4 * c) + macs::linear(n, 4 * c, c);
  conv.params += 49 * c + 2 * c + 4 * c * c + 4 * c * c + c;
}

void add_downsample(CostReport& r, int cin, int cout, int grid_in) {
  int64_t n = static_cast<int64_t>(grid_in) * grid_in;
  CostLine& sd = line(r, "stem_downsample");
  sd.macs += macs::layernorm(n * cin);
  sd.macs += macs::conv_pointwise(1, cin, cout, grid_in, grid_in);
  sd.macs += macs::conv_depthwise(1, cout, grid_in / 2, grid_in / 2, 3);
  sd.params += 2 * cin + static_cast<int64_t>(cout) * cin + 9 * cout;
}

void seed_lines(CostReport& r) {
  // fixed presentation order
  for (const char* name : {"qkv_proj", "attn_matmul", "out_proj", "ffn", "norms", "tme_merge",
                           "tme_enhance", "attn_bias_lsf", "conv_stages", "stem_downsample", "head"}) {
    line(r, name);
  }
}

}  // namespace

CostReport block_cost(int64_t n, int64_t d, int64_t m, int ffn_ratio, bool tme, const BlockCostOptions& opts) {
  if (n < 1 || d < 1 || m < 0) throw std::invalid_argument("block_cost: need n,d >= 1 and m >= 0");
  FcaBlockShape s;
  s.n = n;
  s.d = d;
  s.m_total = m;
  s.ffn_ratio = ffn_ratio;
  s.heads = opts.heads > 0 ? opts.heads : default_heads(static_cast<int>(d));
  s.tme = opts.tme;
  s.use_cross = m > 0 || tme;
  s.use_tme = tme;
  s.use_lsf = opts.use_lsf && s.use_cross;
  s.max_depth_offset = opts.max_depth_offset;
  int grid = static_cast<int>(std::llround(std::sqrt(static_cast<double>(n))));
  if (static_cast<int64_t>(grid) * grid != n) {
    if (s.use_cross) throw std::invalid_argument("block_cost: token count must be square when merging");
    grid = static_cast<int>(n);  // degenerate 1 x n grid for the bias table
    s.grid_h = 1;
    s.grid_w = grid;
  } else {
    s.grid_h = s.grid_w = grid;
  }
  CostReport r;
  add_fca_block(r, s);
  return r;
}

CostReport model_cost(const ModelConfig& cfg, int input_size) {
  ModelConfig c = cfg;
  if (input_size > 0) c.input_size = input_size;
  ModelPlan plan = plan_model(c);
  auto heads = resolved_heads(c);

  CostReport r;
  seed_lines(r);

  CostLine& sd = line(r, "stem_downsample");
  int64_t n_stem = static_cast<int64_t>(plan.stem_grid_h) * plan.stem_grid_w;
  int64_t d1 = c.widths[0];
  int64_t patch_in = 3LL * plan.patch * plan.patch;
  sd.macs += macs::linear(n_stem, patch_in, d1);
  sd.params += patch_in * d1;
  if (!plan.plain) {
    sd.macs += macs::layernorm(n_stem * d1);
    sd.params += 2 * d1;
  }

  for (size_t si = 0; si < plan.stages.size(); ++si) {
    const StageInfo& st = plan.stages[si];
    if (st.downsample_before) add_downsample(r, st.prev_width, st.width, st.grid_h * 2);
    if (st.is_fca) {
      int64_t per_set = merged_extent(st.grid_h, c.tme.merge_stride) * merged_extent(st.grid_w, c.tme.merge_stride);
      for (int l = 1; l <= st.depth; ++l) {
        FcaBlockShape s;
        s.n = static_cast<int64_t>(st.grid_h) * st.grid_w;
        s.d = st.width;
        s.grid_h = st.grid_h;
        s.grid_w = st.grid_w;
        s.heads = heads[si];
        s.ffn_ratio = c.ffn_ratio;
        s.m_total = c.flags.use_cross ? consumed_sets(l, c.cross_history) * per_set : 0;
        s.tme = c.tme;
        s.use_cross = c.flags.use_cross;
        s.use_lsf = c.flags.use_lsf;
        s.use_tme = c.flags.use_tme;
        s.qkv_bias = c.qkv_bias;
        s.lsf_count = (c.flags.use_lsf && c.lsf_per_source) ? std::max(l - 1, 1) : 1;
        s.max_depth_offset = plan.max_depth_offset;
        add_fca_block(r, s);
      }
    } else {
      for (int l = 0; l < st.depth; ++l) add_convnext_block(r, st.width, st.grid_h);
    }
  }

  CostLine& head = line(r, "head");
  int64_t hw = plan.head_width;
  head.macs += macs::layernorm(hw) + macs::linear(1, hw, c.num_classes);
  head.params += 2 * hw + hw * c.num_classes + c.num_classes;
  return r;
}

double fca_overhead(const ModelConfig& cfg, int input_size) {
  ModelConfig c = cfg;
  if (input_size > 0) c.input_size = input_size;
  ModelPlan plan = plan_model(c);
  auto heads = resolved_heads(c);

  CostReport full, base;
  bool any = false;
  for (size_t si = 0; si < plan.stages.size(); ++si) {
    const StageInfo& st = plan.stages[si];
    if (!st.is_fca || st.depth == 0) continue;
    any = true;
    int64_t per_set = merged_extent(st.grid_h, c.tme.merge_stride) * merged_extent(st.grid_w, c.tme.merge_stride);
    for (int l = 1; l <= st.depth; ++l) {
      FcaBlockShape s;
      s.n = static_cast<int64_t>(st.grid_h) * st.grid_w;
      s.d = st.width;
      s.grid_h = st.grid_h;
      s.grid_w = st.grid_w;
      s.heads = heads[si];
      s.ffn_ratio = c.ffn_ratio;
      s.tme = c.tme;
      s.qkv_bias = c.qkv_bias;
      s.max_depth_offset = plan.max_depth_offset;

      FcaBlockShape with = s;
      with.m_total = c.flags.use_cross ? consumed_sets(l, c.cross_history) * per_set : 0;
      with.use_cross = c.flags.use_cross;
      with.use_lsf = c.flags.use_lsf;
      with.use_tme = c.flags.use_tme;
      add_fca_block(full, with);

      FcaBlockShape without = s;  // m = 0, no TME, no cross machinery
      add_fca_block(base, without);
    }
  }
  if (!any) throw std::invalid_argument("fca_overhead: config has no FcaFormer-stage blocks");
  return static_cast<double>(full.total_macs()) / static_cast<double>(base.total_macs()) - 1.0;
}

int64_t cross_token_count(int grid_h, int grid_w, int stride, int block_index, CrossHistory policy) {
  if (block_index < 1) throw std::invalid_argument("cross_token_count: block index is 1-based");
  int64_t per_set = merged_extent(grid_h, stride) * merged_extent(grid_w, stride);
  return consumed_sets(block_index, policy) * per_set;
}

std::string cost_table(const CostReport& report, bool flops) {
  int64_t tp = report.total_params();
  int64_t tm = report.total_macs();
  const char* unit = flops ? "flops" : "macs";
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-16s %14s %16s %9s %9s\n", "component", "params", unit, "params%", flops ? "flops%" : "macs%");
  out += buf;
  auto emit = [&](const std::string& name, int64_t params, int64_t macs) {
    double sp = tp > 0 ? 100.0 * static_cast<double>(params) / static_cast<double>(tp) : 0.0;
    double sm = tm > 0 ? 100.0 * static_cast<double>(macs) / static_cast<double>(tm) : 0.0;
    std::snprintf(buf, sizeof(buf), "%-16s %14lld %16lld %8.2f%% %8.2f%%\n", name.c_str(),
                  static_cast<long long>(params), static_cast<long long>(flops ? 2 * macs : macs), sp, sm);
    out += buf;
  };
  for (const auto& l : report.lines) emit(l.component, l.params, l.macs);
  emit("total", tp, tm);
  return out;
}

std::string cost_csv(const CostReport& report, bool flops) {
  int64_t tp = report.total_params();
  int64_t tm = report.total_macs();
  std::string out = flops ? "component,params,flops,share_params,share_flops\n"
                          : "component,params,macs,share_params,share_macs\n";
  char buf[160];
  auto emit = [&](const std::string& name, int64_t params, int64_t macs) {
    double sp = tp > 0 ? 100.0 * static_cast<double>(params) / static_cast<double>(tp) : 0.0;
    double sm = tm > 0 ? 100.0 * static_cast<double>(macs) / static_cast<double>(tm) : 0.0;
    std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%.4f,%.4f\n", name.c_str(), static_cast<long long>(params),
                  static_cast<long long>(flops ? 2 * macs : macs), sp, sm);
    out += buf;
  };
  for (const auto& l : report.lines) emit(l.component, l.params, l.macs);
  emit("total", tp, tm);
  return out;
}

}  // namespace fca
