#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fca/config.hpp"

// Closed-form parameter and MAC accounting. The MAC conventions live in
// macs.hpp; the shape enumeration comes from plan_model, the same plan the
// model builder uses, so analytic totals match parameter enumeration and
// instrumented kernel counts exactly.
namespace fca {

struct CostLine {
  std::string component;
  int64_t params = 0;
  int64_t macs = 0;
};

struct CostReport {
  std::vector<CostLine> lines;

  int64_t total_params() const;
  int64_t total_macs() const;
  const CostLine* find(const std::string& component) const;
  double share_params(const std::string& component) const;  // percent
  double share_macs(const std::string& component) const;    // percent
};

struct BlockCostOptions {
  int heads = 0;  // 0: derived from the width
  TmeConfig tme;
  int max_depth_offset = 12;
  bool use_lsf = true;
};

// Single transformer block, per sample. With m == 0 and tme == false this is
// the standard ViT block decomposition (qkv 3nd^2 + out nd^2, attention
// 2n^2d, FFN 2*ratio*nd^2, norms 4nd).
CostReport block_cost(int64_t n, int64_t d, int64_t m, int ffn_ratio, bool tme,
                      const BlockCostOptions& opts = {});

// Whole model, per sample, at cfg.input_size (or an override).
CostReport model_cost(const ModelConfig& cfg, int input_size = 0);

// Extra compute of the FcaFormer-stage blocks relative to the same blocks
// with no cross tokens and no TME: macs(full)/macs(baseline) - 1.
double fca_overhead(const ModelConfig& cfg, int input_size = 0);

// Cross tokens visible to block `block_index` (1-based): per-source count
// ceil(H/s)*ceil(W/s) times the number of consumed sets under the policy.
int64_t cross_token_count(int grid_h, int grid_w, int stride, int block_index, CrossHistory policy);

// Aligned text table / CSV rendering. `flops` doubles the MAC column
// (1 MAC = 2 FLOPs).
std::string cost_table(const CostReport& report, bool flops = false);
std::string cost_csv(const CostReport& report, bool flops = false);

}  // namespace fca
