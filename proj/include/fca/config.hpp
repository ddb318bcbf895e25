#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fca/tme.hpp"

namespace fca {

enum class Variant { L0, L1, L2, L3, L4, Custom };

// Which earlier blocks of the stage feed cross tokens into block l:
// AllPrevious -> sets l-1..1, SkipLast -> sets l-2..1.
enum class CrossHistory { AllPrevious, SkipLast };

struct AblationFlags {
  bool use_cross = true;
  bool use_lsf = true;
  bool use_tme = true;
};

struct ModelConfig {
  Variant variant = Variant::Custom;
  std::vector<int> widths;  // one entry: plain ViT-style model; four: hybrid
  std::vector<int> depths;
  std::vector<int> heads;  // empty: derived as the largest divisor <= width/32
  int ffn_ratio = 4;
  CrossHistory cross_history = CrossHistory::AllPrevious;
  TmeConfig tme;
  AblationFlags flags;
  bool lsf_per_source = false;
  bool tme_residual = true;
  bool qkv_bias = false;
  int num_classes = 1000;
  int input_size = 224;
  uint64_t seed = 0;
  int patch_size = 16;  // plain-model patch embedding

  bool plain() const { return widths.size() == 1; }
};

ModelConfig variant_config(Variant v);
std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);
std::string cross_history_name(CrossHistory policy);
CrossHistory cross_history_from_name(const std::string& name);

// Largest divisor of `width` not exceeding max(1, width/32).
int default_heads(int width);
std::vector<int> resolved_heads(const ModelConfig& cfg);

// Static shape plan shared by the model builder and the cost analyzer.
struct StageInfo {
  bool is_fca = false;
  int width = 0;
  int depth = 0;
  int heads = 1;
  int grid_h = 0, grid_w = 0;
  bool downsample_before = false;
  int prev_width = 0;
};

struct ModelPlan {
  bool plain = false;
  int input_size = 0;
  int patch = 4;                       // stem patch (4 hybrid, cfg.patch_size plain)
  int stem_grid_h = 0, stem_grid_w = 0;
  std::vector<StageInfo> stages;
  int max_depth_offset = 1;            // depth-bias table width
  int head_width = 0;                  // channels entering the classifier head
  int num_classes = 0;
};

ModelPlan plan_model(const ModelConfig& cfg);

void validate_config(const ModelConfig& cfg);

ModelConfig load_model_config(const std::string& path);
ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& cfg);
void save_model_config(const ModelConfig& cfg, const std::string& path);

// Cross tokens visible to block `block_index` (1-based) under the policy.
int consumed_sets(int block_index, CrossHistory policy);

}  // namespace fca
