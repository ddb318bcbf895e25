#include "fca/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fca {

ModelConfig variant_config(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
  switch (v) {
    case Variant::L0:
      cfg.widths = {192};
      cfg.depths = {12};
      cfg.patch_size = 16;
      break;
    case Variant::L1:
      cfg.widths = {64, 128, 192, 320};
      cfg.depths = {2, 2, 6, 2};
      break;
    case Variant::L2:
      cfg.widths = {96, 192, 320, 480};
      cfg.depths = {2, 2, 7, 2};
      break;
    case Variant::L3:
      cfg.widths = {96, 192, 320, 512};
      cfg.depths = {3, 6, 12, 3};
      break;
    case Variant::L4:
      cfg.widths = {128, 256, 512, 768};
      cfg.depths = {3, 6, 12, 3};
      break;
    case Variant::Custom:
      break;
  }
  return cfg;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::L0: return "L0";
    case Variant::L1: return "L1";
    case Variant::L2: return "L2";
    case Variant::L3: return "L3";
    case Variant::L4: return "L4";
    case Variant::Custom: return "custom";
  }
  return "custom";
}

Variant variant_from_name(const std::string& name) {
  if (name == "L0" || name == "l0") return Variant::L0;
  if (name == "L1" || name == "l1") return Variant::L1;
  if (name == "L2" || name == "l2") return Variant::L2;
  if (name == "L3" || name == "l3") return Variant::L3;
  if (name == "L4" || name == "l4") return Variant::L4;
  if (name == "custom") return Variant::Custom;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::string cross_history_name(CrossHistory policy) {
  return policy == CrossHistory::AllPrevious ? "all_previous" : "skip_last";
}

CrossHistory cross_history_from_name(const std::string& name) {
  if (name == "all_previous") return CrossHistory::AllPrevious;
  if (name == "skip_last") return CrossHistory::SkipLast;
  throw std::invalid_argument("unknown cross_history '" + name + "'");
}

int default_heads(int width) {
  int target = std::max(1, width / 32);
  for (int h = target; h > 1; --h) {
    if (width % h == 0) return h;
  }
  return 1;
}

std::vector<int> resolved_heads(const ModelConfig& cfg) {
  std::vector<int> heads;
  if (!cfg.heads.empty()) {
    if (cfg.heads.size() != cfg.widths.size()) {
      throw std::invalid_argument("config: heads list must match stage count");
    }
    heads = cfg.heads;
    for (size_t i = 0; i < heads.size(); ++i) {
      if (heads[i] < 1 || cfg.widths[i] % heads[i] != 0) {
        throw std::invalid_argument("config: heads must divide the stage width");
      }
    }
  } else {
    for (int w : cfg.widths) heads.push_back(default_heads(w));
  }
  return heads;
}

int consumed_sets(int block_index, CrossHistory policy) {
  if (block_index < 1) throw std::invalid_argument("consumed_sets: block index is 1-based");
  if (policy == CrossHistory::AllPrevious) return block_index - 1;
  return std::max(block_index - 2, 0);
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.widths.empty() || (cfg.widths.size() != 1 && cfg.widths.size() != 4)) {
    throw std::invalid_argument("config: expected 1 (plain) or 4 (hybrid) stage widths");
  }
  if (cfg.depths.size() != cfg.widths.size()) {
    throw std::invalid_argument("config: depths must match stage count");
  }
  for (int w : cfg.widths) {
    if (w < 1) throw std::invalid_argument("config: stage widths must be positive");
  }
  for (int d : cfg.depths) {
    if (d < 0) throw std::invalid_argument("config: negative stage depth");
  }
  if (cfg.ffn_ratio < 1) throw std::invalid_argument("config: ffn_ratio must be >= 1");
  if (cfg.num_classes < 1) throw std::invalid_argument("config: num_classes must be >= 1");
  if (cfg.flags.use_lsf && !cfg.flags.use_cross) {
    throw std::invalid_argument("config: use_lsf requires use_cross");
  }
  if (cfg.flags.use_tme && !cfg.flags.use_cross) {
    throw std::invalid_argument("config: use_tme requires use_cross");
  }
  validate_tme_config(cfg.tme);
  if (cfg.plain()) {
    if (cfg.patch_size < 1 || cfg.input_size % cfg.patch_size != 0) {
      throw std::invalid_argument("config: input size must be divisible by the patch size");
    }
  } else {
    if (cfg.input_size % 32 != 0) {
      throw std::invalid_argument("config: hybrid models require input size divisible by 32");
    }
  }
  (void)resolved_heads(cfg);
}

ModelPlan plan_model(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelPlan plan;
  plan.plain = cfg.plain();
  plan.input_size = cfg.input_size;
  plan.num_classes = cfg.num_classes;
  auto heads = resolved_heads(cfg);
  int stages = static_cast<int>(cfg.widths.size());

  plan.patch = plan.plain ? cfg.patch_size : 4;
  plan.stem_grid_h = plan.stem_grid_w = cfg.input_size / plan.patch;

  int grid = plan.stem_grid_h;
  int head_width = cfg.widths[0];
  for (int i = 0; i < stages; ++i) {
    StageInfo s;
    s.is_fca = plan.plain || i >= 2;
    s.width = cfg.widths[static_cast<size_t>(i)];
    s.depth = cfg.depths[static_cast<size_t>(i)];
    s.heads = heads[static_cast<size_t>(i)];
    if (i > 0) {
      // a downsample exists only if some later stage still has blocks
      bool needed = false;
      for (int j = i; j < stages; ++j) needed = needed || cfg.depths[static_cast<size_t>(j)] > 0;
      s.downsample_before = needed;
      s.prev_width = cfg.widths[static_cast<size_t>(i - 1)];
      if (needed) {
        if (grid % 2 != 0) throw std::invalid_argument("config: grid not divisible by 2 at downsample");
        grid /= 2;
        head_width = s.width;
      }
    }
    s.grid_h = s.grid_w = grid;
    plan.stages.push_back(s);
  }
  plan.head_width = head_width;
  plan.max_depth_offset = 1;
  for (int d : cfg.depths) plan.max_depth_offset = std::max(plan.max_depth_offset, d);
  return plan;
}

namespace {

using nlohmann::json;

void apply_json(ModelConfig& cfg, const json& j) {
  if (j.contains("widths")) cfg.widths = j.at("widths").get<std::vector<int>>();
  if (j.contains("depths")) cfg.depths = j.at("depths").get<std::vector<int>>();
  if (j.contains("heads")) cfg.heads = j.at("heads").get<std::vector<int>>();
  if (j.contains("ffn_ratio")) cfg.ffn_ratio = j.at("ffn_ratio").get<int>();
  if (j.contains("cross_history")) cfg.cross_history = cross_history_from_name(j.at("cross_history").get<std::string>());
  if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
  if (j.contains("input_size")) cfg.input_size = j.at("input_size").get<int>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  if (j.contains("patch_size")) cfg.patch_size = j.at("patch_size").get<int>();
  if (j.contains("lsf_per_source")) cfg.lsf_per_source = j.at("lsf_per_source").get<bool>();
  if (j.contains("tme_residual")) cfg.tme_residual = j.at("tme_residual").get<bool>();
  if (j.contains("qkv_bias")) cfg.qkv_bias = j.at("qkv_bias").get<bool>();
  if (j.contains("flags")) {
    const auto& f = j.at("flags");
    if (f.contains("use_cross")) cfg.flags.use_cross = f.at("use_cross").get<bool>();
    if (f.contains("use_lsf")) cfg.flags.use_lsf = f.at("use_lsf").get<bool>();
    if (f.contains("use_tme")) cfg.flags.use_tme = f.at("use_tme").get<bool>();
  }
  if (j.contains("tme")) {
    const auto& t = j.at("tme");
    if (t.contains("merge_kernel")) cfg.tme.merge_kernel = t.at("merge_kernel").get<int>();
    if (t.contains("merge_stride")) cfg.tme.merge_stride = t.at("merge_stride").get<int>();
    if (t.contains("enhance_kernel")) cfg.tme.enhance_kernel = t.at("enhance_kernel").get<int>();
  }
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  if (j.contains("variant")) cfg = variant_config(variant_from_name(j.at("variant").get<std::string>()));
  apply_json(cfg, j);
  if (cfg.widths.empty()) throw std::invalid_argument("config: widths missing");
  validate_config(cfg);
  return cfg;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_config_from_json(buf.str());
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["variant"] = variant_name(cfg.variant);
  j["widths"] = cfg.widths;
  j["depths"] = cfg.depths;
  j["heads"] = cfg.heads.empty() ? resolved_heads(cfg) : cfg.heads;
  j["ffn_ratio"] = cfg.ffn_ratio;
  j["cross_history"] = cross_history_name(cfg.cross_history);
  j["num_classes"] = cfg.num_classes;
  j["input_size"] = cfg.input_size;
  j["seed"] = cfg.seed;
  j["patch_size"] = cfg.patch_size;
  j["lsf_per_source"] = cfg.lsf_per_source;
  j["tme_residual"] = cfg.tme_residual;
  j["qkv_bias"] = cfg.qkv_bias;
  j["flags"] = {{"use_cross", cfg.flags.use_cross}, {"use_lsf", cfg.flags.use_lsf}, {"use_tme", cfg.flags.use_tme}};
  j["tme"] = {{"merge_kernel", cfg.tme.merge_kernel},
              {"merge_stride", cfg.tme.merge_stride},
              {"enhance_kernel", cfg.tme.enhance_kernel}};
  return j.dump(2);
}

void save_model_config(const ModelConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("config: cannot write " + path);
  out << model_config_to_json(cfg) << "\n";
}

}  // namespace fca
