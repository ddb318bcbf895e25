#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fca/blocks.hpp"
#include "fca/config.hpp"

namespace fca {

template <typename T>
struct FcaStage {
  std::vector<FcaBlock<T>> blocks;
};

template <typename T>
struct ConvStage {
  std::vector<ConvNextBlock<T>> blocks;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  ModelPlan plan;
  StemParams<T> stem;
  std::vector<ConvStage<T>> conv_stages;
  std::vector<DownsampleParams<T>> downsamples;  // in forward-walk order
  std::vector<FcaStage<T>> fca_stages;
  LayerNormParams<T> head_norm;
  Tensor<T> head_w, head_b;
};

// One captured attention map: absolute stage number (1-based), block depth
// within the stage, batch sample, and the consumed cross columns.
template <typename T>
struct AttnRecord {
  int stage = 0;
  int block = 0;
  int sample = 0;
  Tensor<T> attn;  // [heads, n, n+m]
  std::vector<CrossColumns> cross;
};

template <typename T>
struct ForwardTrace {
  std::vector<AttnRecord<T>> records;
};

// Deterministic build: identical (config, seed) pairs give bit-identical
// parameters. The random draw sequence does not depend on ablation flags, so
// rows of the ladder share every un-flagged parameter exactly.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed);

template <typename T>
Model<T> build_model(const ModelConfig& cfg);

template <typename T>
Tensor<T> model_forward(const Model<T>& m, const Tensor<T>& images, ForwardTrace<T>* trace = nullptr);

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_parameters(const Model<T>& m);

template <typename T>
std::vector<Tensor<T>> parameters(const Model<T>& m);

template <typename T>
int64_t count_learnable_params(const Model<T>& m);

template <typename T>
void zero_all_parameters(Model<T>& m);

}  // namespace fca
