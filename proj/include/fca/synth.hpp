#pragma once

#include <span>

#include "fca/tensor.hpp"

namespace fca {

// Procedural 10-way classification task: the class determines the
// orientation of a sinusoidal grating; phase, frequency jitter, amplitude, a
// colored distractor blob and pixel noise are all randomized per sample, so
// raw pixels are a poor linear predictor of the class. Regenerating with the
// same seed yields bit-identical datasets.
struct SynthTask {
  uint64_t seed = 0;
  int num_classes = 10;
  int image_size = 32;
  int train_per_class = 32;
  int val_per_class = 8;

  int train_size() const { return num_classes * train_per_class; }
  int val_size() const { return num_classes * val_per_class; }
  int label_of(int index) const { return index % num_classes; }

  template <typename T>
  Tensor<T> image(bool val, int index) const;  // [3,S,S]

  template <typename T>
  Tensor<T> batch(bool val, std::span<const int> indices) const;  // [B,3,S,S]

  std::vector<int> labels(bool val, std::span<const int> indices) const;
};

}  // namespace fca
