#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fca/model.hpp"
#include "fca/tensor.hpp"

// Checkpoint container: a text header followed by raw tensor payloads.
//
//   fca-checkpoint v1 <count>\n
//   <name> <f32|f64> <dim0> <dim1> ...\n     (count lines)
//   <little-endian payloads, concatenated in header order>
//
// Scalars (rank 0) list no dims. Payload k holds numel(shape_k) values of
// the tensor's dtype, 4 bytes (f32) or 8 bytes (f64) each, little-endian.
namespace fca {

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& tensors);

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path);

struct CheckpointEntry {
  std::string name;
  std::string dtype;
  Shape shape;
};

std::vector<CheckpointEntry> read_checkpoint_header(const std::string& path);

// Copies checkpoint values into the model's named parameters; names and
// shapes must match the built model exactly.
template <typename T>
void load_parameters(Model<T>& model, const std::string& path);

template <typename T>
void save_parameters(const Model<T>& model, const std::string& path);

}  // namespace fca
