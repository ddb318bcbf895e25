#include "fca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace fca {

namespace {

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << "fca-checkpoint v1 " << tensors.size() << "\n";
  for (const auto& [name, t] : tensors) {
    if (name.find(' ') != std::string::npos || name.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: tensor name may not contain spaces: " + name);
    }
    out << name << ' ' << dtype_name<T>();
    for (int64_t d : t.shape()) out << ' ' << d;
    out << "\n";
  }
  for (const auto& [name, t] : tensors) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.data().size() * sizeof(T)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

namespace {

struct ParsedHeader {
  std::vector<CheckpointEntry> entries;
  std::streampos payload_start;
};

ParsedHeader parse_header(std::ifstream& in, const std::string& path) {
  std::string magic, version;
  size_t count = 0;
  std::string first_line;
  if (!std::getline(in, first_line)) throw std::runtime_error("checkpoint: empty file " + path);
  {
    std::istringstream ls(first_line);
    if (!(ls >> magic >> version >> count) || magic != "fca-checkpoint" || version != "v1") {
      throw std::runtime_error("checkpoint: bad header in " + path);
    }
  }
  ParsedHeader h;
  for (size_t i = 0; i < count; ++i) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated header in " + path);
    std::istringstream ls(line);
    CheckpointEntry e;
    if (!(ls >> e.name >> e.dtype)) throw std::runtime_error("checkpoint: bad header line in " + path);
    int64_t d;
    while (ls >> d) e.shape.push_back(d);
    if (e.dtype != "f32" && e.dtype != "f64") throw std::runtime_error("checkpoint: unknown dtype " + e.dtype);
    h.entries.push_back(std::move(e));
  }
  h.payload_start = in.tellg();
  return h;
}

}  // namespace

std::vector<CheckpointEntry> read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return parse_header(in, path).entries;
}

template <typename T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  ParsedHeader h = parse_header(in, path);
  std::map<std::string, Tensor<T>> out;
  for (const auto& e : h.entries) {
    if (e.dtype != dtype_name<T>()) {
      throw std::runtime_error("checkpoint: tensor " + e.name + " has dtype " + e.dtype + ", expected " +
                               dtype_name<T>());
    }
    int64_t n = shape_numel(e.shape);
    std::vector<T> data(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!in) throw std::runtime_error("checkpoint: truncated payload for " + e.name);
    out.emplace(e.name, Tensor<T>::from_data(e.shape, std::move(data)));
  }
  return out;
}

template <typename T>
void save_parameters(const Model<T>& model, const std::string& path) {
  save_checkpoint(path, named_parameters(model));
}

template <typename T>
void load_parameters(Model<T>& model, const std::string& path) {
  auto loaded = load_checkpoint<T>(path);
  auto params = named_parameters(model);
  if (loaded.size() != params.size()) {
    throw std::runtime_error("checkpoint: parameter count mismatch (" + std::to_string(loaded.size()) +
                             " stored, " + std::to_string(params.size()) + " in model)");
  }
  for (auto& [name, t] : params) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (it->second.shape() != t.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    auto dst = t.mutable_data();
    auto src = it->second.data();
    std::memcpy(dst.data(), src.data(), src.size() * sizeof(T));
  }
}

#define FCA_INSTANTIATE_CKPT(T)                                                                              \
  template void save_checkpoint(const std::string&, const std::vector<std::pair<std::string, Tensor<T>>>&); \
  template std::map<std::string, Tensor<T>> load_checkpoint(const std::string&);                            \
  template void save_parameters(const Model<T>&, const std::string&);                                       \
  template void load_parameters(Model<T>&, const std::string&);

FCA_INSTANTIATE_CKPT(float)
FCA_INSTANTIATE_CKPT(double)

#undef FCA_INSTANTIATE_CKPT

}  // namespace fca
