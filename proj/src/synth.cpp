#include "fca/synth.hpp"

#include <cmath>
#include <stdexcept>

#include "fca/rng.hpp"

namespace fca {

namespace {

constexpr double kPi = 3.14159265358979323846;

// fill [3,S,S] for one sample
void render(const SynthTask& task, bool val, int index, double* px) {
  int limit = val ? task.val_size() : task.train_size();
  if (index < 0 || index >= limit) throw std::invalid_argument("synth: sample index out of range");
  uint64_t tag = (val ? 0x5A110000000000ULL : 0) + static_cast<uint64_t>(index);
  SplitMix64 rng(mix_seed(task.seed, tag));

  int cls = task.label_of(index);
  int s = task.image_size;
  double theta = kPi * (static_cast<double>(cls) + rng.uniform(-0.15, 0.15)) / task.num_classes;
  double freq = 3.0 + rng.uniform(-0.3, 0.3);
  double phase = rng.uniform(0.0, 2.0 * kPi);
  double amp = 0.5 + rng.uniform(0.0, 0.3);
  double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
  double blob_sigma = 0.15;
  double blob[3] = {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)};
  double ct = std::cos(theta), st = std::sin(theta);

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      double u = static_cast<double>(x) / s, v = static_cast<double>(y) / s;
      double g = amp * std::sin(2.0 * kPi * freq * (ct * u + st * v) + phase);
      double dx = u - cx, dy = v - cy;
      double b = std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
      for (int c = 0; c < 3; ++c) {
        px[(c * s + y) * s + x] = g + blob[c] * b + 0.1 * rng.normal();
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> SynthTask::image(bool val, int index) const {
  int s = image_size;
  std::vector<double> px(static_cast<size_t>(3 * s * s));
  render(*this, val, index, px.data());
  std::vector<T> data(px.size());
  for (size_t i = 0; i < px.size(); ++i) data[i] = static_cast<T>(px[i]);
  return Tensor<T>::from_data({3, s, s}, std::move(data));
}

template <typename T>
Tensor<T> SynthTask::batch(bool val, std::span<const int> indices) const {
  int s = image_size;
  int64_t b = static_cast<int64_t>(indices.size());
  std::vector<T> data(static_cast<size_t>(b * 3 * s * s));
  std::vector<double> px(static_cast<size_t>(3 * s * s));
  for (int64_t i = 0; i < b; ++i) {
    render(*this, val, indices[static_cast<size_t>(i)], px.data());
    for (size_t j = 0; j < px.size(); ++j) {
      data[static_cast<size_t>(i) * px.size() + j] = static_cast<T>(px[j]);
    }
  }
  return Tensor<T>::from_data({b, 3, s, s}, std::move(data));
}

std::vector<int> SynthTask::labels(bool val, std::span<const int> indices) const {
  (void)val;
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(label_of(i));
  return out;
}

template Tensor<float> SynthTask::image(bool, int) const;
template Tensor<double> SynthTask::image(bool, int) const;
template Tensor<float> SynthTask::batch(bool, std::span<const int>) const;
template Tensor<double> SynthTask::batch(bool, std::span<const int>) const;

}  // namespace fca
