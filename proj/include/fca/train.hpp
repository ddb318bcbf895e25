#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fca/csv.hpp"
#include "fca/model.hpp"
#include "fca/synth.hpp"

namespace fca {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  int warmup_steps = 20;
  double label_smoothing = 0.1;
  uint64_t seed = 0;
};

void validate_train_config(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string train_config_to_json(const TrainConfig& cfg);

// Linear warmup to base_lr, then cosine decay to zero over the remaining
// steps. `step` is 0-based.
double warmup_cosine_lr(double base_lr, int step, int total_steps, int warmup_steps);

// Decoupled weight decay Adam; state is keyed by parameter order.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(std::span<Tensor<T>> params, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

// Deterministic given (model seed, train seed): fixed shuffles, fixed batch
// order, single-threaded steps. Throws on a non-finite loss.
template <typename T>
std::vector<EpochStats> train_model(Model<T>& model, const SynthTask& task, const TrainConfig& cfg,
                                    std::ostream* log = nullptr);

template <typename T>
double evaluate_accuracy(const Model<T>& model, const SynthTask& task, bool val);

CsvTable history_table(std::span<const EpochStats> history);
std::vector<EpochStats> history_from_table(const CsvTable& table);

// Mean attention mass on cross columns, per FcaFormer block, averaged over
// heads, queries and batch samples. Zero when a block consumes no cross set.
struct AttnMassRow {
  int stage = 0;
  int block = 0;
  double cross_mass = 0.0;
};

template <typename T>
std::vector<AttnMassRow> attn_mass(const Model<T>& model, const Tensor<T>& images);

CsvTable attn_mass_table(std::span<const AttnMassRow> rows);

// Table-5-style ladder: baseline -> +cross -> +LSF -> +TME.
struct AblationRow {
  std::string name;
  AblationFlags flags;
  int64_t params = 0;
  int64_t macs = 0;
  double final_train_acc = 0.0;
  double final_val_acc = 0.0;
  int epochs_to_95 = 0;  // epochs to reach 95% of the final train accuracy
  std::vector<EpochStats> history;
};

std::vector<std::pair<std::string, AblationFlags>> ablation_default_rows();

template <typename T>
std::vector<AblationRow> ablation_ladder(const ModelConfig& base_cfg, const SynthTask& task,
                                         const TrainConfig& tcfg,
                                         std::span<const std::pair<std::string, AblationFlags>> rows,
                                         std::ostream* log = nullptr);

int epochs_to_fraction_of_final(std::span<const EpochStats> history, double fraction = 0.95);

}  // namespace fca
