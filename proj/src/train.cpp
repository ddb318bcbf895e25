#include "fca/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fca/cost.hpp"
#include "fca/ops.hpp"
#include "fca/rng.hpp"

namespace fca {

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train config: epochs and batch size must be positive");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (cfg.weight_decay < 0.0) throw std::invalid_argument("train config: negative weight decay");
  if (cfg.warmup_steps < 0) throw std::invalid_argument("train config: negative warmup");
  if (cfg.label_smoothing < 0.0 || cfg.label_smoothing >= 1.0) {
    throw std::invalid_argument("train config: label smoothing out of range");
  }
}

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig cfg;
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("warmup_steps")) cfg.warmup_steps = j.at("warmup_steps").get<int>();
  if (j.contains("label_smoothing")) cfg.label_smoothing = j.at("label_smoothing").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  validate_train_config(cfg);
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("train config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return train_config_from_json(buf.str());
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["weight_decay"] = cfg.weight_decay;
  j["warmup_steps"] = cfg.warmup_steps;
  j["label_smoothing"] = cfg.label_smoothing;
  j["seed"] = cfg.seed;
  return j.dump(2);
}

double warmup_cosine_lr(double base_lr, int step, int total_steps, int warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  int span = std::max(total_steps - warmup_steps, 1);
  double progress = static_cast<double>(std::min(step - warmup_steps, span)) / static_cast<double>(span);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
void AdamW<T>::step(std::span<Tensor<T>> params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params[i].numel()), T(0));
      v_[i].assign(static_cast<size_t>(params[i].numel()), T(0));
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("adamw: parameter list changed size");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    std::span<const T> grad = params[i].has_grad() ? params[i].grad() : std::span<const T>();
    T* m = m_[i].data();
    T* v = v_[i].data();
    for (size_t k = 0; k < data.size(); ++k) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[k]);
      double mk = beta1_ * static_cast<double>(m[k]) + (1.0 - beta1_) * g;
      double vk = beta2_ * static_cast<double>(v[k]) + (1.0 - beta2_) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps_) + weight_decay_ * static_cast<double>(data[k]);
      data[k] = static_cast<T>(static_cast<double>(data[k]) - lr * update);
    }
  }
}

namespace {

template <typename T>
int64_t count_correct(const Tensor<T>& logits, const std::vector<int>& labels) {
  int64_t B = logits.dim(0), K = logits.dim(1);
  const T* d = logits.data().data();
  int64_t correct = 0;
  for (int64_t b = 0; b < B; ++b) {
    int64_t best = 0;
    for (int64_t k = 1; k < K; ++k) {
      if (d[b * K + k] > d[b * K + best]) best = k;
    }
    if (best == labels[static_cast<size_t>(b)]) ++correct;
  }
  return correct;
}

}  // namespace

template <typename T>
double evaluate_accuracy(const Model<T>& model, const SynthTask& task, bool val) {
  NoGradGuard no_grad;
  int n = val ? task.val_size() : task.train_size();
  int64_t correct = 0;
  const int chunk = 64;
  for (int start = 0; start < n; start += chunk) {
    int len = std::min(chunk, n - start);
    std::vector<int> idx(static_cast<size_t>(len));
    std::iota(idx.begin(), idx.end(), start);
    Tensor<T> images = task.batch<T>(val, idx);
    auto labels = task.labels(val, idx);
    correct += count_correct(model_forward(model, images), labels);
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

template <typename T>
std::vector<EpochStats> train_model(Model<T>& model, const SynthTask& task, const TrainConfig& cfg,
                                    std::ostream* log) {
  validate_train_config(cfg);
  if (model.cfg.input_size != task.image_size) {
    throw std::invalid_argument("train: model input size does not match the task image size");
  }
  if (model.cfg.num_classes != task.num_classes) {
    throw std::invalid_argument("train: model class count does not match the task");
  }
  auto params = parameters(model);
  std::span<Tensor<T>> pspan(params);
  AdamW<T> opt(0.9, 0.999, 1e-8, cfg.weight_decay);

  int n = task.train_size();
  int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int total_steps = steps_per_epoch * cfg.epochs;
  int step = 0;

  std::vector<EpochStats> history;
  std::vector<int> order(static_cast<size_t>(n));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0xE90C000ULL + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      int len = std::min(cfg.batch_size, n - start);
      std::span<const int> idx(order.data() + start, static_cast<size_t>(len));
      Tensor<T> images = task.batch<T>(false, idx);
      auto labels = task.labels(false, idx);

      Tensor<T> logits = model_forward(model, images);
      correct += count_correct(logits, labels);
      Tensor<T> loss = cross_entropy_mean(logits, labels, static_cast<T>(cfg.label_smoothing));
      double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train: diverged (non-finite loss) at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(step));
      }
      loss_sum += lv * len;

      zero_grad(pspan);
      backward(loss);
      opt.step(pspan, warmup_cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps));
      ++step;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / n;
    stats.train_acc = static_cast<double>(correct) / n;
    stats.val_acc = evaluate_accuracy(model, task, true);
    history.push_back(stats);
    if (log) {
      (*log) << "epoch " << epoch << "/" << cfg.epochs << "  loss " << stats.loss << "  train_acc "
             << stats.train_acc << "  val_acc " << stats.val_acc << "\n";
    }
  }
  return history;
}

CsvTable history_table(std::span<const EpochStats> history) {
  CsvTable t;
  t.header = {"epoch", "loss", "train_acc", "val_acc"};
  for (const auto& h : history) {
    t.rows.push_back({std::to_string(h.epoch), fmt_double(h.loss), fmt_double(h.train_acc), fmt_double(h.val_acc)});
  }
  return t;
}

std::vector<EpochStats> history_from_table(const CsvTable& table) {
  std::vector<EpochStats> out;
  for (const auto& r : table.rows) {
    if (r.size() != 4) throw std::invalid_argument("history: malformed row");
    EpochStats h;
    h.epoch = std::atoi(r[0].c_str());
    h.loss = std::strtod(r[1].c_str(), nullptr);
    h.train_acc = std::strtod(r[2].c_str(), nullptr);
    h.val_acc = std::strtod(r[3].c_str(), nullptr);
    out.push_back(h);
  }
  return out;
}

template <typename T>
std::vector<AttnMassRow> attn_mass(const Model<T>& model, const Tensor<T>& images) {
  NoGradGuard no_grad;
  ForwardTrace<T> trace;
  model_forward(model, images, &trace);
  std::map<std::pair<int, int>, std::pair<double, int>> acc;  // (stage,block) -> (mass sum, samples)
  for (const auto& rec : trace.records) {
    int64_t cols = rec.attn.dim(2);
    int64_t m = 0;
    for (const auto& c : rec.cross) m += c.count;
    double total = 0.0, cross = 0.0;
    const T* d = rec.attn.data().data();
    int64_t heads = rec.attn.dim(0), n = rec.attn.dim(1);
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t q = 0; q < n; ++q) {
        const T* row = d + (h * n + q) * cols;
        for (int64_t j = 0; j < cols; ++j) {
          total += static_cast<double>(row[j]);
          if (j >= cols - m) cross += static_cast<double>(row[j]);
        }
      }
    }
    auto& slot = acc[{rec.stage, rec.block}];
    slot.first += (m == 0 ? 0.0 : cross / total);
    slot.second += 1;
  }
  std::vector<AttnMassRow> rows;
  for (const auto& [key, val] : acc) {
    rows.push_back(AttnMassRow{key.first, key.second, val.first / val.second});
  }
  return rows;
}

CsvTable attn_mass_table(std::span<const AttnMassRow> rows) {
  CsvTable t;
  t.header = {"stage", "block", "cross_mass"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.stage), std::to_string(r.block), fmt_double(r.cross_mass)});
  }
  return t;
}

std::vector<std::pair<std::string, AblationFlags>> ablation_default_rows() {
  return {
      {"baseline", AblationFlags{false, false, false}},
      {"+cross", AblationFlags{true, false, false}},
      {"+lsf", AblationFlags{true, true, false}},
      {"+tme", AblationFlags{true, true, true}},
  };
}

int epochs_to_fraction_of_final(std::span<const EpochStats> history, double fraction) {
  if (history.empty()) return 0;
  double target = fraction * history.back().train_acc;
  for (const auto& h : history) {
    if (h.train_acc >= target) return h.epoch;
  }
  return history.back().epoch;
}

template <typename T>
std::vector<AblationRow> ablation_ladder(const ModelConfig& base_cfg, const SynthTask& task,
                                         const TrainConfig& tcfg,
                                         std::span<const std::pair<std::string, AblationFlags>> rows,
                                         std::ostream* log) {
  std::vector<AblationRow> out;
  for (const auto& [name, flags] : rows) {
    ModelConfig cfg = base_cfg;
    cfg.flags = flags;
    Model<T> model = build_model<T>(cfg, cfg.seed);
    if (log) (*log) << "[ablate] " << name << "\n";
    AblationRow row;
    row.name = name;
    row.flags = flags;
    row.params = count_learnable_params(model);
    row.macs = model_cost(cfg).total_macs();
    row.history = train_model(model, task, tcfg, log);
    row.final_train_acc = row.history.back().train_acc;
    row.final_val_acc = row.history.back().val_acc;
    row.epochs_to_95 = epochs_to_fraction_of_final(row.history);
    out.push_back(std::move(row));
  }
  return out;
}

#define FCA_INSTANTIATE_TRAIN(T)                                                                         \
  template class AdamW<T>;                                                                               \
  template double evaluate_accuracy(const Model<T>&, const SynthTask&, bool);                            \
  template std::vector<EpochStats> train_model(Model<T>&, const SynthTask&, const TrainConfig&,          \
                                               std::ostream*);                                           \
  template std::vector<AttnMassRow> attn_mass(const Model<T>&, const Tensor<T>&);                        \
  template std::vector<AblationRow> ablation_ladder(const ModelConfig&, const SynthTask&,                \
                                                    const TrainConfig&,                                  \
                                                    std::span<const std::pair<std::string, AblationFlags>>, \
                                                    std::ostream*);

FCA_INSTANTIATE_TRAIN(float)
FCA_INSTANTIATE_TRAIN(double)

#undef FCA_INSTANTIATE_TRAIN

}  // namespace fca
