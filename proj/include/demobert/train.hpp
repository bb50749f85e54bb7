#pragma once

// Optimization loop: decoupled-weight-decay Adam, single-task fine-tuning,
// and the two multi-task strategies (alternating with head freezing, parallel
// with a joint weighted loss).

#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "demobert/model.hpp"

namespace demobert {

struct TrainConfig {
  double learning_rate = 3e-5;
  int batch_size = 32;
  int epochs = 3;
  double weight_decay = 0.01;
  uint64_t seed = 0;
  std::optional<double> grad_clip;  // global max-norm when set

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be positive");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (epochs <= 0) throw ConfigError("train: epochs must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (grad_clip && *grad_clip <= 0.0) throw ConfigError("train: grad_clip must be positive");
  }
};

struct MtlStrategy {
  enum class Kind { alternating, parallel };
  Kind kind = Kind::alternating;
  std::vector<std::string> task_order;         // alternating: cyclic head schedule
  std::map<std::string, double> loss_weights;  // parallel: per-head weights (default 1)

  // the schedule / weights must cover exactly the assembly's heads
  void validate_against(const std::vector<std::string>& heads) const {
    if (kind == Kind::alternating) {
      if (std::set<std::string>(task_order.begin(), task_order.end()) !=
          std::set<std::string>(heads.begin(), heads.end()))
        throw ConfigError("mtl: task_order must cover exactly the assembly heads");
    } else {
      for (const auto& [h, w] : loss_weights) {
        if (std::find(heads.begin(), heads.end(), h) == heads.end())
          throw ConfigError("mtl: loss weight for unknown head '" + h + "'");
        if (w < 0.0) throw ConfigError("mtl: loss weight for '" + h + "' must be >= 0");
      }
    }
  }

  double weight_of(const std::string& head) const {
    auto it = loss_weights.find(head);
    return it == loss_weights.end() ? 1.0 : it->second;
  }
};

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int64_t step = 0;
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> moments;
};

// Bias-corrected Adam update plus the decoupled decay term lr * wd * w.
// Frozen parameters are untouched (their moments do not advance either).
inline void adamw_step(ParamStore& params, OptimizerState& state, const TrainConfig& cfg) {
  cfg.validate();
  for (const auto& p : params.all()) {
    if (!p.trainable) continue;
    for (double g : p.grad)
      if (!std::isfinite(g))
        throw ContractError("adamw: non-finite gradient in parameter '" + p.name + "'");
  }
  if (cfg.grad_clip) {
    double sq = 0.0;
    for (const auto& p : params.all())
      if (p.trainable)
        for (double g : p.grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > *cfg.grad_clip) {
      const double s = *cfg.grad_clip / norm;
      for (auto& p : params.all())
        if (p.trainable)
          for (double& g : p.grad) g *= s;
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(p.grad.size(), 0.0);
      mom.v.assign(p.grad.size(), 0.0);
    }
    const double decay = p.decay_exempt ? 0.0 : cfg.weight_decay;
    for (size_t i = 0; i < p.grad.size(); ++i) {
      const double g = p.grad[i];
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      p.tensor.values[i] -= cfg.learning_rate * (mhat / (std::sqrt(vhat) + state.epsilon)) +
                            cfg.learning_rate * decay * p.tensor.values[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Task model adapter (assemblies and baselines share the trainers)
// ---------------------------------------------------------------------------

struct TaskModel {
  ParamStore* params = nullptr;
  std::vector<std::string> heads;
  std::function<std::map<std::string, Tensor>(const LabeledDataset&, const std::vector<int>&,
                                              Pass&)>
      forward;
  std::function<void(const std::string&, bool)> set_head_trainable;
};

inline TaskModel task_model(ModelAssembly& m) {
  TaskModel tm;
  tm.params = &m.params();
  tm.heads = m.model_config().heads;
  tm.forward = [&m](const LabeledDataset& d, const std::vector<int>& idx, Pass& pass) {
    return m.forward(d, idx, pass);
  };
  tm.set_head_trainable = [&m](const std::string& head, bool trainable) {
    m.params().set_trainable("head." + head + ".", trainable);
  };
  return tm;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  std::string active_head;
  std::map<std::string, double> head_loss;      // mean batch loss
  std::map<std::string, double> train_accuracy; // end-of-epoch, train split
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  // epoch<TAB>active_head<TAB>head_losses...<TAB>train_acc...
  std::string to_tsv() const {
    std::ostringstream out;
    out << "# epoch\tactive_head\thead_losses\ttrain_acc\n";
    for (const auto& e : epochs) {
      out << e.epoch << "\t" << e.active_head;
      for (const auto& [h, l] : e.head_loss) out << "\t" << h << "_loss=" << l;
      for (const auto& [h, a] : e.train_accuracy) out << "\t" << h << "_acc=" << a;
      out << "\n";
    }
    return out.str();
  }
};

namespace detail {

inline std::vector<int> labels_for(const LabeledDataset& data, const std::vector<int>& idx,
                                   const std::string& head) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) {
    const auto& labels = data.examples[size_t(i)].labels;
    auto it = labels.find(head);
    if (it == labels.end())
      throw ContractError("training example " + std::to_string(i) + " has no '" + head +
                          "' label");
    out.push_back(it->second);
  }
  return out;
}

inline void require_two_classes(const LabeledDataset& data, const std::vector<int>& idx,
                                const std::string& head) {
  const auto labels = labels_for(data, idx, head);
  const auto [mn, mx] = std::minmax_element(labels.begin(), labels.end());
  if (*mn == *mx)
    throw LabelError("degenerate task: all '" + head + "' training labels are " +
                     std::to_string(*mn));
}

inline std::vector<std::vector<int>> shuffled_batches(int n, int batch_size, uint64_t seed,
                                                      int epoch) {
  std::vector<int> order(size_t(n), 0);
  for (int i = 0; i < n; ++i) order[size_t(i)] = i;
  Rng rng(derive_seed(seed, hash_str("shuffle"), uint64_t(epoch)));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;  // last partial batch kept
}

}  // namespace detail

// Eval-mode predictions for one head over the given examples.
inline std::vector<int> predict_labels(TaskModel& model, const LabeledDataset& data,
                                       const std::vector<int>& idx, const std::string& head,
                                       int batch_size = 64) {
  std::vector<int> preds;
  preds.reserve(idx.size());
  for (size_t start = 0; start < idx.size(); start += size_t(batch_size)) {
    const size_t end = std::min(idx.size(), start + size_t(batch_size));
    std::vector<int> chunk(idx.begin() + std::ptrdiff_t(start), idx.begin() + std::ptrdiff_t(end));
    Pass pass;  // inference
    auto logits = model.forward(data, chunk, pass);
    const Tensor& lg = logits.at(head);
    for (int r = 0; r < lg.dim(0); ++r) preds.push_back(lg.at(r, 1) > lg.at(r, 0) ? 1 : 0);
  }
  return preds;
}

inline double accuracy_of(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ContractError("accuracy: prediction/label length mismatch");
  int ok = 0;
  for (size_t i = 0; i < preds.size(); ++i) ok += preds[i] == labels[i];
  return double(ok) / double(preds.size());
}

namespace detail {

// One optimisation epoch over the given head set; returns mean batch loss per
// head. `weights` scales each head's loss (parallel MT); single-task and
// alternating pass exactly one head.
inline std::map<std::string, double> run_epoch(TaskModel& model, const LabeledDataset& data,
                                               const std::vector<int>& train_idx,
                                               const std::vector<std::string>& loss_heads,
                                               const std::map<std::string, double>& weights,
                                               const TrainConfig& cfg, OptimizerState& opt,
                                               int epoch, uint64_t& global_step) {
  std::map<std::string, double> loss_sums;
  int batch_count = 0;
  auto batches = shuffled_batches(int(train_idx.size()), cfg.batch_size, cfg.seed, epoch);
  for (auto& batch : batches) {
    for (int& i : batch) i = train_idx[size_t(i)];
    Tape tape;
    Pass pass;
    pass.tape = &tape;
    pass.train = true;
    pass.dropout_seed = derive_seed(cfg.seed, hash_str("dropout"));
    pass.step = global_step++;
    auto logits = model.forward(data, batch, pass);
    Tensor total;
    bool first = true;
    for (const auto& head : loss_heads) {
      Tensor ce = cross_entropy(logits.at(head), labels_for(data, batch, head));
      loss_sums[head] += ce.values[0];
      const double w = weights.count(head) ? weights.at(head) : 1.0;
      Tensor weighted = scale(ce, w);
      total = first ? weighted : add(total, weighted);
      first = false;
    }
    model.params->zero_grads();
    tape.backward(total);
    adamw_step(*model.params, opt, cfg);
    ++batch_count;
  }
  for (auto& [h, s] : loss_sums) s /= std::max(1, batch_count);
  return loss_sums;
}

}  // namespace detail

// epochs x shuffled mini-batches on one classification head
inline TrainLog train_single_task(TaskModel& model, const LabeledDataset& data,
                                  const TrainConfig& cfg, OptimizerState* opt_state = nullptr) {
  cfg.validate();
  if (model.heads.size() != 1)
    throw ContractError("train_single_task expects an assembly with exactly one head, got " +
                        std::to_string(model.heads.size()));
  const std::string head = model.heads[0];
  std::vector<int> all(size_t(data.size()));
  for (int i = 0; i < data.size(); ++i) all[size_t(i)] = i;
  if (all.empty()) throw ContractError("train_single_task: empty dataset");
  detail::require_two_classes(data, all, head);

  OptimizerState local;
  OptimizerState& opt = opt_state ? *opt_state : local;
  TrainLog log;
  uint64_t global_step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochLog el;
    el.epoch = e + 1;
    el.active_head = head;
    el.head_loss = detail::run_epoch(model, data, all, {head}, {}, cfg, opt, e, global_step);
    el.train_accuracy[head] =
        accuracy_of(predict_labels(model, data, all, head), detail::labels_for(data, all, head));
    log.epochs.push_back(std::move(el));
  }
  return log;
}

// Epoch e trains only head task_order[e mod k]; the other heads' parameters
// are frozen for that epoch while the shared encoder (and fusion/FNN path)
// keeps updating. One optimizer state spans all epochs; frozen parameters
// simply skip their update.
inline TrainLog train_multitask_alternating(TaskModel& model,
                                            const std::map<std::string, const LabeledDataset*>& data_per_task,
                                            const TrainConfig& cfg, const MtlStrategy& strategy) {
  cfg.validate();
  if (strategy.kind != MtlStrategy::Kind::alternating)
    throw ConfigError("train_multitask_alternating: strategy kind mismatch");
  strategy.validate_against(model.heads);
  for (const auto& head : strategy.task_order) {
    auto it = data_per_task.find(head);
    if (it == data_per_task.end() || it->second == nullptr || it->second->size() == 0)
      throw ContractError("alternating MTL: empty dataset for scheduled head '" + head + "'");
  }

  OptimizerState opt;
  TrainLog log;
  uint64_t global_step = 0;
  const int k = int(strategy.task_order.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    const std::string active = strategy.task_order[size_t(e % k)];
    const LabeledDataset& data = *data_per_task.at(active);
    std::vector<int> all(size_t(data.size()));
    for (int i = 0; i < data.size(); ++i) all[size_t(i)] = i;
    detail::require_two_classes(data, all, active);

    for (const auto& head : model.heads)
      model.set_head_trainable(head, head == active);

    EpochLog el;
    el.epoch = e + 1;
    el.active_head = active;
    el.head_loss = detail::run_epoch(model, data, all, {active}, {}, cfg, opt, e, global_step);
    el.train_accuracy[active] = accuracy_of(predict_labels(model, data, all, active),
                                            detail::labels_for(data, all, active));
    log.epochs.push_back(std::move(el));
  }
  for (const auto& head : model.heads) model.set_head_trainable(head, true);
  return log;
}

// Joint loss sum_t w_t * CE_t on a dataset where every example carries labels
// for all heads; one optimizer step per batch.
inline TrainLog train_multitask_parallel(TaskModel& model, const LabeledDataset& data,
                                         const TrainConfig& cfg, const MtlStrategy& strategy) {
  cfg.validate();
  if (strategy.kind != MtlStrategy::Kind::parallel)
    throw ConfigError("train_multitask_parallel: strategy kind mismatch");
  strategy.validate_against(model.heads);
  std::vector<int> all(size_t(data.size()));
  for (int i = 0; i < data.size(); ++i) all[size_t(i)] = i;
  if (all.empty()) throw ContractError("train_multitask_parallel: empty dataset");
  for (const auto& head : model.heads) detail::labels_for(data, all, head);  // label presence

  std::map<std::string, double> weights;
  for (const auto& head : model.heads) weights[head] = strategy.weight_of(head);

  OptimizerState opt;
  TrainLog log;
  uint64_t global_step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochLog el;
    el.epoch = e + 1;
    el.active_head = "all";
    el.head_loss =
        detail::run_epoch(model, data, all, model.heads, weights, cfg, opt, e, global_step);
    for (const auto& head : model.heads)
      el.train_accuracy[head] = accuracy_of(predict_labels(model, data, all, head),
                                            detail::labels_for(data, all, head));
    log.epochs.push_back(std::move(el));
  }
  return log;
}

}  // namespace demobert
