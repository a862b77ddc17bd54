#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "clustering.hpp"
#include "embedder.hpp"
#include "intuition.hpp"
#include "numeric.hpp"
#include "toy_model.hpp"

namespace mor1e {

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 64;
  int epochs = 3;
  LrSchedule schedule = LrSchedule::Cosine;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 1;

  void validate() const {
    require(learning_rate >= 0.0, "TrainConfig: learning_rate must be non-negative");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  }
};

inline double cosine_lr(double base_lr, long long step, long long total_steps) {
  require(total_steps >= 1, "cosine_lr: total_steps must be >= 1");
  require(step >= 0 && step <= total_steps,
          "cosine_lr: step " + std::to_string(step) + " out of range [0, " +
              std::to_string(total_steps) + "]");
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                         static_cast<double>(total_steps)));
}

struct AdamState {
  std::vector<double> m, v;
  long long step = 0;
};

inline AdamState make_adam_state(const std::vector<ParamRef>& params) {
  AdamState s;
  s.m.assign(static_cast<size_t>(total_size(params)), 0.0);
  s.v.assign(static_cast<size_t>(total_size(params)), 0.0);
  return s;
}

// Standard Adam with bias correction over the flattened registry.
inline void adam_step(const std::vector<ParamRef>& params, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  require(state.m.size() == static_cast<size_t>(total_size(params)),
          "adam_step: state size does not match parameter registry");
  state.step += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  size_t ofs = 0;
  for (const auto& p : params) {
    for (int i = 0; i < p.size; ++i, ++ofs) {
      double g = p.grad[i];
      state.m[ofs] = beta1 * state.m[ofs] + (1.0 - beta1) * g;
      state.v[ofs] = beta2 * state.v[ofs] + (1.0 - beta2) * g * g;
      double mhat = state.m[ofs] / bc1;
      double vhat = state.v[ofs] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

enum class IntuitionSource { None, Pipeline, OracleOneHot };

struct IntuitionConfig {
  IntuitionSource source = IntuitionSource::None;
  const CentroidSet* centroids = nullptr;  // Pipeline
  const EmbedderSpec* embedder = nullptr;  // Pipeline
};

struct StepRecord {
  long long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  std::map<int, double> per_task_eval;
  double wall_seconds = 0.0;  // not written to CSV
};

struct EntropyRecord {
  int epoch = 0;
  std::string site;
  double value = 0.0;
};

struct MetricsLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<EntropyRecord> entropy;
  double final_eval_acc = 0.0;
  long long trainable_params = 0;
};

namespace detail {

inline int argmax(const Vector& v) {
  int best = 0;
  for (int i = 1; i < v.dim(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> eval;
};

// Deterministic per-task-stratified 80/20 split.
inline SplitIndices stratified_split(const Dataset& ds, uint64_t seed) {
  std::map<int, std::vector<int>> by_task;
  for (size_t i = 0; i < ds.instances.size(); ++i)
    by_task[ds.instances[i].task_id].push_back(static_cast<int>(i));
  SplitIndices out;
  Rng rng(derive_seed(seed, "split"));
  for (auto& [task, idx] : by_task) {
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<size_t>(rng.below(static_cast<int>(i)))]);
    size_t n_eval = std::max<size_t>(1, idx.size() / 5);
    for (size_t i = 0; i < idx.size(); ++i)
      (i < n_eval ? out.eval : out.train).push_back(idx[i]);
  }
  return out;
}

}  // namespace detail

// Per-instance routing reference resolved once, before training.
inline std::vector<IntuitionVector> precompute_intuition(const Dataset& ds,
                                                         const ToyModelConfig& model_cfg,
                                                         const IntuitionConfig& icfg) {
  std::vector<IntuitionVector> out;
  if (!model_cfg.adapter || model_cfg.adapter->fusion == FusionMode::None) return out;
  const int n_experts = model_cfg.adapter->experts;
  out.reserve(ds.instances.size());
  if (model_cfg.adapter->fusion == FusionMode::TaskCategory) {
    for (const auto& inst : ds.instances)
      out.push_back(task_category_encoding(inst.task_id, n_experts));
    return out;
  }
  // Intuition fusion.
  switch (icfg.source) {
    case IntuitionSource::OracleOneHot:
      require(ds.spec.tasks == n_experts,
              "intuition: oracle one-hot needs tasks == experts, got " +
                  std::to_string(ds.spec.tasks) + " vs " + std::to_string(n_experts));
      for (const auto& inst : ds.instances) out.push_back(oracle_onehot(inst.task_id, n_experts));
      return out;
    case IntuitionSource::Pipeline: {
      require(icfg.centroids != nullptr && icfg.embedder != nullptr,
              "intuition: pipeline source needs centroids and an embedder spec");
      require(icfg.centroids->k() == n_experts,
              "intuition: centroid count K=" + std::to_string(icfg.centroids->k()) +
                  " must equal expert count N=" + std::to_string(n_experts));
      std::vector<std::string> texts;
      texts.reserve(ds.instances.size());
      for (const auto& inst : ds.instances) texts.push_back(text_of(inst));
      auto embs = embed(*icfg.embedder, texts);
      for (const auto& e : embs) out.push_back(compute_intuition(e, *icfg.centroids));
      return out;
    }
    case IntuitionSource::None:
      throw std::invalid_argument(
          "intuition: fusion mode 'intuition' requires a pipeline or oracle source");
  }
  return out;
}

inline ToyBatch make_batch(const Dataset& ds, const std::vector<IntuitionVector>& intuition,
                           const std::vector<int>& indices) {
  ToyBatch b;
  for (int i : indices) {
    b.items.push_back(&ds.instances[static_cast<size_t>(i)]);
    b.intuition.push_back(intuition.empty() ? nullptr : &intuition[static_cast<size_t>(i)]);
  }
  return b;
}

inline double accuracy(const ToyModel& model, const ToyBatch& batch) {
  if (batch.size() == 0) return 0.0;
  auto logits = model.batch_forward(batch);
  int hits = 0;
  for (int b = 0; b < batch.size(); ++b)
    if (detail::argmax(logits[static_cast<size_t>(b)]) == batch.items[static_cast<size_t>(b)]->label)
      ++hits;
  return static_cast<double>(hits) / batch.size();
}

// Trains on a stratified 80/20 split and records losses, accuracies (overall
// and per task), and routing entropy per epoch. The trained model is handed
// back through `keep_model` when routing inspection is wanted afterwards.
inline MetricsLog run_experiment(const ToyModelConfig& model_cfg, const TrainConfig& train_cfg,
                                 const Dataset& ds, const IntuitionConfig& icfg,
                                 std::optional<ToyModel>* keep_model = nullptr) {
  model_cfg.validate();
  train_cfg.validate();
  require(!ds.instances.empty(), "run_experiment: dataset is empty");

  ToyModel model(model_cfg);
  auto intuition = precompute_intuition(ds, model_cfg, icfg);
  auto split = detail::stratified_split(ds, train_cfg.seed);
  require(!split.train.empty(), "run_experiment: training split is empty");

  auto params = model.collect_trainables();
  AdamState adam = make_adam_state(params);

  MetricsLog log;
  log.trainable_params = total_size(params);

  const long long batches_per_epoch =
      (static_cast<long long>(split.train.size()) + train_cfg.batch_size - 1) / train_cfg.batch_size;
  const long long total_steps = batches_per_epoch * train_cfg.epochs;
  long long step = 0;

  ToyBatch train_all = make_batch(ds, intuition, split.train);
  ToyBatch eval_all = make_batch(ds, intuition, split.eval);

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int> order = split.train;
    Rng shuffle_rng(derive_seed(train_cfg.seed, "shuffle-epoch-" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.below(static_cast<int>(i)))]);

    for (size_t ofs = 0; ofs < order.size(); ofs += static_cast<size_t>(train_cfg.batch_size)) {
      std::vector<int> idx(order.begin() + static_cast<long>(ofs),
                           order.begin() + static_cast<long>(std::min(
                                               ofs + static_cast<size_t>(train_cfg.batch_size),
                                               order.size())));
      ToyBatch batch = make_batch(ds, intuition, idx);
      model.zero_grads();
      double loss = model.batch_backward(batch);
      double lr = train_cfg.schedule == LrSchedule::Cosine
                      ? cosine_lr(train_cfg.learning_rate, step, total_steps)
                      : train_cfg.learning_rate;
      if (!std::isfinite(loss)) {
        std::string where = "loss";
        for (const auto& p : params)
          for (int i = 0; i < p.size; ++i)
            if (!std::isfinite(p.grad[i])) {
              where = p.name;
              i = p.size;
              break;
            }
        throw std::runtime_error("run_experiment: non-finite loss at step " + std::to_string(step) +
                                 " (first non-finite gradient: " + where + ")");
      }
      adam_step(params, adam, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps);
      log.steps.push_back({step, loss, lr});
      ++step;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_acc = accuracy(model, train_all);
    er.eval_acc = accuracy(model, eval_all);
    std::map<int, std::vector<int>> eval_by_task;
    for (int i : split.eval) eval_by_task[ds.instances[static_cast<size_t>(i)].task_id].push_back(i);
    for (const auto& [task, idx] : eval_by_task)
      er.per_task_eval[task] = accuracy(model, make_batch(ds, intuition, idx));
    for (const auto& [site, h] : model.routing_entropy(eval_all))
      log.entropy.push_back({epoch, site, h});
    er.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(std::move(er));
  }

  log.final_eval_acc = log.epochs.back().eval_acc;
  if (keep_model) keep_model->emplace(std::move(model));
  return log;
}

// CSV output. Timing never lands in these files so identical runs are
// byte-identical.
inline void write_metrics_csv(const MetricsLog& log, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/metrics.csv");
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + dir + "/metrics.csv");
    out << "epoch,split,task,accuracy\n";
    for (const auto& e : log.epochs) {
      out << e.epoch << ",train,all," << detail::format_double(e.train_acc) << "\n";
      out << e.epoch << ",eval,all," << detail::format_double(e.eval_acc) << "\n";
      for (const auto& [task, acc] : e.per_task_eval)
        out << e.epoch << ",eval," << task << "," << detail::format_double(acc) << "\n";
    }
  }
  {
    std::ofstream out(dir + "/steps.csv");
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + dir + "/steps.csv");
    out << "step,loss,lr\n";
    for (const auto& s : log.steps)
      out << s.step << "," << detail::format_double(s.loss) << "," << detail::format_double(s.lr)
          << "\n";
  }
  {
    std::ofstream out(dir + "/entropy.csv");
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + dir + "/entropy.csv");
    out << "epoch,site,entropy\n";
    for (const auto& e : log.entropy)
      out << e.epoch << "," << e.site << "," << detail::format_double(e.value) << "\n";
  }
}

}  // namespace mor1e
