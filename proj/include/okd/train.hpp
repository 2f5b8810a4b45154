// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "okd/dataset.hpp"
#include "okd/distill.hpp"
#include "okd/dosco.hpp"
#include "okd/net.hpp"
#include "okd/optim.hpp"

namespace okd {

struct TrainConfig {
  std::string method = "erm";  // erm | kd | kd_aug | okd
  std::string student = "student2d";
  std::string teacher;             // teacher preset (used by train_teacher, or to train one inline)
  std::string teacher_checkpoint;  // directory of a saved teacher
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 40;
  DistillConfig distill;
  Augmentor aug;
  std::uint64_t seed = 0;

  bool is_distillation() const { return method == "kd" || method == "kd_aug" || method == "okd"; }

  void validate() const {
    if (method != "erm" && !is_distillation())
      throw std::invalid_argument("TrainConfig: unknown method: " + method);
    if (method == "erm" && (!teacher_checkpoint.empty() || !teacher.empty()))
      throw std::invalid_argument("TrainConfig: erm must not specify a teacher");
    if (is_distillation() && teacher_checkpoint.empty() && teacher.empty())
      throw std::invalid_argument("TrainConfig: " + method +
                                  " needs a teacher checkpoint or a teacher preset to train");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (max_epochs == 0) throw std::invalid_argument("TrainConfig: max_epochs must be positive");
    optimizer.validate();
    distill.validate();
    aug.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

/// One training run: resolved config, per-epoch metrics, the selected
/// checkpoint epoch, and final metrics computed from that checkpoint.
struct RunRecord {
  Json config;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;
  double final_id_accuracy = 0.0;
  double final_ood_accuracy = 0.0;
  bool has_teacher_metrics = false;
  double teacher_id_accuracy = 0.0;
  double teacher_ood_accuracy = 0.0;
  double wall_clock_sec = 0.0;

  Json to_json() const {
    Json j;
    j["config"] = config;
    j["seed"] = seed;
    Json eps = Json::array();
    for (const auto& e : epochs) {
      Json je;
      je["epoch"] = e.epoch;
      je["train_loss"] = e.train_loss;
      je["val_accuracy"] = e.val_accuracy;
      je["lr"] = e.lr;
      eps.push_back(std::move(je));
    }
    j["epochs"] = std::move(eps);
    j["selected_epoch"] = selected_epoch;
    j["final"] = Json{{"id_accuracy", final_id_accuracy}, {"ood_accuracy", final_ood_accuracy}};
    if (has_teacher_metrics)
      j["teacher"] = Json{{"id_accuracy", teacher_id_accuracy}, {"ood_accuracy", teacher_ood_accuracy}};
    j["wall_clock_sec"] = wall_clock_sec;
    return j;
  }

  static RunRecord from_json(const Json& j) {
    RunRecord r;
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& je : j.at("epochs")) {
      EpochRecord e;
      e.epoch = je.at("epoch").get<std::size_t>();
      e.train_loss = je.at("train_loss").get<double>();
      e.val_accuracy = je.at("val_accuracy").get<double>();
      e.lr = je.at("lr").get<double>();
      r.epochs.push_back(e);
    }
    r.selected_epoch = j.at("selected_epoch").get<std::size_t>();
    r.final_id_accuracy = j.at("final").at("id_accuracy").get<double>();
    r.final_ood_accuracy = j.at("final").at("ood_accuracy").get<double>();
    if (j.contains("teacher")) {
      r.has_teacher_metrics = true;
      r.teacher_id_accuracy = j.at("teacher").at("id_accuracy").get<double>();
      r.teacher_ood_accuracy = j.at("teacher").at("ood_accuracy").get<double>();
    }
    r.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    return r;
  }
};

/// Earliest epoch with the maximum validation accuracy.
inline std::size_t select_best_epoch(const std::vector<EpochRecord>& epochs) {
  if (epochs.empty()) throw std::invalid_argument("select_best_epoch: no epochs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < epochs.size(); ++i)
    if (epochs[i].val_accuracy > epochs[best].val_accuracy) best = i;
  return best;
}

/// Argmax class per row, lowest index on ties.
inline std::vector<int> predict_classes(const Network& net, const LabeledDataset& data,
                                        const std::vector<std::size_t>& rows, std::size_t eval_batch = 64) {
  NoGradGuard ng;
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t start = 0; start < rows.size(); start += eval_batch) {
    const std::size_t stop = std::min(rows.size(), start + eval_batch);
    const std::vector<std::size_t> chunk(rows.begin() + start, rows.begin() + stop);
    const Tensor logits = net.forward(data.gather(chunk));
    const std::size_t c = logits.shape()[1];
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (logits.data()[i * c + j] > logits.data()[i * c + arg]) arg = j;
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

inline double accuracy(const Network& net, const LabeledDataset& data, const std::vector<std::size_t>& rows) {
  if (rows.empty()) return 0.0;
  const std::vector<int> preds = predict_classes(net, data, rows);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (preds[i] == data.class_labels[rows[i]]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

struct TrainOutput {
  RunRecord record;
  Network model;  // parameters restored to the selected epoch
};

namespace detail {

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

inline SplitIndices index_split(const LabeledDataset& data, const DomainSplit& split) {
  std::unordered_map<std::string, std::size_t> by_id;
  by_id.reserve(data.ids.size());
  for (std::size_t i = 0; i < data.ids.size(); ++i) by_id[data.ids[i]] = i;
  SplitIndices out;
  for (const auto& row : split.rows) {
    const auto it = by_id.find(row.id);
    if (it == by_id.end()) throw std::runtime_error("train: split row " + row.id + " is not in the dataset");
    switch (row.role) {
      case Role::train: out.train.push_back(it->second); break;
      case Role::val: out.val.push_back(it->second); break;
      case Role::test: out.test.push_back(it->second); break;
    }
  }
  if (out.train.empty()) throw std::runtime_error("train: split has no train examples in the dataset");
  return out;
}

}  // namespace detail

inline TrainOutput train(const TrainConfig& cfg, const LabeledDataset& data, const DomainSplit& split,
                         Json resolved_config = Json());

/// ERM training of the teacher preset on the same data and protocol.
inline TrainOutput train_teacher(const TrainConfig& cfg, const LabeledDataset& data,
                                 const DomainSplit& split) {
  if (cfg.teacher.empty()) throw std::invalid_argument("train_teacher: no teacher preset configured");
  TrainConfig tc = cfg;
  tc.method = "erm";
  tc.student = cfg.teacher;
  tc.teacher.clear();
  tc.teacher_checkpoint.clear();
  return train(tc, data, split);
}

/// Config-driven training loop: minibatch optimization with a per-epoch
/// cosine schedule, validation-based model selection (earliest epoch on
/// ties), and final ID (val role) / OOD (test role) evaluation from the
/// selected checkpoint. Fully deterministic given (config, data, seed).
inline TrainOutput train(const TrainConfig& cfg, const LabeledDataset& data, const DomainSplit& split,
                         Json resolved_config) {
  cfg.validate();
  data.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto indices = detail::index_split(data, split);

  SplitRng root(cfg.seed);

  // student (or the net being trained)
  ModelSpec sspec = make_preset(cfg.student, data.num_classes, root.fork("init").next_u64());
  sspec.input_shape = data.example_shape();
  Network net = okd::build(sspec);

  // teacher for distillation: load a checkpoint, or train one from scratch
  Network teacher;
  bool have_teacher = false;
  if (cfg.is_distillation()) {
    if (!cfg.teacher_checkpoint.empty()) {
      teacher = load_checkpoint(cfg.teacher_checkpoint);
    } else {
      teacher = train_teacher(cfg, data, split).model;
    }
    teacher.set_trainable(false);
    have_teacher = true;
    if (teacher.spec().num_classes != data.num_classes)
      throw std::runtime_error("train: teacher classes do not match the dataset");
  }

  Optimizer optimizer(cfg.optimizer);
  SplitRng shuffle_rng = root.fork("shuffle");
  SplitRng aug_rng = root.fork("aug");

  RunRecord record;
  record.seed = cfg.seed;
  record.config = resolved_config.is_null() ? Json::object() : std::move(resolved_config);

  std::vector<std::vector<double>> best_params;
  double best_val = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.max_epochs, cfg.optimizer.lr0);
    std::vector<std::size_t> order = indices.train;
    shuffle_rng.fork(epoch).shuffle(order);

    double loss_sum = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> batch_rows(order.begin() + start, order.begin() + stop);
      const Tensor x = data.gather(batch_rows);
      const std::vector<int> y = data.gather_labels(batch_rows);
      SplitRng step_rng = aug_rng.fork(epoch).fork(step);

      Tensor loss;
      if (cfg.method == "erm")
        loss = cross_entropy(y, net.forward(x), 1.0);
      else if (cfg.method == "kd")
        loss = kd_loss(x, y, net, teacher, cfg.distill);
      else if (cfg.method == "okd")
        loss = okd_loss(x, y, net, teacher, cfg.aug, cfg.distill, step_rng);
      else
        loss = kd_aug_loss(x, y, net, teacher, cfg.aug, cfg.distill, step_rng);

      const double loss_val = loss.item();
      if (!std::isfinite(loss_val))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(step));
      loss_sum += loss_val * static_cast<double>(batch_rows.size());

      backward(loss);
      optimizer.step(net, lr);
      net.zero_grads();
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_sum / static_cast<double>(order.size());
    er.val_accuracy = accuracy(net, data, indices.val);
    er.lr = lr;
    record.epochs.push_back(er);

    if (er.val_accuracy > best_val) {
      best_val = er.val_accuracy;
      best_params = net.snapshot();
    }
  }

  record.selected_epoch = select_best_epoch(record.epochs);
  net.restore(best_params);
  record.final_id_accuracy = accuracy(net, data, indices.val);
  record.final_ood_accuracy = accuracy(net, data, indices.test);
  if (have_teacher) {
    record.has_teacher_metrics = true;
    record.teacher_id_accuracy = accuracy(teacher, data, indices.val);
    record.teacher_ood_accuracy = accuracy(teacher, data, indices.test);
  }
  record.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  TrainOutput out;
  out.record = std::move(record);
  out.model = std::move(net);
  return out;
}

// ---------------------------------------------------------------------------
// cross-run comparison
// ---------------------------------------------------------------------------

struct MethodSummary {
  std::string method;
  std::size_t n_runs = 0;
  double id_mean = 0.0, id_std = 0.0;
  double ood_mean = 0.0, ood_std = 0.0;
  bool has_gaps = false;
  double id_gap_mean = 0.0, id_gap_std = 0.0;
  double ood_gap_mean = 0.0, ood_gap_std = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (const double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());  // population std over the seed set
  return {mean, std::sqrt(var)};
}

}  // namespace detail

/// Per-method mean and std over seeds of ID/OOD accuracy and of the
/// teacher-student gaps. Runs without own teacher metrics (e.g. ERM) borrow
/// the teacher of a seed-matched distillation run when one exists.
inline std::vector<MethodSummary> compare(const std::vector<RunRecord>& records) {
  std::map<std::uint64_t, std::pair<double, double>> teacher_by_seed;
  for (const auto& r : records)
    if (r.has_teacher_metrics) teacher_by_seed[r.seed] = {r.teacher_id_accuracy, r.teacher_ood_accuracy};

  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const auto& r : records) {
    std::string method = "unknown";
    if (r.config.contains("method")) method = r.config.at("method").get<std::string>();
    by_method[method].push_back(&r);
  }

  std::vector<MethodSummary> out;
  for (const auto& [method, runs] : by_method) {
    MethodSummary s;
    s.method = method;
    s.n_runs = runs.size();
    std::vector<double> id, ood, id_gap, ood_gap;
    for (const RunRecord* r : runs) {
      id.push_back(r->final_id_accuracy);
      ood.push_back(r->final_ood_accuracy);
      double tid = 0.0, tood = 0.0;
      bool have = r->has_teacher_metrics;
      if (have) {
        tid = r->teacher_id_accuracy;
        tood = r->teacher_ood_accuracy;
      } else if (const auto it = teacher_by_seed.find(r->seed); it != teacher_by_seed.end()) {
        have = true;
        tid = it->second.first;
        tood = it->second.second;
      }
      if (have) {
        id_gap.push_back(tid - r->final_id_accuracy);
        ood_gap.push_back(tood - r->final_ood_accuracy);
      }
    }
    std::tie(s.id_mean, s.id_std) = detail::mean_std(id);
    std::tie(s.ood_mean, s.ood_std) = detail::mean_std(ood);
    if (id_gap.size() == runs.size() && !id_gap.empty()) {
      s.has_gaps = true;
      std::tie(s.id_gap_mean, s.id_gap_std) = detail::mean_std(id_gap);
      std::tie(s.ood_gap_mean, s.ood_gap_std) = detail::mean_std(ood_gap);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string comparison_csv(const std::vector<MethodSummary>& summaries) {
  std::string csv = "method,n_runs,id_mean,id_std,ood_mean,ood_std,id_gap_mean,id_gap_std,ood_gap_mean,ood_gap_std\n";
  char line[256];
  for (const auto& s : summaries) {
    if (s.has_gaps)
      std::snprintf(line, sizeof(line), "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", s.method.c_str(),
                    s.n_runs, s.id_mean, s.id_std, s.ood_mean, s.ood_std, s.id_gap_mean, s.id_gap_std,
                    s.ood_gap_mean, s.ood_gap_std);
    else
      std::snprintf(line, sizeof(line), "%s,%zu,%.6f,%.6f,%.6f,%.6f,,,,\n", s.method.c_str(), s.n_runs,
                    s.id_mean, s.id_std, s.ood_mean, s.ood_std);
    csv += line;
  }
  return csv;
}

inline std::string comparison_table(const std::vector<MethodSummary>& summaries) {
  std::string table;
  char line[256];
  std::snprintf(line, sizeof(line), "%-10s %4s %18s %18s %18s %18s\n", "method", "n", "id_acc", "ood_acc",
                "id_gap", "ood_gap");
  table += line;
  for (const auto& s : summaries) {
    char id[32], ood[32], idg[32], oodg[32];
    std::snprintf(id, sizeof(id), "%.4f +/- %.4f", s.id_mean, s.id_std);
    std::snprintf(ood, sizeof(ood), "%.4f +/- %.4f", s.ood_mean, s.ood_std);
    if (s.has_gaps) {
      std::snprintf(idg, sizeof(idg), "%.4f +/- %.4f", s.id_gap_mean, s.id_gap_std);
      std::snprintf(oodg, sizeof(oodg), "%.4f +/- %.4f", s.ood_gap_mean, s.ood_gap_std);
    } else {
      std::snprintf(idg, sizeof(idg), "-");
      std::snprintf(oodg, sizeof(oodg), "-");
    }
    std::snprintf(line, sizeof(line), "%-10s %4zu %18s %18s %18s %18s\n", s.method.c_str(), s.n_runs, id, ood,
                  idg, oodg);
    table += line;
  }
  return table;
}

}  // namespace okd
