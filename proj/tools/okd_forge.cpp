// SPDX-License-Identifier: Apache-2.0
//
// okd-forge: synthesize domain-shift benchmarks, train students with
// ERM/KD/OKD, evaluate checkpoints, and compare seeded runs.

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "okd/config.hpp"
#include "okd/dataset.hpp"
#include "okd/dosco.hpp"
#include "okd/net.hpp"
#include "okd/train.hpp"

namespace fs = std::filesystem;

namespace {

std::string replace_seed(std::string text, std::uint64_t seed) {
  const std::string token = "{seed}";
  for (std::size_t pos = text.find(token); pos != std::string::npos; pos = text.find(token))
    text.replace(pos, token.size(), std::to_string(seed));
  return text;
}

std::vector<std::uint64_t> parse_seed_range(const std::string& spec) {
  const auto dots = spec.find("..");
  if (dots == std::string::npos) return {std::stoull(spec)};
  const std::uint64_t lo = std::stoull(spec.substr(0, dots));
  const std::uint64_t hi = std::stoull(spec.substr(dots + 2));
  if (hi < lo) throw std::runtime_error("--seeds: empty range " + spec);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

std::size_t sweep_threads(std::size_t jobs) {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OKD_FORGE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = static_cast<std::size_t>(v);
  }
  return std::min(cap, jobs);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
  okd::SyntheticDGSpec spec;
  if (!config_path.empty()) spec = okd::synth_spec_from_json(okd::load_json_file(config_path));
  spec.validate();
  const auto ds = okd::generate_synthetic(spec);
  okd::save_dataset(ds.data, out_dir);
  okd::write_split_csv(ds.split, fs::path(out_dir) / "split.csv");
  write_text(fs::path(out_dir) / "synth_config.json", okd::to_json(spec).dump(2) + "\n");
  std::cout << "wrote " << ds.data.size() << " examples to " << out_dir << "\n";
  return 0;
}

int cmd_dosco(const std::string& features_path, std::size_t k, std::uint64_t seed, bool two_k,
              bool l2_normalize, const std::string& out_csv) {
  const okd::FeatureTable table = okd::load_feature_table(features_path);
  okd::DomainSplit split = okd::build_domain_splits(table, k, seed, l2_normalize);
  if (two_k) split = okd::subsample_2k(split, okd::SplitRng(seed).fork("2k"));
  okd::write_split_csv(split, out_csv);
  std::size_t train = 0, val = 0, test = 0;
  for (const auto& row : split.rows) {
    if (row.role == okd::Role::train) ++train;
    if (row.role == okd::Role::val) ++val;
    if (row.role == okd::Role::test) ++test;
  }
  std::cout << "wrote " << out_csv << " (" << train << " train, " << val << " val, " << test << " test)\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& method,
              const std::string& seeds_spec, const std::string& name, const std::string& out_dir) {
  okd::TrainConfig base;
  if (!config_path.empty()) base = okd::train_config_from_json(okd::load_json_file(config_path));
  if (!method.empty()) base.method = method;
  const bool teacher_mode = base.method == "teacher";

  const okd::LabeledDataset data = okd::load_dataset(data_dir);
  const okd::DomainSplit split = okd::read_split_csv(fs::path(data_dir) / "split.csv");

  std::vector<std::uint64_t> seeds{base.seed};
  if (!seeds_spec.empty()) seeds = parse_seed_range(seeds_spec);
  const std::string run_name = name.empty() ? base.method : name;

  std::atomic<bool> failed{false};
  std::mutex io_mutex;
  auto run_one = [&](std::uint64_t seed) {
    try {
      okd::TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.teacher_checkpoint = replace_seed(cfg.teacher_checkpoint, seed);
      okd::TrainOutput out;
      if (teacher_mode) {
        if (cfg.teacher.empty())
          throw std::runtime_error("train --method teacher needs a \"teacher\" preset in the config");
        out = okd::train_teacher(cfg, data, split);
        out.record.config = okd::to_json(cfg);
      } else {
        out = okd::train(cfg, data, split, okd::to_json(cfg));
      }
      const fs::path run_dir = fs::path(out_dir) / run_name;
      fs::create_directories(run_dir);
      okd::save_checkpoint(out.model, run_dir / std::to_string(seed) / "ckpt");
      okd::Json record = out.record.to_json();
      write_text(run_dir / (std::to_string(seed) + ".json"), record.dump(2) + "\n");
      std::lock_guard<std::mutex> lock(io_mutex);
      std::cout << run_name << " seed " << seed << ": id " << out.record.final_id_accuracy << ", ood "
                << out.record.final_ood_accuracy << " (epoch " << out.record.selected_epoch << ")\n";
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(io_mutex);
      std::cerr << run_name << " seed " << seed << " failed: " << e.what() << "\n";
      failed = true;
    }
  };

  const std::size_t workers = sweep_threads(seeds.size());
  if (workers <= 1) {
    for (const auto seed : seeds) run_one(seed);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < seeds.size(); i = next.fetch_add(1)) run_one(seeds[i]);
      });
    for (auto& t : pool) t.join();
  }
  return failed ? 1 : 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& split_csv,
             const std::string& out_file) {
  const okd::Network net = okd::load_checkpoint(checkpoint);
  const okd::LabeledDataset data = okd::load_dataset(data_dir);
  const fs::path split_path = split_csv.empty() ? fs::path(data_dir) / "split.csv" : fs::path(split_csv);
  const okd::DomainSplit split = okd::read_split_csv(split_path);
  if (net.spec().num_classes != data.num_classes)
    throw std::runtime_error("eval: checkpoint has " + std::to_string(net.spec().num_classes) +
                             " classes but the dataset has " + std::to_string(data.num_classes));

  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < data.ids.size(); ++i) by_id[data.ids[i]] = i;
  std::vector<std::size_t> rows;
  std::vector<std::string> row_ids;
  for (const auto& row : split.rows) {
    if (row.role == okd::Role::train) continue;
    const auto it = by_id.find(row.id);
    if (it == by_id.end()) throw std::runtime_error("eval: split row " + row.id + " is not in the dataset");
    rows.push_back(it->second);
    row_ids.push_back(row.id);
  }
  const std::vector<int> preds = okd::predict_classes(net, data, rows);
  std::unordered_map<std::string, int> by_row;
  for (std::size_t i = 0; i < rows.size(); ++i) by_row[row_ids[i]] = preds[i];
  const okd::SplitReport report = okd::evaluate_split_report(split, by_row);

  okd::Json j;
  j["id_accuracy"] = report.id_accuracy;
  j["ood_accuracy"] = report.ood_accuracy;
  j["gap"] = report.gap;
  const std::string text = j.dump(2) + "\n";
  if (!out_file.empty()) write_text(out_file, text);
  std::cout << text;
  return 0;
}

int cmd_compare(const std::vector<std::string>& inputs, const std::string& out_csv,
                const std::string& out_table) {
  std::vector<std::string> files;
  for (const auto& input : inputs) {
    if (fs::is_directory(input)) {
      for (const auto& entry : fs::recursive_directory_iterator(input))
        if (entry.is_regular_file() && entry.path().extension() == ".json" &&
            entry.path().filename() != "manifest.json" && entry.path().filename() != "synth_config.json")
          files.push_back(entry.path().string());
    } else {
      files.push_back(input);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("compare: no run records found");
  std::vector<okd::RunRecord> records;
  for (const auto& file : files) records.push_back(okd::RunRecord::from_json(okd::load_json_file(file)));
  const auto summaries = okd::compare(records);
  const std::string table = okd::comparison_table(summaries);
  std::cout << table;
  if (!out_csv.empty()) write_text(out_csv, okd::comparison_csv(summaries));
  if (!out_table.empty()) write_text(out_table, table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"okd-forge: out-of-distribution knowledge distillation toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic domain-shift image dataset");
  std::string synth_config, synth_out;
  synth->add_option("--config", synth_config, "JSON spec (defaults apply when omitted)");
  synth->add_option("--out", synth_out, "Output dataset directory")->required();

  auto* dosco = app.add_subcommand("dosco", "Build domain-shift splits from feature embeddings");
  std::string dosco_features, dosco_out = "split.csv";
  std::size_t dosco_k = 10;
  std::uint64_t dosco_seed = 0;
  bool dosco_two_k = false, dosco_l2 = false;
  dosco->add_option("--features", dosco_features, "Feature-table manifest JSON")->required();
  dosco->add_option("--k", dosco_k, "Clusters (domains) per class");
  dosco->add_option("--seed", dosco_seed, "Split seed");
  dosco->add_flag("--two-k", dosco_two_k, "Subsample to 1600 train + 400 val");
  dosco->add_flag("--l2-normalize", dosco_l2, "L2-normalize features before clustering");
  dosco->add_option("--out", dosco_out, "Output split CSV path");

  auto* train = app.add_subcommand("train", "Train a model (erm|kd|kd_aug|okd|teacher)");
  std::string train_config, train_data, train_method, train_seeds, train_name, train_out = "runs";
  train->add_option("--config", train_config, "Train config JSON (defaults apply when omitted)");
  train->add_option("--data", train_data, "Dataset directory (manifest + split.csv)")->required();
  train->add_option("--method", train_method, "Override the config method");
  train->add_option("--seed", train_seeds, "Single seed override");
  train->add_option("--seeds", train_seeds, "Seed sweep, e.g. 0..4");
  train->add_option("--name", train_name, "Run name (default: the method)");
  train->add_option("--out", train_out, "Runs root directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "Split CSV (default: <data>/split.csv)");
  eval->add_option("--out", eval_out, "Write the JSON report here as well");

  auto* compare = app.add_subcommand("compare", "Aggregate run records into a comparison report");
  std::vector<std::string> compare_inputs;
  std::string compare_csv, compare_table;
  compare->add_option("records", compare_inputs, "Run record files or directories")->required();
  compare->add_option("--out-csv", compare_csv, "Write the CSV report here");
  compare->add_option("--out-table", compare_table, "Write the text table here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_config, synth_out);
    if (dosco->parsed()) return cmd_dosco(dosco_features, dosco_k, dosco_seed, dosco_two_k, dosco_l2, dosco_out);
    if (train->parsed())
      return cmd_train(train_config, train_data, train_method, train_seeds, train_name, train_out);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_out);
    if (compare->parsed()) return cmd_compare(compare_inputs, compare_csv, compare_table);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
