// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "okd/net.hpp"
#include "okd/tensor.hpp"
#include "okd/tensor_io.hpp"

namespace okd {

/// Examples with class labels and optional domain labels. Split roles live in
/// a DomainSplit keyed by example id.
struct LabeledDataset {
  InputKind kind = InputKind::image2d;
  std::size_t num_classes = 0;
  std::vector<std::string> ids;
  Tensor examples;  // [N, ...]
  std::vector<int> class_labels;
  std::vector<int> domain_labels;  // empty when unknown

  std::size_t size() const { return ids.size(); }

  void validate() const {
    const std::size_t n = ids.size();
    if (!examples.defined() || examples.rank() < 2 || examples.shape()[0] != n)
      throw std::runtime_error("LabeledDataset: examples tensor does not match id count");
    if (class_labels.size() != n) throw std::runtime_error("LabeledDataset: class label count mismatch");
    if (!domain_labels.empty() && domain_labels.size() != n)
      throw std::runtime_error("LabeledDataset: domain label count mismatch");
    for (const int c : class_labels)
      if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
        throw std::runtime_error("LabeledDataset: class label out of range");
  }

  /// Per-example shape without the batch dimension.
  Shape example_shape() const {
    Shape s(examples.shape().begin() + 1, examples.shape().end());
    return s;
  }

  /// Gathers rows into a fresh batch tensor.
  Tensor gather(const std::vector<std::size_t>& rows) const {
    const std::size_t stride = examples.size() / size();
    Shape shape = examples.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * stride);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy(examples.data().begin() + rows[i] * stride, examples.data().begin() + (rows[i] + 1) * stride,
                out.begin() + i * stride);
    return Tensor(std::move(shape), std::move(out));
  }

  std::vector<int> gather_labels(const std::vector<std::size_t>& rows) const {
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = class_labels[rows[i]];
    return out;
  }
};

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["kind"] = to_string(ds.kind);
  manifest["num_classes"] = ds.num_classes;
  manifest["ids"] = ds.ids;
  manifest["class_labels"] = ds.class_labels;
  if (!ds.domain_labels.empty()) manifest["domain_labels"] = ds.domain_labels;
  manifest["examples_file"] = "examples.odt";
  write_tensor((dir / "examples.odt").string(), ds.examples);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_dataset: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: cannot open " + (dir / "manifest.json").string());
  Json manifest = Json::parse(is);
  LabeledDataset ds;
  ds.kind = input_kind_from_string(manifest.at("kind").get<std::string>());
  ds.num_classes = manifest.at("num_classes").get<std::size_t>();
  ds.ids = manifest.at("ids").get<std::vector<std::string>>();
  ds.class_labels = manifest.at("class_labels").get<std::vector<int>>();
  if (manifest.contains("domain_labels")) ds.domain_labels = manifest.at("domain_labels").get<std::vector<int>>();
  ds.examples = read_tensor((dir / manifest.at("examples_file").get<std::string>()).string());
  ds.validate();
  return ds;
}

}  // namespace okd
