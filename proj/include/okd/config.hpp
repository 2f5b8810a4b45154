// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "okd/augment.hpp"
#include "okd/dosco.hpp"
#include "okd/train.hpp"

namespace okd {

// JSON config parsing is fail-closed: unknown keys are rejected so a typo
// cannot silently fall back to a default. Every run embeds the fully
// resolved config in its RunRecord.

namespace detail {

inline void require_known_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::runtime_error("config: " + where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw std::runtime_error("config: unknown key \"" + key + "\" in " + where);
}

}  // namespace detail

inline Json to_json(const Augmentor& aug) {
  Json j;
  j["kind"] = to_string(aug.kind);
  j["beta_a"] = aug.beta_a;
  j["beta_b"] = aug.beta_b;
  j["k"] = aug.k;
  j["sigma"] = aug.sigma;
  j["epsilon"] = aug.epsilon;
  j["mask_fraction"] = aug.mask_fraction;
  return j;
}

inline Augmentor augmentor_from_json(const Json& j) {
  detail::require_known_keys(j, {"kind", "beta_a", "beta_b", "k", "sigma", "epsilon", "mask_fraction"}, "aug");
  Augmentor aug;
  if (j.contains("kind")) aug.kind = aug_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("beta_a")) aug.beta_a = j.at("beta_a").get<double>();
  if (j.contains("beta_b")) aug.beta_b = j.at("beta_b").get<double>();
  if (j.contains("k")) aug.k = j.at("k").get<std::size_t>();
  if (j.contains("sigma")) aug.sigma = j.at("sigma").get<double>();
  if (j.contains("epsilon")) aug.epsilon = j.at("epsilon").get<double>();
  if (j.contains("mask_fraction")) aug.mask_fraction = j.at("mask_fraction").get<double>();
  aug.validate();
  return aug;
}

inline Json to_json(const OptimizerConfig& opt) {
  Json j;
  j["kind"] = opt.kind;
  j["lr0"] = opt.lr0;
  j["momentum"] = opt.momentum;
  return j;
}

inline OptimizerConfig optimizer_from_json(const Json& j) {
  detail::require_known_keys(j, {"kind", "lr0", "momentum"}, "optimizer");
  OptimizerConfig opt;
  if (j.contains("kind")) opt.kind = j.at("kind").get<std::string>();
  if (j.contains("lr0")) opt.lr0 = j.at("lr0").get<double>();
  if (j.contains("momentum")) opt.momentum = j.at("momentum").get<double>();
  opt.validate();
  return opt;
}

inline Json to_json(const DistillConfig& d) {
  Json j;
  j["lambda"] = d.lambda;
  j["pi_ce"] = d.pi_ce;
  j["pi_kl"] = d.pi_kl;
  return j;
}

inline DistillConfig distill_from_json(const Json& j) {
  detail::require_known_keys(j, {"lambda", "pi_ce", "pi_kl"}, "distill");
  DistillConfig d;
  if (j.contains("lambda")) d.lambda = j.at("lambda").get<double>();
  if (j.contains("pi_ce")) d.pi_ce = j.at("pi_ce").get<double>();
  if (j.contains("pi_kl")) d.pi_kl = j.at("pi_kl").get<double>();
  d.validate();
  return d;
}

/// Fully resolved snapshot: every effective value, defaults included.
inline Json to_json(const TrainConfig& cfg) {
  Json j;
  j["method"] = cfg.method;
  j["student"] = cfg.student;
  if (!cfg.teacher.empty()) j["teacher"] = cfg.teacher;
  if (!cfg.teacher_checkpoint.empty()) j["teacher_checkpoint"] = cfg.teacher_checkpoint;
  j["optimizer"] = to_json(cfg.optimizer);
  j["batch_size"] = cfg.batch_size;
  j["max_epochs"] = cfg.max_epochs;
  j["distill"] = to_json(cfg.distill);
  j["aug"] = to_json(cfg.aug);
  j["seed"] = cfg.seed;
  return j;
}

inline TrainConfig train_config_from_json(const Json& j) {
  detail::require_known_keys(j,
                             {"method", "student", "teacher", "teacher_checkpoint", "optimizer", "batch_size",
                              "max_epochs", "distill", "aug", "seed"},
                             "train config");
  TrainConfig cfg;
  if (j.contains("method")) cfg.method = j.at("method").get<std::string>();
  if (j.contains("student")) cfg.student = j.at("student").get<std::string>();
  if (j.contains("teacher")) cfg.teacher = j.at("teacher").get<std::string>();
  if (j.contains("teacher_checkpoint")) cfg.teacher_checkpoint = j.at("teacher_checkpoint").get<std::string>();
  if (j.contains("optimizer")) cfg.optimizer = optimizer_from_json(j.at("optimizer"));
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("max_epochs")) cfg.max_epochs = j.at("max_epochs").get<std::size_t>();
  if (j.contains("distill")) cfg.distill = distill_from_json(j.at("distill"));
  if (j.contains("aug")) cfg.aug = augmentor_from_json(j.at("aug"));
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

inline Json to_json(const SyntheticDGSpec& spec) {
  Json j;
  j["num_classes"] = spec.num_classes;
  j["num_domains"] = spec.num_domains;
  j["samples_per_cell"] = spec.samples_per_cell;
  j["image_side"] = spec.image_side;
  j["class_signal"] = spec.class_signal;
  j["domain_signal"] = spec.domain_signal;
  j["noise_level"] = spec.noise_level;
  j["seed"] = spec.seed;
  return j;
}

inline SyntheticDGSpec synth_spec_from_json(const Json& j) {
  detail::require_known_keys(j,
                             {"num_classes", "num_domains", "samples_per_cell", "image_side", "class_signal",
                              "domain_signal", "noise_level", "seed"},
                             "synth config");
  SyntheticDGSpec spec;
  if (j.contains("num_classes")) spec.num_classes = j.at("num_classes").get<std::size_t>();
  if (j.contains("num_domains")) spec.num_domains = j.at("num_domains").get<std::size_t>();
  if (j.contains("samples_per_cell")) spec.samples_per_cell = j.at("samples_per_cell").get<std::size_t>();
  if (j.contains("image_side")) spec.image_side = j.at("image_side").get<std::size_t>();
  if (j.contains("class_signal")) spec.class_signal = j.at("class_signal").get<std::string>();
  if (j.contains("domain_signal")) spec.domain_signal = j.at("domain_signal").get<std::string>();
  if (j.contains("noise_level")) spec.noise_level = j.at("noise_level").get<double>();
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  spec.validate();
  return spec;
}

inline Json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  return Json::parse(is);
}

}  // namespace okd
