// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "okd/rng.hpp"
#include "okd/tensor.hpp"
#include "okd/tensor_io.hpp"

namespace okd {

using Json = nlohmann::ordered_json;

enum class InputKind { image2d, waveform1d, flat };

inline std::string to_string(InputKind k) {
  switch (k) {
    case InputKind::image2d: return "image2d";
    case InputKind::waveform1d: return "waveform1d";
    case InputKind::flat: return "flat";
  }
  throw std::logic_error("unknown InputKind");
}

inline InputKind input_kind_from_string(const std::string& s) {
  if (s == "image2d") return InputKind::image2d;
  if (s == "waveform1d") return InputKind::waveform1d;
  if (s == "flat") return InputKind::flat;
  throw std::invalid_argument("unknown input kind: " + s);
}

struct LayerSpec {
  enum class Kind { dense, conv2d, conv1d, relu, maxpool, flatten, globalavgpool };
  Kind kind = Kind::relu;
  std::size_t units = 0;    // dense
  std::size_t filters = 0;  // conv
  std::size_t k = 0;        // conv kernel / pool window
  std::size_t stride = 1;
  std::size_t pad = 0;

  static LayerSpec dense(std::size_t units) { return {Kind::dense, units, 0, 0, 1, 0}; }
  static LayerSpec conv2d(std::size_t filters, std::size_t k, std::size_t stride = 1, std::size_t pad = 0) {
    return {Kind::conv2d, 0, filters, k, stride, pad};
  }
  static LayerSpec conv1d(std::size_t filters, std::size_t k, std::size_t stride = 1, std::size_t pad = 0) {
    return {Kind::conv1d, 0, filters, k, stride, pad};
  }
  static LayerSpec relu() { return {Kind::relu, 0, 0, 0, 1, 0}; }
  static LayerSpec maxpool(std::size_t k) { return {Kind::maxpool, 0, 0, k, 1, 0}; }
  static LayerSpec flatten() { return {Kind::flatten, 0, 0, 0, 1, 0}; }
  static LayerSpec globalavgpool() { return {Kind::globalavgpool, 0, 0, 0, 1, 0}; }
};

inline std::string to_string(LayerSpec::Kind k) {
  using K = LayerSpec::Kind;
  switch (k) {
    case K::dense: return "dense";
    case K::conv2d: return "conv2d";
    case K::conv1d: return "conv1d";
    case K::relu: return "relu";
    case K::maxpool: return "maxpool";
    case K::flatten: return "flatten";
    case K::globalavgpool: return "globalavgpool";
  }
  throw std::logic_error("unknown layer kind");
}

/// Declarative architecture description. `input_shape` is the per-example
/// shape without the batch dimension.
struct ModelSpec {
  InputKind input_kind = InputKind::flat;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
  std::uint64_t init_seed = 0;
};

inline Json to_json(const LayerSpec& l) {
  Json j;
  j["kind"] = to_string(l.kind);
  switch (l.kind) {
    case LayerSpec::Kind::dense: j["units"] = l.units; break;
    case LayerSpec::Kind::conv2d:
    case LayerSpec::Kind::conv1d:
      j["filters"] = l.filters;
      j["k"] = l.k;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      break;
    case LayerSpec::Kind::maxpool: j["k"] = l.k; break;
    default: break;
  }
  return j;
}

inline LayerSpec layer_from_json(const Json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense") return LayerSpec::dense(j.at("units").get<std::size_t>());
  if (kind == "conv2d")
    return LayerSpec::conv2d(j.at("filters").get<std::size_t>(), j.at("k").get<std::size_t>(),
                             j.at("stride").get<std::size_t>(), j.at("pad").get<std::size_t>());
  if (kind == "conv1d")
    return LayerSpec::conv1d(j.at("filters").get<std::size_t>(), j.at("k").get<std::size_t>(),
                             j.at("stride").get<std::size_t>(), j.at("pad").get<std::size_t>());
  if (kind == "relu") return LayerSpec::relu();
  if (kind == "maxpool") return LayerSpec::maxpool(j.at("k").get<std::size_t>());
  if (kind == "flatten") return LayerSpec::flatten();
  if (kind == "globalavgpool") return LayerSpec::globalavgpool();
  throw std::invalid_argument("unknown layer kind: " + kind);
}

inline Json to_json(const ModelSpec& s) {
  Json j;
  j["input_kind"] = to_string(s.input_kind);
  j["input_shape"] = s.input_shape;
  j["num_classes"] = s.num_classes;
  j["init_seed"] = s.init_seed;
  Json layers = Json::array();
  for (const auto& l : s.layers) layers.push_back(to_json(l));
  j["layers"] = std::move(layers);
  return j;
}

inline ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec s;
  s.input_kind = input_kind_from_string(j.at("input_kind").get<std::string>());
  s.input_shape = j.at("input_shape").get<Shape>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.init_seed = j.at("init_seed").get<std::uint64_t>();
  for (const auto& l : j.at("layers")) s.layers.push_back(layer_from_json(l));
  return s;
}

namespace detail {

inline std::size_t pooled_dim(std::size_t in, std::size_t k) { return in / k; }

/// Walks a per-example shape through the layer chain, throwing on any
/// inconsistency. Returns the final per-example shape.
inline Shape validate_chain(const ModelSpec& spec) {
  Shape cur = spec.input_shape;
  if (spec.num_classes == 0) throw std::invalid_argument("ModelSpec: num_classes must be positive");
  if ((spec.input_kind == InputKind::image2d && cur.size() != 3) ||
      (spec.input_kind == InputKind::waveform1d && cur.size() != 2) ||
      (spec.input_kind == InputKind::flat && cur.size() != 1))
    throw std::invalid_argument("ModelSpec: input_shape " + shape_str(cur) + " inconsistent with input kind " +
                                to_string(spec.input_kind));
  for (std::size_t d : cur)
    if (d == 0) throw std::invalid_argument("ModelSpec: zero input dimension");

  std::size_t li = 0;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::dense: {
        if (cur.size() != 1)
          throw std::invalid_argument("ModelSpec: dense layer " + std::to_string(li) +
                                      " needs a flat input, got " + shape_str(cur));
        if (l.units == 0) throw std::invalid_argument("ModelSpec: dense units must be positive");
        cur = {l.units};
        break;
      }
      case LayerSpec::Kind::conv2d: {
        if (cur.size() != 3)
          throw std::invalid_argument("ModelSpec: conv2d layer " + std::to_string(li) +
                                      " needs [C,H,W] input, got " + shape_str(cur));
        const std::size_t oh = conv_out_dim(cur[1], l.k, l.stride, l.pad, "ModelSpec/conv2d");
        const std::size_t ow = conv_out_dim(cur[2], l.k, l.stride, l.pad, "ModelSpec/conv2d");
        cur = {l.filters, oh, ow};
        break;
      }
      case LayerSpec::Kind::conv1d: {
        if (cur.size() != 2)
          throw std::invalid_argument("ModelSpec: conv1d layer " + std::to_string(li) +
                                      " needs [C,L] input, got " + shape_str(cur));
        const std::size_t ol = conv_out_dim(cur[1], l.k, l.stride, l.pad, "ModelSpec/conv1d");
        cur = {l.filters, ol};
        break;
      }
      case LayerSpec::Kind::relu: break;
      case LayerSpec::Kind::maxpool: {
        if (l.k == 0) throw std::invalid_argument("ModelSpec: maxpool window must be positive");
        if (cur.size() == 3) {
          if (cur[1] < l.k || cur[2] < l.k)
            throw std::invalid_argument("ModelSpec: maxpool window exceeds input " + shape_str(cur));
          cur = {cur[0], pooled_dim(cur[1], l.k), pooled_dim(cur[2], l.k)};
        } else if (cur.size() == 2) {
          if (cur[1] < l.k)
            throw std::invalid_argument("ModelSpec: maxpool window exceeds input " + shape_str(cur));
          cur = {cur[0], pooled_dim(cur[1], l.k)};
        } else {
          throw std::invalid_argument("ModelSpec: maxpool needs spatial input, got " + shape_str(cur));
        }
        break;
      }
      case LayerSpec::Kind::flatten: {
        cur = {shape_size(cur)};
        break;
      }
      case LayerSpec::Kind::globalavgpool: {
        if (cur.size() < 2)
          throw std::invalid_argument("ModelSpec: globalavgpool needs spatial input, got " + shape_str(cur));
        cur = {cur[0]};
        break;
      }
    }
    ++li;
  }
  if (cur.size() != 1 || cur[0] != spec.num_classes)
    throw std::invalid_argument("ModelSpec: layer chain ends with " + shape_str(cur) + ", expected [" +
                                std::to_string(spec.num_classes) + "] logits");
  return cur;
}

}  // namespace detail

/// An instantiated parameterized network. Parameters are leaf tensors;
/// forward() records a fresh graph per call and is a pure function of
/// (parameters, input).
class Network {
public:
  struct Param {
    std::string name;
    Tensor tensor;
  };

  Network() = default;

  const ModelSpec& spec() const { return spec_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params_) p.tensor.set_requires_grad(trainable);
  }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Copies of all parameter values (for best-epoch snapshots).
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor.data());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != params_.size()) throw std::invalid_argument("Network::restore: parameter count mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].size() != params_[i].tensor.size())
        throw std::invalid_argument("Network::restore: parameter size mismatch");
      params_[i].tensor.raw_data() = snap[i];
    }
  }

  /// Logits of shape [batch, num_classes].
  Tensor forward(const Tensor& x) const {
    if (x.rank() != spec_.input_shape.size() + 1)
      throw std::invalid_argument("Network::forward: input rank mismatch, got " + shape_str(x.shape()));
    for (std::size_t i = 0; i < spec_.input_shape.size(); ++i)
      if (x.shape()[i + 1] != spec_.input_shape[i])
        throw std::invalid_argument("Network::forward: input " + shape_str(x.shape()) +
                                    " does not match declared shape " + shape_str(spec_.input_shape));

    Tensor cur = x;
    std::size_t pi = 0;
    auto next_param = [&]() -> const Tensor& { return params_[pi++].tensor; };
    for (const auto& l : spec_.layers) {
      switch (l.kind) {
        case LayerSpec::Kind::dense: {
          const Tensor& w = next_param();
          const Tensor& b = next_param();
          if (cur.rank() != 2) cur = flatten(cur);
          cur = add_bias(matmul(cur, w), b);
          break;
        }
        case LayerSpec::Kind::conv2d: {
          const Tensor& w = next_param();
          const Tensor& b = next_param();
          cur = add_channel_bias(conv2d(cur, w, l.stride, l.pad), b);
          break;
        }
        case LayerSpec::Kind::conv1d: {
          const Tensor& w = next_param();
          const Tensor& b = next_param();
          cur = add_channel_bias(conv1d(cur, w, l.stride, l.pad), b);
          break;
        }
        case LayerSpec::Kind::relu: cur = relu(cur); break;
        case LayerSpec::Kind::maxpool: cur = cur.rank() == 4 ? maxpool2d(cur, l.k) : maxpool1d(cur, l.k); break;
        case LayerSpec::Kind::flatten: cur = flatten(cur); break;
        case LayerSpec::Kind::globalavgpool: cur = global_avg_pool(cur); break;
      }
    }
    return cur;
  }

  friend Network build(const ModelSpec& spec);

private:
  ModelSpec spec_;
  std::vector<Param> params_;
};

/// Instantiates a network with He fan-in initialization (zero biases),
/// deterministic in init_seed.
inline Network build(const ModelSpec& spec) {
  detail::validate_chain(spec);
  Network net;
  net.spec_ = spec;
  SplitRng init = SplitRng(spec.init_seed).fork("init");

  Shape cur = spec.input_shape;
  std::size_t li = 0;
  for (const auto& l : spec.layers) {
    SplitRng lr = init.fork(li);
    auto he_fill = [&](Tensor& t, std::size_t fan_in) {
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : t.raw_data()) v = lr.normal(0.0, std);
    };
    const std::string prefix = "layer" + std::to_string(li);
    switch (l.kind) {
      case LayerSpec::Kind::dense: {
        const std::size_t in = cur.size() == 1 ? cur[0] : shape_size(cur);
        Tensor w(Shape{in, l.units}, 0.0, true);
        he_fill(w, in);
        Tensor b(Shape{l.units}, 0.0, true);
        net.params_.push_back({prefix + ".weight", w});
        net.params_.push_back({prefix + ".bias", b});
        cur = {l.units};
        break;
      }
      case LayerSpec::Kind::conv2d: {
        Tensor w(Shape{l.filters, cur[0], l.k, l.k}, 0.0, true);
        he_fill(w, cur[0] * l.k * l.k);
        Tensor b(Shape{l.filters}, 0.0, true);
        net.params_.push_back({prefix + ".weight", w});
        net.params_.push_back({prefix + ".bias", b});
        cur = {l.filters, detail::conv_out_dim(cur[1], l.k, l.stride, l.pad, "build"),
               detail::conv_out_dim(cur[2], l.k, l.stride, l.pad, "build")};
        break;
      }
      case LayerSpec::Kind::conv1d: {
        Tensor w(Shape{l.filters, cur[0], l.k}, 0.0, true);
        he_fill(w, cur[0] * l.k);
        Tensor b(Shape{l.filters}, 0.0, true);
        net.params_.push_back({prefix + ".weight", w});
        net.params_.push_back({prefix + ".bias", b});
        cur = {l.filters, detail::conv_out_dim(cur[1], l.k, l.stride, l.pad, "build")};
        break;
      }
      case LayerSpec::Kind::relu: break;
      case LayerSpec::Kind::maxpool:
        if (cur.size() == 3)
          cur = {cur[0], detail::pooled_dim(cur[1], l.k), detail::pooled_dim(cur[2], l.k)};
        else
          cur = {cur[0], detail::pooled_dim(cur[1], l.k)};
        break;
      case LayerSpec::Kind::flatten: cur = {shape_size(cur)}; break;
      case LayerSpec::Kind::globalavgpool: cur = {cur[0]}; break;
    }
    ++li;
  }
  return net;
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

/// Named model presets. The 2d pair targets 3x32x32 inputs, the 1d pair
/// 1x256 waveforms; the teacher of each pair has well over 4x the student's
/// parameter count.
inline ModelSpec make_preset(const std::string& name, std::size_t num_classes, std::uint64_t init_seed) {
  ModelSpec s;
  s.num_classes = num_classes;
  s.init_seed = init_seed;
  if (name == "student2d") {
    s.input_kind = InputKind::image2d;
    s.input_shape = {3, 32, 32};
    s.layers = {LayerSpec::conv2d(8, 3),  LayerSpec::relu(),          LayerSpec::maxpool(2),
                LayerSpec::conv2d(16, 3), LayerSpec::relu(),          LayerSpec::globalavgpool(),
                LayerSpec::dense(num_classes)};
  } else if (name == "teacher2d") {
    s.input_kind = InputKind::image2d;
    s.input_shape = {3, 32, 32};
    s.layers = {LayerSpec::conv2d(16, 3, 2, 1), LayerSpec::relu(),
                LayerSpec::conv2d(32, 3, 2, 1), LayerSpec::relu(),
                LayerSpec::conv2d(48, 3, 2, 1), LayerSpec::relu(),
                LayerSpec::conv2d(48, 3, 1, 1), LayerSpec::relu(),
                LayerSpec::globalavgpool(),     LayerSpec::dense(num_classes)};
  } else if (name == "student1d") {
    s.input_kind = InputKind::waveform1d;
    s.input_shape = {1, 256};
    s.layers = {LayerSpec::conv1d(8, 9, 4, 4),  LayerSpec::relu(),
                LayerSpec::conv1d(16, 9, 4, 4), LayerSpec::relu(),
                LayerSpec::globalavgpool(),     LayerSpec::dense(num_classes)};
  } else if (name == "teacher1d") {
    s.input_kind = InputKind::waveform1d;
    s.input_shape = {1, 256};
    s.layers = {LayerSpec::conv1d(16, 9, 4, 4), LayerSpec::relu(),
                LayerSpec::conv1d(32, 9, 4, 4), LayerSpec::relu(),
                LayerSpec::conv1d(64, 9, 4, 4), LayerSpec::relu(),
                LayerSpec::globalavgpool(),     LayerSpec::dense(num_classes)};
  } else {
    throw std::invalid_argument("unknown model preset: " + name);
  }
  return s;
}

// ---------------------------------------------------------------------------
// checkpoints: manifest.json + one ODT1 blob per parameter
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Network& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["model"] = to_json(net.spec());
  Json params = Json::array();
  std::size_t i = 0;
  for (const auto& p : net.params()) {
    char file[32];
    std::snprintf(file, sizeof(file), "p%03zu.odt", i);
    Json entry;
    entry["name"] = p.name;
    entry["shape"] = p.tensor.shape();
    entry["file"] = file;
    params.push_back(std::move(entry));
    write_tensor((dir / file).string(), p.tensor);
    ++i;
  }
  manifest["params"] = std::move(params);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

inline Network load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + (dir / "manifest.json").string());
  Json manifest = Json::parse(is);
  Network net = build(model_spec_from_json(manifest.at("model")));
  const auto& params = manifest.at("params");
  if (params.size() != net.params().size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch in " + dir.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = params[i];
    Tensor t = read_tensor((dir / entry.at("file").get<std::string>()).string());
    if (entry.at("name").get<std::string>() != net.params()[i].name ||
        t.shape() != net.params()[i].tensor.shape())
      throw std::runtime_error("load_checkpoint: parameter mismatch for " +
                               entry.at("name").get<std::string>());
    net.params()[i].tensor.raw_data() = t.data();
  }
  return net;
}

}  // namespace okd
