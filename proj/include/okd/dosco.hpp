// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "okd/dataset.hpp"
#include "okd/kmeans.hpp"
#include "okd/rng.hpp"
#include "okd/tensor.hpp"
#include "okd/tensor_io.hpp"

namespace okd {

// Domain-shift split synthesis: per class, cluster context embeddings with
// K-means to discover domains, split the domains 50/50 into train/test
// roles, then carve a validation set out of the train pool at a 2:8 ratio.

struct FeatureTable {
  std::vector<std::string> ids;
  Tensor features;  // [N, D]
  std::vector<int> class_labels;

  void validate() const {
    const std::size_t n = ids.size();
    if (!features.defined() || features.rank() != 2 || features.shape()[0] != n)
      throw std::runtime_error("FeatureTable: features tensor does not match id count");
    if (class_labels.size() != n) throw std::runtime_error("FeatureTable: class label count mismatch");
  }
};

inline void save_feature_table(const FeatureTable& table, const std::filesystem::path& dir) {
  table.validate();
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["ids"] = table.ids;
  manifest["class_labels"] = table.class_labels;
  manifest["feature_file"] = "features.odt";
  write_tensor((dir / "features.odt").string(), table.features);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_feature_table: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

inline FeatureTable load_feature_table(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("load_feature_table: cannot open " + manifest_path.string());
  Json manifest = Json::parse(is);
  FeatureTable table;
  table.ids = manifest.at("ids").get<std::vector<std::string>>();
  table.class_labels = manifest.at("class_labels").get<std::vector<int>>();
  const auto file = manifest.at("feature_file").get<std::string>();
  table.features = read_tensor((manifest_path.parent_path() / file).string());
  table.validate();
  return table;
}

enum class Role { train, val, test };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
  }
  throw std::logic_error("unknown Role");
}

inline Role role_from_string(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "val") return Role::val;
  if (s == "test") return Role::test;
  throw std::invalid_argument("unknown role: " + s);
}

struct SplitRow {
  std::string id;
  int class_label = 0;
  int domain = 0;
  Role role = Role::train;
};

/// Example-to-(domain, role) mapping. Within every class the train-role and
/// test-role domain sets are disjoint; val examples come only from
/// train-role domains. Rows are kept sorted by id.
struct DomainSplit {
  std::vector<SplitRow> rows;
  std::size_t k = 0;
  std::uint64_t split_seed = 0;

  std::vector<std::size_t> rows_with_role(Role role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].role == role) out.push_back(i);
    return out;
  }
};

namespace detail {

inline void sort_rows_by_id(std::vector<SplitRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const SplitRow& a, const SplitRow& b) { return a.id < b.id; });
}

/// Shuffles each class's domain list, marks the first ceil(half) train-role
/// (the rest test-role), then samples 20% of the train pool, uniformly across
/// classes, as validation.
inline void assign_roles(std::vector<SplitRow>& rows, const std::map<int, std::vector<int>>& class_domains,
                         SplitRng roles_rng, SplitRng val_rng) {
  std::map<int, std::map<int, Role>> domain_role;
  for (const auto& [cls, domains] : class_domains) {
    std::vector<int> shuffled = domains;
    roles_rng.fork(static_cast<std::uint64_t>(cls)).shuffle(shuffled);
    const std::size_t train_count = (shuffled.size() + 1) / 2;  // odd counts favor train
    for (std::size_t i = 0; i < shuffled.size(); ++i)
      domain_role[cls][shuffled[i]] = i < train_count ? Role::train : Role::test;
  }
  std::vector<std::size_t> train_pool;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].role = domain_role.at(rows[i].class_label).at(rows[i].domain);
    if (rows[i].role == Role::train) train_pool.push_back(i);
  }
  const std::size_t n_val =
      static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(train_pool.size())));
  val_rng.shuffle(train_pool);
  for (std::size_t i = 0; i < n_val; ++i) rows[train_pool[i]].role = Role::val;
}

}  // namespace detail

/// K-means (k-means++ seeding, 20 restarts) run independently per class,
/// followed by the 50/50 domain role split and the 2:8 validation carve-out.
/// Classes with fewer than k examples get k reduced to their example count.
inline DomainSplit build_domain_splits(const FeatureTable& table, std::size_t k, std::uint64_t split_seed,
                                       bool l2_normalize = false, std::size_t restarts = 20) {
  table.validate();
  if (k < 1) throw std::invalid_argument("build_domain_splits: k must be positive");
  const std::size_t n = table.ids.size(), d = table.features.shape()[1];

  std::vector<double> feats = table.features.data();
  if (l2_normalize) {
    for (std::size_t i = 0; i < n; ++i) {
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += feats[i * d + j] * feats[i * d + j];
      norm = std::sqrt(norm);
      if (norm > 0.0)
        for (std::size_t j = 0; j < d; ++j) feats[i * d + j] /= norm;
    }
  }

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[table.class_labels[i]].push_back(i);

  SplitRng root(split_seed);
  SplitRng kmeans_rng = root.fork("kmeans");
  std::vector<SplitRow> rows(n);
  std::map<int, std::vector<int>> class_domains;
  for (const auto& [cls, members] : by_class) {
    if (members.size() < 2)
      throw std::runtime_error("build_domain_splits: class " + std::to_string(cls) +
                               " has fewer than 2 examples");
    std::size_t kc = k;
    if (members.size() < k) {
      kc = members.size();
      std::cerr << "build_domain_splits: class " << cls << " has only " << members.size()
                << " examples, reducing k to " << kc << "\n";
    }
    std::vector<double> sub(members.size() * d);
    for (std::size_t i = 0; i < members.size(); ++i)
      std::copy(feats.begin() + members[i] * d, feats.begin() + (members[i] + 1) * d, sub.begin() + i * d);
    const KMeansResult km = kmeans_best(Tensor(Shape{members.size(), d}, std::move(sub)), kc,
                                        kmeans_rng.fork(static_cast<std::uint64_t>(cls)), restarts);
    for (std::size_t i = 0; i < members.size(); ++i) {
      rows[members[i]].id = table.ids[members[i]];
      rows[members[i]].class_label = cls;
      rows[members[i]].domain = km.assignments[i];
    }
    std::vector<int> domains;
    for (const int a : km.assignments)
      if (std::find(domains.begin(), domains.end(), a) == domains.end()) domains.push_back(a);
    std::sort(domains.begin(), domains.end());
    class_domains[cls] = std::move(domains);
  }

  detail::assign_roles(rows, class_domains, root.fork("roles"), root.fork("val"));
  detail::sort_rows_by_id(rows);
  DomainSplit split;
  split.rows = std::move(rows);
  split.k = k;
  split.split_seed = split_seed;
  return split;
}

/// Subsamples to exactly `train_target` train and `val_target` val examples
/// (1600/400 by default), stratified by class as evenly as integer
/// arithmetic allows; test rows are untouched. Pools smaller than the
/// targets are kept whole.
inline DomainSplit subsample_2k(const DomainSplit& split, SplitRng rng, std::size_t train_target = 1600,
                                std::size_t val_target = 400) {
  std::map<int, std::vector<std::size_t>> train_by_class, val_by_class;
  std::vector<std::size_t> test_rows;
  for (std::size_t i = 0; i < split.rows.size(); ++i) {
    switch (split.rows[i].role) {
      case Role::train: train_by_class[split.rows[i].class_label].push_back(i); break;
      case Role::val: val_by_class[split.rows[i].class_label].push_back(i); break;
      case Role::test: test_rows.push_back(i); break;
    }
  }
  std::size_t n_train = 0, n_val = 0;
  for (const auto& [cls, v] : train_by_class) n_train += v.size();
  for (const auto& [cls, v] : val_by_class) n_val += v.size();
  if (n_train == 0) throw std::runtime_error("subsample_2k: empty train pool");
  if (n_train + n_val < train_target + val_target) {
    std::cerr << "subsample_2k: pool of " << n_train + n_val << " is smaller than "
              << train_target + val_target << ", keeping everything\n";
    return split;
  }

  // largest-remainder quotas proportional to per-class pool sizes, capped by
  // availability, deterministic tie-break by class id
  auto quotas = [](const std::map<int, std::vector<std::size_t>>& by_class, std::size_t pool,
                   std::size_t target) {
    std::map<int, std::size_t> quota;
    std::vector<std::pair<double, int>> remainders;
    std::size_t assigned = 0;
    for (const auto& [cls, v] : by_class) {
      const double exact = static_cast<double>(v.size()) * static_cast<double>(target) /
                           static_cast<double>(pool);
      const std::size_t base = std::min(static_cast<std::size_t>(exact), v.size());
      quota[cls] = base;
      assigned += base;
      remainders.push_back({exact - static_cast<double>(base), cls});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::size_t need = target - assigned;
    while (need > 0) {
      bool progressed = false;
      for (const auto& [rem, cls] : remainders) {
        if (need == 0) break;
        if (quota[cls] < by_class.at(cls).size()) {
          ++quota[cls];
          --need;
          progressed = true;
        }
      }
      if (!progressed) break;  // every class exhausted
    }
    return quota;
  };
  const auto train_quota = quotas(train_by_class, n_train, train_target);
  const auto val_quota = quotas(val_by_class, n_val, val_target);

  std::vector<std::size_t> keep = test_rows;
  SplitRng train_rng = rng.fork("train");
  for (auto& [cls, members] : train_by_class) {
    train_rng.fork(static_cast<std::uint64_t>(cls)).shuffle(members);
    for (std::size_t i = 0; i < train_quota.at(cls); ++i) keep.push_back(members[i]);
  }
  SplitRng val_rng = rng.fork("val");
  for (auto& [cls, members] : val_by_class) {
    val_rng.fork(static_cast<std::uint64_t>(cls)).shuffle(members);
    for (std::size_t i = 0; i < val_quota.at(cls); ++i) keep.push_back(members[i]);
  }

  DomainSplit out;
  out.k = split.k;
  out.split_seed = split.split_seed;
  out.rows.reserve(keep.size());
  for (const std::size_t i : keep) out.rows.push_back(split.rows[i]);
  detail::sort_rows_by_id(out.rows);
  return out;
}

// ---------------------------------------------------------------------------
// split CSV: header `id,class,domain,role`, rows sorted by id
// ---------------------------------------------------------------------------

inline void write_split_csv(const DomainSplit& split, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_split_csv: cannot open " + path.string());
  os << "id,class,domain,role\n";
  for (const auto& row : split.rows)
    os << row.id << "," << row.class_label << "," << row.domain << "," << to_string(row.role) << "\n";
}

inline DomainSplit read_split_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_split_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "id,class,domain,role")
    throw std::runtime_error("read_split_csv: bad header in " + path.string());
  DomainSplit split;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    SplitRow row;
    std::string field;
    if (!std::getline(ss, row.id, ',')) throw std::runtime_error("read_split_csv: malformed row: " + line);
    if (!std::getline(ss, field, ',')) throw std::runtime_error("read_split_csv: malformed row: " + line);
    row.class_label = std::stoi(field);
    if (!std::getline(ss, field, ',')) throw std::runtime_error("read_split_csv: malformed row: " + line);
    row.domain = std::stoi(field);
    if (!std::getline(ss, field)) throw std::runtime_error("read_split_csv: malformed row: " + line);
    row.role = role_from_string(field);
    split.rows.push_back(std::move(row));
  }
  detail::sort_rows_by_id(split.rows);
  return split;
}

// ---------------------------------------------------------------------------
// synthetic domain-shift datasets
// ---------------------------------------------------------------------------

/// Fully synthetic stand-in for the feature-based pipeline: the class
/// determines a foreground shape motif, the domain determines background
/// color and texture, so unseen test-role domains create a structural
/// ID/OOD gap.
struct SyntheticDGSpec {
  std::size_t num_classes = 4;
  std::size_t num_domains = 6;
  std::size_t samples_per_cell = 60;
  std::size_t image_side = 32;
  std::string class_signal = "shape motif";
  std::string domain_signal = "background";
  double noise_level = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("SyntheticDGSpec: need at least 2 classes");
    if (num_domains < 2)
      throw std::invalid_argument(
          "SyntheticDGSpec: need at least 2 domains (a 50/50 train/test domain split is impossible with 1)");
    if (samples_per_cell == 0) throw std::invalid_argument("SyntheticDGSpec: samples_per_cell must be positive");
    if (image_side == 0 || image_side % 8 != 0)
      throw std::invalid_argument("SyntheticDGSpec: image_side must be a positive multiple of 8 so the jigsaw"
                                  " presets {4,16,64} apply");
    if (noise_level < 0.0) throw std::invalid_argument("SyntheticDGSpec: noise_level must be >= 0");
    if (class_signal != "shape motif")
      throw std::invalid_argument("SyntheticDGSpec: unknown class signal: " + class_signal);
    if (domain_signal != "background")
      throw std::invalid_argument("SyntheticDGSpec: unknown domain signal: " + domain_signal);
  }
};

struct SyntheticDataset {
  LabeledDataset data;
  DomainSplit split;
};

namespace detail {

// background palette (RGB) cycled over domains
inline const double* domain_color(std::size_t d) {
  static const double palette[8][3] = {
      {0.85, 0.25, 0.25}, {0.25, 0.70, 0.30}, {0.25, 0.35, 0.85}, {0.80, 0.75, 0.20},
      {0.70, 0.30, 0.75}, {0.20, 0.70, 0.70}, {0.85, 0.55, 0.20}, {0.45, 0.45, 0.45},
  };
  return palette[d % 8];
}

/// Class motifs: binary masks drawn with a jitter offset. All classes share
/// the same foreground color, so shape is the only class-predictive signal.
inline bool motif_hit(std::size_t cls, double y, double x, double s) {
  const double cy = y - s / 2.0, cx = x - s / 2.0;  // centered coords
  const double r = s / 2.0;
  switch (cls % 6) {
    case 0:  // filled disc
      return cy * cy + cx * cx <= (0.38 * r) * (0.38 * r);
    case 1:  // plus
      return (std::abs(cx) <= 0.16 * r && std::abs(cy) <= 0.72 * r) ||
             (std::abs(cy) <= 0.16 * r && std::abs(cx) <= 0.72 * r);
    case 2:  // diagonal stripe
      return std::abs(cx - cy) <= 0.22 * r && std::abs(cx + cy) <= 1.1 * r;
    case 3:  // square ring
      return std::max(std::abs(cx), std::abs(cy)) <= 0.62 * r &&
             std::max(std::abs(cx), std::abs(cy)) >= 0.34 * r;
    case 4:  // X cross
      return (std::abs(cx - cy) <= 0.16 * r || std::abs(cx + cy) <= 0.16 * r) &&
             std::max(std::abs(cx), std::abs(cy)) <= 0.7 * r;
    default:  // horizontal bars
      return std::abs(cy) <= 0.7 * r && (std::fmod(std::abs(cy), 0.36 * r) <= 0.15 * r);
  }
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticDGSpec& spec) {
  spec.validate();
  const std::size_t s = spec.image_side;
  const std::size_t n = spec.num_classes * spec.num_domains * spec.samples_per_cell;
  const std::size_t stride = 3 * s * s;

  SplitRng root(spec.seed);
  SplitRng img_rng = root.fork("img");
  std::vector<double> pixels(n * stride);
  std::vector<std::string> ids(n);
  std::vector<int> class_labels(n), domain_labels(n);
  std::vector<SplitRow> rows(n);

  std::size_t idx = 0;
  for (std::size_t cls = 0; cls < spec.num_classes; ++cls)
    for (std::size_t dom = 0; dom < spec.num_domains; ++dom)
      for (std::size_t sample = 0; sample < spec.samples_per_cell; ++sample, ++idx) {
        SplitRng er = img_rng.fork(idx);
        const double phase = er.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double jy = er.uniform(-3.0, 3.0);
        const double jx = er.uniform(-3.0, 3.0);
        const double* base = detail::domain_color(dom);
        // texture: domain-specific frequency and orientation
        const double freq = 2.0 + static_cast<double>((dom * 3) % 5);
        const double theta = static_cast<double>(dom) * 3.14159265358979323846 /
                             static_cast<double>(spec.num_domains);
        const double ct = std::cos(theta), st = std::sin(theta);

        double* img = pixels.data() + idx * stride;
        for (std::size_t y = 0; y < s; ++y)
          for (std::size_t x = 0; x < s; ++x) {
            const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) /
                             static_cast<double>(s);
            const double tex = 0.12 * std::sin(2.0 * 3.14159265358979323846 * freq * u + phase);
            const bool hit = detail::motif_hit(cls, static_cast<double>(y) - jy,
                                               static_cast<double>(x) - jx, static_cast<double>(s));
            for (std::size_t c = 0; c < 3; ++c) {
              double v = base[c] + tex;
              if (hit) v = 0.25 * v + 0.75 * 0.95;  // shared light foreground
              img[c * s * s + y * s + x] = v + spec.noise_level * er.normal();
            }
          }

        char id[16];
        std::snprintf(id, sizeof(id), "img%06zu", idx);
        ids[idx] = id;
        class_labels[idx] = static_cast<int>(cls);
        domain_labels[idx] = static_cast<int>(dom);
        rows[idx] = {ids[idx], static_cast<int>(cls), static_cast<int>(dom), Role::train};
      }

  std::map<int, std::vector<int>> class_domains;
  for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
    std::vector<int> domains(spec.num_domains);
    for (std::size_t d = 0; d < spec.num_domains; ++d) domains[d] = static_cast<int>(d);
    class_domains[static_cast<int>(cls)] = std::move(domains);
  }
  detail::assign_roles(rows, class_domains, root.fork("roles"), root.fork("val"));
  detail::sort_rows_by_id(rows);

  SyntheticDataset out;
  out.data.kind = InputKind::image2d;
  out.data.num_classes = spec.num_classes;
  out.data.ids = std::move(ids);
  out.data.examples = Tensor(Shape{n, 3, s, s}, std::move(pixels));
  out.data.class_labels = std::move(class_labels);
  out.data.domain_labels = std::move(domain_labels);
  out.split.rows = std::move(rows);
  out.split.k = spec.num_domains;
  out.split.split_seed = spec.seed;
  return out;
}

// ---------------------------------------------------------------------------
// split evaluation
// ---------------------------------------------------------------------------

struct SplitReport {
  double id_accuracy = 0.0;   // val role
  double ood_accuracy = 0.0;  // test role
  double gap = 0.0;           // id - ood
};

/// Scores predictions (id -> predicted class) against the split's labels.
/// Predictions must cover every val and test id.
inline SplitReport evaluate_split_report(const DomainSplit& split,
                                         const std::unordered_map<std::string, int>& predictions) {
  std::size_t val_total = 0, val_hit = 0, test_total = 0, test_hit = 0;
  for (const auto& row : split.rows) {
    if (row.role == Role::train) continue;
    const auto it = predictions.find(row.id);
    if (it == predictions.end())
      throw std::runtime_error("evaluate_split_report: missing prediction for " + row.id);
    const bool hit = it->second == row.class_label;
    if (row.role == Role::val) {
      ++val_total;
      val_hit += hit ? 1 : 0;
    } else {
      ++test_total;
      test_hit += hit ? 1 : 0;
    }
  }
  SplitReport report;
  report.id_accuracy = val_total ? static_cast<double>(val_hit) / static_cast<double>(val_total) : 0.0;
  report.ood_accuracy = test_total ? static_cast<double>(test_hit) / static_cast<double>(test_total) : 0.0;
  report.gap = report.id_accuracy - report.ood_accuracy;
  return report;
}

}  // namespace okd
