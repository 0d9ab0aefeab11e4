#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cot/pointcloud.hpp"

namespace cot {

namespace detail {

inline int& adaptation_depth() {
  thread_local int depth = 0;
  return depth;
}

}  // namespace detail

/// Marks the current thread as running adaptation code. While any scope is
/// alive, reading sealed target labels throws LabelAccessError.
class AdaptationScope {
 public:
  AdaptationScope() { ++detail::adaptation_depth(); }
  ~AdaptationScope() { --detail::adaptation_depth(); }
  AdaptationScope(const AdaptationScope&) = delete;
  AdaptationScope& operator=(const AdaptationScope&) = delete;

  static bool active() { return detail::adaptation_depth() > 0; }
};

struct Dataset;
std::vector<int> evaluation_labels(const Dataset& data);

/// Ground-truth labels held back from adaptation. Only evaluation_labels()
/// can read them, and not from inside an AdaptationScope.
class SealedLabels {
 public:
  SealedLabels() = default;
  explicit SealedLabels(std::vector<int> labels) : labels_(std::move(labels)) {}

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }

 private:
  friend std::vector<int> evaluation_labels(const Dataset& data);
  std::vector<int> labels_;
};

/// One split of one domain. Source clouds carry their labels; target clouds
/// are stored unlabeled with the truth sealed away for evaluation.
struct Dataset {
  Domain domain = Domain::kSource;
  std::string split;
  std::vector<std::string> ids;
  std::vector<PointCloud> clouds;
  SealedLabels sealed;

  std::size_t size() const noexcept { return clouds.size(); }
  bool empty() const noexcept { return clouds.empty(); }
};

/// Builds a dataset from labeled clouds. For the target domain the labels are
/// moved into the sealed field and stripped from the clouds.
inline Dataset make_dataset(Domain domain, std::string split, std::vector<std::string> ids,
                            std::vector<PointCloud> clouds) {
  require(ids.size() == clouds.size(), "make_dataset: ids and clouds differ in length");
  Dataset d;
  d.domain = domain;
  d.split = std::move(split);
  d.ids = std::move(ids);
  if (domain == Domain::kTarget) {
    std::vector<int> truth;
    truth.reserve(clouds.size());
    for (auto& c : clouds) {
      truth.push_back(c.label.value_or(-1));
      c.label.reset();
      c.domain = Domain::kTarget;
    }
    d.sealed = SealedLabels(std::move(truth));
  }
  d.clouds = std::move(clouds);
  return d;
}

/// The one reader of ground truth for scoring. Unlabeled entries read as -1.
inline std::vector<int> evaluation_labels(const Dataset& data) {
  if (data.domain == Domain::kTarget) {
    if (AdaptationScope::active()) throw LabelAccessError("target labels read inside adaptation code");
    return data.sealed.labels_;
  }
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& c : data.clouds) out.push_back(c.label.value_or(-1));
  return out;
}

/// A benchmark on disk: manifest plus one XYZ file per cloud.
struct Benchmark {
  Dataset source_train, source_test, target_train, target_test;
};

namespace detail {

inline Dataset* benchmark_slot(Benchmark& b, Domain domain, const std::string& split) {
  if (split == "train") return domain == Domain::kSource ? &b.source_train : &b.target_train;
  if (split == "test") return domain == Domain::kSource ? &b.source_test : &b.target_test;
  throw IoError("unknown split '" + split + "' in manifest");
}

}  // namespace detail

/// Writes every cloud under `dir/data/` and a manifest at `dir/manifest.csv`.
/// Target rows record the true label so evaluation can score them.
inline void save_benchmark(const std::string& dir, const Benchmark& b) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "data", ec);
  if (ec) throw IoError("cannot create '" + dir + "/data': " + ec.message());
  std::vector<ManifestRow> rows;
  for (const Dataset* d : {&b.source_train, &b.source_test, &b.target_train, &b.target_test}) {
    const auto labels = evaluation_labels(*d);
    for (std::size_t i = 0; i < d->size(); ++i) {
      const std::string rel = "data/" + d->ids[i] + ".xyz";
      write_xyz((fs::path(dir) / rel).string(), d->clouds[i]);
      rows.push_back({rel, labels[i], d->domain, d->split});
    }
  }
  write_manifest((fs::path(dir) / "manifest.csv").string(), rows);
}

/// Loads a benchmark written by save_benchmark (or any manifest in the same
/// format). Paths are relative to the manifest's directory.
inline Benchmark load_benchmark(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const auto rows = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::map<std::pair<int, std::string>, std::pair<std::vector<std::string>, std::vector<PointCloud>>> groups;
  for (const auto& r : rows) {
    PointCloud c = read_xyz((base / r.path).string());
    if (r.label >= 0) c.label = r.label;
    c.domain = r.domain;
    auto& g = groups[{static_cast<int>(r.domain), r.split}];
    g.first.push_back(fs::path(r.path).stem().string());
    g.second.push_back(std::move(c));
  }
  Benchmark b;
  for (auto& [key, g] : groups) {
    const auto domain = static_cast<Domain>(key.first);
    *detail::benchmark_slot(b, domain, key.second) =
        make_dataset(domain, key.second, std::move(g.first), std::move(g.second));
  }
  return b;
}

}  // namespace cot
