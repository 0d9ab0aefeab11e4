#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cot/trainer.hpp"

namespace cot {

struct EvalReport {
  std::size_t num_classes = 0;
  double overall_accuracy = 0.0;
  std::vector<double> per_class_accuracy;          // NaN for a class with no samples
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

/// Scores predictions against labels in [0, K).
inline EvalReport score_predictions(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t K) {
  require(!truth.empty(), "evaluate: empty dataset");
  require(truth.size() == pred.size(), "evaluate: label and prediction counts differ");
  EvalReport r;
  r.num_classes = K;
  r.predictions = pred;
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && static_cast<std::size_t>(truth[i]) < K, "evaluate: dataset has an unlabeled or out-of-range sample");
    require(pred[i] >= 0 && static_cast<std::size_t>(pred[i]) < K, "evaluate: prediction out of range");
    ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
    hit += truth[i] == pred[i];
  }
  r.overall_accuracy = static_cast<double>(hit) / static_cast<double>(truth.size());
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t row = 0;
    for (auto v : r.confusion[c]) row += v;
    r.per_class_accuracy.push_back(row ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(row)
                                       : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

/// Classification from 3D global features only, dropout off.
inline EvalReport evaluate(const Model<float>& model, const Dataset& data) {
  require(!data.empty(), "evaluate: empty dataset");
  return score_predictions(evaluation_labels(data), predict_labels(model, data.clouds), model.config.num_classes);
}

/// Global (classifier-input) features, one row per cloud.
inline Matrix global_features(const Model<float>& model, const std::vector<PointCloud>& clouds) {
  TapeScope frozen(nullptr);
  Matrix out(clouds.size(), model.config.emb_dim);
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < clouds.size(); lo += kChunk) {
    const std::size_t n = std::min(kChunk, clouds.size() - lo);
    const auto g = encode3d_batch(model, std::span<const PointCloud>(clouds.data() + lo, n)).global;
    std::copy(g.data().begin(), g.data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(lo * out.cols));
  }
  return out;
}

/// Rows of `features` grouped by label; labels outside [0, K) are dropped.
inline std::vector<Matrix> split_by_class(const Matrix& features, const std::vector<int>& labels, std::size_t K) {
  require(labels.size() == features.rows, "split_by_class: label count differs from row count");
  std::vector<Matrix> out(K, Matrix(0, features.cols));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) continue;
    auto& m = out[static_cast<std::size_t>(labels[i])];
    m.data.insert(m.data.end(), features.data.begin() + static_cast<std::ptrdiff_t>(i * features.cols),
                  features.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * features.cols));
    ++m.rows;
  }
  return out;
}

namespace detail {

inline double row_sq_dist(const Matrix& x, std::size_t i, const Matrix& y, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.cols; ++c) {
    const double d = x(i, c) - y(j, c);
    s += d * d;
  }
  return s;
}

}  // namespace detail

/// Median of the pairwise distances between distinct rows of X and Y pooled.
/// Falls back to 1 when the median is zero.
inline double median_bandwidth(const Matrix& x, const Matrix& y) {
  Matrix pooled(x.rows + y.rows, x.cols);
  std::copy(x.data.begin(), x.data.end(), pooled.data.begin());
  std::copy(y.data.begin(), y.data.end(), pooled.data.begin() + static_cast<std::ptrdiff_t>(x.data.size()));
  std::vector<double> d;
  for (std::size_t i = 0; i < pooled.rows; ++i)
    for (std::size_t j = i + 1; j < pooled.rows; ++j) d.push_back(std::sqrt(detail::row_sq_dist(pooled, i, pooled, j)));
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const double med = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
  return med > 0.0 ? med : 1.0;
}

/// Biased (V-statistic) MMD with k(x, y) = exp(-|x - y|^2 / (2 sigma^2)).
/// The squared estimate is clamped at 0 before the square root.
inline double mmd(const Matrix& x, const Matrix& y, double sigma) {
  require(x.rows > 0 && y.rows > 0, "mmd: empty sample set");
  require(x.cols == y.cols, "mmd: feature dimensions differ");
  require(sigma > 0.0, "mmd: bandwidth must be > 0");
  const double g = 1.0 / (2.0 * sigma * sigma);
  auto mean_kernel = [g](const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i)
      for (std::size_t j = 0; j < b.rows; ++j) s += std::exp(-g * detail::row_sq_dist(a, i, b, j));
    return s / (static_cast<double>(a.rows) * static_cast<double>(b.rows));
  };
  const double sq = mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
  return std::sqrt(std::max(0.0, sq));
}

struct MmdReport {
  std::size_t num_classes = 0;
  Matrix values;     // (source class r, target class c); NaN when either set is empty
  Matrix bandwidth;  // sigma used for each entry
  bool median_heuristic = true;

  /// Mean of the present diagonal entries.
  double mean_diagonal() const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < num_classes; ++c)
      if (!std::isnan(values(c, c))) {
        s += values(c, c);
        ++n;
      }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }
};

/// Class-wise MMD between source and target feature sets. The bandwidth of
/// each entry is the median heuristic over that pair unless `fixed_sigma` is
/// given.
inline MmdReport classwise_mmd(const std::vector<Matrix>& source, const std::vector<Matrix>& target,
                               std::optional<double> fixed_sigma = std::nullopt) {
  require(source.size() == target.size(), "classwise_mmd: class counts differ");
  const std::size_t K = source.size();
  MmdReport r;
  r.num_classes = K;
  r.median_heuristic = !fixed_sigma.has_value();
  r.values = Matrix(K, K, std::numeric_limits<double>::quiet_NaN());
  r.bandwidth = Matrix(K, K, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = 0; b < K; ++b) {
      if (source[a].rows == 0 || target[b].rows == 0) continue;
      const double sigma = fixed_sigma ? *fixed_sigma : median_bandwidth(source[a], target[b]);
      r.bandwidth(a, b) = sigma;
      r.values(a, b) = mmd(source[a], target[b], sigma);
    }
  return r;
}

/// Class-wise MMD of the model's global features, grouped by true class.
inline MmdReport feature_mmd(const Model<float>& model, const Dataset& source, const Dataset& target) {
  const std::size_t K = model.config.num_classes;
  return classwise_mmd(split_by_class(global_features(model, source.clouds), evaluation_labels(source), K),
                       split_by_class(global_features(model, target.clouds), evaluation_labels(target), K));
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

inline std::string fmt_float_short(float v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string fmt_or_nan(double v) { return std::isnan(v) ? std::string("nan") : fmt_double(v); }

}  // namespace detail

/// accuracy.csv: `class,count,correct,accuracy`, one row per class and a
/// final `overall` row.
inline void write_accuracy_csv(const std::string& path, const EvalReport& r) {
  auto out = detail::open_out(path);
  out << "class,count,correct,accuracy\n";
  std::size_t total = 0, hits = 0;
  for (std::size_t c = 0; c < r.num_classes; ++c) {
    std::size_t n = 0;
    for (auto v : r.confusion[c]) n += v;
    total += n;
    hits += r.confusion[c][c];
    out << c << ',' << n << ',' << r.confusion[c][c] << ',' << detail::fmt_or_nan(r.per_class_accuracy[c]) << '\n';
  }
  out << "overall," << total << ',' << hits << ',' << detail::fmt_double(r.overall_accuracy) << '\n';
}

/// confusion.csv: `true_label,pred_0,...,pred_{K-1}` with counts.
inline void write_confusion_csv(const std::string& path, const EvalReport& r) {
  auto out = detail::open_out(path);
  out << "true_label";
  for (std::size_t c = 0; c < r.num_classes; ++c) out << ",pred_" << c;
  out << '\n';
  for (std::size_t t = 0; t < r.num_classes; ++t) {
    out << t;
    for (auto v : r.confusion[t]) out << ',' << v;
    out << '\n';
  }
}

/// mmd.csv: `source_class,target_class,mmd,bandwidth,bandwidth_rule` with
/// the Gaussian-kernel biased estimate; absent entries read `nan`.
inline void write_mmd_csv(const std::string& path, const MmdReport& r) {
  auto out = detail::open_out(path);
  out << "source_class,target_class,mmd,bandwidth,bandwidth_rule\n";
  for (std::size_t a = 0; a < r.num_classes; ++a)
    for (std::size_t b = 0; b < r.num_classes; ++b)
      out << a << ',' << b << ',' << detail::fmt_or_nan(r.values(a, b)) << ',' << detail::fmt_or_nan(r.bandwidth(a, b))
          << ',' << (r.median_heuristic ? "median" : "fixed") << '\n';
}

/// Writes `id,domain,true_label,pred_label,f0..f{d-1}` in dataset order.
/// Features are the global classifier-input features.
inline void export_embeddings(const Model<float>& model, const Dataset& data, const std::string& path) {
  const auto truth = evaluation_labels(data);
  const auto feats = global_features(model, data.clouds);
  const auto pred = predict_labels(model, data.clouds);
  auto out = detail::open_out(path);
  out << "id,domain,true_label,pred_label";
  for (std::size_t f = 0; f < feats.cols; ++f) out << ",f" << f;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.ids[i] << ',' << domain_name(data.domain) << ',' << truth[i] << ',' << pred[i];
    for (std::size_t f = 0; f < feats.cols; ++f) out << ',' << detail::fmt_float_short(static_cast<float>(feats(i, f)));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

struct EmbeddingTable {
  std::vector<std::string> ids;
  std::vector<Domain> domains;
  std::vector<int> true_labels;
  std::vector<int> pred_labels;
  Matrix features;
};

inline EmbeddingTable read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,domain,true_label,pred_label", 0) != 0)
    throw IoError("'" + path + "': not an embedding export");
  const std::size_t dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 3;
  EmbeddingTable t;
  t.features = Matrix(0, dim);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != dim + 4) throw IoError("'" + path + "': malformed row");
    t.ids.push_back(cells[0]);
    try {
      t.domains.push_back(parse_domain(cells[1]));
      t.true_labels.push_back(std::stoi(cells[2]));
      t.pred_labels.push_back(std::stoi(cells[3]));
    } catch (const std::exception&) {
      throw IoError("'" + path + "': malformed row");
    }
    for (std::size_t f = 0; f < dim; ++f) t.features.data.push_back(detail::parse_float(cells[4 + f]));
    ++t.features.rows;
  }
  return t;
}

}  // namespace cot
