#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iterator>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cot/ops.hpp"
#include "cot/pointcloud.hpp"
#include "cot/renderer.hpp"

namespace cot {

struct ModelConfig {
  std::size_t emb_dim = 64;
  std::size_t proj_dim = 32;
  std::vector<std::size_t> point_widths{64, 128};  // hidden widths of the per-point MLP
  std::vector<std::size_t> conv_channels{8, 16};   // two stride-2 3x3 conv layers
  std::vector<std::size_t> classifier_widths{64, 32};
  std::size_t num_classes = 5;
  double dropout = 0.5;
};

template <class T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

/// Forward-pass mode. Dropout masks are drawn from `rng` only when training.
struct Mode {
  bool training = false;
  std::mt19937_64* rng = nullptr;

  static Mode eval() { return {}; }
  static Mode train(std::mt19937_64& rng) { return {true, &rng}; }
};

/// Dense layer y = x W + b with W stored [in, out].
template <class T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    // Kaiming-style uniform fan-in scaling.
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> w(in * out);
    for (auto& v : w) v = static_cast<T>(u(rng));
    weight = BasicTensor<T>({in, out}, std::move(w), true);
    bias = BasicTensor<T>::zeros({out}, true);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
BasicTensor<T> apply_dropout(const BasicTensor<T>& x, double rate, const Mode& mode) {
  if (!mode.training || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T kept = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = keep(*mode.rng) ? kept : T(0);
  return dropout(x, std::span<const T>(mask));
}

/// Per-point MLP followed by a max over points; input [B, n, 3].
template <class T>
struct Encoder3D {
  std::vector<Linear<T>> layers;

  Encoder3D() = default;
  Encoder3D(const ModelConfig& cfg, std::mt19937_64& rng) {
    std::size_t in = 3;
    for (std::size_t w : cfg.point_widths) {
      layers.emplace_back(in, w, rng);
      in = w;
    }
    layers.emplace_back(in, cfg.emb_dim, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& points) const {
    detail::require_rank(points.shape(), 3, "Encoder3D");
    const std::size_t batch = points.dim(0), n = points.dim(1);
    auto h = reshape(points, Shape{batch * n, 3});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = layers[l](h);
      if (l + 1 < layers.size()) h = relu(h);
    }
    const std::size_t emb = layers.back().bias.size();
    return max_over_axis(reshape(h, Shape{batch, n, emb}), 1);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".mlp" + std::to_string(l), out);
  }
};

namespace detail {

// im2col table for a 3x3, stride-2, pad-1 convolution over channels-last
// input [N, H, W, C]; rows are output pixels, columns (ky, kx, c).
inline std::shared_ptr<const std::vector<std::int64_t>> conv_patch_index(std::size_t n, std::size_t h, std::size_t w,
                                                                          std::size_t c, std::size_t& oh,
                                                                          std::size_t& ow) {
  oh = (h + 1) / 2;
  ow = (w + 1) / 2;
  auto idx = std::make_shared<std::vector<std::int64_t>>(n * oh * ow * 9 * c);
  std::size_t k = 0;
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const long iy = static_cast<long>(2 * oy) + ky - 1;
            const long ix = static_cast<long>(2 * ox) + kx - 1;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w);
            for (std::size_t ch = 0; ch < c; ++ch)
              (*idx)[k++] = inside ? static_cast<std::int64_t>(((img * h + static_cast<std::size_t>(iy)) * w +
                                                                static_cast<std::size_t>(ix)) *
                                                                   c +
                                                               ch)
                                   : -1;
          }
  return idx;
}

}  // namespace detail

/// Shared-weight per-view CNN (stride-2 3x3 convs, global average pool,
/// linear) followed by a max over views. Input [B*m, H, W] with views of a
/// sample contiguous.
template <class T>
struct Encoder2D {
  std::vector<Linear<T>> convs;  // weight [9*C_in, C_out]
  Linear<T> head;

  Encoder2D() = default;
  Encoder2D(const ModelConfig& cfg, std::mt19937_64& rng) {
    std::size_t in = 1;
    for (std::size_t c : cfg.conv_channels) {
      convs.emplace_back(9 * in, c, rng);
      in = c;
    }
    head = Linear<T>(in, cfg.emb_dim, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& images, std::size_t views) const {
    detail::require_rank(images.shape(), 3, "Encoder2D");
    const std::size_t total = images.dim(0);
    require(views >= 1 && total % views == 0, "Encoder2D: image count must be a multiple of the view count");
    std::size_t h = images.dim(1), w = images.dim(2), c = 1;
    BasicTensor<T> x = images;
    for (const auto& conv : convs) {
      std::size_t oh = 0, ow = 0;
      auto idx = detail::conv_patch_index(total, h, w, c, oh, ow);
      auto patches = gather(x, idx, Shape{total * oh * ow, 9 * c});
      x = relu(conv(patches));
      h = oh;
      w = ow;
      c = conv.bias.size();
    }
    auto pooled = mean_over_axis(reshape(x, Shape{total, h * w, c}), 1);
    auto per_view = head(pooled);
    const std::size_t emb = head.bias.size();
    return max_over_axis(reshape(per_view, Shape{total / views, views, emb}), 1);
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t l = 0; l < convs.size(); ++l) convs[l].collect(prefix + ".conv" + std::to_string(l), out);
    head.collect(prefix + ".fc", out);
  }
};

/// emb -> emb -> proj MLP with unit-norm output rows.
template <class T>
struct ProjectionHead {
  Linear<T> fc1, fc2;

  ProjectionHead() = default;
  ProjectionHead(const ModelConfig& cfg, std::mt19937_64& rng)
      : fc1(cfg.emb_dim, cfg.emb_dim, rng), fc2(cfg.emb_dim, cfg.proj_dim, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return l2_normalize(fc2(relu(fc1(x)))); }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

/// MLP classifier ending in softmax probabilities.
template <class T>
struct Classifier {
  std::vector<Linear<T>> layers;
  double dropout_rate = 0.0;

  Classifier() = default;
  Classifier(const ModelConfig& cfg, std::mt19937_64& rng) : dropout_rate(cfg.dropout) {
    std::size_t in = cfg.emb_dim;
    for (std::size_t w : cfg.classifier_widths) {
      layers.emplace_back(in, w, rng);
      in = w;
    }
    layers.emplace_back(in, cfg.num_classes, rng);
  }

  BasicTensor<T> logits(const BasicTensor<T>& feature, const Mode& mode) const {
    auto h = feature;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = layers[l](h);
      if (l + 1 < layers.size()) h = apply_dropout(relu(h), dropout_rate, mode);
    }
    return h;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& feature, const Mode& mode = Mode::eval()) const {
    return softmax(logits(feature, mode));
  }

  void collect(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".fc" + std::to_string(l), out);
  }
};

/// Everything the method trains: 3D and 2D encoders with their projection
/// heads, and the classifier on the 3D global feature.
template <class T>
struct Model {
  ModelConfig config;
  Encoder3D<T> encoder3d;
  ProjectionHead<T> head3d;
  Encoder2D<T> encoder2d;
  ProjectionHead<T> head2d;
  Classifier<T> classifier;

  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    require(cfg.emb_dim > 0 && cfg.proj_dim > 0 && cfg.num_classes > 0, "model widths must be positive");
    std::mt19937_64 rng(seed);
    encoder3d = Encoder3D<T>(cfg, rng);
    head3d = ProjectionHead<T>(cfg, rng);
    encoder2d = Encoder2D<T>(cfg, rng);
    head2d = ProjectionHead<T>(cfg, rng);
    classifier = Classifier<T>(cfg, rng);
  }

  NamedTensors<T> parameters() const {
    NamedTensors<T> out;
    encoder3d.collect("encoder3d", out);
    head3d.collect("head3d", out);
    encoder2d.collect("encoder2d", out);
    head2d.collect("head2d", out);
    classifier.collect("classifier", out);
    return out;
  }
};

template <class T>
struct Encoded {
  BasicTensor<T> global;     // [B, emb_dim]
  BasicTensor<T> projected;  // [B, proj_dim], unit rows
};

/// Stacks clouds into [B, n_max, 3]. Shorter clouds are padded by repeating
/// their first point, which leaves a max-pooled feature unchanged.
template <class T>
BasicTensor<T> points_tensor(std::span<const PointCloud> clouds) {
  require(!clouds.empty(), "points_tensor: empty batch");
  std::size_t n = 0;
  for (const auto& c : clouds) {
    validate(c);
    n = std::max(n, c.size());
  }
  std::vector<T> data;
  data.reserve(clouds.size() * n * 3);
  for (const auto& c : clouds)
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = c.points[i < c.size() ? i : 0];
      data.insert(data.end(), {static_cast<T>(p[0]), static_cast<T>(p[1]), static_cast<T>(p[2])});
    }
  return BasicTensor<T>({clouds.size(), n, 3}, std::move(data));
}

/// Stacks image stacks into [B*m, H, W].
template <class T>
BasicTensor<T> images_tensor(std::span<const ImageStack> stacks) {
  require(!stacks.empty() && !stacks.front().views.empty(), "images_tensor: empty batch");
  const std::size_t m = stacks.front().views.size();
  const std::size_t h = stacks.front().views.front().height, w = stacks.front().views.front().width;
  std::vector<T> data;
  data.reserve(stacks.size() * m * h * w);
  for (const auto& s : stacks) {
    require(s.views.size() == m, "images_tensor: view counts differ");
    for (const auto& img : s.views) {
      require(img.height == h && img.width == w, "images_tensor: image sizes differ");
      data.insert(data.end(), img.pixels.begin(), img.pixels.end());
    }
  }
  return BasicTensor<T>({stacks.size() * m, h, w}, std::move(data));
}

template <class T>
Encoded<T> encode3d_batch(const Model<T>& model, std::span<const PointCloud> clouds) {
  auto global = model.encoder3d(points_tensor<T>(clouds));
  return {global, model.head3d(global)};
}

template <class T>
Encoded<T> encode3d(const Model<T>& model, const PointCloud& cloud) {
  return encode3d_batch(model, std::span<const PointCloud>(&cloud, 1));
}

template <class T>
Encoded<T> encode2d_batch(const Model<T>& model, std::span<const ImageStack> stacks) {
  require(!stacks.empty() && !stacks.front().views.empty(), "encode2d needs at least one view");
  auto global = model.encoder2d(images_tensor<T>(stacks), stacks.front().views.size());
  return {global, model.head2d(global)};
}

template <class T>
Encoded<T> encode2d(const Model<T>& model, const ImageStack& stack) {
  return encode2d_batch(model, std::span<const ImageStack>(&stack, 1));
}

/// Softmax class probabilities for a [B, emb_dim] (or [emb_dim]) feature.
template <class T>
BasicTensor<T> classify(const Model<T>& model, const BasicTensor<T>& feature, const Mode& mode = Mode::eval()) {
  return feature.rank() == 1 ? model.classifier(reshape(feature, Shape{1, feature.dim(0)}), mode)
                             : model.classifier(feature, mode);
}

/// Row-wise argmax, ties to the lowest index.
template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& probs) {
  auto [rows, cols] = detail::rows_cols(probs.shape());
  std::vector<int> out(rows);
  auto d = probs.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (d[r * cols + c] > d[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "COTC", u32 version, u32 count, then per tensor
// u16 name length, name bytes, u8 rank, u32 dims, f32 payload (little endian).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xFF));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const NamedTensors<float>& tensors) {
  std::vector<std::uint8_t> b{'C', 'O', 'T', 'C'};
  detail::put_u32(b, kCheckpointVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(name.size() <= 0xFFFF, "checkpoint tensor name too long");
    detail::put_u16(b, static_cast<std::uint16_t>(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    b.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(b, static_cast<std::uint32_t>(d));
    for (float v : t.data()) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_u32(b, bits);
    }
  }
  return b;
}

inline NamedTensors<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != "COTC") throw IoError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  NamedTensors<float> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.str(r.u16());
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(numel(shape));
    for (auto& v : data) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&v, &bits, sizeof v);
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  return out;
}

inline void write_checkpoint(const std::string& path, const NamedTensors<float>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline NamedTensors<float> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Copies values from `source` into the same-named parameters of `model`.
template <class T>
void load_parameters(Model<T>& model, const NamedTensors<float>& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : source) by_name[name] = &t;
  for (auto& [name, param] : model.parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint lacks parameter '" + name + "'");
    if (it->second->shape() != param.shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second->shape()) +
                    ", model expects " + shape_str(param.shape()));
    auto dst = param.mutable_data();
    auto src = it->second->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

}  // namespace cot
