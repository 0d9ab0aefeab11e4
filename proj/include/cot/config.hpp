#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cot/datagen.hpp"
#include "cot/models.hpp"
#include "cot/ot.hpp"
#include "cot/renderer.hpp"

namespace cot {

struct TrainConfig {
  std::uint64_t seed = 0;
  double tau = 0.1;
  double alpha = 0.001;
  double beta = 0.0001;
  std::size_t batch_size = 32;
  double lr = 0.001;
  double weight_decay = 5e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::size_t epochs = 30;
  CameraRig rig;  // views = 12
  RenderParams render;
  double spst_threshold = 0.8;
  std::size_t spst_rounds = 3;
  std::size_t spst_epochs = 10;
  double spst_lr = 0.0005;
  OTConfig ot;
  ModelConfig model;
  bool exclude_self_sim = false;
  // Which terms of the objective are active; the no-adaptation baseline
  // keeps only the classification term.
  bool use_l3d = true;
  bool use_lmm = true;
  bool use_lot = true;
  bool use_lcls = true;
  bool mixup = true;  // PCM mixup for the classification branch
};

struct DataConfig {
  std::size_t per_class = 200;
  std::size_t test_per_class = 50;
  DomainSpec source{0.0, 0.0, 64, 0.0};
  DomainSpec target{0.02, 0.3, 64, 0.0};
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
};

inline void validate(const TrainConfig& c) {
  require(c.tau > 0.0, "tau must be > 0");
  require(c.alpha >= 0.0 && c.beta >= 0.0, "alpha and beta must be >= 0");
  require(c.batch_size >= 2, "batch_size must be >= 2 for the contrastive terms");
  require(c.lr > 0.0 && c.spst_lr > 0.0, "learning rates must be > 0");
  require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0 && c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0,
          "adam betas must be in [0, 1)");
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.rig.views >= 1, "views must be >= 1");
  require(c.render.image_size >= 4, "image_size must be >= 4");
  require(c.render.point_radius > 0.0 && c.render.points_per_pixel >= 1, "render parameters must be positive");
  require(c.spst_threshold > 0.0 && c.spst_threshold <= 1.0, "spst_threshold must be in (0, 1]");
  require(c.model.emb_dim > 0 && c.model.proj_dim > 0, "emb_dim and proj_dim must be > 0");
  require(c.model.num_classes >= 2, "num_classes must be >= 2");
  require(c.model.dropout >= 0.0 && c.model.dropout < 1.0, "dropout must be in [0, 1)");
  validate(c.ot);
}

inline void validate(const RunConfig& c) {
  validate(c.train);
  validate(c.data.source);
  validate(c.data.target);
  require(c.train.model.num_classes <= static_cast<std::size_t>(kShapeClasses),
          "num_classes must be <= 5 for the synthetic benchmark");
  require(c.data.per_class >= 1 && c.data.test_per_class >= 1, "per_class and test_per_class must be >= 1");
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ContractError("config key '" + key + "' expects a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ContractError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ContractError("config key '" + key + "' expects true|false, got '" + s + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto v = parse_u64(key, trim(item));
    if (v == 0) throw ContractError("config key '" + key + "' needs positive widths");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ContractError("config key '" + key + "' needs at least one width");
  return out;
}

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Every recognized key, in canonical order.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::fmt_double;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto real = [&k](std::string name, std::string help, auto field) {
      k.push_back({name, std::move(help),
                   [field, name](RunConfig& c, const std::string& v) { field(c) = detail::parse_double(name, v); },
                   [field](const RunConfig& c) { return fmt_double(field(const_cast<RunConfig&>(c))); }});
    };
    auto count = [&k](std::string name, std::string help, auto field) {
      k.push_back({name, std::move(help),
                   [field, name](RunConfig& c, const std::string& v) {
                     field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(detail::parse_u64(name, v));
                   },
                   [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }});
    };
    auto flag = [&k](std::string name, std::string help, auto field) {
      k.push_back({name, std::move(help),
                   [field, name](RunConfig& c, const std::string& v) { field(c) = detail::parse_bool(name, v); },
                   [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); }});
    };
    auto list = [&k](std::string name, std::string help, auto field) {
      k.push_back({name, std::move(help),
                   [field, name](RunConfig& c, const std::string& v) { field(c) = detail::parse_list(name, v); },
                   [field](const RunConfig& c) { return detail::fmt_list(field(const_cast<RunConfig&>(c))); }});
    };
#define COT_FIELD(expr) [](RunConfig& c) -> auto& { return expr; }
    count("seed", "master random seed", COT_FIELD(c.train.seed));
    real("tau", "contrastive temperature", COT_FIELD(c.train.tau));
    real("alpha", "feature weight in the transport cost and alignment loss", COT_FIELD(c.train.alpha));
    real("beta", "label weight in the transport cost and alignment loss", COT_FIELD(c.train.beta));
    count("batch_size", "samples per source batch and per target batch", COT_FIELD(c.train.batch_size));
    real("lr", "base learning rate (cosine annealed per epoch)", COT_FIELD(c.train.lr));
    real("weight_decay", "L2 weight decay", COT_FIELD(c.train.weight_decay));
    real("adam_beta1", "Adam first-moment decay", COT_FIELD(c.train.adam_beta1));
    real("adam_beta2", "Adam second-moment decay", COT_FIELD(c.train.adam_beta2));
    count("epochs", "training epochs", COT_FIELD(c.train.epochs));
    count("views", "rendered views per cloud", COT_FIELD(c.train.rig.views));
    real("elevation", "camera ring elevation in radians", COT_FIELD(c.train.rig.elevation));
    count("image_size", "rendered image side in pixels", COT_FIELD(c.train.render.image_size));
    real("point_radius", "splat radius in unit-sphere coordinates", COT_FIELD(c.train.render.point_radius));
    count("points_per_pixel", "nearest splats blended per pixel", COT_FIELD(c.train.render.points_per_pixel));
    real("spst_threshold", "pseudo-label confidence threshold", COT_FIELD(c.train.spst_threshold));
    count("spst_rounds", "self-training rounds", COT_FIELD(c.train.spst_rounds));
    count("spst_epochs", "epochs per self-training round", COT_FIELD(c.train.spst_epochs));
    real("spst_lr", "self-training learning rate", COT_FIELD(c.train.spst_lr));
    k.push_back({"solver", "coupling solver: exact|sinkhorn|auto",
                 [](RunConfig& c, const std::string& v) { c.train.ot.solver = parse_solver(v); },
                 [](const RunConfig& c) { return std::string(solver_name(c.train.ot.solver)); }});
    real("sinkhorn_epsilon", "entropic regularization", COT_FIELD(c.train.ot.sinkhorn_epsilon));
    count("sinkhorn_max_iters", "Sinkhorn iteration cap", COT_FIELD(c.train.ot.sinkhorn_max_iters));
    real("sinkhorn_tol", "Sinkhorn marginal L1 tolerance", COT_FIELD(c.train.ot.sinkhorn_tol));
    count("exact_max_size", "auto solver uses the exact solve up to this batch size", COT_FIELD(c.train.ot.exact_max_size));
    count("emb_dim", "global feature width", COT_FIELD(c.train.model.emb_dim));
    count("proj_dim", "projection head output width", COT_FIELD(c.train.model.proj_dim));
    list("point_widths", "hidden widths of the per-point MLP", COT_FIELD(c.train.model.point_widths));
    list("conv_channels", "channels of the stride-2 conv layers", COT_FIELD(c.train.model.conv_channels));
    list("classifier_widths", "hidden widths of the classifier", COT_FIELD(c.train.model.classifier_widths));
    count("num_classes", "number of classes", COT_FIELD(c.train.model.num_classes));
    real("dropout", "classifier dropout rate", COT_FIELD(c.train.model.dropout));
    flag("exclude_self_sim", "drop the j == i term from the same-view contrastive sum", COT_FIELD(c.train.exclude_self_sim));
    flag("use_l3d", "enable the 3D contrastive term", COT_FIELD(c.train.use_l3d));
    flag("use_lmm", "enable the multi-modal contrastive term", COT_FIELD(c.train.use_lmm));
    flag("use_lot", "enable the transport alignment term", COT_FIELD(c.train.use_lot));
    flag("use_lcls", "enable the source classification term", COT_FIELD(c.train.use_lcls));
    flag("mixup", "mix source pairs for the classification term", COT_FIELD(c.train.mixup));
    count("per_class", "training samples per class and domain", COT_FIELD(c.data.per_class));
    count("test_per_class", "test samples per class and domain", COT_FIELD(c.data.test_per_class));
    real("source_noise", "source Gaussian noise sigma", COT_FIELD(c.data.source.shift_noise_sigma));
    real("source_crop", "source cropped share of the azimuth", COT_FIELD(c.data.source.crop_fraction));
    count("source_density", "source points per cloud", COT_FIELD(c.data.source.density));
    real("source_bias", "source sampling bias toward the top", COT_FIELD(c.data.source.sampling_bias));
    real("target_noise", "target Gaussian noise sigma", COT_FIELD(c.data.target.shift_noise_sigma));
    real("target_crop", "target cropped share of the azimuth", COT_FIELD(c.data.target.crop_fraction));
    count("target_density", "target points per cloud", COT_FIELD(c.data.target.density));
    real("target_bias", "target sampling bias toward the top", COT_FIELD(c.data.target.sampling_bias));
#undef COT_FIELD
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline std::string valid_key_list() {
  std::string s;
  for (const auto& k : config_keys()) s += (s.empty() ? "" : ", ") + k.name;
  return s;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto* k = find_config_key(key);
  if (!k) throw ContractError("unknown config key '" + key + "'; valid keys: " + valid_key_list());
  k->set(cfg, value);
}

/// Applies `key = value` lines on top of `cfg`. Blank lines and text after
/// '#' are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = detail::trim(std::string_view(body).substr(0, eq));
    const auto value = detail::trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty())
      throw ContractError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(cfg, key, value);
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str());
}

/// Canonical `key = value` dump of every key.
inline std::string config_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : config_keys()) s += k.name + " = " + k.get(cfg) + "\n";
  return s;
}

/// FNV-1a over the canonical dump, as 16 hex digits.
inline std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_text(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cot
