#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cot/config.hpp"
#include "cot/dataset.hpp"
#include "cot/losses.hpp"
#include "cot/mixup.hpp"
#include "cot/models.hpp"
#include "cot/optim.hpp"
#include "cot/ot.hpp"
#include "cot/rng.hpp"

namespace cot {

// Stream tags for derive_seed; each random decision in training has its own.
enum SeedTag : std::uint64_t {
  kTagInit = 1,
  kTagShuffleSource,
  kTagShuffleTarget,
  kTagAugment1,
  kTagAugment2,
  kTagAugmentCls,
  kTagMixPairs,
  kTagMixLambda,
  kTagDropout,
  kTagSpstShuffle,
};

struct StepLosses {
  double l3d = 0.0;
  double lmm = 0.0;
  double lot = 0.0;
  double lcls = 0.0;
  double total = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  StepLosses losses;
  double lr = 0.0;
};

inline const char* metrics_header() { return "step,epoch,loss_3d,loss_mm,loss_ot,loss_cls,loss_total,lr"; }

inline std::string metrics_row(const StepRecord& r) {
  return std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + detail::fmt_double(r.losses.l3d) + "," +
         detail::fmt_double(r.losses.lmm) + "," + detail::fmt_double(r.losses.lot) + "," +
         detail::fmt_double(r.losses.lcls) + "," + detail::fmt_double(r.losses.total) + "," + detail::fmt_double(r.lr);
}

/// Deep copy of the parameter values.
inline NamedTensors<float> snapshot(const Model<float>& model) {
  NamedTensors<float> out;
  for (const auto& [name, p] : model.parameters())
    out.emplace_back(name, Tensor(p.shape(), std::vector<float>(p.data().begin(), p.data().end())));
  return out;
}

struct TrainState {
  Model<float> model;
  std::shared_ptr<Adam<float>> optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // optimizer steps so far; keys every per-step random stream
  double best_val_accuracy = -1.0;
  std::size_t best_epoch = 0;
  double last_val_accuracy = -1.0;
  NamedTensors<float> best_parameters;
  NamedTensors<float> last_parameters;
  std::vector<StepRecord> history;

  TrainState() = default;
  TrainState(const TrainConfig& cfg)
      : model(cfg.model, derive_seed(cfg.seed, {kTagInit})),
        optimizer(std::make_shared<Adam<float>>(model.parameters(),
                                                AdamConfig{cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.weight_decay})) {}
};

/// One domain's slice for a step. `images` may be empty when the
/// multi-modal term is off.
struct DomainBatch {
  std::vector<PointCloud> clouds;
  std::vector<ImageStack> images;
};

/// Predicted classes from the 3D global feature, dropout off.
inline std::vector<int> predict_labels(const Model<float>& model, const std::vector<PointCloud>& clouds,
                                       std::vector<std::vector<float>>* probabilities = nullptr) {
  TapeScope frozen(nullptr);
  std::vector<int> out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < clouds.size(); lo += kChunk) {
    const std::size_t n = std::min(kChunk, clouds.size() - lo);
    auto probs = classify(model, encode3d_batch(model, std::span<const PointCloud>(clouds.data() + lo, n)).global);
    const auto pred = argmax_rows(probs);
    out.insert(out.end(), pred.begin(), pred.end());
    if (probabilities) {
      const std::size_t K = probs.dim(1);
      for (std::size_t r = 0; r < n; ++r)
        probabilities->emplace_back(probs.data().begin() + r * K, probs.data().begin() + (r + 1) * K);
    }
  }
  return out;
}

/// Share of samples whose prediction matches the label. Labels come from
/// evaluation_labels(), so target data cannot be scored during adaptation.
inline double accuracy(const Model<float>& model, const Dataset& data) {
  require(!data.empty(), "accuracy: empty dataset");
  const auto truth = evaluation_labels(data);
  const auto pred = predict_labels(model, data.clouds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Multi-view renders of every cloud in the dataset.
inline std::vector<ImageStack> render_dataset(const Dataset& data, const TrainConfig& cfg) {
  std::vector<ImageStack> out;
  out.reserve(data.size());
  for (const auto& c : data.clouds) out.push_back(render_multiview(c, cfg.rig, cfg.render));
  return out;
}

namespace detail {

inline Tensor one_hot(const std::vector<PointCloud>& clouds, std::size_t num_classes) {
  std::vector<float> y(clouds.size() * num_classes, 0.0f);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    require(clouds[i].label.has_value(), "source batch has an unlabeled cloud");
    const int l = *clouds[i].label;
    require(l >= 0 && static_cast<std::size_t>(l) < num_classes, "label out of range for num_classes");
    y[i * num_classes + static_cast<std::size_t>(l)] = 1.0f;
  }
  return Tensor({clouds.size(), num_classes}, std::move(y));
}

inline std::vector<PointCloud> augment_all(const std::vector<PointCloud>& clouds, const AugmentationSpec& spec,
                                           std::uint64_t base, std::uint64_t tag, std::uint64_t step) {
  std::vector<PointCloud> out;
  out.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) out.push_back(augment(clouds[i], spec, derive_seed(base, {tag, step, i})));
  return out;
}

// Mixed source batch and its soft labels for the classification term.
inline std::pair<std::vector<PointCloud>, Tensor> mixed_batch(const std::vector<PointCloud>& clouds,
                                                              const TrainConfig& cfg, std::uint64_t step) {
  const std::size_t k = clouds.size(), K = cfg.model.num_classes;
  auto aug = augment_all(clouds, AugmentationSpec::classifier_branch(), cfg.seed, kTagAugmentCls, step);
  if (!cfg.mixup) return {aug, one_hot(aug, K)};
  std::vector<std::size_t> partner(k);
  std::iota(partner.begin(), partner.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg.seed, {kTagMixPairs, step}));
  std::shuffle(partner.begin(), partner.end(), rng);
  std::uniform_real_distribution<double> lambda(0.0, 1.0);
  std::vector<PointCloud> mixed;
  std::vector<float> soft;
  for (std::size_t i = 0; i < k; ++i) {
    PointCloud a = aug[i], b = aug[partner[i]];
    if (a.size() != b.size()) {
      const std::size_t n = std::min(a.size(), b.size());
      a = farthest_point_sample(a, n);
      b = farthest_point_sample(b, n);
    }
    auto m = pcm_mixup(a, b, lambda(rng), static_cast<int>(K), derive_seed(cfg.seed, {kTagMixLambda, step, i}));
    mixed.push_back(std::move(m.cloud));
    soft.insert(soft.end(), m.soft_label.begin(), m.soft_label.end());
  }
  return {std::move(mixed), Tensor({k, K}, std::move(soft))};
}

}  // namespace detail

/// One optimizer step on the summed objective.
///
/// The coupling is solved from values of the un-augmented source and target
/// global features and the eval-mode classifier output, all computed with the
/// parameters as they stand before this step, and is then held constant while
/// the same tensors carry the gradient of the alignment term.
inline StepLosses train_step(TrainState& state, const DomainBatch& src, const DomainBatch& tgt,
                             const TrainConfig& cfg, double lr, const std::string& last_checkpoint = {},
                             CouplingMatrix* coupling_out = nullptr) {
  require(!src.clouds.empty() && !tgt.clouds.empty(), "train_step: empty batch");
  require(cfg.use_l3d || cfg.use_lmm || cfg.use_lot || cfg.use_lcls, "train_step: every loss term is disabled");
  const auto& model = state.model;
  const std::size_t step = state.step;
  Tape tape;
  TapeScope scope(&tape);
  Tensor l3d = Tensor::scalar(0.0f), lmm = Tensor::scalar(0.0f), lot = Tensor::scalar(0.0f),
         lcls = Tensor::scalar(0.0f);

  if (cfg.use_l3d || cfg.use_lmm) {
    for (const DomainBatch* d : {&src, &tgt}) {
      const std::uint64_t dom = d == &src ? 0 : 1;
      const auto t1 = detail::augment_all(d->clouds, AugmentationSpec::contrastive(), derive_seed(cfg.seed, {dom}),
                                          kTagAugment1, step);
      const auto t2 = detail::augment_all(d->clouds, AugmentationSpec::contrastive(), derive_seed(cfg.seed, {dom}),
                                          kTagAugment2, step);
      ContrastiveBatch<float> cb;
      cb.z_t1 = encode3d_batch(model, std::span<const PointCloud>(t1)).projected;
      cb.z_t2 = encode3d_batch(model, std::span<const PointCloud>(t2)).projected;
      cb.tau = cfg.tau;
      cb.exclude_self_sim = cfg.exclude_self_sim;
      if (cfg.use_l3d) l3d = add(l3d, loss_3d(cb));
      if (cfg.use_lmm) {
        require(d->images.size() == d->clouds.size(), "train_step: batch lacks rendered views");
        cb.z_img = encode2d_batch(model, std::span<const ImageStack>(d->images)).projected;
        lmm = add(lmm, loss_mm(cb));
      }
    }
  }

  if (cfg.use_lot) {
    const auto z_s = encode3d_batch(model, std::span<const PointCloud>(src.clouds)).global;
    const auto z_t = encode3d_batch(model, std::span<const PointCloud>(tgt.clouds)).global;
    const auto g_t = classify(model, z_t);
    const auto y_s = detail::one_hot(src.clouds, cfg.model.num_classes);
    const auto cost = cost_matrix(z_s, y_s, z_t, g_t, cfg.alpha, cfg.beta);
    for (double v : cost.values.data)
      if (!std::isfinite(v)) throw DivergenceError("transport cost is not finite", last_checkpoint);
    const auto psi = solve(cost.values, uniform_marginal(src.clouds.size()), uniform_marginal(tgt.clouds.size()), cfg.ot);
    lot = loss_ot(psi, z_s, y_s, z_t, g_t, cfg.alpha, cfg.beta);
    if (coupling_out) *coupling_out = psi;
  }

  if (cfg.use_lcls) {
    auto [mixed, soft] = detail::mixed_batch(src.clouds, cfg, step);
    std::mt19937_64 drop_rng(derive_seed(cfg.seed, {kTagDropout, step}));
    const auto feat = encode3d_batch(model, std::span<const PointCloud>(mixed)).global;
    lcls = loss_cls(classify(model, feat, Mode::train(drop_rng)), soft);
  }

  const auto total = loss_total(l3d, lmm, lot, lcls, last_checkpoint);
  StepLosses out{l3d.item(), lmm.item(), lot.item(), lcls.item(), total.item()};
  state.optimizer->zero_grad();
  backward(total, tape);
  state.optimizer->step(lr);
  ++state.step;
  return out;
}

struct FitOptions {
  const Dataset* validation = nullptr;  // labeled source split for model selection
  std::string out_dir;                  // best.cotc / last.cotc; empty = none
  std::string metrics_path;             // per-step CSV; empty = none
  std::function<void(const std::string&)> log;
};

namespace detail {

// Cycles through shuffled passes over [0, n), reshuffling on each wrap.
class IndexStream {
 public:
  IndexStream(std::size_t n, std::uint64_t seed, std::uint64_t tag) : n_(n), seed_(seed), tag_(tag) {}

  std::vector<std::size_t> take(std::size_t k) {
    std::vector<std::size_t> out;
    while (out.size() < k) {
      if (pos_ == order_.size()) refill();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  void refill() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 rng(derive_seed(seed_, {tag_, pass_++}));
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_, tag_, pass_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline DomainBatch gather_batch(const Dataset& d, const std::vector<ImageStack>& images,
                                const std::vector<std::size_t>& idx) {
  DomainBatch b;
  for (auto i : idx) {
    b.clouds.push_back(d.clouds[i]);
    if (!images.empty()) b.images.push_back(images[i]);
  }
  return b;
}

inline void say(const FitOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

}  // namespace detail

/// Trains from scratch on labeled source and unlabeled target data.
///
/// One epoch is floor(|source| / k) steps (one step when the source set is
/// smaller than k); target batches come from an independent shuffled stream.
/// When a validation split is given the parameters with the best accuracy on
/// it (latest wins ties) are loaded into the returned model; otherwise the
/// final parameters are.
inline TrainState fit(const Dataset& source, const Dataset& target, const TrainConfig& cfg,
                      const FitOptions& options = {}) {
  validate(cfg);
  require(!source.empty(), "fit: empty source dataset");
  require(!target.empty(), "fit: empty target dataset");
  require(source.domain == Domain::kSource && target.domain == Domain::kTarget, "fit: domains are swapped");
  AdaptationScope guard;

  TrainState state(cfg);
  std::vector<ImageStack> src_images, tgt_images;
  if (cfg.use_lmm) {
    src_images = render_dataset(source, cfg);
    tgt_images = render_dataset(target, cfg);
  }
  namespace fs = std::filesystem;
  std::string last_path, best_path;
  if (!options.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create '" + options.out_dir + "': " + ec.message());
    last_path = (fs::path(options.out_dir) / "last.cotc").string();
    best_path = (fs::path(options.out_dir) / "best.cotc").string();
  }

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics '" + options.metrics_path + "'");
    metrics << metrics_header() << "\n";
  }
  const std::size_t ks = std::min(cfg.batch_size, source.size());
  const std::size_t kt = std::min(cfg.batch_size, target.size());
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, source.size() / ks);
  detail::IndexStream src_stream(source.size(), cfg.seed, kTagShuffleSource);
  detail::IndexStream tgt_stream(target.size(), cfg.seed, kTagShuffleTarget);
  std::string written_last;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    src_stream.refill();  // each epoch is one fresh pass over the source
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const auto sb = detail::gather_batch(source, src_images, src_stream.take(ks));
      const auto tb = detail::gather_batch(target, tgt_images, tgt_stream.take(kt));
      StepRecord rec{state.step, epoch, {}, lr};
      rec.losses = train_step(state, sb, tb, cfg, lr, written_last);
      state.history.push_back(rec);
      if (metrics.is_open()) metrics << metrics_row(rec) << "\n" << std::flush;
    }
    state.epoch = epoch + 1;
    state.last_parameters = snapshot(state.model);
    if (options.validation) {
      state.last_val_accuracy = accuracy(state.model, *options.validation);
      if (state.last_val_accuracy >= state.best_val_accuracy) {
        state.best_val_accuracy = state.last_val_accuracy;
        state.best_epoch = state.epoch;
        state.best_parameters = state.last_parameters;
        if (!best_path.empty()) write_checkpoint(best_path, state.best_parameters);
      }
      detail::say(options, "epoch " + std::to_string(state.epoch) + " loss " +
                               detail::fmt_double(state.history.back().losses.total) + " source-val " +
                               detail::fmt_double(state.last_val_accuracy));
    } else {
      state.best_parameters = state.last_parameters;
      state.best_epoch = state.epoch;
      if (!best_path.empty()) write_checkpoint(best_path, state.best_parameters);
      detail::say(options, "epoch " + std::to_string(state.epoch) + " loss " +
                               detail::fmt_double(state.history.back().losses.total));
    }
    if (!last_path.empty()) {
      write_checkpoint(last_path, state.last_parameters);
      written_last = last_path;
    }
  }
  load_parameters(state.model, state.best_parameters);
  return state;
}

struct SpstOptions {
  std::string out_dir;  // writes spst.cotc; empty = none
  std::function<void(const std::string&)> log;
};

struct SpstReport {
  std::vector<std::size_t> selected_per_round;
};

/// Self-paced self-training. Each round pseudo-labels the target samples
/// whose top class probability reaches the threshold, then fine-tunes the 3D
/// encoder and classifier with cross-entropy on those samples plus the
/// labeled source. Rounds with no confident sample leave the model unchanged.
inline SpstReport spst_finetune(TrainState& state, const Dataset& source, const Dataset& target,
                                const TrainConfig& cfg, const SpstOptions& options = {}) {
  validate(cfg);
  require(!source.empty() && !target.empty(), "spst_finetune: empty dataset");
  AdaptationScope guard;
  SpstReport report;
  const int K = static_cast<int>(cfg.model.num_classes);

  for (std::size_t round = 0; round < cfg.spst_rounds; ++round) {
    std::vector<std::vector<float>> probs;
    const auto pred = predict_labels(state.model, target.clouds, &probs);
    std::vector<PointCloud> pool = source.clouds;
    std::size_t selected = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (static_cast<double>(probs[i][static_cast<std::size_t>(pred[i])]) < cfg.spst_threshold) continue;
      PointCloud c = target.clouds[i];
      c.label = pred[i];
      pool.push_back(std::move(c));
      ++selected;
    }
    report.selected_per_round.push_back(selected);
    if (selected == 0) {
      if (options.log) options.log("spst round " + std::to_string(round + 1) + ": no confident target sample, skipped");
      continue;
    }
    if (options.log)
      options.log("spst round " + std::to_string(round + 1) + ": " + std::to_string(selected) + " pseudo-labels");

    NamedTensors<float> params;
    state.model.encoder3d.collect("encoder3d", params);
    state.model.classifier.collect("classifier", params);
    Adam<float> opt(params, AdamConfig{cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.weight_decay});
    const std::size_t k = std::min(cfg.batch_size, pool.size());
    const std::size_t steps = std::max<std::size_t>(1, pool.size() / k);
    detail::IndexStream stream(pool.size(), derive_seed(cfg.seed, {kTagSpstShuffle, round}), kTagSpstShuffle);
    for (std::size_t epoch = 0; epoch < cfg.spst_epochs; ++epoch) {
      stream.refill();
      for (std::size_t b = 0; b < steps; ++b) {
        std::vector<PointCloud> batch;
        for (auto i : stream.take(k)) batch.push_back(pool[i]);
        const std::uint64_t key = derive_seed(cfg.seed, {kTagSpstShuffle, round, epoch, b});
        const auto aug = detail::augment_all(batch, AugmentationSpec::classifier_branch(), key, kTagAugmentCls, 0);
        std::mt19937_64 drop_rng(derive_seed(key, {kTagDropout}));
        Tape tape;
        TapeScope scope(&tape);
        const auto feat = encode3d_batch(state.model, std::span<const PointCloud>(aug)).global;
        const auto loss = loss_cls(classify(state.model, feat, Mode::train(drop_rng)),
                                   detail::one_hot(aug, static_cast<std::size_t>(K)));
        if (!std::isfinite(static_cast<double>(loss.item())))
          throw DivergenceError("spst loss is not finite", {});
        opt.zero_grad();
        backward(loss, tape);
        opt.step(cfg.spst_lr);
      }
    }
  }
  state.last_parameters = snapshot(state.model);
  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    write_checkpoint((std::filesystem::path(options.out_dir) / "spst.cotc").string(), state.last_parameters);
  }
  return report;
}

}  // namespace cot
