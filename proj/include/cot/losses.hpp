#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cot/ops.hpp"

namespace cot {

/// exp(cos(z_i, z_j) / tau) for two vectors.
template <class T>
BasicTensor<T> sim_exp(const BasicTensor<T>& z_i, const BasicTensor<T>& z_j, double tau) {
  require(tau > 0.0, "temperature tau must be > 0");
  return exp(scale(cosine_similarity(z_i, z_j), 1.0 / tau));
}

/// Projected embeddings for one batch: two augmentations of each cloud and
/// the multi-view image embedding. Rows are expected to be unit norm.
template <class T>
struct ContrastiveBatch {
  BasicTensor<T> z_t1;   // [k, proj]
  BasicTensor<T> z_t2;   // [k, proj]
  BasicTensor<T> z_img;  // [k, proj]
  double tau = 0.1;
  // Drop the j == i term of the same-view sum (SimCLR convention).
  bool exclude_self_sim = false;
};

namespace detail {

// -log( exp(s(a_i, b_i)/tau) / (sum_j exp(s(a_i, a_j)/tau) + sum_j exp(s(a_i, b_j)/tau)) ),
// averaged over anchors i, evaluated as a log-softmax over the 2k logits.
template <class T>
BasicTensor<T> anchored_contrastive(const BasicTensor<T>& anchors, const BasicTensor<T>& partners, double tau,
                                    bool exclude_self) {
  require(tau > 0.0, "temperature tau must be > 0");
  detail::require_rank(anchors.shape(), 2, "contrastive loss");
  detail::require_same(anchors.shape(), partners.shape(), "contrastive loss");
  const std::size_t k = anchors.dim(0);
  require(k >= 1, "contrastive loss needs k >= 1");
  auto logits = scale(concat(std::vector<BasicTensor<T>>{cosine_similarity(anchors, anchors),
                                                         cosine_similarity(anchors, partners)},
                             1),
                      1.0 / tau);
  std::vector<std::size_t> positive(k);
  for (std::size_t i = 0; i < k; ++i) positive[i] = k + i;
  if (exclude_self) {
    require(k >= 1, "exclude_self_sim needs k >= 1");
    std::vector<std::int64_t> idx;
    idx.reserve(k * (2 * k - 1));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < 2 * k; ++j)
        if (j != i) idx.push_back(static_cast<std::int64_t>(i * 2 * k + j));
    logits = gather(logits, std::span<const std::int64_t>(idx), Shape{k, 2 * k - 1});
    for (std::size_t i = 0; i < k; ++i) positive[i] = k + i - 1;
  }
  return scale(mean(pick(log_softmax(logits), std::span<const std::size_t>(positive))), -1.0);
}

}  // namespace detail

/// Contrastive loss between the two augmentations, anchored on t1. The
/// denominator sums run over all j including j == i unless exclude_self_sim.
template <class T>
BasicTensor<T> loss_3d(const ContrastiveBatch<T>& batch) {
  return detail::anchored_contrastive(batch.z_t1, batch.z_t2, batch.tau, batch.exclude_self_sim);
}

/// Average of the two augmentation embeddings, re-normalized to unit length.
template <class T>
BasicTensor<T> average_embedding(const BasicTensor<T>& z_t1, const BasicTensor<T>& z_t2) {
  return l2_normalize(scale(add(z_t1, z_t2), 0.5));
}

/// Contrastive loss between the averaged 3D embedding and the image embedding.
template <class T>
BasicTensor<T> loss_mm(const ContrastiveBatch<T>& batch) {
  return detail::anchored_contrastive(average_embedding(batch.z_t1, batch.z_t2), batch.z_img, batch.tau,
                                      batch.exclude_self_sim);
}

/// Mean over rows of -sum_c soft[c] * log(probs[c] + eps).
template <class T>
BasicTensor<T> loss_cls(const BasicTensor<T>& probs, const BasicTensor<T>& soft_labels) {
  detail::require_rank(probs.shape(), 2, "loss_cls");
  detail::require_same(probs.shape(), soft_labels.shape(), "loss_cls");
  return scale(sum(mul(soft_labels, log(probs))), -1.0 / static_cast<double>(probs.dim(0)));
}

/// Unweighted sum of the four objectives. Any non-finite term is divergence.
template <class T>
BasicTensor<T> loss_total(const BasicTensor<T>& l3d, const BasicTensor<T>& lmm, const BasicTensor<T>& lot,
                          const BasicTensor<T>& lcls, const std::string& last_checkpoint = {}) {
  const char* names[] = {"loss_3d", "loss_mm", "loss_ot", "loss_cls"};
  const BasicTensor<T>* parts[] = {&l3d, &lmm, &lot, &lcls};
  for (int i = 0; i < 4; ++i) {
    if (!std::isfinite(static_cast<double>(parts[i]->item())))
      throw DivergenceError(std::string(names[i]) + " is not finite", last_checkpoint);
  }
  return add(add(l3d, lmm), add(lot, lcls));
}

}  // namespace cot
