#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cot/losses.hpp"
#include "cot/ops.hpp"
#include "cot/ot.hpp"

namespace cot {

/// Compares the taped gradient of scalar f at x against central differences
/// with step h. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
template <class T>
double check_gradients(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                       double h) {
  BasicTensor<T> leaf(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), true);
  std::vector<T> analytic;
  {
    Tape tape;
    TapeScope scope(&tape);
    BasicTensor<T> y = f(leaf);
    backward(y, tape);
    analytic = leaf.grad();
  }
  TapeScope frozen(nullptr);
  std::vector<T> probe(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe[i] = static_cast<T>(saved + h);
    const double up = f(BasicTensor<T>(x.shape(), probe)).item();
    probe[i] = static_cast<T>(saved - h);
    const double down = f(BasicTensor<T>(x.shape(), probe)).item();
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

struct GradCheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return error <= tolerance; }
};

/// Finite-difference checks of every loss on random batches with k = 4 and
/// d = 8, in double precision. Each loss sees its inputs through a random
/// linear map W so the normalization paths are exercised; the classifier
/// variants differentiate through softmax weights instead.
inline std::vector<GradCheckResult> loss_gradient_checks(std::uint64_t seed, double h = 1e-4, double tol = 1e-4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto randn = [&](Shape s) {
    std::vector<double> v(numel(s));
    for (auto& q : v) q = g(rng);
    return TensorD(std::move(s), v);
  };
  const auto x1 = randn({4, 8}), x2 = randn({4, 8}), xi = randn({4, 8}), xt = randn({4, 8});
  const auto w = randn({8, 8}), v = randn({8, 3});
  const TensorD onehot({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0});
  const TensorD soft({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0.3, 0.7, 0});
  // A permutation coupling from the exact solver on a random cost.
  Matrix c(4, 4);
  for (auto& q : c.data) q = std::abs(g(rng));
  const auto psi = solve_exact(c, uniform_marginal(4), uniform_marginal(4));
  const double alpha = 0.001, beta = 0.0001, tau = 0.1;

  using F = std::function<TensorD(const TensorD&)>;
  std::vector<std::pair<std::string, std::pair<F, TensorD>>> checks;
  checks.push_back({"loss_3d", {[&](const TensorD& m) {
                                  return loss_3d(ContrastiveBatch<double>{matmul(x1, m), matmul(x2, m), matmul(xi, m), tau});
                                }, w}});
  checks.push_back({"loss_mm", {[&](const TensorD& m) {
                                  return loss_mm(ContrastiveBatch<double>{matmul(x1, m), matmul(x2, m), matmul(xi, m), tau});
                                }, w}});
  checks.push_back({"loss_ot", {[&](const TensorD& m) {
                                  return loss_ot(psi, matmul(x1, m), onehot, matmul(xt, m), softmax(matmul(xt, v)), alpha,
                                                 beta);
                                }, w}});
  checks.push_back({"loss_ot_classifier", {[&](const TensorD& m) {
                                             return loss_ot(psi, x1, onehot, xt, softmax(matmul(xt, m)), alpha, beta);
                                           }, v}});
  checks.push_back({"loss_cls", {[&](const TensorD& m) { return loss_cls(softmax(matmul(x1, m)), soft); }, v}});
  checks.push_back({"loss_total", {[&](const TensorD& m) {
                                     auto z1 = matmul(x1, m), z2 = matmul(x2, m), zi = matmul(xi, m), zt = matmul(xt, m);
                                     ContrastiveBatch<double> b{l2_normalize(z1), l2_normalize(z2), l2_normalize(zi), tau};
                                     return loss_total(loss_3d(b), loss_mm(b),
                                                       loss_ot(psi, z1, onehot, zt, softmax(matmul(zt, v)), alpha, beta),
                                                       loss_cls(softmax(matmul(z1, v)), soft));
                                   }, w}});
  std::vector<GradCheckResult> out;
  for (auto& [name, fx] : checks) out.push_back({name, check_gradients<double>(fx.first, fx.second, h), tol});
  return out;
}

}  // namespace cot
