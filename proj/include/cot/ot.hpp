#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cot/ops.hpp"

namespace cot {

/// Small dense row-major matrix of doubles for transport problems.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
};

/// Pairwise transport cost with the feature/label weights that produced it.
struct CostMatrix {
  Matrix values;
  double alpha = 0.0;
  double beta = 0.0;
};

/// Transport plan with the marginals it was solved for.
struct CouplingMatrix {
  Matrix plan;
  std::vector<double> a;
  std::vector<double> b;
  bool converged = true;
  std::size_t iterations = 0;

  double objective(const Matrix& cost) const {
    double s = 0.0;
    for (std::size_t i = 0; i < plan.data.size(); ++i) s += plan.data[i] * cost.data[i];
    return s;
  }
};

enum class SolverKind : std::uint8_t { kAuto, kExact, kSinkhorn };

inline const char* solver_name(SolverKind s) {
  switch (s) {
    case SolverKind::kExact: return "exact";
    case SolverKind::kSinkhorn: return "sinkhorn";
    default: return "auto";
  }
}

inline SolverKind parse_solver(const std::string& s) {
  if (s == "exact") return SolverKind::kExact;
  if (s == "sinkhorn") return SolverKind::kSinkhorn;
  if (s == "auto") return SolverKind::kAuto;
  throw ContractError("unknown solver '" + s + "' (expected exact|sinkhorn|auto)");
}

struct OTConfig {
  SolverKind solver = SolverKind::kAuto;
  double p = 2.0;
  double sinkhorn_epsilon = 0.05;
  std::size_t sinkhorn_max_iters = 10000;
  double sinkhorn_tol = 1e-7;
  // kAuto switches to Sinkhorn above this batch size.
  std::size_t exact_max_size = 32;
};

inline void validate(const OTConfig& cfg) {
  require(cfg.p >= 1.0, "Wasserstein order p must be >= 1");
  require(cfg.sinkhorn_epsilon > 0.0, "sinkhorn_epsilon must be > 0");
  require(cfg.sinkhorn_max_iters >= 1, "sinkhorn_max_iters must be >= 1");
}

inline std::vector<double> uniform_marginal(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

namespace detail {

inline void check_marginals(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  if (a.size() != cost.rows || b.size() != cost.cols) throw DimensionError("marginal lengths do not match the cost matrix");
  require(cost.rows > 0 && cost.cols > 0, "transport problem must be non-empty");
  double sa = 0.0, sb = 0.0;
  for (double v : a) {
    require(v >= 0.0 && std::isfinite(v), "marginal a has negative or non-finite mass");
    sa += v;
  }
  for (double v : b) {
    require(v >= 0.0 && std::isfinite(v), "marginal b has negative or non-finite mass");
    sb += v;
  }
  require(std::abs(sa - 1.0) < 1e-6 && std::abs(sb - 1.0) < 1e-6, "marginals must each sum to 1");
  for (double v : cost.data) require(std::isfinite(v), "cost matrix has a non-finite entry");
}

inline bool is_uniform_square(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  if (cost.rows != cost.cols) return false;
  const double u = 1.0 / static_cast<double>(cost.rows);
  auto close = [u](double v) { return std::abs(v - u) <= 1e-12; };
  return std::all_of(a.begin(), a.end(), close) && std::all_of(b.begin(), b.end(), close);
}

struct Assignment {
  std::vector<std::size_t> col_of_row;
  std::vector<double> u, v;  // optimal dual potentials
  double cost = 0.0;
};

// Shortest-augmenting-path Hungarian method with potentials, O(n^3).
inline Assignment hungarian(const Matrix& c) {
  const std::size_t n = c.rows;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment r;
  r.col_of_row.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) r.col_of_row[p[j] - 1] = j - 1;
  r.u.assign(u.begin() + 1, u.end());
  r.v.assign(v.begin() + 1, v.end());
  for (std::size_t i = 0; i < n; ++i) r.cost += c(i, r.col_of_row[i]);
  return r;
}

}  // namespace detail

/// Minimum-cost perfect matching on a square cost matrix. Among optimal
/// permutations returns the lexicographically smallest (row order).
inline std::vector<std::size_t> solve_assignment(const Matrix& cost) {
  require(cost.rows == cost.cols && cost.rows > 0, "assignment needs a non-empty square cost matrix");
  const std::size_t n = cost.rows;
  auto best = detail::hungarian(cost);
  double scale = 0.0;
  for (double v : cost.data) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * (1.0 + scale * static_cast<double>(n));
  std::vector<std::size_t> assign = best.col_of_row;
  const double optimum = best.cost;
  std::vector<char> col_used(n, 0);
  double prefix_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (col_used[j]) continue;
      if (j == assign[i]) break;
      // Every optimal matching uses only zero-reduced-cost edges.
      if (cost(i, j) - best.u[i] - best.v[j] > tol) continue;
      std::vector<std::size_t> rows, cols;
      for (std::size_t r = i + 1; r < n; ++r) rows.push_back(r);
      for (std::size_t c = 0; c < n; ++c)
        if (!col_used[c] && c != j) cols.push_back(c);
      double total = prefix_cost + cost(i, j);
      std::vector<std::size_t> sub_assign;
      if (!rows.empty()) {
        Matrix sub(rows.size(), cols.size());
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t c = 0; c < cols.size(); ++c) sub(r, c) = cost(rows[r], cols[c]);
        auto s = detail::hungarian(sub);
        total += s.cost;
        sub_assign = s.col_of_row;
      }
      if (total <= optimum + tol) {
        assign[i] = j;
        for (std::size_t r = 0; r < rows.size(); ++r) assign[rows[r]] = cols[sub_assign[r]];
        break;
      }
    }
    col_used[assign[i]] = 1;
    prefix_cost += cost(i, assign[i]);
  }
  return assign;
}

/// Transportation simplex (MODI pivoting on a spanning-tree basis) for
/// arbitrary rectangular marginals.
inline CouplingMatrix solve_transport_simplex(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  detail::check_marginals(cost, a, b);
  const std::size_t m = cost.rows, n = cost.cols;
  struct Cell {
    std::size_t i, j;
    double flow;
  };
  std::vector<Cell> basis;
  basis.reserve(m + n - 1);
  {
    std::vector<double> ra(a.begin(), a.end()), rb(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    while (true) {
      const double x = std::min(ra[i], rb[j]);
      basis.push_back({i, j, x});
      ra[i] -= x;
      rb[j] -= x;
      if (i == m - 1 && j == n - 1) break;
      if (j == n - 1 || (i < m - 1 && ra[i] <= rb[j])) {
        ++i;
      } else {
        ++j;
      }
    }
  }

  double scale = 0.0;
  for (double v : cost.data) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * (1.0 + scale);
  const std::size_t nodes = m + n;
  std::vector<double> pot(nodes);
  std::vector<std::vector<std::size_t>> adj(nodes);  // node -> basis cell indices
  std::size_t iterations = 0;
  const std::size_t max_iterations = 50 * (m + n) * (m + n) + 1000;
  std::size_t degenerate_streak = 0;

  for (; iterations < max_iterations; ++iterations) {
    for (auto& l : adj) l.clear();
    for (std::size_t e = 0; e < basis.size(); ++e) {
      adj[basis[e].i].push_back(e);
      adj[m + basis[e].j].push_back(e);
    }
    // Potentials: u_i + v_j = c_ij on basic cells, u_0 = 0.
    std::vector<char> seen(nodes, 0);
    std::deque<std::size_t> queue{0};
    seen[0] = 1;
    pot[0] = 0.0;
    while (!queue.empty()) {
      const std::size_t node = queue.front();
      queue.pop_front();
      for (std::size_t e : adj[node]) {
        const auto& cell = basis[e];
        const std::size_t other = node < m ? m + cell.j : cell.i;
        if (seen[other]) continue;
        seen[other] = 1;
        pot[other] = cost(cell.i, cell.j) - pot[node];
        queue.push_back(other);
      }
    }
    // Entering cell: most negative reduced cost (Dantzig); after a run of
    // degenerate pivots fall back to the first negative one (Bland).
    const bool bland = degenerate_streak > m + n;
    std::size_t ei = m, ej = n;
    double best = -tol;
    for (std::size_t i = 0; i < m && !(bland && ei < m); ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double rc = cost(i, j) - pot[i] - pot[m + j];
        if (rc < best) {
          best = rc;
          ei = i;
          ej = j;
          if (bland) break;
        }
      }
    if (ei == m) break;

    // Tree path from row node ei to column node ej.
    std::vector<std::size_t> via(nodes, static_cast<std::size_t>(-1));
    std::vector<char> visited(nodes, 0);
    queue.assign(1, ei);
    visited[ei] = 1;
    while (!queue.empty()) {
      const std::size_t node = queue.front();
      queue.pop_front();
      if (node == m + ej) break;
      for (std::size_t e : adj[node]) {
        const auto& cell = basis[e];
        const std::size_t other = node < m ? m + cell.j : cell.i;
        if (visited[other]) continue;
        visited[other] = 1;
        via[other] = e;
        queue.push_back(other);
      }
    }
    std::vector<std::size_t> path;  // cells from column ej back to row ei
    for (std::size_t node = m + ej; node != ei;) {
      const std::size_t e = via[node];
      path.push_back(e);
      node = node < m ? m + basis[e].j : basis[e].i;
    }
    // Cycle signs: entering +, then alternating starting with - at the cell
    // sharing column ej (path[0]).
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = path.size();
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const double f = basis[path[k]].flow;
      if (f < theta || (f == theta && path[k] < path[leave])) {
        theta = f;
        leave = k;
      }
    }
    for (std::size_t k = 0; k < path.size(); ++k) {
      auto& cell = basis[path[k]];
      cell.flow = (k % 2 == 0) ? std::max(0.0, cell.flow - theta) : cell.flow + theta;
    }
    degenerate_streak = theta <= 0.0 ? degenerate_streak + 1 : 0;
    basis[path[leave]] = {ei, ej, theta};
  }

  CouplingMatrix out;
  out.plan = Matrix(m, n, 0.0);
  for (const auto& cell : basis) out.plan(cell.i, cell.j) += cell.flow;
  out.a.assign(a.begin(), a.end());
  out.b.assign(b.begin(), b.end());
  out.iterations = iterations;
  out.converged = iterations < max_iterations;
  return out;
}

/// Exact minimizer of <cost, plan> over couplings with marginals (a, b).
/// Uniform square problems are solved as assignments (scaled permutation,
/// lexicographically smallest among optima).
inline CouplingMatrix solve_exact(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  detail::check_marginals(cost, a, b);
  if (!detail::is_uniform_square(cost, a, b)) return solve_transport_simplex(cost, a, b);
  const std::size_t n = cost.rows;
  const auto perm = solve_assignment(cost);
  CouplingMatrix out;
  out.plan = Matrix(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.plan(i, perm[i]) = 1.0 / static_cast<double>(n);
  out.a.assign(a.begin(), a.end());
  out.b.assign(b.begin(), b.end());
  return out;
}

namespace detail {

// Projects a near-feasible plan onto U(a, b): shrink rows and columns that
// carry too much mass, then spread the remaining deficit as a rank-one
// correction. Changes the plan by at most its marginal L1 error.
inline void round_to_marginals(Matrix& plan, std::span<const double> a, std::span<const double> b) {
  const std::size_t m = plan.rows, n = plan.cols;
  for (std::size_t i = 0; i < m; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) r += plan(i, j);
    if (r > a[i] && r > 0.0)
      for (std::size_t j = 0; j < n; ++j) plan(i, j) *= a[i] / r;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += plan(i, j);
    if (c > b[j] && c > 0.0)
      for (std::size_t i = 0; i < m; ++i) plan(i, j) *= b[j] / c;
  }
  std::vector<double> da(m), db(n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) r += plan(i, j);
    da[i] = std::max(0.0, a[i] - r);
    total += da[i];
  }
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += plan(i, j);
    db[j] = std::max(0.0, b[j] - c);
  }
  if (total <= 0.0) return;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) plan(i, j) += da[i] * db[j] / total;
}

}  // namespace detail

/// Log-domain Sinkhorn for the entropic problem with regularization epsilon.
/// Stops when the row-marginal L1 error drops below sinkhorn_tol (columns are
/// exact after each sweep); otherwise returns the best iterate with
/// converged = false. The returned plan is rounded onto U(a, b), so it is
/// always feasible.
inline CouplingMatrix solve_sinkhorn(const Matrix& cost, std::span<const double> a, std::span<const double> b,
                                     const OTConfig& cfg) {
  validate(cfg);
  detail::check_marginals(cost, a, b);
  const std::size_t m = cost.rows, n = cost.cols;
  const double eps = cfg.sinkhorn_epsilon;
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> log_a(m), log_b(n), f(m, 0.0), g(n, 0.0), tmp(std::max(m, n));
  for (std::size_t i = 0; i < m; ++i) log_a[i] = a[i] > 0.0 ? std::log(a[i]) : ninf;
  for (std::size_t j = 0; j < n; ++j) log_b[j] = b[j] > 0.0 ? std::log(b[j]) : ninf;

  auto lse = [](const std::vector<double>& x, std::size_t len) {
    double mx = ninf;
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[k]);
    if (mx == ninf) return ninf;
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += std::exp(x[k] - mx);
    return mx + std::log(s);
  };
  auto build = [&](Matrix& plan) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double e = (f[i] + g[j] - cost(i, j)) / eps;
        plan(i, j) = (f[i] == ninf || g[j] == ninf) ? 0.0 : std::exp(e);
      }
  };

  CouplingMatrix out;
  out.a.assign(a.begin(), a.end());
  out.b.assign(b.begin(), b.end());
  out.plan = Matrix(m, n);
  Matrix plan(m, n);
  double best_err = std::numeric_limits<double>::infinity();
  out.converged = false;
  std::size_t it = 0;
  while (it < cfg.sinkhorn_max_iters) {
    ++it;
    for (std::size_t i = 0; i < m; ++i) {
      if (log_a[i] == ninf) {
        f[i] = ninf;
        continue;
      }
      for (std::size_t j = 0; j < n; ++j) tmp[j] = (g[j] - cost(i, j)) / eps;
      f[i] = eps * (log_a[i] - lse(tmp, n));
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (log_b[j] == ninf) {
        g[j] = ninf;
        continue;
      }
      for (std::size_t i = 0; i < m; ++i) tmp[i] = (f[i] - cost(i, j)) / eps;
      g[j] = eps * (log_b[j] - lse(tmp, m));
    }
    build(plan);
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < n; ++j) r += plan(i, j);
      err += std::abs(r - a[i]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      double c = 0.0;
      for (std::size_t i = 0; i < m; ++i) c += plan(i, j);
      err += std::abs(c - b[j]);
    }
    if (err < best_err) {
      best_err = err;
      out.plan = plan;
    }
    if (err < cfg.sinkhorn_tol) {
      out.converged = true;
      break;
    }
  }
  out.iterations = it;
  detail::round_to_marginals(out.plan, a, b);
  return out;
}

inline CouplingMatrix solve(const Matrix& cost, std::span<const double> a, std::span<const double> b,
                            const OTConfig& cfg) {
  SolverKind kind = cfg.solver;
  if (kind == SolverKind::kAuto)
    kind = std::max(cost.rows, cost.cols) <= cfg.exact_max_size ? SolverKind::kExact : SolverKind::kSinkhorn;
  return kind == SolverKind::kExact ? solve_exact(cost, a, b) : solve_sinkhorn(cost, a, b, cfg);
}

/// Joint feature/label cost: alpha * ||z_s_i - z_t_j||^2 + beta * ||y_s_i - g_t_j||^2.
/// Reads values only; nothing is recorded on the tape.
template <class T>
CostMatrix cost_matrix(const BasicTensor<T>& z_s, const BasicTensor<T>& y_s, const BasicTensor<T>& z_t,
                       const BasicTensor<T>& g_t, double alpha, double beta) {
  require(alpha >= 0.0 && beta >= 0.0, "cost weights alpha and beta must be nonnegative");
  detail::require_rank(z_s.shape(), 2, "cost_matrix");
  detail::require_rank(z_t.shape(), 2, "cost_matrix");
  detail::require_rank(y_s.shape(), 2, "cost_matrix");
  detail::require_rank(g_t.shape(), 2, "cost_matrix");
  const std::size_t ks = z_s.dim(0), kt = z_t.dim(0), d = z_s.dim(1), K = y_s.dim(1);
  if (z_t.dim(1) != d || y_s.dim(0) != ks || g_t.dim(0) != kt || g_t.dim(1) != K)
    throw DimensionError("cost_matrix: inconsistent shapes");
  CostMatrix c{Matrix(ks, kt), alpha, beta};
  auto zs = z_s.data(), zt = z_t.data(), ys = y_s.data(), gt = g_t.data();
  for (std::size_t i = 0; i < ks; ++i)
    for (std::size_t j = 0; j < kt; ++j) {
      double feat = 0.0, lab = 0.0;
      for (std::size_t q = 0; q < d; ++q) {
        const double diff = static_cast<double>(zs[i * d + q]) - zt[j * d + q];
        feat += diff * diff;
      }
      for (std::size_t q = 0; q < K; ++q) {
        const double diff = static_cast<double>(ys[i * K + q]) - gt[j * K + q];
        lab += diff * diff;
      }
      c.values(i, j) = alpha * feat + beta * lab;
    }
  return c;
}

/// Alignment loss sum_ij psi_ij (alpha ||z_s_i - z_t_j||^2 + beta CE(y_s_i, g_t_j)).
/// psi is a constant; gradients reach z_s, z_t and g_t.
template <class T>
BasicTensor<T> loss_ot(const CouplingMatrix& psi, const BasicTensor<T>& z_s, const BasicTensor<T>& y_s,
                       const BasicTensor<T>& z_t, const BasicTensor<T>& g_t, double alpha, double beta) {
  const std::size_t ks = z_s.dim(0), kt = z_t.dim(0);
  if (psi.plan.rows != ks || psi.plan.cols != kt) throw DimensionError("loss_ot: coupling shape mismatch");
  std::vector<T> w(psi.plan.data.begin(), psi.plan.data.end());
  BasicTensor<T> weights({ks, kt}, std::move(w));
  auto feature = scale(sq_dist(z_s, z_t), alpha);
  // CE_ij = -sum_c y_ic log(g_jc + eps)
  auto ce = scale(matmul(y_s, transpose(log(g_t))), -beta);
  return sum(mul(weights, add(feature, ce)));
}

/// W_p between uniform (or given) empirical measures on the rows of x and y.
inline double wasserstein_p(const Matrix& x, const Matrix& y, double p, const OTConfig& cfg,
                            std::span<const double> wx = {}, std::span<const double> wy = {}) {
  require(x.rows > 0 && y.rows > 0, "wasserstein_p: empty point set");
  require(x.cols == y.cols, "wasserstein_p: point dimensions differ");
  require(p >= 1.0, "wasserstein_p: p must be >= 1");
  Matrix cp(x.rows, y.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double d = x(i, c) - y(j, c);
        s += d * d;
      }
      cp(i, j) = std::pow(std::sqrt(s), p);
    }
  std::vector<double> a = wx.empty() ? uniform_marginal(x.rows) : std::vector<double>(wx.begin(), wx.end());
  std::vector<double> b = wy.empty() ? uniform_marginal(y.rows) : std::vector<double>(wy.begin(), wy.end());
  const auto plan = solve(cp, a, b, cfg);
  return std::pow(std::max(0.0, plan.objective(cp)), 1.0 / p);
}

}  // namespace cot
