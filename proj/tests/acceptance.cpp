// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// Tolerances are fixed here and must not be loosened to make a line pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cot/cli.hpp"

using namespace cot;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(r, c);
  for (auto& v : m.data) v = u(rng);
  return m;
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= s;
  return v;
}

double permutation_oracle(const Matrix& c) {
  std::vector<std::size_t> perm(c.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < c.rows; ++i) s += c(i, perm[i]);
    best = std::min(best, s / static_cast<double>(c.rows));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double marginal_error(const Matrix& p, std::span<const double> a, std::span<const double> b) {
  double err = 0.0;
  for (std::size_t i = 0; i < p.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p.cols; ++j) s += p(i, j);
    err = std::max(err, std::abs(s - a[i]));
  }
  for (std::size_t j = 0; j < p.cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.rows; ++i) s += p(i, j);
    err = std::max(err, std::abs(s - b[j]));
  }
  return err;
}

// ---- 1: finite-difference gradient checks ----------------------------------

Outcome gradient_checks() {
  double worst = 0.0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& r : loss_gradient_checks(seed, 1e-4, 1e-4)) {
      if (!r.passed() || r.error > worst) {
        worst = std::max(worst, r.error);
        worst_name = r.name;
      }
      if (!r.passed()) return {false, r.name + " relative error " + num(r.error) + " > 1e-4"};
    }
  return {true, "worst relative error " + num(worst) + " (" + worst_name + ") <= 1e-4"};
}

// ---- 2: exact solver against permutation enumeration -----------------------

Outcome exact_solver() {
  std::mt19937_64 rng(20);
  double worst = 0.0;
  int n = 0;
  for (std::size_t k = 2; k <= 6; ++k)
    for (int t = 0; t < 40; ++t, ++n) {
      const auto c = random_matrix(k, k, rng);
      const auto u = uniform_marginal(k);
      const auto p = solve_exact(c, u, u);
      worst = std::max(worst, std::abs(p.objective(c) - permutation_oracle(c)));
      worst = std::max(worst, marginal_error(p.plan, u, u));
    }
  return {n == 200 && worst <= 1e-9, std::to_string(n) + " instances, max deviation " + num(worst) + " <= 1e-9"};
}

// ---- 3: Sinkhorn marginals, upper bound and small-epsilon gap --------------

Outcome sinkhorn() {
  std::mt19937_64 rng(30);
  double worst_marg = 0.0, worst_below = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto c = random_matrix(8, 8, rng);
    const auto a = random_simplex(8, rng), b = random_simplex(8, rng);
    const auto p = solve_sinkhorn(c, a, b, OTConfig{});
    if (!p.converged) return {false, "instance " + std::to_string(t) + " did not converge"};
    worst_marg = std::max(worst_marg, marginal_error(p.plan, a, b));
    const double exact = solve_exact(c, a, b).objective(c);
    worst_below = std::max(worst_below, exact - p.objective(c));
  }
  double worst_gap = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto c = random_matrix(4, 4, rng);
    const auto u = uniform_marginal(4);
    OTConfig cfg;
    cfg.sinkhorn_epsilon = 0.01;
    cfg.sinkhorn_max_iters = 100000;
    worst_gap = std::max(worst_gap, solve_sinkhorn(c, u, u, cfg).objective(c) - solve_exact(c, u, u).objective(c));
  }
  const bool ok = worst_marg <= 1e-6 && worst_below <= 0.0 && worst_gap <= 1e-2;
  return {ok, "marginal error " + num(worst_marg) + " <= 1e-6; exact minus entropic " + num(worst_below) +
                  " <= 0; eps 0.01 gap " + num(worst_gap) + " <= 1e-2"};
}

// ---- 4: collapsed contrastive batches --------------------------------------

Outcome collapsed_contrastive() {
  std::mt19937_64 rng(40);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0.0;
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    std::vector<double> row(16);
    double norm = 0.0;
    for (auto& v : row) {
      v = g(rng);
      norm += v * v;
    }
    for (auto& v : row) v /= std::sqrt(norm);
    std::vector<float> data;
    for (std::size_t i = 0; i < k; ++i) data.insert(data.end(), row.begin(), row.end());
    Tensor z({k, 16}, data);
    ContrastiveBatch<float> batch{z, z, z, 0.1};
    worst = std::max(worst, std::abs(loss_3d(batch).item() - std::log(2.0 * k)));
    worst = std::max(worst, std::abs(loss_mm(batch).item() - std::log(2.0 * k)));
  }
  return {worst <= 1e-6, "max |L - log(2k)| " + num(worst) + " <= 1e-6"};
}

// ---- 5-7: adaptation experiment --------------------------------------------

// Desk-scale benchmark. Model widths, view count and set sizes are reduced so
// nine trainings and three SPST passes fit in a CI budget; the shift settings
// are pinned so the source-only model is clearly below ceiling.
RunConfig experiment_config(std::uint64_t seed) {
  RunConfig c;
  const char* text =
      "batch_size = 16\n"
      "views = 6\n"
      "image_size = 32\n"
      "point_radius = 0.03\n"
      "emb_dim = 32\n"
      "proj_dim = 16\n"
      "point_widths = 32,64\n"
      "conv_channels = 8,16\n"
      "classifier_widths = 32,16\n"
      "epochs = 60\n"
      "lr = 0.005\n"
      "per_class = 40\n"
      "test_per_class = 60\n"
      "target_noise = 0.05\n"
      "target_crop = 0.45\n"
      "target_bias = 0.5\n";
  apply_config_text(c, text);
  c.train.seed = seed;
  validate(c);
  return c;
}

struct Arm {
  std::vector<double> accuracy, mmd;
  double mean_accuracy() const { return std::accumulate(accuracy.begin(), accuracy.end(), 0.0) / accuracy.size(); }
  double mean_mmd() const { return std::accumulate(mmd.begin(), mmd.end(), 0.0) / mmd.size(); }
};

struct Experiment {
  Arm baseline, cot, no_ot, spst;
  bool ran = false;
};

Experiment& experiment() {
  static Experiment e;
  if (e.ran) return e;
  e.ran = true;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto rc = experiment_config(seed);
    const auto b = generate_benchmark(rc.data.source, rc.data.target, rc.data.per_class, rc.data.test_per_class,
                                      seed, static_cast<int>(rc.train.model.num_classes));
    FitOptions opt;
    opt.validation = &b.source_test;
    auto record = [&](Arm& arm, const Model<float>& m) {
      arm.accuracy.push_back(evaluate(m, b.target_test).overall_accuracy);
      arm.mmd.push_back(feature_mmd(m, b.source_test, b.target_test).mean_diagonal());
    };
    auto base_cfg = rc.train;
    base_cfg.use_l3d = base_cfg.use_lmm = base_cfg.use_lot = false;
    record(e.baseline, fit(b.source_train, b.target_train, base_cfg, opt).model);
    auto no_ot_cfg = rc.train;
    no_ot_cfg.use_lot = false;
    record(e.no_ot, fit(b.source_train, b.target_train, no_ot_cfg, opt).model);
    auto st = fit(b.source_train, b.target_train, rc.train, opt);
    record(e.cot, st.model);
    spst_finetune(st, b.source_train, b.target_train, rc.train);
    record(e.spst, st.model);
    std::printf("  seed %llu: baseline %s, cot %s, no-ot %s, spst %s\n", static_cast<unsigned long long>(seed),
                num(e.baseline.accuracy.back()).c_str(), num(e.cot.accuracy.back()).c_str(),
                num(e.no_ot.accuracy.back()).c_str(), num(e.spst.accuracy.back()).c_str());
    std::fflush(stdout);
  }
  return e;
}

Outcome cot_beats_baseline() {
  auto& e = experiment();
  const double base = e.baseline.mean_accuracy(), cot = e.cot.mean_accuracy(), spst = e.spst.mean_accuracy();
  const bool ok = cot >= base + 0.05 && spst >= cot - 0.02;
  return {ok, "mean target accuracy cot " + num(cot) + " vs baseline " + num(base) + " (need +0.05); spst " +
                  num(spst) + " (may drop at most 0.02)"};
}

Outcome ot_term_matters() {
  auto& e = experiment();
  const double cot = e.cot.mean_accuracy(), no_ot = e.no_ot.mean_accuracy();
  return {no_ot < cot, "mean target accuracy without L_ot " + num(no_ot) + " < cot " + num(cot)};
}

// Naive double-loop MMD used as the oracle.
double naive_mmd(const Matrix& x, const Matrix& y, double sigma) {
  auto k = [&](const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
    double d = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) d += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
    return std::exp(-d / (2.0 * sigma * sigma));
  };
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.rows; ++j) xx += k(x, i, x, j);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j) yy += k(y, i, y, j);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < y.rows; ++j) xy += k(x, i, y, j);
  const double n = x.rows, m = y.rows;
  return std::sqrt(std::max(0.0, xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)));
}

Outcome mmd_reduced() {
  std::mt19937_64 rng(70);
  std::uniform_int_distribution<std::size_t> size(1, 20);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + t % 6;
    const auto x = random_matrix(size(rng), d, rng), y = random_matrix(size(rng), d, rng);
    const double sigma = 0.2 + 0.1 * (t % 7);
    worst = std::max(worst, std::abs(mmd(x, y, sigma) - naive_mmd(x, y, sigma)));
  }
  if (worst > 1e-9) return {false, "MMD oracle deviation " + num(worst) + " > 1e-9"};
  auto& e = experiment();
  const double base = e.baseline.mean_mmd(), cot = e.cot.mean_mmd();
  return {cot < base, "mean diagonal MMD cot " + num(cot) + " < baseline " + num(base) + "; oracle deviation " +
                          num(worst) + " <= 1e-9"};
}

// ---- 8: renderer determinism -----------------------------------------------

Outcome renderer_determinism() {
  auto cloud = generate_shape(4, 1024, 80);
  RenderParams params;
  const CameraRig rig;
  auto bytes = [&](const char* threads) {
    ::setenv("COT_THREADS", threads, 1);
    std::vector<std::uint8_t> out;
    for (const auto& v : render_multiview(cloud, rig, params).views) {
      const auto b = encode_pgm(v);
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  };
  const auto a = bytes("1"), b = bytes("1"), c = bytes("4");
  ::unsetenv("COT_THREADS");
  if (a != b) return {false, "two runs differ"};
  if (a != c) return {false, "COT_THREADS=1 and COT_THREADS=4 differ"};

  PointCloud origin{{{0, 0, 0}}, std::nullopt, Domain::kSource};
  RenderParams odd;
  odd.image_size = 33;
  for (double az : {0.0, 0.9, 2.5, 4.0}) {
    const auto img = render_view(origin, az, 0.0, odd);
    for (std::size_t r = 0; r < 33; ++r)
      for (std::size_t col = 0; col < 33; ++col)
        if ((img.at(r, col) > 0.0f) != (r == 16 && col == 16))
          return {false, "origin point lit pixel (" + std::to_string(r) + "," + std::to_string(col) + ")"};
  }
  return {true, std::to_string(rig.views) + " views bit-identical across runs and thread counts; origin centered"};
}

// ---- 9: CLI reproducibility ------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> head_lines(const std::string& text, std::size_t n) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; out.size() < n && std::getline(in, l);) out.push_back(l);
  return out;
}

Outcome cli_reproducible() {
  const auto dir = fs::temp_directory_path() / "cot_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = (dir / "run.cfg").string();
  std::ofstream(cfg) << "batch_size = 4\nepochs = 3\nviews = 3\nimage_size = 16\npoint_radius = 0.03\n"
                        "emb_dim = 16\nproj_dim = 8\npoint_widths = 16\nconv_channels = 4\n"
                        "classifier_widths = 16\nper_class = 4\ntest_per_class = 2\n"
                        "source_density = 64\ntarget_density = 64\nseed = 11\n";
  std::ostringstream out, err;
  const auto data = (dir / "data").string();
  if (run_cli({"gen-data", "--config", cfg, "--out", data}, out, err) != 0) return {false, err.str()};
  for (const char* run : {"a", "b"})
    if (run_cli({"train", "--config", cfg, "--data", data, "--out", (dir / run).string()}, out, err) != 0)
      return {false, err.str()};
  const auto ma = head_lines(slurp(dir / "a" / "metrics.csv"), 11);
  const auto mb = head_lines(slurp(dir / "b" / "metrics.csv"), 11);
  if (ma.size() < 11) return {false, "fewer than 10 logged steps"};
  if (ma != mb) return {false, "metrics differ within the first 10 steps"};
  for (const char* f : {"best.cotc", "last.cotc"})
    if (slurp(dir / "a" / f) != slurp(dir / "b" / f)) return {false, std::string(f) + " differs"};
  fs::remove_all(dir);
  return {true, "first 10 metric rows and final checkpoints identical"};
}

// ---- 10: target labels cannot influence adaptation --------------------------

Outcome target_labels_unused() {
  RunConfig rc;
  apply_config_text(rc,
                    "batch_size = 6\nepochs = 2\nviews = 2\nimage_size = 16\npoint_radius = 0.03\n"
                    "emb_dim = 8\nproj_dim = 4\npoint_widths = 8\nconv_channels = 2\nclassifier_widths = 8\n"
                    "spst_rounds = 2\nspst_epochs = 1\nspst_threshold = 0.2\nsource_density = 48\n"
                    "target_density = 48\nseed = 12\n");
  const auto b = generate_benchmark(rc.data.source, rc.data.target, 4, 1, 12, 5);
  auto truth = evaluation_labels(b.target_train);
  std::mt19937_64 rng(100);
  std::shuffle(truth.begin(), truth.end(), rng);
  auto clouds = b.target_train.clouds;
  for (std::size_t i = 0; i < clouds.size(); ++i) clouds[i].label = truth[i];
  const auto shuffled = make_dataset(Domain::kTarget, "train", b.target_train.ids, clouds);
  if (evaluation_labels(shuffled) == evaluation_labels(b.target_train)) return {false, "shuffle was a no-op"};

  auto run = [&](const Dataset& target) {
    auto st = fit(b.source_train, target, rc.train);
    spst_finetune(st, b.source_train, target, rc.train);
    return snapshot(st.model);
  };
  const auto pa = run(b.target_train), pb = run(shuffled);
  if (pa.size() != pb.size()) return {false, "parameter lists differ"};
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto da = pa[i].second.data(), db = pb[i].second.data();
    if (!std::equal(da.begin(), da.end(), db.begin(), db.end())) return {false, pa[i].first + " differs"};
  }
  return {true, std::to_string(pa.size()) + " parameter tensors bit-identical after fit and SPST"};
}

}  // namespace

int main() {
  report(1, "gradient checks (k=4, d=8)", gradient_checks);
  report(2, "exact OT vs enumeration", exact_solver);
  report(3, "Sinkhorn", sinkhorn);
  report(4, "collapsed contrastive loss", collapsed_contrastive);
  report(5, "COT beats source-only baseline", cot_beats_baseline);
  report(6, "ablation without L_ot", ot_term_matters);
  report(7, "class-wise MMD reduced", mmd_reduced);
  report(8, "renderer determinism", renderer_determinism);
  report(9, "CLI reproducibility", cli_reproducible);
  report(10, "target labels unused", target_labels_unused);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
