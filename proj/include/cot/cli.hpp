#pragma once

// Command-line front end. Needs CLI11.hpp and json.hpp on the include path.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cot/config.hpp"
#include "cot/datagen.hpp"
#include "cot/eval.hpp"
#include "cot/gradcheck.hpp"
#include "cot/trainer.hpp"

namespace cot {

inline constexpr const char* kCodeVersion = "0.1.0";

namespace cli {

namespace fs = std::filesystem;

struct Invocation {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::string data;
  std::string checkpoint;
  std::string input;
  std::string split = "target_test";
  std::map<std::string, std::string> overrides;  // config key -> flag value
};

inline std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& ch : s)
    if (ch == '_') ch = '-';
  return "--" + s;
}

inline RunConfig resolve_config(const Invocation& inv) {
  RunConfig cfg;
  if (!inv.config_path.empty()) apply_config_file(cfg, inv.config_path);
  for (const auto& [key, value] : inv.overrides) set_config_value(cfg, key, value);
  validate(cfg);
  return cfg;
}

inline void ensure_dir(const std::string& dir) {
  require(!dir.empty(), "--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

/// run.json: command, config hash, seed, code version and the resolved keys.
inline void write_run_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.train.seed;
  j["code_version"] = kCodeVersion;
  nlohmann::ordered_json keys;
  for (const auto& k : config_keys()) keys[k.name] = k.get(cfg);
  j["config"] = keys;
  write_text(fs::path(dir) / "run.json", j.dump(2) + "\n");
  write_text(fs::path(dir) / "config.cfg", config_text(cfg));
}

// --data may name a manifest or a directory holding manifest.csv. Without it
// the output directory is tried, then the benchmark is generated in memory.
inline Benchmark load_data(const Invocation& inv, const RunConfig& cfg, std::ostream& log) {
  std::string manifest;
  if (!inv.data.empty()) {
    manifest = fs::is_directory(inv.data) ? (fs::path(inv.data) / "manifest.csv").string() : inv.data;
  } else if (!inv.out_dir.empty() && fs::exists(fs::path(inv.out_dir) / "manifest.csv")) {
    manifest = (fs::path(inv.out_dir) / "manifest.csv").string();
  }
  if (!manifest.empty()) return load_benchmark(manifest);
  log << "no --data given; generating the synthetic benchmark in memory\n";
  return generate_benchmark(cfg.data.source, cfg.data.target, cfg.data.per_class, cfg.data.test_per_class,
                            cfg.train.seed, static_cast<int>(cfg.train.model.num_classes));
}

inline Model<float> load_model(const Invocation& inv, const RunConfig& cfg, const std::vector<std::string>& defaults) {
  std::string path = inv.checkpoint;
  if (path.empty()) {
    for (const auto& name : defaults) {
      const auto p = fs::path(inv.out_dir) / name;
      if (fs::exists(p)) {
        path = p.string();
        break;
      }
    }
  }
  if (path.empty()) throw IoError("no checkpoint found; pass --checkpoint or run train first");
  Model<float> model(cfg.train.model, 0);
  load_parameters(model, read_checkpoint(path));
  return model;
}

inline const Dataset& pick_split(const Benchmark& b, const std::string& split) {
  if (split == "source_train") return b.source_train;
  if (split == "source_test") return b.source_test;
  if (split == "target_train") return b.target_train;
  if (split == "target_test") return b.target_test;
  throw ContractError("unknown split '" + split + "' (expected source_train|source_test|target_train|target_test)");
}

inline int cmd_gen_data(const Invocation& inv, const RunConfig& cfg, std::ostream& out) {
  ensure_dir(inv.out_dir);
  const auto b = generate_benchmark(cfg.data.source, cfg.data.target, cfg.data.per_class, cfg.data.test_per_class,
                                    cfg.train.seed, static_cast<int>(cfg.train.model.num_classes));
  save_benchmark(inv.out_dir, b);
  write_run_manifest(inv.out_dir, inv.command, cfg);
  out << "wrote " << b.source_train.size() + b.source_test.size() + b.target_train.size() + b.target_test.size()
      << " clouds to " << inv.out_dir << "\n";
  return 0;
}

inline int cmd_train(const Invocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  ensure_dir(inv.out_dir);
  write_run_manifest(inv.out_dir, inv.command, cfg);
  const auto b = load_data(inv, cfg, log);
  FitOptions opt;
  opt.validation = b.source_test.empty() ? nullptr : &b.source_test;
  opt.out_dir = inv.out_dir;
  opt.metrics_path = (fs::path(inv.out_dir) / "metrics.csv").string();
  opt.log = [&log](const std::string& m) { log << m << "\n"; };
  const auto st = fit(b.source_train, b.target_train, cfg.train, opt);
  out << "trained " << st.step << " steps; best epoch " << st.best_epoch << " source-val accuracy "
      << detail::fmt_double(st.best_val_accuracy) << "\n";
  return 0;
}

inline int cmd_spst(const Invocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  ensure_dir(inv.out_dir);
  write_run_manifest(inv.out_dir, inv.command, cfg);
  const auto b = load_data(inv, cfg, log);
  TrainState st(cfg.train);
  st.model = load_model(inv, cfg, {"best.cotc"});
  SpstOptions opt;
  opt.out_dir = inv.out_dir;
  opt.log = [&log](const std::string& m) { log << m << "\n"; };
  const auto rep = spst_finetune(st, b.source_train, b.target_train, cfg.train, opt);
  std::string csv = "round,selected,threshold\n";
  for (std::size_t r = 0; r < rep.selected_per_round.size(); ++r)
    csv += std::to_string(r + 1) + "," + std::to_string(rep.selected_per_round[r]) + "," +
           detail::fmt_double(cfg.train.spst_threshold) + "\n";
  write_text(fs::path(inv.out_dir) / "spst.csv", csv);
  out << "spst finished " << rep.selected_per_round.size() << " rounds\n";
  return 0;
}

inline int cmd_eval(const Invocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  ensure_dir(inv.out_dir);
  write_run_manifest(inv.out_dir, inv.command, cfg);
  const auto b = load_data(inv, cfg, log);
  const auto model = load_model(inv, cfg, {"spst.cotc", "best.cotc"});
  const auto report = evaluate(model, b.target_test);
  write_accuracy_csv((fs::path(inv.out_dir) / "accuracy.csv").string(), report);
  write_confusion_csv((fs::path(inv.out_dir) / "confusion.csv").string(), report);
  const auto mmd_report = feature_mmd(model, b.source_test, b.target_test);
  write_mmd_csv((fs::path(inv.out_dir) / "mmd.csv").string(), mmd_report);
  out << "target accuracy " << detail::fmt_double(report.overall_accuracy) << "; mean diagonal MMD "
      << detail::fmt_double(mmd_report.mean_diagonal()) << "\n";
  return 0;
}

inline int cmd_render(const Invocation& inv, const RunConfig& cfg, std::ostream& out) {
  require(!inv.input.empty(), "render needs --input <cloud.xyz>");
  ensure_dir(inv.out_dir);
  const auto cloud = read_xyz(inv.input);
  const auto stack = render_multiview(cloud, cfg.train.rig, cfg.train.render);
  for (std::size_t k = 0; k < stack.views.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "view_%02zu.pgm", k);
    write_pgm((fs::path(inv.out_dir) / name).string(), stack.views[k]);
  }
  write_run_manifest(inv.out_dir, inv.command, cfg);
  out << "rendered " << stack.views.size() << " views\n";
  return 0;
}

inline int cmd_export(const Invocation& inv, const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  ensure_dir(inv.out_dir);
  write_run_manifest(inv.out_dir, inv.command, cfg);
  const auto b = load_data(inv, cfg, log);
  const auto& data = pick_split(b, inv.split);
  const auto model = load_model(inv, cfg, {"spst.cotc", "best.cotc"});
  export_embeddings(model, data, (fs::path(inv.out_dir) / "embeddings.csv").string());
  out << "exported " << data.size() << " embeddings\n";
  return 0;
}

inline int cmd_grad_check(std::ostream& out) {
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (const auto& r : loss_gradient_checks(seed)) {
      out << (r.passed() ? "PASS " : "FAIL ") << r.name << " seed " << seed << " max_rel_error "
          << detail::fmt_double(r.error) << " tol " << detail::fmt_double(r.tolerance) << "\n";
      ok = ok && r.passed();
    }
  return ok ? 0 : 1;
}

}  // namespace cli

/// Runs one command. Exit codes: 0 success, 1 contract or usage error,
/// 2 I/O error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  cli::Invocation inv;
  CLI::App app{"cot: contrastive optimal-transport domain adaptation for point clouds", "cot"};
  app.require_subcommand(1);
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate the synthetic two-domain benchmark"},
      {"train", "train from scratch on source + unlabeled target"},
      {"spst", "self-training fine-tune of a trained checkpoint"},
      {"eval", "score the target test split and write accuracy/confusion/MMD CSVs"},
      {"render", "render multi-view PGM images of one cloud"},
      {"export-emb", "export global features and predictions as CSV"},
      {"grad-check", "finite-difference check of every loss gradient"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&inv, name = name] { inv.command = name; });
    sub->add_option("--config", inv.config_path, "key = value config file");
    sub->add_option("--out", inv.out_dir, "output directory");
    sub->add_option("--data", inv.data, "benchmark directory or manifest.csv");
    sub->add_option("--checkpoint", inv.checkpoint, "model checkpoint (.cotc)");
    sub->add_option("--input", inv.input, "input XYZ cloud (render)");
    sub->add_option("--split", inv.split, "split to export (export-emb)");
    for (const auto& key : config_keys()) {
      auto* opt = sub->add_option_function<std::string>(
          cli::flag_name(key.name), [&inv, k = key.name](const std::string& v) { inv.overrides[k] = v; }, key.help);
      opt->type_name("VALUE");
    }
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (inv.command == "grad-check") return cli::cmd_grad_check(out);
    const auto cfg = cli::resolve_config(inv);
    if (inv.command == "gen-data") return cli::cmd_gen_data(inv, cfg, out);
    if (inv.command == "train") return cli::cmd_train(inv, cfg, out, err);
    if (inv.command == "spst") return cli::cmd_spst(inv, cfg, out, err);
    if (inv.command == "eval") return cli::cmd_eval(inv, cfg, out, err);
    if (inv.command == "render") return cli::cmd_render(inv, cfg, out);
    if (inv.command == "export-emb") return cli::cmd_export(inv, cfg, out, err);
    err << "error: unknown command\n";
    return 1;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what();
    if (!e.last_checkpoint().empty()) err << " (last good checkpoint: " << e.last_checkpoint() << ")";
    err << "\n";
    return 1;
  }
}

}  // namespace cot
