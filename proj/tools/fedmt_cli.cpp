// Command-line front end: run, sweep and ntk-check.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedmt/error.hpp"
#include "fedmt/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kConfigError = 2;

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fedmt::fail(fedmt::ErrorCode::ConfigInvalid, path + ": cannot open");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fedmt::fail(fedmt::ErrorCode::ConfigInvalid, path + ": " + e.what());
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-label federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Override the root seed");
  run->add_option("--out", out_dir, "Output directory (overrides FEDMT_OUTPUT_DIR and the config)");

  std::string axis;
  std::vector<std::string> values;
  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of an axis");
  sweep->add_option("--config", config_path, "Base config (JSON)")->required();
  sweep->add_option("--axis", axis, "n, xi, C, J, local_steps or batch")->required();
  sweep->add_option("--values", values, "Comma-separated values")->delimiter(',')->required();
  sweep->add_option("--out", out_dir, "Output directory");

  auto* ntk = app.add_subcommand("ntk-check", "Gram-matrix eigenvalue checks at initialization");
  ntk->add_option("--config", config_path, "Config with an ntk_checks section")->required();
  ntk->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    nlohmann::json doc = read_json(config_path);
    if (!doc.is_object()) fedmt::fail(fedmt::ErrorCode::ConfigInvalid, "config: must be an object");
    if (seed) doc["seed"] = *seed;
    doc["output_dir"] = fedmt::resolve_output_dir(out_dir, doc.value("output_dir", std::string("runs")));

    if (run->parsed()) {
      const auto cfg = fedmt::parse_config(doc);
      const auto store = fedmt::run_experiment(cfg);
      const auto s = store.summary();
      std::cout << "run " << store.run_id() << ": final_test_acc=" << fmt(s.final_test_acc)
                << " best_test_acc=" << fmt(s.best_test_acc) << " -> "
                << (std::filesystem::path(cfg.output_dir) / cfg.run_id).string() << '\n';
    } else if (sweep->parsed()) {
      const auto entries = fedmt::run_sweep(doc, axis, values);
      std::size_t failed = 0;
      for (const auto& e : entries) {
        if (e.store) {
          std::cout << axis << '=' << e.value << ": final_test_acc=" << fmt(e.store->summary().final_test_acc) << '\n';
        } else {
          ++failed;
          std::cout << axis << '=' << e.value << ": failed: " << e.error << '\n';
        }
      }
      if (failed > 0) return kRuntimeError;
    } else {
      const auto cfg = fedmt::parse_config(doc);
      const auto report = fedmt::run_ntk_check(cfg);
      const auto dir = std::filesystem::path(cfg.output_dir) / cfg.run_id;
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "ntk_report.json") << fedmt::to_json(report).dump(2) << '\n';
      for (const auto& c : report.bound_checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << fmt(c.lhs) << " vs " << fmt(c.rhs) << '\n';
      if (!report.all_pass()) return kRuntimeError;
    }
  } catch (const fedmt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == fedmt::ErrorCode::ConfigInvalid ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
