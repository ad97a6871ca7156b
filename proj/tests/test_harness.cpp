#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

#include "fedmt/error.hpp"
#include "fedmt/harness.hpp"

using namespace fedmt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedmt_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json minimal(const fs::path& out) {
  return {{"schema_version", 1},
          {"run_id", "mini"},
          {"seed", 5},
          {"output_dir", out.string()},
          {"task",
           {{"kind", "gaussian"},
            {"d", 2},
            {"K", 4},
            {"J", 2},
            {"n", 5},
            {"clients", 2},
            {"per_client", 60},
            {"test_per_class", 50},
            {"xi", 0.1}}},
          {"model", {{"kind", "mlp"}, {"hidden", {16}}}},
          {"federation", {{"strategy", "fedmt_p"}, {"rounds", 5}, {"eta_sgd", 0.1}, {"batch_size", 8}, {"local_steps", 3}}}};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const nlohmann::json& doc) {
  try {
    parse_config(doc);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigInvalid);
    return e.what();
  }
  FAIL("config was accepted");
  return {};
}

}  // namespace

TEST_CASE("minimal config parses with defaults") {
  const auto cfg = parse_config(minimal("/tmp/x"));
  const auto& t = std::get<SyntheticTaskSpec>(cfg.task);
  CHECK(t.k == 4);
  CHECK(t.space.other_classes() == 2);
  CHECK(t.seed == derive_seed(5, "dataset"));
  CHECK(cfg.federation.strategy == Strategy::FedMT_P);
  CHECK(cfg.federation.weighting == Weighting::Equal);
  CHECK(cfg.model.kind == ModelConfig::Kind::Mlp);
  CHECK_FALSE(cfg.ntk_checks.has_value());

  auto doc = minimal("/tmp/x");
  doc["seed"] = std::uint64_t{1} << 63;
  CHECK(parse_config(nlohmann::json::parse(doc.dump())).seed == std::uint64_t{1} << 63);
  doc["seed"] = -1;
  CHECK_THROWS_AS(parse_config(doc), Error);
}

TEST_CASE("config errors name the offending field") {
  const auto base = minimal("/tmp/x");
  auto doc = base;
  doc["federation"]["rounds"] = 0;
  CHECK(config_error(doc).find("federation.rounds") != std::string::npos);
  doc = base;
  doc["schema_version"] = 2;
  CHECK(config_error(doc).find("schema_version") != std::string::npos);
  doc = base;
  doc.erase("schema_version");
  CHECK(config_error(doc).find("schema_version: is required") != std::string::npos);
  doc = base;
  doc["task"]["colour"] = 1;
  CHECK(config_error(doc).find("task.colour: unknown field") != std::string::npos);
  doc = base;
  doc["task"]["xi"] = 0.75;
  CHECK(config_error(doc).find("task.xi") != std::string::npos);
  doc = base;
  doc["task"]["partition"] = {3, 2};
  CHECK(config_error(doc).find("task.partition") != std::string::npos);
  doc = base;
  doc["task"].erase("J");
  doc["task"]["partition"] = {3, 2};
  CHECK(config_error(doc).find("task.partition") != std::string::npos);
  doc = base;
  doc["federation"]["strategy"] = "fedavg";
  CHECK(config_error(doc).find("federation.strategy") != std::string::npos);
  doc = base;
  doc["federation"]["weighting"] = "custom";
  doc["federation"]["weights"] = {0.5, 0.5, 0.5};
  CHECK(config_error(doc).find("federation.weights: must sum to 1") != std::string::npos);
  doc = base;
  doc["model"]["hidden"] = nlohmann::json::array();
  CHECK(config_error(doc).find("model.hidden") != std::string::npos);
  doc = base;
  doc["task"]["d"] = "two";
  CHECK(config_error(doc).find("task.d") != std::string::npos);
  doc = base;
  doc["ntk_checks"] = {{"partitions", {{3}}}};
  CHECK(config_error(doc).find("ntk_checks.partitions") != std::string::npos);
  doc = base;
  doc["ntk_checks"] = {{"input_scale", 0.0}};
  CHECK(config_error(doc).find("ntk_checks.input_scale") != std::string::npos);
}

TEST_CASE("runs are deterministic and persisted") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto start = std::chrono::steady_clock::now();
  const auto first = run_experiment(parse_config(minimal(a)));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(seconds < 10.0);
  run_experiment(parse_config(minimal(b)));
  for (const char* f : {"trace.csv", "trace.jsonl", "summary.json"}) {
    REQUIRE(fs::exists(a / "mini" / f));
    CHECK(read_file(a / "mini" / f) == read_file(b / "mini" / f));
  }
  CHECK(first.traces().size() == 6);
  CHECK(first.traces().front().round == 0);
}

TEST_CASE("summary is recomputable from the persisted trace") {
  const auto dir = scratch("summary");
  auto doc = minimal(dir);
  doc["federation"]["rounds"] = 20;
  run_experiment(parse_config(doc));
  std::ifstream lines(dir / "mini" / "trace.jsonl");
  double first_loss = 0.0, best = -1.0, last = -1.0;
  nlohmann::json hit = nullptr;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    const auto row = nlohmann::json::parse(line);
    const double loss = row.at("overall_loss").get<double>();
    if (rows++ == 0) first_loss = loss;
    if (hit.is_null() && loss <= 0.1 * first_loss) hit = row.at("round");
    const double acc = row.at("test_acc").get<double>();
    best = std::max(best, acc);
    last = acc;
  }
  CHECK(rows == 21);
  const auto summary = nlohmann::json::parse(read_file(dir / "mini" / "summary.json"));
  CHECK(summary.at("final_test_acc").get<double>() == last);
  CHECK(summary.at("best_test_acc").get<double>() == best);
  CHECK(summary.at("rounds_to_loss_fraction") == hit);
  CHECK(summary.at("run_id") == "mini");
  CHECK(summary.at("rounds") == 20);
}

TEST_CASE("summarize skips undefined accuracies") {
  std::vector<RoundTrace> t(3);
  t[0].overall_loss = 10.0, t[0].test_accuracy = std::nan("");
  t[1].round = 1, t[1].overall_loss = 2.0, t[1].test_accuracy = 0.7;
  t[2].round = 2, t[2].overall_loss = 0.5, t[2].test_accuracy = 0.6;
  const auto s = summarize(t);
  CHECK(s.final_test_acc == 0.6);
  CHECK(s.best_test_acc == 0.7);
  REQUIRE(s.rounds_to_loss_fraction.has_value());
  CHECK(*s.rounds_to_loss_fraction == 2);
  const auto none = summarize({t[0]});
  CHECK(std::isnan(none.final_test_acc));
  CHECK(to_json(none).at("final_test_acc").is_null());
}

TEST_CASE("sweep records failures and continues") {
  const auto dir = scratch("sweep");
  auto doc = minimal(dir);
  doc["federation"]["rounds"] = 2;
  const auto entries = run_sweep(doc, "xi", {"0.0", "0.9", "0.2", "abc"});
  REQUIRE(entries.size() == 4);
  CHECK(entries[0].store.has_value());
  CHECK_FALSE(entries[1].store.has_value());
  CHECK(entries[1].error.find("task.xi") != std::string::npos);
  CHECK(entries[2].store.has_value());
  CHECK_FALSE(entries[3].store.has_value());
  CHECK(fs::exists(dir / "mini_xi_0" / "trace.csv"));
  CHECK(fs::exists(dir / "mini_xi_2" / "trace.csv"));
  CHECK_FALSE(fs::exists(dir / "mini_xi_1"));
  const auto csv = read_file(dir / "sweep_summary.csv");
  std::size_t lines = 0, failed = 0;
  std::istringstream in(csv);
  for (std::string l; std::getline(in, l); ++lines) failed += l.find(",failed,") != std::string::npos;
  CHECK(lines == 5);
  CHECK(failed == 2);
}

TEST_CASE("empty sweep has no side effects") {
  const auto dir = fs::temp_directory_path() / "fedmt_harness_empty";
  fs::remove_all(dir);
  CHECK(run_sweep(minimal(dir), "n", {}).empty());
  CHECK_FALSE(fs::exists(dir));
}

TEST_CASE("sweep rejects unknown axes and bad base configs") {
  try {
    run_sweep(minimal("/tmp/x"), "width", {"1"});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigInvalid);
  }
  auto doc = minimal("/tmp/x");
  doc["federation"]["rounds"] = 0;
  CHECK_THROWS_AS(run_sweep(doc, "n", {"1"}), Error);
}

TEST_CASE("sweep seeds differ per run") {
  const auto dir = scratch("sweep_seed");
  auto doc = minimal(dir);
  doc["federation"]["rounds"] = 1;
  const auto entries = run_sweep(doc, "local_steps", {"2", "2"});
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].store->traces().front().overall_loss != entries[1].store->traces().front().overall_loss);
}

TEST_CASE("output directory precedence") {
  unsetenv("FEDMT_OUTPUT_DIR");
  CHECK(resolve_output_dir(std::nullopt, "cfg") == "cfg");
  setenv("FEDMT_OUTPUT_DIR", "env", 1);
  CHECK(resolve_output_dir(std::nullopt, "cfg") == "env");
  CHECK(resolve_output_dir(std::string("cli"), "cfg") == "cli");
  setenv("FEDMT_OUTPUT_DIR", "", 1);
  CHECK(resolve_output_dir(std::nullopt, "cfg") == "cfg");
  unsetenv("FEDMT_OUTPUT_DIR");
}

TEST_CASE("ntk check on a small task") {
  auto doc = minimal("/tmp/x");
  doc["task"] = {{"d", 10}, {"K", 8}, {"J", 2}, {"n", 1}, {"clients", 2}, {"per_client", 2}, {"test_per_class", 1}};
  doc["model"] = {{"kind", "ntk"}, {"width", 256}};
  doc["ntk_checks"] = {{"partitions", {{8}, {4, 4}, {2, 2, 2, 2}, {1, 1, 1, 1, 1, 1, 1, 1}}},
                       {"xi", {0.0, 0.2, 0.4}},
                       {"input_scale", 0.1}};
  const auto rep = run_ntk_check(parse_config(doc));
  CHECK(rep.lambda_by_j.size() == 4);
  CHECK(rep.lambda_by_xi.size() == 3);
  CHECK(rep.lambda0 > 0.0);
  CHECK(rep.all_pass());

  doc.erase("ntk_checks");
  CHECK_THROWS_AS(run_ntk_check(parse_config(doc)), Error);
}

TEST_CASE("semg task runs end to end") {
  const auto dir = scratch("semg");
  auto doc = minimal(dir);
  doc["task"] = {{"kind", "semg"}, {"K", 5}, {"n", 4}, {"clients", 2}, {"per_client", 30}, {"test_per_class", 10},
                 {"signal_length", 256}};
  doc["federation"]["rounds"] = 2;
  const auto store = run_experiment(parse_config(doc));
  CHECK(store.traces().size() == 3);
  CHECK(std::isfinite(store.traces().back().overall_loss));
}
