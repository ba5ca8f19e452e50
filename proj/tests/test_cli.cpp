#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hawkes/causality.hpp"
#include "hawkes/checkpoint.hpp"
#include "hawkes/cli.hpp"

using namespace hawkes;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / "hawkes_cli_tests" / name;
    fs::remove_all(root);
    fs::create_directories(root);
  }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    auto p = root / name;
    std::ofstream out(p);
    out << j.dump(2);
    return p;
  }
};

json tiny_config() {
  return json{
      {"seed", 5},
      {"paths", {{"run_dir", "run"}, {"dataset", "data.jsonl"}}},
      {"sim",
       {{"kind", "pgem"}, {"S", 30}, {"t_end", 8.0}}},
      {"model",
       {{"type", "isahp"},
        {"isahp",
         {{"embed_dim", 4}, {"value_dim", 4}, {"heads", 2}, {"hidden", 4},
          {"omega1", 0.025}, {"omega2", 0.25}}}}},
      {"split", {{"fractions", {0.8, 0.1, 0.1}}}},
      {"train",
       {{"learning_rate", 0.005}, {"batch_size", 8}, {"max_epochs", 3},
        {"patience", 3}, {"verbose", false}}},
      {"eval", {{"include_diagonal", true}}}};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& command, const fs::path& config) {
  return cli::dispatch(command, config.string(), std::nullopt, std::nullopt);
}

}  // namespace

TEST_CASE("simulate writes dataset, sidecar, and snapshot", "[cli]") {
  Workspace ws("simulate");
  auto cfg = ws.write_config(tiny_config());
  REQUIRE(run("simulate", cfg) == 0);

  CHECK(fs::exists(ws.root / "data.jsonl"));
  CHECK(fs::exists(ws.root / "data.jsonl.gt.json"));
  CHECK(fs::exists(ws.root / "run" / "config_snapshot.json"));

  Dataset ds = load_jsonl((ws.root / "data.jsonl").string());
  CHECK(ds.size() == 30);
  CHECK(ds.K() == 5);
  REQUIRE(ds.ground_truth().has_value());
  CHECK((*ds.ground_truth())(3, 0) == 1.0);
  CHECK((*ds.ground_truth())(3, 1) == 1.0);
}

TEST_CASE("every stage is byte-identical under a fixed seed", "[cli]") {
  Workspace ws("idempotent");
  auto cfg = ws.write_config(tiny_config());

  REQUIRE(run("simulate", cfg) == 0);
  const std::string data1 = file_bytes(ws.root / "data.jsonl");
  const std::string gt1 = file_bytes(ws.root / "data.jsonl.gt.json");
  REQUIRE(run("simulate", cfg) == 0);
  CHECK(file_bytes(ws.root / "data.jsonl") == data1);
  CHECK(file_bytes(ws.root / "data.jsonl.gt.json") == gt1);

  REQUIRE(run("train", cfg) == 0);
  const std::string ckpt1 = file_bytes(ws.root / "run" / "checkpoint.json");
  const std::string report1 = file_bytes(ws.root / "run" / "train_report.json");
  REQUIRE(run("train", cfg) == 0);
  CHECK(file_bytes(ws.root / "run" / "checkpoint.json") == ckpt1);
  CHECK(file_bytes(ws.root / "run" / "train_report.json") == report1);

  REQUIRE(run("eval", cfg) == 0);
  const std::string eval1 = file_bytes(ws.root / "run" / "eval_report.json");
  REQUIRE(run("eval", cfg) == 0);
  CHECK(file_bytes(ws.root / "run" / "eval_report.json") == eval1);

  REQUIRE(run("attribute", cfg) == 0);
  const std::string attr1 = file_bytes(ws.root / "run" / "attribution.json");
  REQUIRE(run("attribute", cfg) == 0);
  CHECK(file_bytes(ws.root / "run" / "attribution.json") == attr1);
}

TEST_CASE("attribution output re-aggregates to the same matrix", "[cli]") {
  Workspace ws("reaggregate");
  auto cfg = ws.write_config(tiny_config());
  REQUIRE(run("simulate", cfg) == 0);
  REQUIRE(run("train", cfg) == 0);
  REQUIRE(run("attribute", cfg) == 0);

  std::ifstream in(ws.root / "run" / "attribution.json");
  json j;
  in >> j;
  AttributionResult ar = attribution_from_json(j);
  AggregateResult agg = aggregate(ar, j.at("K").get<int>());
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      const auto& cell = j.at("aggregate").at("mean")[a][b];
      if (cell.is_null())
        CHECK_FALSE(agg.present(a, b));
      else
        CHECK(agg.mean(a, b) == cell.get<double>());
    }
}

TEST_CASE("eval writes metrics and the causality matrix schema", "[cli]") {
  Workspace ws("eval");
  json cfg_json = tiny_config();
  cfg_json["eval"]["patterns"] = json::array(
      {{{"pattern", "0#32"}, {"synergy_type", 1}}});
  auto cfg = ws.write_config(cfg_json);
  REQUIRE(run("simulate", cfg) == 0);
  REQUIRE(run("train", cfg) == 0);
  REQUIRE(run("eval", cfg) == 0);

  std::ifstream in(ws.root / "run" / "eval_report.json");
  json j;
  in >> j;
  CHECK(j.contains("auc"));
  CHECK(j.contains("kendall_tau"));
  CHECK(j.contains("accuracy"));
  CHECK(j.at("model") == "isahp");
  CHECK(j.contains("synergy_ratios"));
  CHECK(j.at("config_fingerprint").get<std::string>().size() == 16);

  std::ifstream min(ws.root / "run" / "causality_matrix.json");
  json mj;
  min >> mj;
  CHECK(mj.at("K") == 5);
  CHECK(mj.at("matrix").size() == 5);
}

TEST_CASE("hexp pipeline and report assembly with an ablation pair", "[cli]") {
  Workspace ws("report");
  json base = tiny_config();
  base["model"]["type"] = "hexp";
  base["model"]["hexp"] = {{"freeze_gamma", false}, {"gamma_init", 1.0}};
  base["train"]["max_epochs"] = 3;
  auto cfg = ws.write_config(base);
  REQUIRE(run("simulate", cfg) == 0);
  REQUIRE(run("train", cfg) == 0);
  REQUIRE(run("eval", cfg) == 0);

  json rep = json{{"seed", 5},
                  {"paths", {{"run_dir", "report_run"}}},
                  {"report",
                   {{"rows", json::array({{{"name", "hexp"}, {"eval", "run/eval_report.json"}}})},
                    {"ablation",
                     {{"label", "tlr"},
                      {"with", "run/eval_report.json"},
                      {"without", "run/eval_report.json"}}}}}};
  auto rep_cfg = ws.write_config(rep, "report_config.json");
  REQUIRE(run("report", rep_cfg) == 0);

  const std::string txt = file_bytes(ws.root / "report_run" / "report.txt");
  CHECK(txt.find("hexp") != std::string::npos);
  CHECK(txt.find("tlr-on") != std::string::npos);
  CHECK(txt.find("tlr-off") != std::string::npos);

  std::ifstream in(ws.root / "report_run" / "report.json");
  json j;
  in >> j;
  CHECK(j.at("rows").size() == 3);
}

TEST_CASE("config errors exit with code 1", "[cli]") {
  Workspace ws("errors");

  SECTION("unknown top-level key") {
    json bad = tiny_config();
    bad["surprise"] = 1;
    CHECK(run("simulate", ws.write_config(bad)) == 1);
  }

  SECTION("unknown nested key") {
    json bad = tiny_config();
    bad["train"]["learning_rte"] = 0.1;
    CHECK(run("train", ws.write_config(bad)) == 1);
  }

  SECTION("missing sim section") {
    json bad = tiny_config();
    bad.erase("sim");
    CHECK(run("simulate", ws.write_config(bad)) == 1);
  }

  SECTION("missing dataset file") {
    CHECK(run("train", ws.write_config(tiny_config())) == 1);
  }

  SECTION("missing checkpoint named explicitly") {
    auto cfg = ws.write_config(tiny_config());
    REQUIRE(run("simulate", cfg) == 0);
    CHECK(run("eval", cfg) == 1);
  }

  SECTION("unparseable config") {
    auto p = ws.root / "broken.json";
    std::ofstream(p) << "{not json";
    CHECK(run("simulate", p) == 1);
  }

  SECTION("unknown command") {
    CHECK(run("frobnicate", ws.write_config(tiny_config())) == 1);
  }
}

TEST_CASE("runtime failures exit with code 2", "[cli]") {
  Workspace ws("runtime");
  auto cfg = ws.write_config(tiny_config());
  // An unwritable run directory fails after config validation.
  CHECK(cli::dispatch("simulate", cfg.string(), std::string("/proc/hawkes/run"),
                      std::nullopt) == 2);
}

TEST_CASE("seed override changes outputs, fixed override reproduces them", "[cli]") {
  Workspace ws("seeds");
  auto cfg = ws.write_config(tiny_config());
  REQUIRE(cli::dispatch("simulate", cfg.string(), std::nullopt, 123ull) == 0);
  const std::string a = file_bytes(ws.root / "data.jsonl");
  REQUIRE(cli::dispatch("simulate", cfg.string(), std::nullopt, 123ull) == 0);
  CHECK(file_bytes(ws.root / "data.jsonl") == a);
  REQUIRE(cli::dispatch("simulate", cfg.string(), std::nullopt, 124ull) == 0);
  CHECK(file_bytes(ws.root / "data.jsonl") != a);
}
