#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "fws/pipeline.hpp"

using namespace fws;
namespace fs = std::filesystem;

namespace {

// a small but complete synthetic pipeline config
RunConfig smoke_config(const std::string& out) {
  nlohmann::json j = {
      {"seed", 7},
      {"output_dir", out},
      {"data",
       {{"kind", "synth"},
        {"synth", {{"count", 10}, {"image_size", 32}, {"seed", 3}}},
        {"synth_test_count", 6},
        {"support_fraction", 0.5},
        {"test_support_fraction", 0.5}}},
      {"net", {{"base_width", 4}, {"embed_dim", 4}, {"levels", 2}}},
      {"omni", {{"shot_options", {1, 2}}, {"query_batch", 2}, {"seed", 1}}},
      {"eval",
       {{"mode", "combine"},
        {"shot_options", {1, 2}},
        {"query_batch", 2},
        {"techniques", {"grid", "regions"}},
        {"densities",
         {{"grid", {{"options", {0.5}}}}, {"regions", {{"options", {0.5, 1.0}}}}}},
        {"seed", 2}}},
      {"train",
       {{"learner", "eo_protoseg"}, {"batch", 2}, {"epochs", 2}, {"seed", 5}}},
      {"profile",
       {{"shots", {2}}, {"batch_sizes", {2}}, {"reps", 3},
        {"learners", {"eo_protoseg", "o_protoseg"}}}},
      {"stages", {"synth", "transform", "train", "eval", "profile", "report"}}};
  return RunConfig::from_json(j);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(static_cast<bool>(f));
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("config: unknown keys are rejected with field-level messages") {
  nlohmann::json j = {{"seed", 1}, {"outpu_dir", "x"}};
  REQUIRE_THROWS_WITH(RunConfig::from_json(j),
                      Catch::Matchers::ContainsSubstring("outpu_dir"));
  nlohmann::json j2 = {{"train", {{"learner", "eo_protoseg"}, {"epochz", 3}}}};
  REQUIRE_THROWS_WITH(RunConfig::from_json(j2), Catch::Matchers::ContainsSubstring("epochz"));
  nlohmann::json j3 = {{"data", {{"kind", "nonsense"}}}};
  REQUIRE_THROWS(RunConfig::from_json(j3));
  nlohmann::json j4 = {{"stages", {"train", "deploy"}}};
  REQUIRE_THROWS_WITH(RunConfig::from_json(j4), Catch::Matchers::ContainsSubstring("deploy"));
}

TEST_CASE("config: fingerprint is stable and sensitive") {
  RunConfig a = smoke_config("x");
  RunConfig b = smoke_config("x");
  REQUIRE(a.fingerprint() == b.fingerprint());
  b.seed = 8;
  REQUIRE(a.fingerprint() != b.fingerprint());
}

TEST_CASE("missing dataset path fails cleanly before any output") {
  RunConfig cfg = smoke_config((fs::temp_directory_path() / "fws_missing_out").string());
  cfg.data.kind = "dir";
  cfg.data.root = "/nonexistent/fws/dataset";
  fs::remove_all(cfg.resolved_output_dir());
  REQUIRE_THROWS_AS(run_pipeline(cfg), ConfigError);
  REQUIRE_FALSE(fs::exists(cfg.resolved_output_dir()));
}

TEST_CASE("full synthetic pipeline produces every artifact") {
  const std::string out = (fs::temp_directory_path() / "fws_smoke").string();
  fs::remove_all(out);
  RunConfig cfg = smoke_config(out);
  run_pipeline(cfg);
  for (const char* name :
       {"schedule.json", "checkpoint.json", "checkpoint.bin", "train_log.jsonl",
        "metrics.jsonl", "timings.jsonl", "summary_overall.csv", "summary_best.csv",
        "overall_od.svg", "overall_oc.svg", "shots_iou.svg"})
    REQUIRE(fs::exists(fs::path(out) / name));

  // schedule manifest carries the fingerprint and audit fields
  nlohmann::json manifest = nlohmann::json::parse(slurp(fs::path(out) / "schedule.json"));
  REQUIRE(manifest.contains("fingerprint"));
  REQUIRE(manifest.at("episodes").size() >= 2);
  for (const auto& ep : manifest.at("episodes")) {
    REQUIRE(ep.contains("support"));
    REQUIRE(ep.contains("technique"));
    REQUIRE(ep.contains("density"));
    REQUIRE(ep.contains("seed"));
  }

  // metrics: grid is 1 episode per (shots, technique, density) x query_batch
  auto records = read_metrics_jsonl((fs::path(out) / "metrics.jsonl").string());
  REQUIRE(records.size() == 2 * 3 * 2);  // shots x (grid:1 + regions:2 densities) x batch 2
  fs::remove_all(out);
}

TEST_CASE("rerunning train+eval with the same config is bit-identical sans timing") {
  const std::string out1 = (fs::temp_directory_path() / "fws_rep1").string();
  const std::string out2 = (fs::temp_directory_path() / "fws_rep2").string();
  fs::remove_all(out1);
  fs::remove_all(out2);
  RunConfig cfg1 = smoke_config(out1);
  cfg1.stages = {"synth", "train", "eval"};
  RunConfig cfg2 = smoke_config(out1);  // same config -> same fingerprint
  cfg2.stages = {"synth", "train", "eval"};
  run_pipeline(cfg1);
  fs::rename(out1, out2);
  run_pipeline(cfg2);

  REQUIRE(slurp(fs::path(out1) / "train_log.jsonl") == slurp(fs::path(out2) / "train_log.jsonl"));
  auto strip_timing = [](const std::string& path) {
    std::vector<std::string> out;
    for (const auto& r : read_metrics_jsonl(path)) {
      nlohmann::json j = to_json(r);
      j.erase("overhead_time");
      j.erase("predict_time");
      out.push_back(j.dump());
    }
    return out;
  };
  REQUIRE(strip_timing((fs::path(out1) / "metrics.jsonl").string()) ==
          strip_timing((fs::path(out2) / "metrics.jsonl").string()));
  fs::remove_all(out1);
  fs::remove_all(out2);
}

TEST_CASE("profiling records carry the requested rep count") {
  const std::string out = (fs::temp_directory_path() / "fws_prof").string();
  fs::remove_all(out);
  RunConfig cfg = smoke_config(out);
  cfg.stages = {"synth", "train"};
  run_pipeline(cfg);
  auto recs = stage_profile(cfg);
  REQUIRE_FALSE(recs.empty());
  for (const auto& r : recs) {
    REQUIRE(r.seconds.size() == 3);
    for (double s : r.seconds) REQUIRE(s > 0);
  }
  // reps < 3 rejected
  cfg.profile.reps = 2;
  REQUIRE_THROWS(stage_profile(cfg));
  fs::remove_all(out);
}
