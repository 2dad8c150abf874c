#include "doctest.h"

#include "lowsup/pipeline.hpp"
#include "lowsup/toy_corpus.hpp"

#include <filesystem>

using namespace lowsup;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

json tiny_toy() {
  return {{"read_utterances", 16},    {"transcribed_cs_utterances", 8}, {"untranscribed_cs_utterances", 8},
          {"test_cs_utterances", 4},  {"read_speakers", 4},             {"transcribed_cs_speakers", 4},
          {"untranscribed_cs_speakers", 2}, {"test_cs_speakers", 2},    {"max_words", 2},
          {"seed", 3}};
}

json tiny_config(const std::string& corpus_dir, const std::vector<std::string>& stages) {
  json user = {
      {"stages", stages},
      {"seed", 5},
      {"corpus", {{"dir", corpus_dir}, {"toy", tiny_toy()}}},
      {"data", {{"holdout_fraction", 0.2}}},
      {"features", {{"num_mel_bins", 8}}},
      {"model",
       {{"enc_layers", 1}, {"enc_heads", 2}, {"enc_dim", 8}, {"enc_ffn", 12}, {"conv_kernel", 3}, {"dec_layers", 1}}},
      {"schedule", {{"epochs", 1}, {"batch_utterances", 4}, {"warmup_steps", 2}, {"freq_width", 2}}},
      {"kmeans", {{"k", 4}, {"max_iters", 5}}},
      {"ssl_pretrain", {{"schedule", {{"epochs", 1}}}}},
      {"evaluate", {{"decode", {{"mode", "ctc_beam_lm"}, {"beam_size", 4}}}}},
      {"pseudotranscribe", {{"decode", {{"beam_size", 4}}}}},
  };
  return merge_config(user);
}

const std::vector<std::string> kAll = stage_names();

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config merge rejects unknown keys and overrides need existing keys") {
  CHECK_THROWS_AS(merge_config(json{{"modle", json::object()}}), ValidationError);
  CHECK_THROWS_AS(merge_config(json{{"model", {{"enc_dimm", 4}}}}), ValidationError);
  CHECK_THROWS_AS(merge_config(json{{"stages", {"baseline_supervised", "train"}}}), ValidationError);
  CHECK_THROWS_AS(merge_config(json{{"data", {{"subset_strategy", "by_colour"}}}}), ValidationError);
  CHECK_THROWS_AS(merge_config(json{{"data", {{"cs_hours", -1.0}}}}), ValidationError);
  CHECK_THROWS_AS(merge_config(json{{"baseline_supervised", {{"schedule", {{"epoch", 3}}}}}}), ValidationError);

  json cfg = default_config();
  apply_override(cfg, "model.enc_dim=32");
  CHECK(cfg["model"]["enc_dim"] == 32);
  apply_override(cfg, "data.subset_strategy=by_speaker");
  CHECK(cfg["data"]["subset_strategy"] == "by_speaker");
  apply_override(cfg, "stages=[\"baseline_supervised\",\"evaluate\"]");
  CHECK(cfg["stages"].size() == 2);
  apply_override(cfg, "finetune.schedule.epochs=4");
  CHECK(cfg["finetune"]["schedule"]["epochs"] == 4);
  CHECK_THROWS_AS(apply_override(cfg, "model.enc_width=32"), ValidationError);
  CHECK_THROWS_AS(apply_override(cfg, "model.enc_dim"), ValidationError);
  CHECK_THROWS_AS(apply_override(cfg, "model..enc_dim=3"), ValidationError);
  CHECK_THROWS_AS(apply_override(cfg, "model.enc_dim=\"wide\""), ValidationError);
}

TEST_CASE("stage order must respect the dependency graph") {
  json cfg = default_config();
  cfg["stages"] = {"baseline_supervised", "sst_train", "pseudotranscribe", "evaluate"};
  std::string err = error_of([&] { StagePlan::from_config(cfg, "/tmp/unused"); });
  CHECK(err.find("sst_train") != std::string::npos);
  CHECK(err.find("pseudo") != std::string::npos);

  cfg["stages"] = {"evaluate"};
  err = error_of([&] { StagePlan::from_config(cfg, "/tmp/unused"); });
  CHECK(err.find("evaluate") != std::string::npos);
  CHECK(err.find("model") != std::string::npos);

  // Supplying the model externally satisfies the dependency.
  cfg["inputs"]["model"] = "/some/checkpoint";
  CHECK_NOTHROW(StagePlan::from_config(cfg, "/tmp/unused"));

  cfg["stages"] = {"baseline_supervised", "kmeans"};
  err = error_of([&] { StagePlan::from_config(cfg, "/tmp/unused"); });
  CHECK(err.find("dump_features") != std::string::npos);

  cfg["stages"] = {"baseline_supervised", "baseline_supervised"};
  CHECK_THROWS_AS(StagePlan::from_config(cfg, "/tmp/unused"), ValidationError);

  cfg = default_config();
  auto plan = StagePlan::from_config(cfg, "/tmp/unused");
  CHECK(plan.provider("finetune", "ssl_model") == "ssl_pretrain");
  CHECK(plan.provider("evaluate", "model") == "final_finetune");
  CHECK(plan.provider("sst_train", "model") == "finetune");
  CHECK(plan.provider("baseline_supervised", "model").empty());
}

TEST_CASE("stage hashes chain through upstream stages only") {
  json cfg = default_config();
  auto a = StagePlan::from_config(cfg, "/tmp/unused");
  cfg["evaluate"]["decode"]["beam_size"] = 3;
  auto b = StagePlan::from_config(cfg, "/tmp/unused");
  CHECK(a.config_hash("baseline_supervised") == b.config_hash("baseline_supervised"));
  CHECK(a.config_hash("final_finetune") == b.config_hash("final_finetune"));
  CHECK(a.config_hash("evaluate") != b.config_hash("evaluate"));
  cfg["kmeans"]["k"] = 7;
  auto c = StagePlan::from_config(cfg, "/tmp/unused");
  CHECK(b.config_hash("dump_features") == c.config_hash("dump_features"));
  CHECK(b.config_hash("kmeans") != c.config_hash("kmeans"));
  CHECK(b.config_hash("finetune") != c.config_hash("finetune"));
  CHECK(b.config_hash("evaluate") != c.config_hash("evaluate"));
  cfg["seeds"]["kmeans"] = 99;
  auto d = StagePlan::from_config(cfg, "/tmp/unused");
  CHECK(d.seed_for("kmeans") == 99);
  CHECK(d.config_hash("kmeans") != c.config_hash("kmeans"));
}

TEST_CASE("run writes markers, resumes, and refuses hash mismatches without force") {
  TempDir dir("lowsup_pipe_resume");
  json cfg = tiny_config(dir / "corpus", {"baseline_supervised", "final_finetune", "evaluate"});
  auto plan = StagePlan::from_config(cfg, dir / "exp");
  auto first = run_pipeline(plan);
  REQUIRE(first.stages.size() == 3);
  for (const auto& s : first.stages) CHECK(s.status == StageStatus::ran);
  REQUIRE(first.wer);
  for (const auto& st : plan.stages) {
    json m = read_marker(plan, st);
    REQUIRE_FALSE(m.is_null());
    CHECK(m["config_hash"] == plan.config_hash(st));
  }
  CHECK(fs::exists(dir.path / "exp" / "reports" / "report.json"));
  CHECK(fs::exists(dir.path / "exp" / "reports" / "hypotheses.tsv"));
  const std::string report = read_file(dir / "exp/reports/report.json");

  // The provenance chain follows from the markers alone.
  json ev = read_marker(plan, "evaluate");
  CHECK(ev["inputs"]["model"]["stage"] == "final_finetune");
  CHECK(read_marker(plan, "final_finetune")["inputs"]["model"]["stage"] == "baseline_supervised");
  CHECK(ev["inputs"]["model"]["config_hash"] == plan.config_hash("final_finetune"));

  auto second = run_pipeline(plan);
  for (const auto& s : second.stages) CHECK(s.status == StageStatus::skipped_complete);
  CHECK(second.wer == first.wer);
  CHECK(read_file(dir / "exp/reports/report.json") == report);

  json changed = cfg;
  changed["baseline_supervised"]["schedule"]["epochs"] = 2;
  auto plan2 = StagePlan::from_config(changed, dir / "exp");
  std::string err = error_of([&] { run_pipeline(plan2); });
  CHECK(err.find("baseline_supervised") != std::string::npos);
  CHECK(err.find("--force") != std::string::npos);
  // Refusal leaves the completed stage untouched.
  CHECK(read_marker(plan, "baseline_supervised")["config_hash"] == plan.config_hash("baseline_supervised"));

  RunOptions force;
  force.force = true;
  auto third = run_pipeline(plan2, force);
  for (const auto& s : third.stages) CHECK(s.status == StageStatus::ran);
  CHECK(read_marker(plan2, "baseline_supervised")["config_hash"] == plan2.config_hash("baseline_supervised"));
}

TEST_CASE("single-stage runs need completed inputs under the current config") {
  TempDir dir("lowsup_pipe_only");
  json cfg = tiny_config(dir / "corpus", {"baseline_supervised", "evaluate"});
  auto plan = StagePlan::from_config(cfg, dir / "exp");
  RunOptions only;
  only.only = {"evaluate"};
  std::string err = error_of([&] { run_pipeline(plan, only); });
  CHECK(err.find("evaluate") != std::string::npos);
  CHECK(err.find("baseline_supervised") != std::string::npos);

  only.only = {"baseline_supervised"};
  auto r = run_pipeline(plan, only);
  CHECK(r.stages[0].status == StageStatus::ran);
  CHECK(read_marker(plan, "evaluate").is_null());
  only.only = {"evaluate"};
  r = run_pipeline(plan, only);
  CHECK(r.stages[1].status == StageStatus::ran);
  CHECK(r.wer);
}

TEST_CASE("zero transcribed cs hours trains on read speech and skips the final finetune") {
  TempDir dir("lowsup_pipe_zero");
  json cfg = tiny_config(dir / "corpus", {"baseline_supervised", "final_finetune", "evaluate"});
  cfg["data"]["cs_hours"] = 0.0;
  auto plan = StagePlan::from_config(cfg, dir / "exp");
  run_pipeline(plan);
  CHECK(read_marker(plan, "baseline_supervised")["cs_utterances"] == 0);
  CHECK(read_marker(plan, "final_finetune")["skipped"] == true);
  json report = json::parse(read_file(dir / "exp/reports/report.json"));
  CHECK(report["metadata"]["cs_utterances"] == "0");

  // Without read speech there is nothing to train on.
  cfg["data"]["use_read"] = false;
  auto empty = StagePlan::from_config(cfg, dir / "exp2");
  CHECK_THROWS_AS(run_pipeline(empty), ValidationError);
}

TEST_CASE("full stage graph runs end to end with an external transcriber") {
  TempDir dir("lowsup_pipe_full");
  json cfg = tiny_config(dir / "corpus", kAll);
  cfg["pseudotranscribe"]["transcriber"] = "external_command";
  cfg["pseudotranscribe"]["command"] = "cp {corpus}/oracle_untranscribed_cs.tsv {out}";
  auto plan = StagePlan::from_config(cfg, dir / "exp");
  // The external transcriber does not need a model, but sst_train still does.
  CHECK(plan.provider("sst_train", "model") == "finetune");
  auto r = run_pipeline(plan);
  CHECK(r.stages.size() == kAll.size());
  json pm = read_marker(plan, "pseudotranscribe");
  CHECK(pm["kept"] == 8);
  CHECK(pm["pseudo_wer"] == 0.0);
  json report = json::parse(read_file(dir / "exp/reports/report.json"));
  CHECK(report["metadata"]["provenance"] == "baseline_supervised,ssl_pretrain,finetune,sst,final_finetune");

  cfg["pseudotranscribe"]["command"] = "exit 5";
  auto bad = StagePlan::from_config(cfg, dir / "exp_bad");
  CHECK_THROWS_AS(run_pipeline(bad), StageError);
}

TEST_CASE("sweep runs each condition, reuses identical stages and records failures") {
  TempDir dir("lowsup_pipe_sweep");
  json cfg = tiny_config(dir / "corpus", {"baseline_supervised", "evaluate"});

  // A single full condition equals a direct run.
  auto direct = run_pipeline(StagePlan::from_config(cfg, dir / "direct"));
  auto single = sweep_supervision(cfg, {std::nullopt}, {SubsetStrategy::random_utterance}, dir / "single");
  REQUIRE(single.rows.size() == 1);
  CHECK(single.rows[0].error.empty());
  CHECK(single.rows[0].wer == direct.wer);
  CHECK(read_file(dir / "direct/reports/report.json") ==
        read_file(single.rows[0].dir + "/reports/report.json"));

  // Selection strategies at equal hours, plus an infeasible amount.
  const double small = 0.0005;
  auto sw = sweep_supervision(cfg, {small, 10.0},
                              {SubsetStrategy::random_utterance, SubsetStrategy::by_speaker}, dir / "grid");
  REQUIRE(sw.rows.size() == 4);
  for (int i = 0; i < 2; ++i) {
    CHECK(sw.rows[i].error.empty());
    CHECK(sw.rows[i].wer);
    CHECK(sw.rows[i].speakers > 0);
    CHECK(sw.rows[i].selected_hours >= small);
  }
  for (int i = 2; i < 4; ++i) {
    CHECK_FALSE(sw.rows[i].error.empty());
    CHECK_FALSE(sw.rows[i].wer);
  }
  CHECK(sw.table_tsv.find("by_speaker") != std::string::npos);
  CHECK(fs::exists(dir.path / "grid" / "sweep.tsv"));
  CHECK(fs::exists(dir.path / "grid" / "grid.tsv"));

}
