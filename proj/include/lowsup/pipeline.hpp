#pragma once

#include "lowsup/corpus.hpp"
#include "lowsup/decode.hpp"
#include "lowsup/eval.hpp"
#include "lowsup/sst.hpp"
#include "lowsup/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lowsup {

/// Stage names in canonical order.
const std::vector<std::string>& stage_names();
bool is_stage_name(const std::string& s);

/// Full configuration with every key present. Sections: stages, seed, seeds, corpus, data,
/// features, model, schedule (shared training defaults), lm, inputs and one per stage.
nlohmann::json default_config();

/// Deep-merges `user` over the defaults. Unknown keys are validation errors.
nlohmann::json merge_config(const nlohmann::json& user);
nlohmann::json load_config(const std::string& path);

/// Applies "a.b.c=value". The value is parsed as JSON when possible, else taken as a string.
/// The key must already exist. With `validate`, the result must be a valid pipeline config.
void apply_override(nlohmann::json& cfg, const std::string& assignment, bool validate = true);

void validate_config(const nlohmann::json& cfg);

Schedule schedule_from_json(const nlohmann::json& j, std::uint64_t seed);
DecodeConfig decode_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& model, int input_dim);
FbankConfig fbank_from_features_json(const nlohmann::json& features);

struct StagePlan {
  std::vector<std::string> stages;
  nlohmann::json config;
  std::string experiment_dir;

  static StagePlan from_config(const nlohmann::json& cfg, const std::string& experiment_dir);
  /// Checks stage names and that every stage's inputs come from an earlier stage or `inputs`.
  void validate() const;
  std::uint64_t seed_for(const std::string& stage) const;
  /// Hash of the configuration the stage depends on, chained through its upstream stages.
  std::string config_hash(const std::string& stage) const;
  /// Upstream stage providing `artifact` ("model", "features", "targets", "ssl_model", "pseudo")
  /// to `stage`; empty when it comes from `inputs` or is not needed.
  std::string provider(const std::string& stage, const std::string& artifact) const;
};

struct RunOptions {
  bool force = false;
  std::vector<std::string> only;          // run just these stages; others must be complete
  std::vector<std::string> reuse_roots;   // other experiment dirs whose identical stages may be copied
  std::function<void(const std::string&)> log;
};

enum class StageStatus { ran, skipped_complete, skipped_condition, reused };
std::string to_string(StageStatus s);

struct StageOutcome {
  std::string stage;
  StageStatus status = StageStatus::ran;
  std::string config_hash;
  double seconds = 0.0;
};

struct RunResult {
  std::vector<StageOutcome> stages;
  std::optional<double> wer;  // from the evaluate report when present
};

/// Layout: <dir>/config.json, <dir>/corpus/, <dir>/stages/<name>/{outputs/, marker.json}, <dir>/reports/.
RunResult run_pipeline(const StagePlan& plan, const RunOptions& opt = {});

std::string stage_dir(const StagePlan& plan, const std::string& stage);
std::string stage_outputs(const StagePlan& plan, const std::string& stage);
/// Marker contents, or null when the stage has not completed.
nlohmann::json read_marker(const StagePlan& plan, const std::string& stage);

struct SweepCondition {
  std::optional<double> hours;  // nullopt: the full transcribed_cs manifest
  SubsetStrategy strategy = SubsetStrategy::random_utterance;
  std::string label() const;
};

struct SweepRow {
  SweepCondition condition;
  std::string dir;
  int speakers = 0;
  int utterances = 0;
  double selected_hours = 0.0;
  std::optional<double> wer;
  std::string error;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::string table_tsv;  // one row per condition with speaker counts
  std::string grid_tsv;   // hours x strategy WER grid
};

/// One pipeline per (hours, strategy) under <dir>/conditions/<label>. Identical stages are copied
/// between conditions instead of recomputed. Failures are recorded per row.
SweepResult sweep_supervision(const nlohmann::json& config, const std::vector<std::optional<double>>& hours,
                              const std::vector<SubsetStrategy>& strategies, const std::string& dir,
                              const RunOptions& opt = {});

std::string to_string(SubsetStrategy s);
SubsetStrategy parse_subset_strategy(const std::string& s);

/// Transcribed cs subset the data section selects, before the validation holdout.
Manifest select_transcribed_cs(const Manifest& transcribed_cs, const nlohmann::json& data, std::uint64_t seed);

}  // namespace lowsup
