#pragma once

#include "lowsup/corpus.hpp"
#include "lowsup/decode.hpp"
#include "lowsup/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace lowsup {

enum class TranscriberKind { internal_ctc_lex_lm, internal_joint, external_command };
std::string to_string(TranscriberKind k);
TranscriberKind parse_transcriber_kind(const std::string& s);

struct Transcriber {
  TranscriberKind kind = TranscriberKind::internal_ctc_lex_lm;
  // Internal kinds.
  const AsrModel* model = nullptr;
  DecodeConfig decode;
  DecodeResources resources;
  // External kind: shell command with {manifest} and {out} placeholders. Without {out}
  // the hypothesis TSV is read from stdout.
  std::string command;
  std::string work_dir;  // scratch files for the external kind

  std::string description() const;
};

struct PseudoProvenance {
  std::string transcriber;
  std::string created;  // ISO-8601 UTC
  std::string config_hash;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t kept = 0;
  std::map<std::string, std::size_t> dropped;  // reason -> count
};

struct PseudoLabelSet {
  std::vector<HypothesisRow> entries;  // kept hypotheses, manifest order
  Manifest source;                     // audio of the pseudo-labelled utterances, without transcripts
  PseudoProvenance provenance;
  FilterReport report;

  std::map<std::string, std::string> texts() const;
};

/// Decodes every utterance of an untranscribed manifest. Per-utterance failures are dropped
/// and counted in the report by error class.
PseudoLabelSet pseudotranscribe(const Manifest& untranscribed, const Transcriber& transcriber,
                                const std::string& config_hash = "");

struct FilterPolicy {
  double min_confidence = 0.0;
  bool drop_empty = true;
  double max_char_per_second = 40.0;  // <= 0 disables the check

  void validate() const;
};

/// Drops entries that are empty, below the confidence floor, or implausibly fast.
PseudoLabelSet filter_pseudolabels(const PseudoLabelSet& set, const FilterPolicy& policy);

/// Hypothesis TSV at `path` plus a JSON sidecar at path + ".json" holding provenance,
/// the filter report and the source manifest.
void save_pseudolabels(const PseudoLabelSet& set, const std::string& path);
PseudoLabelSet load_pseudolabels(const std::string& path);

struct SstOptions {
  double gold_weight = 1.0;
  double pseudo_weight = 1.0;  // 0 trains on gold only
  std::string config_hash;
};

/// Joint-loss training on gold plus pseudo-labelled audio; pseudo items are tagged "pseudo".
/// Gold and pseudo utterance ids must be disjoint.
TrainResult train_sst(const AsrModel& start, const Manifest& gold, const PseudoLabelSet& pseudo,
                      const std::vector<Example>& valid, const Schedule& schedule, const SstOptions& opt,
                      FeatureCache& cache);

/// Short finetune on in-domain gold. An empty manifest skips training and returns the model unchanged.
struct FinalFinetuneResult {
  TrainResult train;
  bool skipped = false;
};
FinalFinetuneResult final_finetune(const AsrModel& model, const Manifest& in_domain_gold,
                                   const std::vector<Example>& valid, const Schedule& schedule,
                                   FeatureCache& cache, const std::string& config_hash = "");

void record_stage(AsrModel& model, const std::string& stage, const std::string& config_hash, std::uint64_t seed,
                  const std::string& parent_hash);

std::string utc_timestamp();

}  // namespace lowsup
