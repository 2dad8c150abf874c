#pragma once

#include "lowsup/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace lowsup {

struct EditCounts {
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;
  long correct = 0;
  long ref_tokens = 0;

  long errors() const { return substitutions + deletions + insertions; }
  EditCounts& operator+=(const EditCounts& o);
};

enum class EditOp { correct, substitution, insertion, deletion };

struct AlignedPair {
  EditOp op;
  std::string ref;  // empty for insertions
  std::string hyp;  // empty for deletions
};

/// Levenshtein alignment with unit costs. Among optimal paths the backtrace
/// prefers substitution, then insertion, then deletion.
std::vector<AlignedPair> align_tokens(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);
EditCounts count_edits(const std::vector<AlignedPair>& alignment);
long edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct UtteranceScore {
  std::string utt_id;
  EditCounts counts;
  std::vector<AlignedPair> alignment;
};

struct ScoreReport {
  std::string unit = "word";  // "word" or "char"
  double error_rate = 0.0;    // percent, pooled counts
  EditCounts totals;
  std::vector<UtteranceScore> utterances;  // sorted by utt_id
  std::map<std::string, std::string> metadata;
};

std::vector<std::string> char_units(std::string_view text, bool include_spaces = true);

/// Keys of refs and hyps must match; refs must be non-empty.
ScoreReport word_error_rate(const std::map<std::string, std::string>& refs,
                            const std::map<std::string, std::string>& hyps);
ScoreReport character_error_rate(const std::map<std::string, std::string>& refs,
                                 const std::map<std::string, std::string>& hyps, bool include_spaces = true);

std::string report_json(const ScoreReport& wer, const ScoreReport* cer = nullptr);
/// Per-utterance REF/HYP rows; gaps shown as ***.
std::string alignment_text(const ScoreReport& r);

struct LabeledReport {
  std::string label;
  ScoreReport report;
};

/// TSV: condition, error rate, delta vs baseline, then any metadata columns.
std::string compare_conditions(const std::vector<LabeledReport>& reports, const std::string& baseline);

/// Two-way TSV grid, rows x columns, empty cells for missing combinations.
std::string render_grid(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::map<std::pair<std::string, std::string>, double>& cells);

}  // namespace lowsup
