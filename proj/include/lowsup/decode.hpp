#pragma once

#include "lowsup/corpus.hpp"
#include "lowsup/lm.hpp"
#include "lowsup/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lowsup {

enum class DecodeMode { ctc_greedy, ctc_beam_lm, joint_attention };
std::string to_string(DecodeMode m);
DecodeMode parse_decode_mode(const std::string& s);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::joint_attention;
  int beam_size = 0;  // 0: 8 for joint_attention, 16 for ctc_beam_lm
  double lm_weight = 0.5;
  double ctc_weight_decode = 0.3;
  double length_penalty = 0.0;  // per word, ctc_beam_lm only
  int max_length = 0;           // joint_attention label limit; 0: encoder length
  int nbest = 1;

  int effective_beam() const;
  void validate() const;
};

/// All scores are natural-log; LM log10 values are converted.
struct Hypothesis {
  std::vector<int> labels;  // model vocabulary ids, no specials
  std::string text;
  double score_total = 0.0;
  double score_acoustic = 0.0;   // CTC: path or prefix log-probability
  double score_lm = 0.0;
  double score_attention = 0.0;  // decoder log-probability including eos
  int words = 0;
  double confidence = 0.0;       // min(1, exp(score_total / max(1, |labels|)))
  bool search_failed = false;    // beam kept no complete hypothesis
};

double hypothesis_confidence(double score_total, std::size_t labels);

/// Frame argmax, collapse repeats, drop blanks.
Hypothesis ctc_greedy(const Mat& log_probs, const Vocabulary& vocab);

/// Prefix beam search without lexicon or LM; candidates are every distinct prefix kept in the beam.
std::vector<Hypothesis> ctc_prefix_beam(const Mat& log_probs, const Vocabulary& vocab, int beam);

/// Prefix beam constrained to lexicon words joined by single spaces; the word LM is applied
/// at each word completion and at the end. total = acoustic + lm_weight * LM + length_penalty * words.
std::vector<Hypothesis> ctc_beam_lm(const Mat& log_probs, const Vocabulary& vocab, const Lexicon& lexicon,
                                    const NgramLm* word_lm, const DecodeConfig& cfg);

/// Label-synchronous beam over decoder outputs scored by
/// w_ctc * CTC prefix + (1 - w_ctc) * attention + lm_weight * char LM; ranked by total / (|labels| + 1).
std::vector<Hypothesis> joint_attention_decode(const AsrModel& model, const Mat& features, const DecodeConfig& cfg,
                                               const NgramLm* char_lm = nullptr);

/// CTC prefix probability (ln) of `prefix`, summed over all continuations.
double ctc_prefix_log_prob(const Mat& log_probs, const std::vector<int>& prefix, int blank = 0);

struct DecodeResources {
  const Lexicon* lexicon = nullptr;
  const NgramLm* word_lm = nullptr;
  const NgramLm* char_lm = nullptr;
};

/// Decodes normalized features with the configured mode; returns the best hypothesis.
Hypothesis decode_features(const AsrModel& model, const Mat& features, const DecodeConfig& cfg,
                           const DecodeResources& res);

struct HypothesisRow {
  std::string utt_id;
  std::string text;
  double confidence = 0.0;
  double score_total = 0.0;
};

struct DecodeError {
  std::string utt_id;
  std::string error_class;
  std::string message;
};

struct TranscribeResult {
  std::vector<HypothesisRow> rows;
  std::vector<DecodeError> errors;
};

/// One hypothesis per utterance; unreadable or undecodable utterances become error records.
TranscribeResult transcribe_manifest(const AsrModel& model, const Manifest& manifest, const DecodeConfig& cfg,
                                     const DecodeResources& res);

std::string hypotheses_tsv(const std::vector<HypothesisRow>& rows);
std::string errors_tsv(const std::vector<DecodeError>& errors);
/// Accepts an optional header line; any malformed line is an error naming it.
std::vector<HypothesisRow> parse_hypotheses_tsv(const std::string& text);

}  // namespace lowsup
