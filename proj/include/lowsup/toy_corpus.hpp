#pragma once

#include "lowsup/corpus.hpp"
#include "lowsup/wav.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lowsup {

/// Synthetic corpus: each letter is a short chirp with its own centre frequency,
/// word boundaries are silence. "read" is clean at nominal speed; "cs" is noisy and
/// speed-perturbed and uses speakers disjoint from "read".
struct ToyCorpusSpec {
  std::vector<std::string> words = {"ka",  "lo",  "mi",  "ne",  "so",  "ti",  "kal", "mos",
                                    "nit", "sek", "lam", "tis", "ok",  "in",  "es",  "ami"};
  int min_words = 1;
  int max_words = 3;
  // Probability of following the word grammar (three preferred successors per word).
  double grammar_strength = 0.8;

  int read_utterances = 200;
  int transcribed_cs_utterances = 40;
  int untranscribed_cs_utterances = 200;
  int test_cs_utterances = 40;
  int read_speakers = 10;
  int transcribed_cs_speakers = 8;
  int untranscribed_cs_speakers = 10;
  int test_cs_speakers = 4;

  std::optional<double> read_snr_db;       // nullopt: no noise
  std::optional<double> cs_snr_db = 8.0;
  double cs_speed_min = 0.9;  // per utterance, changes tempo and pitch together
  double cs_speed_max = 1.1;
  double speaker_pitch_spread = 0.03;  // per-speaker pitch factor in 1 +- spread
  double speaker_rate_spread = 0.1;    // per-speaker tempo factor in 1 +- spread

  double letter_seconds = 0.08;
  double space_seconds = 0.08;
  double edge_seconds = 0.05;
  double base_hz = 300.0;
  double letter_ratio = 1.3;  // centre frequency ratio between consecutive letters
  int sample_rate = 16000;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::string> letters() const;  // sorted distinct letters of `words`
  nlohmann::json to_json() const;
  static ToyCorpusSpec from_json(const nlohmann::json& j);
};

struct ToyCorpus {
  Manifest read, transcribed_cs, untranscribed_cs, test_cs;
  std::string dir;
  // Manifest file names inside `dir`.
  static constexpr const char* kRead = "read.jsonl";
  static constexpr const char* kTranscribedCs = "transcribed_cs.jsonl";
  static constexpr const char* kUntranscribedCs = "untranscribed_cs.jsonl";
  static constexpr const char* kTestCs = "test_cs.jsonl";
  // utt_id -> text for every split, including the untranscribed one.
  static constexpr const char* kAnswers = "answers.jsonl";
  // Gold transcripts of the untranscribed split in hypothesis TSV format.
  static constexpr const char* kOracleHypotheses = "oracle_untranscribed_cs.tsv";
};

/// Renders one utterance. `pitch` scales every frequency, `tempo` every duration.
Audio render_toy_utterance(const ToyCorpusSpec& spec, const std::string& text, double pitch, double tempo,
                           std::optional<double> snr_db, std::uint64_t noise_seed);

/// Writes WAVs, manifests, the answer file and spec.json under out_dir. Deterministic in spec.
ToyCorpus make_toy_corpus(const ToyCorpusSpec& spec, const std::string& out_dir);

ToyCorpus load_toy_corpus(const std::string& dir);

/// Sealed answers: utt_id -> text.
std::map<std::string, std::string> load_answers(const std::string& path);

}  // namespace lowsup
