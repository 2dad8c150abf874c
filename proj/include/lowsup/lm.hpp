#pragma once

#include "lowsup/common.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lowsup {

enum class Smoothing { witten_bell, none };

struct NgramOptions {
  int order = 3;
  Smoothing smoothing = Smoothing::witten_bell;
  bool sentence_boundaries = true;  // wrap each sentence in <s> ... </s>
  std::vector<std::string> vocabulary;  // extra symbols that receive smoothed mass even if unseen
};

struct LmScore {
  double log10_prob = 0.0;
  int tokens = 0;  // predicted symbols, including </s>
  int oov = 0;
};

/// Backoff n-gram model with ARPA semantics; probabilities are log10.
class NgramLm {
 public:
  static constexpr const char* kBos = "<s>";
  static constexpr const char* kEos = "</s>";
  static constexpr const char* kUnk = "<unk>";
  /// log10 used for symbols outside the vocabulary when the model has no <unk>.
  static constexpr double kOovLog10 = -10.0;

  NgramLm() = default;
  explicit NgramLm(int order);

  int order() const { return order_; }
  bool sentence_boundaries() const { return boundaries_; }
  void set_sentence_boundaries(bool b) { boundaries_ = b; }

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  /// Symbol id, or -1 when unknown.
  int find(const std::string& s) const;
  int intern(const std::string& s);
  int bos() const { return find(kBos); }
  int eos() const { return find(kEos); }

  /// Sets an n-gram entry (ids, length 1..order).
  void set(const std::vector<int>& ngram, double log10_prob, double log10_backoff = 0.0);
  void set_backoff(const std::vector<int>& ngram, double log10_backoff);
  bool has(const std::vector<int>& ngram) const;
  std::size_t count(int n) const { return tables_.at(static_cast<std::size_t>(n - 1)).size(); }

  /// log10 p(w | history) with backoff; only the last order-1 history ids matter.
  double cond_log10(std::span<const int> history, int w) const;
  /// Sentence score: <s> and </s> added when the model uses boundaries.
  LmScore score(const std::vector<std::string>& tokens) const;

  /// Largest |sum_w p(w | h) - 1| over every stored context h (and the empty context).
  double max_normalization_error() const;

  std::string to_arpa() const;
  static NgramLm from_arpa(const std::string& text);

 private:
  struct Entry {
    double prob = 0.0;
    double backoff = 0.0;
  };
  std::vector<int> predicted_symbols() const;

  int order_ = 0;
  bool boundaries_ = true;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::map<std::vector<int>, Entry>> tables_;
};

/// Each sentence is a whitespace-separated token list.
NgramLm train_ngram(const std::vector<std::vector<std::string>>& sentences, const NgramOptions& opt);

void write_arpa(const NgramLm& lm, const std::string& path);
NgramLm load_arpa(const std::string& path);

/// Character tokens of a transcript; spaces become kSpaceToken.
inline constexpr const char* kSpaceToken = "<space>";
std::vector<std::string> char_tokens(std::string_view text);
std::vector<std::string> word_tokens(std::string_view text);

struct Lexicon {
  std::map<std::string, std::vector<std::string>> entries;  // word -> characters
  std::string word_boundary = " ";

  bool empty() const { return entries.empty(); }
};

/// Lines "word<TAB>c h a r s"; '#' starts a comment. `charset`, when given, restricts the characters.
Lexicon parse_lexicon(const std::string& text, const std::vector<std::string>* charset = nullptr);
Lexicon load_lexicon(const std::string& path, const std::vector<std::string>* charset = nullptr);
std::string serialize_lexicon(const Lexicon& lex);
void write_lexicon(const Lexicon& lex, const std::string& path);
/// Every whitespace-separated word of the transcripts, spelled by its characters.
Lexicon lexicon_from_texts(const std::vector<std::string>& texts);

}  // namespace lowsup
