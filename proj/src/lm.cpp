#include "lowsup/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace lowsup {

namespace {
constexpr double kLogZero = -99.0;

double to_log10(double p) { return p > 0 ? std::log10(p) : kLogZero; }
}  // namespace

NgramLm::NgramLm(int order) : order_(order) {
  if (order < 1) throw ValidationError("n-gram order must be at least 1");
  tables_.resize(static_cast<std::size_t>(order));
}

int NgramLm::find(const std::string& s) const {
  auto it = index_.find(s);
  return it == index_.end() ? -1 : it->second;
}

int NgramLm::intern(const std::string& s) {
  auto it = index_.find(s);
  if (it != index_.end()) return it->second;
  int id = static_cast<int>(symbols_.size());
  symbols_.push_back(s);
  index_[s] = id;
  return id;
}

void NgramLm::set(const std::vector<int>& ngram, double log10_prob, double log10_backoff) {
  if (ngram.empty() || static_cast<int>(ngram.size()) > order_) throw ValidationError("bad n-gram length");
  tables_[ngram.size() - 1][ngram] = Entry{log10_prob, log10_backoff};
}

void NgramLm::set_backoff(const std::vector<int>& ngram, double log10_backoff) {
  if (ngram.empty() || static_cast<int>(ngram.size()) > order_) throw ValidationError("bad n-gram length");
  tables_[ngram.size() - 1].at(ngram).backoff = log10_backoff;
}

bool NgramLm::has(const std::vector<int>& ngram) const {
  if (ngram.empty() || static_cast<int>(ngram.size()) > order_) return false;
  return tables_[ngram.size() - 1].count(ngram) > 0;
}

double NgramLm::cond_log10(std::span<const int> history, int w) const {
  if (w < 0) {
    int unk = find(kUnk);
    if (unk < 0) return kOovLog10;
    w = unk;
  }
  std::size_t len = std::min<std::size_t>(history.size(), static_cast<std::size_t>(order_ - 1));
  double acc = 0.0;
  std::vector<int> key;
  for (;; --len) {
    key.assign(history.end() - static_cast<std::ptrdiff_t>(len), history.end());
    key.push_back(w);
    const auto& tab = tables_[len];
    auto it = tab.find(key);
    if (it != tab.end()) return acc + it->second.prob;
    if (len == 0) return acc + kLogZero;
    key.pop_back();
    auto ctx = tables_[len - 1].find(key);
    if (ctx != tables_[len - 1].end()) acc += ctx->second.backoff;
  }
}

LmScore NgramLm::score(const std::vector<std::string>& tokens) const {
  LmScore s;
  std::vector<int> hist;
  if (boundaries_) hist.push_back(bos());
  int unk = find(kUnk);
  for (const auto& t : tokens) {
    int id = find(t);
    if (id < 0 || (boundaries_ && id == bos())) {
      ++s.oov;
      id = unk;
    }
    s.log10_prob += cond_log10(hist, id);
    ++s.tokens;
    hist.push_back(id);
  }
  if (boundaries_) {
    s.log10_prob += cond_log10(hist, eos());
    ++s.tokens;
  }
  return s;
}

std::vector<int> NgramLm::predicted_symbols() const {
  std::vector<int> out;
  int b = boundaries_ ? bos() : -1;
  for (int i = 0; i < size(); ++i)
    if (i != b) out.push_back(i);
  return out;
}

double NgramLm::max_normalization_error() const {
  auto vocab = predicted_symbols();
  auto mass = [&](std::span<const int> h) {
    double total = 0.0;
    for (int w : vocab) {
      double lp = cond_log10(h, w);
      if (lp > kLogZero) total += std::pow(10.0, lp);
    }
    return total;
  };
  double worst = std::abs(mass({}) - 1.0);
  int eos_id = eos();
  for (int n = 1; n < order_; ++n) {
    for (const auto& [ngram, entry] : tables_[static_cast<std::size_t>(n - 1)]) {
      // A context ending in </s> or with zero probability is never reached.
      if (entry.prob <= kLogZero && !(boundaries_ && ngram.back() == bos())) continue;
      if (boundaries_ && ngram.back() == eos_id) continue;
      worst = std::max(worst, std::abs(mass(ngram) - 1.0));
    }
  }
  return worst;
}

std::string NgramLm::to_arpa() const {
  std::string out = "\\data\\\n";
  for (int n = 1; n <= order_; ++n) out += "ngram " + std::to_string(n) + "=" + std::to_string(count(n)) + "\n";
  char buf[64];
  for (int n = 1; n <= order_; ++n) {
    out += "\n\\" + std::to_string(n) + "-grams:\n";
    // Sort by symbol strings for a stable, readable file.
    std::vector<std::pair<std::string, const Entry*>> rows;
    for (const auto& [ngram, e] : tables_[static_cast<std::size_t>(n - 1)]) {
      std::string words;
      for (std::size_t i = 0; i < ngram.size(); ++i) words += (i ? " " : "") + symbols_[static_cast<std::size_t>(ngram[i])];
      rows.emplace_back(words, &e);
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [words, e] : rows) {
      std::snprintf(buf, sizeof buf, "%.17g", e->prob);
      out += buf;
      out += "\t" + words;
      if (n < order_) {
        std::snprintf(buf, sizeof buf, "%.17g", e->backoff);
        out += "\t";
        out += buf;
      }
      out += "\n";
    }
  }
  out += "\n\\end\\\n";
  return out;
}

NgramLm NgramLm::from_arpa(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::size_t> counts;
  int section = -1;  // 0: data, n: n-grams
  NgramLm lm;
  bool have_model = false;
  int lineno = 0;
  auto fail = [&](const std::string& msg) { throw ValidationError("ARPA line " + std::to_string(lineno) + ": " + msg); };
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t == "\\data\\") {
      section = 0;
      continue;
    }
    if (t == "\\end\\") break;
    if (t.front() == '\\') {
      int n = 0;
      if (std::sscanf(t.c_str(), "\\%d-grams:", &n) != 1 || n < 1) fail("bad section header");
      if (!have_model) {
        if (counts.empty()) fail("missing \\data\\ counts");
        lm = NgramLm(static_cast<int>(counts.size()));
        have_model = true;
      }
      if (n > lm.order_) fail("section beyond declared order");
      section = n;
      continue;
    }
    if (section == 0) {
      int n = 0;
      unsigned long c = 0;
      if (std::sscanf(t.c_str(), "ngram %d=%lu", &n, &c) != 2 || n != static_cast<int>(counts.size()) + 1)
        fail("bad ngram count");
      counts.push_back(c);
      continue;
    }
    if (section < 1) fail("content outside a section");
    auto f = split_ws(t);
    const auto n = static_cast<std::size_t>(section);
    if (f.size() != n + 1 && f.size() != n + 2) fail("expected " + std::to_string(n) + " symbols");
    double prob = 0.0, bow = 0.0;
    try {
      prob = std::stod(f[0]);
      if (f.size() == n + 2) bow = std::stod(f.back());
    } catch (const std::exception&) {
      fail("bad number");
    }
    std::vector<int> ids;
    for (std::size_t i = 1; i <= n; ++i) ids.push_back(lm.intern(f[i]));
    lm.set(ids, prob, bow);
  }
  if (!have_model) throw ValidationError("ARPA text has no n-gram sections");
  for (int n = 1; n <= lm.order_; ++n)
    if (lm.count(n) != counts[static_cast<std::size_t>(n - 1)])
      throw ValidationError("ARPA " + std::to_string(n) + "-gram count does not match the header");
  lm.boundaries_ = lm.find(kBos) >= 0;
  return lm;
}

NgramLm train_ngram(const std::vector<std::vector<std::string>>& sentences, const NgramOptions& opt) {
  if (opt.order < 1) throw ValidationError("n-gram order must be at least 1");
  bool any = false;
  for (const auto& s : sentences) any = any || !s.empty();
  if (!any && !(opt.sentence_boundaries && !sentences.empty())) throw ValidationError("empty LM training corpus");
  NgramLm lm(opt.order);
  lm.set_sentence_boundaries(opt.sentence_boundaries);
  const int order = opt.order;
  int bos = -1, eos = -1;
  if (opt.sentence_boundaries) {
    bos = lm.intern(NgramLm::kBos);
    eos = lm.intern(NgramLm::kEos);
  }
  // counts[n-1][ngram]
  std::vector<std::map<std::vector<int>, double>> counts(static_cast<std::size_t>(order));
  std::set<std::string> seen_sym;
  for (const auto& s : sentences)
    for (const auto& t : s) seen_sym.insert(t);
  for (const auto& t : seen_sym) {
    if (t == NgramLm::kBos || t == NgramLm::kEos) throw ValidationError("reserved symbol " + t + " in LM corpus");
    lm.intern(t);
  }
  for (const auto& t : opt.vocabulary)
    if (t != NgramLm::kBos && t != NgramLm::kEos) lm.intern(t);

  for (const auto& s : sentences) {
    std::vector<int> seq;
    if (bos >= 0) seq.push_back(bos);
    for (const auto& t : s) seq.push_back(lm.find(t));
    if (eos >= 0) seq.push_back(eos);
    std::size_t first = bos >= 0 ? 1 : 0;
    for (std::size_t i = first; i < seq.size(); ++i)
      for (int n = 1; n <= order && static_cast<std::size_t>(n) <= i + 1; ++n)
        counts[static_cast<std::size_t>(n - 1)][std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(i + 1 - n),
                                                                 seq.begin() + static_cast<std::ptrdiff_t>(i + 1))] += 1.0;
  }

  std::vector<int> vocab;
  for (int i = 0; i < lm.size(); ++i)
    if (i != bos) vocab.push_back(i);
  const double v = static_cast<double>(vocab.size());
  const bool wb = opt.smoothing == Smoothing::witten_bell;

  // Unigrams.
  double total = 0.0, types = 0.0;
  for (const auto& [k, c] : counts[0]) {
    total += c;
    types += 1.0;
  }
  for (int w : vocab) {
    auto it = counts[0].find({w});
    double c = it == counts[0].end() ? 0.0 : it->second;
    double p = wb ? (c + types / v) / (total + types) : c / total;
    lm.set({w}, to_log10(p), 0.0);
  }
  if (bos >= 0) lm.set({bos}, kLogZero, 0.0);

  // Higher orders, each interpolated with the already-built lower order.
  for (int n = 2; n <= order; ++n) {
    std::map<std::vector<int>, std::pair<double, double>> ctx;  // context -> (count, distinct followers)
    for (const auto& [ng, c] : counts[static_cast<std::size_t>(n - 1)]) {
      auto& e = ctx[std::vector<int>(ng.begin(), ng.end() - 1)];
      e.first += c;
      e.second += 1.0;
    }
    std::vector<std::pair<std::vector<int>, double>> pending;
    for (const auto& [ng, c] : counts[static_cast<std::size_t>(n - 1)]) {
      std::vector<int> h(ng.begin(), ng.end() - 1);
      const auto& [ch, th] = ctx[h];
      double p;
      if (wb) {
        double lower = std::pow(10.0, lm.cond_log10(std::span<const int>(h).subspan(1), ng.back()));
        p = (c + th * lower) / (ch + th);
      } else {
        p = c / ch;
      }
      pending.emplace_back(ng, to_log10(p));
    }
    for (const auto& [h, e] : ctx) {
      double bow = wb ? e.second / (e.first + e.second) : 0.0;
      if (!lm.has(h)) throw StageError("internal: context without a lower-order entry");
      lm.set_backoff(h, to_log10(bow));
    }
    for (const auto& [ng, lp] : pending) lm.set(ng, lp, 0.0);
  }
  return lm;
}

void write_arpa(const NgramLm& lm, const std::string& path) { write_file(path, lm.to_arpa()); }

NgramLm load_arpa(const std::string& path) { return NgramLm::from_arpa(read_file(path)); }

std::vector<std::string> char_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto& c : utf8_chars(text)) out.push_back(c == " " ? kSpaceToken : c);
  return out;
}

std::vector<std::string> word_tokens(std::string_view text) { return split_ws(std::string(text)); }

Lexicon parse_lexicon(const std::string& text, const std::vector<std::string>* charset) {
  Lexicon lex;
  std::set<std::string> allowed;
  if (charset) allowed.insert(charset->begin(), charset->end());
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto tab = t.find('\t');
    if (tab == std::string::npos) throw ValidationError("lexicon line " + std::to_string(n) + ": expected word<TAB>characters");
    std::string word = trim(t.substr(0, tab));
    auto chars = split_ws(t.substr(tab + 1));
    if (word.empty()) throw ValidationError("lexicon line " + std::to_string(n) + ": empty word");
    if (chars.empty()) throw ValidationError("lexicon line " + std::to_string(n) + ": empty pronunciation for " + word);
    for (const auto& c : chars)
      if (charset && !allowed.count(c))
        throw ValidationError("lexicon line " + std::to_string(n) + ": character '" + c + "' not in vocabulary");
    auto it = lex.entries.find(word);
    if (it != lex.entries.end() && it->second != chars)
      throw ValidationError("lexicon line " + std::to_string(n) + ": conflicting entries for " + word);
    lex.entries[word] = chars;
  }
  return lex;
}

Lexicon load_lexicon(const std::string& path, const std::vector<std::string>* charset) {
  return parse_lexicon(read_file(path), charset);
}

std::string serialize_lexicon(const Lexicon& lex) {
  std::string out;
  for (const auto& [w, chars] : lex.entries) out += w + "\t" + join(chars, " ") + "\n";
  return out;
}

void write_lexicon(const Lexicon& lex, const std::string& path) { write_file(path, serialize_lexicon(lex)); }

Lexicon lexicon_from_texts(const std::vector<std::string>& texts) {
  Lexicon lex;
  for (const auto& t : texts)
    for (const auto& w : split_ws(t)) lex.entries[w] = utf8_chars(w);
  return lex;
}

}  // namespace lowsup
