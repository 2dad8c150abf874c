#include "lowsup/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <limits>
#include <set>

namespace lowsup {

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  correct += o.correct;
  ref_tokens += o.ref_tokens;
  return *this;
}

namespace {

std::vector<std::vector<long>> dp_table(const std::vector<std::string>& r, const std::vector<std::string>& h) {
  std::vector<std::vector<long>> d(r.size() + 1, std::vector<long>(h.size() + 1, 0));
  for (std::size_t i = 0; i <= r.size(); ++i) d[i][0] = static_cast<long>(i);
  for (std::size_t j = 0; j <= h.size(); ++j) d[0][j] = static_cast<long>(j);
  for (std::size_t i = 1; i <= r.size(); ++i)
    for (std::size_t j = 1; j <= h.size(); ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1), d[i][j - 1] + 1, d[i - 1][j] + 1});
  return d;
}

}  // namespace

std::vector<AlignedPair> align_tokens(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  auto d = dp_table(ref, hyp);
  std::vector<AlignedPair> out;
  std::size_t i = ref.size(), j = hyp.size();
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      out.push_back({ref[i - 1] == hyp[j - 1] ? EditOp::correct : EditOp::substitution, ref[i - 1], hyp[j - 1]});
      --i;
      --j;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      out.push_back({EditOp::insertion, "", hyp[j - 1]});
      --j;
    } else {
      out.push_back({EditOp::deletion, ref[i - 1], ""});
      --i;
    }
  }
  std::reverse(out.begin(), out.end());
  return out;
}

EditCounts count_edits(const std::vector<AlignedPair>& alignment) {
  EditCounts c;
  for (const auto& p : alignment) {
    switch (p.op) {
      case EditOp::correct: ++c.correct; ++c.ref_tokens; break;
      case EditOp::substitution: ++c.substitutions; ++c.ref_tokens; break;
      case EditOp::deletion: ++c.deletions; ++c.ref_tokens; break;
      case EditOp::insertion: ++c.insertions; break;
    }
  }
  return c;
}

long edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return dp_table(a, b)[a.size()][b.size()];
}

std::vector<std::string> char_units(std::string_view text, bool include_spaces) {
  std::vector<std::string> out;
  // Runs of whitespace count as one space; leading and trailing space is dropped.
  auto words = split_ws(text);
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w && include_spaces) out.push_back(" ");
    for (auto& c : utf8_chars(words[w])) out.push_back(c);
  }
  return out;
}

namespace {

template <typename Tok>
ScoreReport score(const std::map<std::string, std::string>& refs, const std::map<std::string, std::string>& hyps,
                  const std::string& unit, Tok tok) {
  if (refs.empty()) throw ValidationError("empty reference set");
  for (const auto& [k, v] : refs)
    if (!hyps.count(k)) throw ValidationError("hypothesis missing for " + k);
  for (const auto& [k, v] : hyps)
    if (!refs.count(k)) throw ValidationError("hypothesis " + k + " has no reference");
  ScoreReport r;
  r.unit = unit;
  for (const auto& [k, ref] : refs) {
    UtteranceScore u;
    u.utt_id = k;
    u.alignment = align_tokens(tok(ref), tok(hyps.at(k)));
    u.counts = count_edits(u.alignment);
    r.totals += u.counts;
    r.utterances.push_back(std::move(u));
  }
  if (r.totals.ref_tokens > 0)
    r.error_rate = 100.0 * static_cast<double>(r.totals.errors()) / static_cast<double>(r.totals.ref_tokens);
  else
    r.error_rate = r.totals.errors() ? std::numeric_limits<double>::infinity() : 0.0;
  return r;
}

}  // namespace

ScoreReport word_error_rate(const std::map<std::string, std::string>& refs,
                            const std::map<std::string, std::string>& hyps) {
  return score(refs, hyps, "word", [](const std::string& s) { return split_ws(s); });
}

ScoreReport character_error_rate(const std::map<std::string, std::string>& refs,
                                 const std::map<std::string, std::string>& hyps, bool include_spaces) {
  return score(refs, hyps, "char", [&](const std::string& s) { return char_units(s, include_spaces); });
}

namespace {

nlohmann::ordered_json counts_json(const ScoreReport& r) {
  return {{"error_rate", r.error_rate},
          {"substitutions", r.totals.substitutions},
          {"deletions", r.totals.deletions},
          {"insertions", r.totals.insertions},
          {"correct", r.totals.correct},
          {"ref_tokens", r.totals.ref_tokens}};
}

}  // namespace

std::string report_json(const ScoreReport& wer, const ScoreReport* cer) {
  nlohmann::ordered_json j;
  j["utterances"] = wer.utterances.size();
  j["wer"] = counts_json(wer);
  if (cer) j["cer"] = counts_json(*cer);
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : wer.metadata) meta[k] = v;
  j["metadata"] = meta;
  return j.dump(2) + "\n";
}

std::string alignment_text(const ScoreReport& r) {
  std::string out;
  for (const auto& u : r.utterances) {
    std::string ref_row = "REF:", hyp_row = "HYP:", ops = "EVAL:";
    for (const auto& p : u.alignment) {
      std::string a = p.ref.empty() ? "***" : p.ref, b = p.hyp.empty() ? "***" : p.hyp;
      if (p.op == EditOp::correct) {
        a = p.ref;
        b = p.hyp;
      }
      std::size_t w = std::max(utf8_chars(a).size(), utf8_chars(b).size());
      auto pad = [&](std::string s) {
        std::size_t n = utf8_chars(s).size();
        return s + std::string(w - n, ' ');
      };
      const char* tag = p.op == EditOp::correct ? "" : p.op == EditOp::substitution ? "S" : p.op == EditOp::insertion ? "I" : "D";
      ref_row += " " + pad(a);
      hyp_row += " " + pad(b);
      ops += " " + pad(tag);
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "id: %s  S=%ld D=%ld I=%ld N=%ld\n", u.utt_id.c_str(), u.counts.substitutions,
                  u.counts.deletions, u.counts.insertions, u.counts.ref_tokens);
    out += buf;
    out += trim(ref_row) + "\n" + trim(hyp_row) + "\n" + trim(ops) + "\n\n";
  }
  return out;
}

std::string compare_conditions(const std::vector<LabeledReport>& reports, const std::string& baseline) {
  if (reports.size() < 2) throw ValidationError("comparison needs at least two reports");
  const ScoreReport* base = nullptr;
  for (const auto& r : reports)
    if (r.label == baseline) base = &r.report;
  if (!base) throw ValidationError("baseline condition '" + baseline + "' not among the reports");
  std::set<std::string> keys;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.report.metadata) keys.insert(k);
  std::string out = "condition\terror_rate\tdelta_vs_" + baseline;
  for (const auto& k : keys) out += "\t" + k;
  out += "\n";
  char buf[64];
  for (const auto& r : reports) {
    out += r.label;
    std::snprintf(buf, sizeof buf, "\t%.2f\t%+.2f", r.report.error_rate, r.report.error_rate - base->error_rate);
    out += buf;
    for (const auto& k : keys) {
      auto it = r.report.metadata.find(k);
      out += "\t" + (it == r.report.metadata.end() ? std::string() : it->second);
    }
    out += "\n";
  }
  return out;
}

std::string render_grid(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                        const std::map<std::pair<std::string, std::string>, double>& cells) {
  std::string out = "condition";
  for (const auto& c : cols) out += "\t" + c;
  out += "\n";
  char buf[32];
  for (const auto& r : rows) {
    out += r;
    for (const auto& c : cols) {
      auto it = cells.find({r, c});
      out += "\t";
      if (it != cells.end()) {
        std::snprintf(buf, sizeof buf, "%.1f", it->second);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace lowsup
